//! GRPO/DAPO training of tabular policies with exact gradients.

pub mod advantage;
pub mod lemma;
pub mod objective;
pub mod train;

pub use advantage::{
    correct_count, dynamic_sampling_filter, group_advantage, ppl_weights, reweight_advantage, reweight_factor, Reweight,
    StdKind,
};
pub use lemma::{lemma1_grad_norm, lemma1_norm, verify_lemma1_fd, verify_log_softmax_grad_fd, Lemma1Check};
pub use objective::{objective_fd_check, objective_fd_suite, policy_objective_grad, FdSuiteReport, Aggregation, GradRecord, Objective, ObjectiveConfig, ObjectiveOutput};
pub use train::{rollout, train, CurveRow, TrainConfig, TrainOutput};

use crate::policy::TokenId;
use crate::task::TaskInstance;

/// One prompt's sampled responses. Old log-probabilities are taken from the
/// rollout-time policy and never recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub instance: TaskInstance,
    pub responses: Vec<Vec<TokenId>>,
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub old_token_probs: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

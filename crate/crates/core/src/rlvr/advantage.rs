use serde::{Deserialize, Serialize};

use super::RolloutGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

pub const DEGENERATE_STD: f64 = 1e-8;

/// `(R_i - mean) / std`. `None` when the group's spread is below
/// [`DEGENERATE_STD`]; such groups carry no signal and must be dropped.
pub fn group_advantage(rewards: &[f64], std_kind: StdKind) -> Option<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return None;
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match std_kind {
        StdKind::Population => g as f64,
        StdKind::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    if std < DEGENERATE_STD {
        return None;
    }
    Some(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn correct_count(rewards: &[f64]) -> usize {
    rewards.iter().filter(|&&r| r >= 0.5).count()
}

/// Keeps groups whose correct count lies strictly between 0 and G.
pub fn dynamic_sampling_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups
        .into_iter()
        .filter(|g| {
            let c = correct_count(&g.rewards);
            c > 0 && c < g.rewards.len()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweight {
    #[default]
    None,
    Ours,
    Ppl,
    Dominate,
}

impl Reweight {
    pub fn default_alpha(self) -> f64 {
        match self {
            Reweight::None => 0.0,
            Reweight::Ours => 0.2,
            Reweight::Ppl => 0.01,
            Reweight::Dominate => 0.1,
        }
    }
}

/// Multiplier on the advantage of one token. `ppl_weight` is the response's
/// in-group normalized log-perplexity, used only by [`Reweight::Ppl`].
pub fn reweight_factor(kind: Reweight, alpha: f64, old_prob: f64, ppl_weight: f64) -> f64 {
    match kind {
        Reweight::None => 1.0,
        Reweight::Ours => 1.0 + alpha * (1.0 - old_prob),
        Reweight::Ppl => 1.0 - alpha * ppl_weight,
        Reweight::Dominate => alpha * old_prob + 1.0 - alpha,
    }
}

pub fn reweight_advantage(adv: f64, old_prob: f64, ppl_weight: f64, kind: Reweight, alpha: f64) -> f64 {
    reweight_factor(kind, alpha, old_prob, ppl_weight) * adv
}

/// Mean negative log-probability of each response, min-max normalized within
/// the group. A group of equal perplexities maps to all zeros.
pub fn ppl_weights(old_logprobs: &[Vec<f64>]) -> Vec<f64> {
    let nll: Vec<f64> = old_logprobs
        .iter()
        .map(|lp| -lp.iter().sum::<f64>() / lp.len().max(1) as f64)
        .collect();
    let lo = nll.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = nll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 0.0) {
        return vec![0.0; nll.len()];
    }
    nll.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

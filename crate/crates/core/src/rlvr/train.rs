use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::{dynamic_sampling_filter, group_advantage, Reweight, StdKind};
use super::objective::{policy_objective_grad, Aggregation, GradRecord, Objective, ObjectiveConfig};
use super::RolloutGroup;
use crate::error::{LabError, Result};
use crate::metrics::entropy;
use crate::policy::{sample_with_uniform, TabularPolicy, EOS};
use crate::seed;
use crate::task::{verify_and_reward, Alphabet, RewardSpec, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub group_size: usize,
    /// 32 prompts per step stands in for 512.
    pub prompts_per_step: usize,
    /// 4 updates per step stands in for 16.
    pub minibatches_per_step: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub eps_low: f64,
    /// Defaults to 0.28, or 0.24 under the dominate preset.
    pub eps_high: Option<f64>,
    pub beta_kl: f64,
    pub objective: Objective,
    /// Defaults to response_mean for GRPO and token_level for DAPO.
    pub aggregation: Option<Aggregation>,
    pub reweight: Reweight,
    /// Defaults to the reweight preset: ours 0.2, ppl 0.01, dominate 0.1.
    pub alpha: Option<f64>,
    pub rollout_top_p: f64,
    pub max_len: usize,
    pub dynamic_sampling: bool,
    pub std: StdKind,
    pub reward: RewardSpec,
    pub record_tokens: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 40,
            group_size: 8,
            prompts_per_step: 32,
            minibatches_per_step: 4,
            learning_rate: 2.0,
            warmup_steps: 0,
            eps_low: 0.2,
            eps_high: None,
            beta_kl: 0.0,
            objective: Objective::Dapo,
            aggregation: None,
            reweight: Reweight::None,
            alpha: None,
            rollout_top_p: 1.0,
            max_len: 6,
            dynamic_sampling: true,
            std: StdKind::Population,
            reward: RewardSpec::default(),
            record_tokens: false,
        }
    }
}

impl TrainConfig {
    /// Fills every preset-dependent option.
    pub fn resolved(&self) -> TrainConfig {
        let mut c = *self;
        c.eps_high = Some(self.eps_high.unwrap_or(if self.reweight == Reweight::Dominate { 0.24 } else { 0.28 }));
        c.alpha = Some(self.alpha.unwrap_or(self.reweight.default_alpha()));
        c.aggregation = Some(self.aggregation.unwrap_or(self.objective.default_aggregation()));
        c
    }

    /// Problems as `(field, message)`.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let c = self.resolved();
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &'static str, msg: &str| {
            if !ok {
                out.push((field, msg.to_string()));
            }
        };
        check(c.steps >= 1, "steps", "must be at least 1");
        check(c.group_size >= 2, "group_size", "must be at least 2");
        check(c.prompts_per_step >= 1, "prompts_per_step", "must be at least 1");
        check(c.minibatches_per_step >= 1, "minibatches_per_step", "must be at least 1");
        check(c.learning_rate.is_finite() && c.learning_rate >= 0.0, "learning_rate", "must be finite and >= 0");
        check(c.eps_low > 0.0 && c.eps_low < 1.0, "eps_low", "must lie in (0, 1)");
        check(c.eps_high.unwrap() > 0.0, "eps_high", "must be positive");
        check(c.beta_kl >= 0.0, "beta_kl", "must be >= 0");
        check(c.alpha.unwrap() >= 0.0, "alpha", "must be >= 0");
        check(c.rollout_top_p > 0.0 && c.rollout_top_p <= 1.0, "rollout_top_p", "must lie in (0, 1]");
        check(c.max_len >= 1, "max_len", "must be at least 1");
        out
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        let c = self.resolved();
        ObjectiveConfig {
            objective: c.objective,
            aggregation: c.aggregation.unwrap(),
            eps_low: c.eps_low,
            eps_high: c.eps_high.unwrap(),
            beta_kl: c.beta_kl,
            reweight: c.reweight,
            alpha: c.alpha.unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub dropped_groups: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: TabularPolicy,
    /// One row per step that kept at least one group.
    pub curve: Vec<CurveRow>,
    pub skipped_steps: usize,
    /// Per-token records of each kept step, when `record_tokens` is set.
    pub records: Vec<Vec<GradRecord>>,
}

struct RolloutStats {
    entropy_sum: f64,
    tokens: usize,
}

fn rollout_one(
    policy: &TabularPolicy,
    alpha: &Alphabet,
    task: &TaskInstance,
    cfg: &TrainConfig,
    seed_value: u64,
) -> (RolloutGroup, RolloutStats) {
    let mut rng = seed::stream(seed_value);
    let mut group = RolloutGroup {
        instance: task.clone(),
        responses: Vec::with_capacity(cfg.group_size),
        rewards: Vec::with_capacity(cfg.group_size),
        old_logprobs: Vec::with_capacity(cfg.group_size),
        old_token_probs: Vec::with_capacity(cfg.group_size),
        advantages: vec![0.0; cfg.group_size],
    };
    let mut stats = RolloutStats { entropy_sum: 0.0, tokens: 0 };
    for _ in 0..cfg.group_size {
        let mut history = task.prompt.clone();
        let (mut resp, mut lps, mut ps) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.max_len {
            let dist = policy.dist_after(&history, 1.0);
            let tok = sample_with_uniform(&dist, cfg.rollout_top_p, rng.gen());
            stats.entropy_sum += entropy(&dist);
            stats.tokens += 1;
            resp.push(tok);
            lps.push(dist.log_probs[tok]);
            ps.push(dist.probs[tok]);
            history.push(tok);
            if tok == EOS {
                break;
            }
        }
        group.rewards.push(verify_and_reward(alpha, task, &resp, &cfg.reward));
        group.responses.push(resp);
        group.old_logprobs.push(lps);
        group.old_token_probs.push(ps);
    }
    (group, stats)
}

/// `group_size` samples per task at temperature 1 with `rollout_top_p`.
pub fn rollout(policy: &TabularPolicy, alpha: &Alphabet, tasks: &[TaskInstance], cfg: &TrainConfig, seed_value: u64) -> Vec<RolloutGroup> {
    rollout_with_stats(policy, alpha, tasks, cfg, seed_value).0
}

fn rollout_with_stats(
    policy: &TabularPolicy,
    alpha: &Alphabet,
    tasks: &[TaskInstance],
    cfg: &TrainConfig,
    seed_value: u64,
) -> (Vec<RolloutGroup>, RolloutStats) {
    let results: Vec<(RolloutGroup, RolloutStats)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| rollout_one(policy, alpha, t, cfg, seed::derive(seed_value, "task", i as u64)))
        .collect();
    let mut total = RolloutStats { entropy_sum: 0.0, tokens: 0 };
    let groups = results
        .into_iter()
        .map(|(g, s)| {
            total.entropy_sum += s.entropy_sum;
            total.tokens += s.tokens;
            g
        })
        .collect();
    (groups, total)
}

/// Runs `cfg.steps` rollout/update rounds from `base`, which also anchors the
/// GRPO KL term.
pub fn train(base: &TabularPolicy, alpha: &Alphabet, tasks: &[TaskInstance], cfg: &TrainConfig, seed_value: u64) -> Result<TrainOutput> {
    if let Some((field, msg)) = cfg.problems().into_iter().next() {
        return Err(LabError::config(format!("train.{field}"), msg));
    }
    if tasks.is_empty() {
        return Err(LabError::Input("no training tasks".into()));
    }
    let ocfg = cfg.objective_config();
    let mut policy = base.clone();
    let mut curve = Vec::new();
    let mut records = Vec::new();
    let mut skipped_steps = 0;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    for step in 0..cfg.steps {
        let step_seed = seed::derive(seed_value, "step", step as u64);
        order.shuffle(&mut seed::stream(seed::derive(step_seed, "select", 0)));
        let batch: Vec<TaskInstance> = order.iter().take(cfg.prompts_per_step).map(|&i| tasks[i].clone()).collect();
        let (groups, stats) = rollout_with_stats(&policy, alpha, &batch, cfg, seed::derive(step_seed, "rollout", 0));

        let responses = groups.len() * cfg.group_size;
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / responses as f64;
        let mean_len = groups.iter().flat_map(|g| &g.responses).map(Vec::len).sum::<usize>() as f64 / responses as f64;
        let entropy = stats.entropy_sum / stats.tokens.max(1) as f64;

        let total_groups = groups.len();
        let candidates = if cfg.dynamic_sampling { dynamic_sampling_filter(groups) } else { groups };
        let kept: Vec<RolloutGroup> = candidates
            .into_iter()
            .filter_map(|mut g| {
                g.advantages = group_advantage(&g.rewards, cfg.std)?;
                Some(g)
            })
            .collect();
        if kept.is_empty() {
            skipped_steps += 1;
            continue;
        }

        let ramp = if cfg.warmup_steps > 0 { ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0) } else { 1.0 };
        let lr = cfg.learning_rate * ramp;
        let chunk = kept.len().div_ceil(cfg.minibatches_per_step.min(kept.len()));
        let (mut tokens, mut clipped) = (0, 0);
        let mut step_records = Vec::new();
        for mb in kept.chunks(chunk) {
            let out = policy_objective_grad(&policy, Some(base), mb, &ocfg, cfg.record_tokens);
            tokens += out.tokens;
            clipped += out.clipped;
            step_records.extend(out.records);
            policy.apply_gradient(&out.grad, lr);
        }
        if cfg.record_tokens {
            records.push(step_records);
        }
        curve.push(CurveRow {
            step,
            mean_reward,
            mean_len,
            entropy,
            clip_frac: clipped as f64 / tokens.max(1) as f64,
            dropped_groups: total_groups - kept.len(),
        });
    }
    if curve.is_empty() {
        return Err(LabError::Degenerate { steps: skipped_steps });
    }
    Ok(TrainOutput {
        policy,
        curve,
        skipped_steps,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{mle_pretrain, Vocab};
    use crate::task::{build_pretrain_corpus, generate_tasks, NoiseModel, Op, TaskSpec};

    fn setup() -> (Alphabet, TabularPolicy, Vec<TaskInstance>) {
        let vocab = Vocab::arithmetic(10);
        let alpha = Alphabet::new(&vocab, 10).unwrap();
        let spec = TaskSpec { operands: 2, ops: vec![Op::Add, Op::Mul], digit_range: (0, 9) };
        let tasks = generate_tasks(&alpha, &spec, 1, 60).unwrap();
        let corpus = build_pretrain_corpus(&alpha, &tasks, 8, 0.4, NoiseModel::OperatorSwap, 2).unwrap();
        let base = mle_pretrain(&vocab, &corpus.lines, 4, 0.05).unwrap();
        (alpha, base, tasks)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { steps: 6, prompts_per_step: 12, ..TrainConfig::default() }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (alpha, base, tasks) = setup();
        let out = train(&base, &alpha, &tasks, &TrainConfig { learning_rate: 0.0, ..small_cfg() }, 3).unwrap();
        assert_eq!(out.policy, base);
    }

    #[test]
    fn ours_with_zero_alpha_matches_baseline() {
        let (alpha, base, tasks) = setup();
        let a = train(&base, &alpha, &tasks, &small_cfg(), 4).unwrap();
        let b = train(&base, &alpha, &tasks, &TrainConfig { reweight: Reweight::Ours, alpha: Some(0.0), ..small_cfg() }, 4).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn training_is_deterministic() {
        let (alpha, base, tasks) = setup();
        let a = train(&base, &alpha, &tasks, &small_cfg(), 5).unwrap();
        let b = train(&base, &alpha, &tasks, &small_cfg(), 5).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len() + a.skipped_steps, small_cfg().steps);
    }

    #[test]
    fn rollout_records_rollout_time_log_probs() {
        let (alpha, base, tasks) = setup();
        let cfg = small_cfg();
        for g in rollout(&base, &alpha, &tasks[..5], &cfg, 9) {
            for (resp, lps) in g.responses.iter().zip(&g.old_logprobs) {
                let mut h = g.instance.prompt.clone();
                for (&t, &lp) in resp.iter().zip(lps) {
                    assert!((base.dist_after(&h, 1.0).log_probs[t] - lp).abs() < 1e-12);
                    h.push(t);
                }
            }
        }
    }

    #[test]
    fn tiny_top_p_rolls_out_greedy() {
        let (alpha, base, tasks) = setup();
        let cfg = TrainConfig { rollout_top_p: 1e-9, ..small_cfg() };
        for g in rollout(&base, &alpha, &tasks[..5], &cfg, 10) {
            let greedy = crate::decode::greedy_decode(&base, &g.instance.prompt, cfg.max_len);
            assert!(g.responses.iter().all(|r| *r == greedy));
        }
    }

    #[test]
    fn dominate_preset_lowers_eps_high() {
        let c = TrainConfig { reweight: Reweight::Dominate, ..TrainConfig::default() }.resolved();
        assert_eq!(c.eps_high, Some(0.24));
        assert_eq!(c.alpha, Some(0.1));
        assert_eq!(TrainConfig::default().resolved().eps_high, Some(0.28));
    }

    #[test]
    fn all_degenerate_training_errors() {
        let (alpha, base, tasks) = setup();
        let cfg = TrainConfig { reward: RewardSpec { correct_reward: 0.0, ..RewardSpec::default() }, ..small_cfg() };
        assert!(matches!(train(&base, &alpha, &tasks, &cfg, 1), Err(LabError::Degenerate { steps: 6 })));
    }
}

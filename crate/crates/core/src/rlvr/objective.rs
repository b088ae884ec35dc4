use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::advantage::{ppl_weights, reweight_factor, Reweight};
use super::lemma::lemma1_norm;
use super::RolloutGroup;
use crate::metrics::kl_divergence;
use rand::Rng;

use crate::policy::{Context, TabularPolicy, TokenDist, Vocab};
use crate::seed::{self, Stream};
use crate::task::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Grpo,
    Dapo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    ResponseMean,
    TokenLevel,
}

impl Objective {
    pub fn default_aggregation(self) -> Aggregation {
        match self {
            Objective::Grpo => Aggregation::ResponseMean,
            Objective::Dapo => Aggregation::TokenLevel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub aggregation: Aggregation,
    pub eps_low: f64,
    pub eps_high: f64,
    /// KL weight against the reference policy; used by GRPO only.
    pub beta_kl: f64,
    pub reweight: Reweight,
    pub alpha: f64,
}

impl ObjectiveConfig {
    pub fn dapo() -> Self {
        ObjectiveConfig {
            objective: Objective::Dapo,
            aggregation: Aggregation::TokenLevel,
            eps_low: 0.2,
            eps_high: 0.28,
            beta_kl: 0.0,
            reweight: Reweight::None,
            alpha: 0.0,
        }
    }

    pub fn grpo(beta_kl: f64) -> Self {
        ObjectiveConfig {
            objective: Objective::Grpo,
            aggregation: Aggregation::ResponseMean,
            eps_low: 0.2,
            eps_high: 0.2,
            beta_kl,
            ..ObjectiveConfig::dapo()
        }
    }
}

/// Per-token bookkeeping for gradient-mass analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradRecord {
    pub old_prob: f64,
    /// Closed-form l1 norm of this token's surrogate gradient, zero when clipped.
    pub l1_grad_norm: f64,
    pub reweight_factor: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub grad: BTreeMap<Context, Vec<f64>>,
    pub tokens: usize,
    pub clipped: usize,
    pub records: Vec<GradRecord>,
}

/// Clipped surrogate and its exact gradient with respect to every touched
/// logit. `reference` supplies the KL anchor for GRPO.
pub fn policy_objective_grad(
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    groups: &[RolloutGroup],
    cfg: &ObjectiveConfig,
    record_tokens: bool,
) -> ObjectiveOutput {
    let mut out = ObjectiveOutput::default();
    let responses: usize = groups.iter().map(|g| g.responses.len()).sum();
    let total_tokens: usize = groups.iter().flat_map(|g| &g.responses).map(Vec::len).sum();
    if responses == 0 || total_tokens == 0 {
        return out;
    }
    let kl_anchor = match cfg.objective {
        Objective::Grpo if cfg.beta_kl != 0.0 => reference,
        _ => None,
    };
    let v = policy.vocab_size();
    for g in groups {
        let ppl = if cfg.reweight == Reweight::Ppl { ppl_weights(&g.old_logprobs) } else { vec![0.0; g.responses.len()] };
        for (i, resp) in g.responses.iter().enumerate() {
            if resp.is_empty() {
                continue;
            }
            let weight = match cfg.aggregation {
                Aggregation::ResponseMean => 1.0 / (responses as f64 * resp.len() as f64),
                Aggregation::TokenLevel => 1.0 / total_tokens as f64,
            };
            let mut history = g.instance.prompt.clone();
            for (t, &tok) in resp.iter().enumerate() {
                let ctx = policy.context(&history);
                let dist = policy.next_dist(&ctx, 1.0);
                let old_prob = g.old_token_probs[i][t];
                let factor = reweight_factor(cfg.reweight, cfg.alpha, old_prob, ppl[i]);
                let adv = factor * g.advantages[i];
                let ratio = (dist.log_probs[tok] - g.old_logprobs[i][t]).exp();
                let clipped_ratio = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
                let binding = (adv > 0.0 && ratio > 1.0 + cfg.eps_high) || (adv < 0.0 && ratio < 1.0 - cfg.eps_low);
                out.value += weight * (ratio * adv).min(clipped_ratio * adv);
                out.tokens += 1;
                if binding {
                    out.clipped += 1;
                } else if adv != 0.0 {
                    let row = out.grad.entry(ctx.clone()).or_insert_with(|| vec![0.0; v]);
                    let scale = weight * ratio * adv;
                    for (j, r) in row.iter_mut().enumerate() {
                        let indicator = if j == tok { 1.0 } else { 0.0 };
                        *r += scale * (indicator - dist.probs[j]);
                    }
                }
                if let Some(reference) = kl_anchor {
                    let q = reference.next_dist(&ctx, 1.0);
                    let kl = kl_divergence(&dist, &q);
                    out.value -= weight * cfg.beta_kl * kl;
                    let row = out.grad.entry(ctx.clone()).or_insert_with(|| vec![0.0; v]);
                    add_kl_grad(row, &dist, &q, kl, -weight * cfg.beta_kl);
                }
                if record_tokens {
                    let w = if binding { 0.0 } else { ratio * adv };
                    out.records.push(GradRecord {
                        old_prob,
                        l1_grad_norm: lemma1_norm(w, old_prob),
                        reweight_factor: factor,
                    });
                }
                history.push(tok);
            }
        }
    }
    out
}

/// `d KL(p || q) / dz_j = p_j (ln p_j - ln q_j - KL)` for `p = softmax(z)`.
fn add_kl_grad(row: &mut [f64], p: &TokenDist, q: &TokenDist, kl: f64, scale: f64) {
    for (j, r) in row.iter_mut().enumerate() {
        if p.probs[j] > 0.0 {
            *r += scale * p.probs[j] * (p.log_probs[j] - q.log_probs[j].max(-690.0) - kl);
        }
    }
}

/// Largest deviation between the analytic gradient and central finite
/// differences of the objective over all touched logits, relative to the
/// largest finite-difference component.
pub fn objective_fd_check(
    policy: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    groups: &[RolloutGroup],
    cfg: &ObjectiveConfig,
    h: f64,
) -> f64 {
    let analytic = policy_objective_grad(policy, reference, groups, cfg, false).grad;
    let mut touched: Vec<Context> = Vec::new();
    for g in groups {
        for resp in &g.responses {
            let mut history = g.instance.prompt.clone();
            for &tok in resp {
                touched.push(policy.context(&history));
                history.push(tok);
            }
        }
    }
    touched.sort();
    touched.dedup();
    let mut worst_diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for ctx in &touched {
        for j in 0..policy.vocab_size() {
            let mut plus = policy.clone();
            plus.logits_mut(ctx)[j] += h;
            let mut minus = policy.clone();
            minus.logits_mut(ctx)[j] -= h;
            let fd = (policy_objective_grad(&plus, reference, groups, cfg, false).value
                - policy_objective_grad(&minus, reference, groups, cfg, false).value)
                / (2.0 * h);
            let a = analytic.get(ctx).map(|r| r[j]).unwrap_or(0.0);
            worst_diff = worst_diff.max((a - fd).abs());
            scale = scale.max(fd.abs()).max(a.abs());
        }
    }
    worst_diff / scale.max(1e-12)
}

/// V=5, n=1; responses over tokens {3, 4} visit exactly two contexts
/// after a prompt ending in 3.
fn small_policy(rng: &mut Stream) -> TabularPolicy {
    let vocab = Vocab::new(["<bos>", "<eos>", "<pad>", "a", "b"].iter().map(|s| s.to_string()).collect()).unwrap();
    let mut p = TabularPolicy::uniform(vocab, 1).unwrap();
    for t in [3, 4] {
        *p.logits_mut(&Context::window(1, &[t])) = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    }
    p
}

fn snapshot_group(policy: &TabularPolicy, responses: Vec<Vec<usize>>, advantages: Vec<f64>) -> RolloutGroup {
    let prompt = vec![3];
    let mut old_logprobs = Vec::new();
    for r in &responses {
        let mut h = prompt.clone();
        let mut lps = Vec::new();
        for &t in r {
            lps.push(policy.dist_after(&h, 1.0).log_probs[t]);
            h.push(t);
        }
        old_logprobs.push(lps);
    }
    RolloutGroup {
        instance: TaskInstance { prompt, answer: 3 },
        rewards: advantages.clone(),
        old_token_probs: old_logprobs.iter().map(|l| l.iter().map(|x| x.exp()).collect()).collect(),
        old_logprobs,
        responses,
        advantages,
    }
}

fn fixture(rng: &mut Stream) -> (TabularPolicy, RolloutGroup) {
    let old = small_policy(rng);
    let group = snapshot_group(
        &old,
        vec![vec![3, 4, 4], vec![4, 3], vec![4, 4, 3, 1], vec![3]],
        vec![1.2, -0.8, 0.5, -0.9],
    );
    (old, group)
}

fn perturbed(old: &TabularPolicy, rng: &mut Stream, size: f64) -> TabularPolicy {
    let mut p = old.clone();
    for t in [3, 4] {
        for z in p.logits_mut(&Context::window(1, &[t])).iter_mut() {
            *z += rng.gen_range(-size..size);
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdSuiteReport {
    pub cases: usize,
    /// Cases evaluated away from the rollout snapshot with at least one
    /// clipped token.
    pub clipped_cases: usize,
    pub max_rel_error: f64,
}

/// Finite-difference agreement over random two-context policies (V=5) for
/// GRPO, DAPO and reweighted DAPO, at the snapshot and after perturbation.
pub fn objective_fd_suite(seed_value: u64, trials: usize) -> FdSuiteReport {
    let mut rng = seed::stream(seed_value);
    let mut report = FdSuiteReport { cases: 0, clipped_cases: 0, max_rel_error: 0.0 };
    let cfgs = [
        ObjectiveConfig::dapo(),
        ObjectiveConfig::grpo(0.05),
        ObjectiveConfig { reweight: Reweight::Ours, alpha: 0.2, ..ObjectiveConfig::dapo() },
    ];
    for trial in 0..trials {
        let (old, group) = fixture(&mut rng);
        let reference = perturbed(&old, &mut rng, 0.5);
        let cur = if trial % 2 == 0 { old.clone() } else { perturbed(&old, &mut rng, 0.6) };
        for cfg in &cfgs {
            let groups = std::slice::from_ref(&group);
            if policy_objective_grad(&cur, Some(&reference), groups, cfg, false).clipped > 0 {
                report.clipped_cases += 1;
            }
            let err = objective_fd_check(&cur, Some(&reference), groups, cfg, 1e-6);
            report.cases += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    report
}

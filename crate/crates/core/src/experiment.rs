//! End-to-end experiment drivers shared by the CLI and the acceptance suite.

use serde::Serialize;

use crate::bandit::{self, SuiteReport, DEFAULT_GAMMA_GRID};
use crate::config::ExperimentConfig;
use crate::decode::{self, extrapolated_dist, greedy_accuracy, DecodeMode, Evaluation, SweepRow};
use crate::error::Result;
use crate::metrics::{Criterion, CriterionKind};
use crate::policy::{mle_pretrain, TabularPolicy, TokenDist};
use crate::rlvr::{self, FdSuiteReport, TrainOutput};
use crate::seed;
use crate::task::{build_pretrain_corpus, CorpusStats};

pub fn pretrain(cfg: &ExperimentConfig) -> Result<(TabularPolicy, CorpusStats)> {
    let alpha = cfg.alphabet()?;
    let p = &cfg.pretrain;
    let corpus = build_pretrain_corpus(
        &alpha,
        &cfg.train_tasks()?,
        p.copies_per_task,
        p.correct_fraction,
        p.noise,
        cfg.component_seed("corpus"),
    )?;
    let base = mle_pretrain(&cfg.vocab(), &corpus.lines, p.context_width, p.smoothing)?;
    Ok((base, corpus.stats))
}

pub fn train(cfg: &ExperimentConfig, base: &TabularPolicy, record_tokens: bool) -> Result<TrainOutput> {
    let mut tc = cfg.train;
    tc.record_tokens = record_tokens;
    rlvr::train(base, &cfg.alphabet()?, &cfg.train_tasks()?, &tc, cfg.component_seed("train"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyReport {
    pub base: f64,
    pub rl: f64,
}

pub fn greedy_heldout(cfg: &ExperimentConfig, base: &TabularPolicy, rl: &TabularPolicy) -> Result<GreedyReport> {
    let alpha = cfg.alphabet()?;
    let held = cfg.heldout_tasks()?;
    Ok(GreedyReport {
        base: greedy_accuracy(base, &alpha, &held, cfg.decode.max_len),
        rl: greedy_accuracy(rl, &alpha, &held, cfg.decode.max_len),
    })
}

fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.component_seed("eval")
}

pub fn evaluate_mode(
    cfg: &ExperimentConfig,
    base: &TabularPolicy,
    rl: &TabularPolicy,
    mode: DecodeMode,
    criterion: Criterion,
    gamma: Option<f64>,
) -> Result<Evaluation> {
    let mut dc = cfg.decode.template(mode).with_criterion(criterion);
    dc.gamma = gamma;
    decode::evaluate(base, rl, &cfg.alphabet()?, &cfg.heldout_tasks()?, &dc, cfg.decode.samples_per_prompt, eval_seed(cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionSweep {
    pub criterion: CriterionKind,
    pub rows: Vec<SweepRow>,
}

pub fn replace_sweeps(cfg: &ExperimentConfig, base: &TabularPolicy, rl: &TabularPolicy) -> Result<Vec<CriterionSweep>> {
    let alpha = cfg.alphabet()?;
    let held = cfg.heldout_tasks()?;
    cfg.criterion_grid()
        .into_iter()
        .map(|(criterion, taus)| {
            let template = cfg.decode.template(DecodeMode::Replace).with_criterion(criterion);
            let rows = decode::sweep_replacement(base, rl, &alpha, &held, &template, &taus, cfg.decode.samples_per_prompt, eval_seed(cfg))?;
            Ok(CriterionSweep { criterion: criterion.kind, rows })
        })
        .collect()
}

/// Smallest replacement ratio among rows reaching `target` accuracy.
pub fn min_ratio_reaching(rows: &[SweepRow], target: f64) -> Option<f64> {
    rows.iter()
        .filter(|r| r.accuracy >= target)
        .map(|r| r.replace_ratio)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub mode: DecodeMode,
    pub gamma: Option<f64>,
    #[serde(with = "crate::metrics::extended_f64")]
    pub tau: f64,
    pub replace_ratio: f64,
    pub accuracy: f64,
    pub best: bool,
}

/// Replace, extrapolate and extrapolate-on-RL over the (tau, gamma) grid.
/// `best` marks the most accurate cell overall, earliest on ties.
pub fn extrapolate_grid(cfg: &ExperimentConfig, base: &TabularPolicy, rl: &TabularPolicy) -> Result<Vec<GridCell>> {
    let kind = cfg.sweep.extrapolate_criterion;
    let mut taus = cfg.sweep.extrapolate_taus.0.clone();
    taus.sort_by(f64::total_cmp);
    let mut plan: Vec<(DecodeMode, Option<f64>)> = vec![(DecodeMode::Replace, None)];
    for mode in [DecodeMode::Extrapolate, DecodeMode::ExtrapolateOnRl] {
        plan.extend(cfg.sweep.gammas.iter().map(|&g| (mode, Some(g))));
    }
    let mut cells = Vec::new();
    for (mode, gamma) in plan {
        for &tau in &taus {
            let ev = evaluate_mode(cfg, base, rl, mode, Criterion::new(kind, tau), gamma)?;
            cells.push(GridCell {
                mode,
                gamma,
                tau,
                replace_ratio: ev.mean_replace_ratio,
                accuracy: ev.result.avg_at_k(),
                best: false,
            });
        }
    }
    if let Some(i) = (0..cells.len()).reduce(|a, b| if cells[b].accuracy > cells[a].accuracy { b } else { a }) {
        cells[i].best = true;
    }
    Ok(cells)
}

/// Best accuracy over replace cells and over extrapolation cells with γ > 0.
pub fn best_replace_and_extrapolate(cells: &[GridCell]) -> (f64, f64) {
    let best = |f: &dyn Fn(&GridCell) -> bool| cells.iter().filter(|c| f(c)).map(|c| c.accuracy).fold(f64::NEG_INFINITY, f64::max);
    (
        best(&|c| c.mode == DecodeMode::Replace),
        best(&|c| c.mode != DecodeMode::Replace && c.gamma.unwrap_or(0.0) > 0.0),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToleranceCheck {
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl ToleranceCheck {
    fn new(cases: usize, max_error: f64, tolerance: f64) -> Self {
        ToleranceCheck {
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    /// `|2|w|(1-p) - fd| / max(1, analytic)` over random V=32 cases.
    pub lemma1: ToleranceCheck,
    /// Largest absolute gap of the log-softmax score against finite differences.
    pub log_softmax_grad: ToleranceCheck,
    pub objective_fd: ToleranceCheck,
    pub objective_fd_clipped_cases: usize,
    /// Parameter-space vs distribution-space extrapolation.
    pub extrapolation_identity: ToleranceCheck,
    pub bandit: SuiteReport,
    pub constant_reward_equality: ToleranceCheck,
    pub violations: usize,
}

pub fn verify_suite(seed_value: u64, bandit_instances: usize) -> VerifyReport {
    use rand::Rng;
    let mut rng = seed::stream(seed::derive(seed_value, "verify", 0));
    let (mut lemma_err, mut grad_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..32).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tok = rng.gen_range(0..32);
        let w = rng.gen_range(-3.0..3.0);
        lemma_err = lemma_err.max(rlvr::verify_lemma1_fd(&logits, tok, w).rel_error);
        grad_err = grad_err.max(rlvr::verify_log_softmax_grad_fd(&logits, tok));
    }
    let mut extra_err = 0.0f64;
    for _ in 0..1000 {
        let v = rng.gen_range(2..17);
        let t0: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tt: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        for g in [0.0, 0.05, 0.1, 1.0] {
            let direct = bandit::softmax(&bandit::extrapolate_params(&tt, &t0, g));
            let via = extrapolated_dist(&TokenDist::from_logits(&t0, 1.0), &TokenDist::from_logits(&tt, 1.0), g);
            for (a, b) in direct.iter().zip(&via.probs) {
                extra_err = extra_err.max((a - b).abs());
            }
        }
    }
    let fd: FdSuiteReport = rlvr::objective_fd_suite(seed::derive(seed_value, "objective_fd", 0), 20);
    let suite = bandit::run_suite(seed::derive(seed_value, "bandit", 0), bandit_instances, 50, &[0.1, 1.0], &DEFAULT_GAMMA_GRID);
    let lemma1 = ToleranceCheck::new(100, lemma_err, 1e-5);
    let log_softmax_grad = ToleranceCheck::new(100, grad_err, 1e-6);
    let objective_fd = ToleranceCheck::new(fd.cases, fd.max_rel_error, 1e-5);
    let extrapolation_identity = ToleranceCheck::new(1000, extra_err, 1e-12);
    let constant = ToleranceCheck::new(bandit_instances / 50, suite.constant_reward_max_abs_derivative, 1e-12);
    let failed_checks = [&lemma1, &log_softmax_grad, &objective_fd, &extrapolation_identity, &constant]
        .iter()
        .filter(|c| !c.passed)
        .count();
    VerifyReport {
        seed: seed_value,
        violations: suite.violations.len() + failed_checks,
        lemma1,
        log_softmax_grad,
        objective_fd,
        objective_fd_clipped_cases: fd.clipped_cases,
        extrapolation_identity,
        bandit: suite,
        constant_reward_equality: constant,
    }
}


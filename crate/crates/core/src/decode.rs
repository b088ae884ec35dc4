//! Selective token replacement and extrapolation between a base and an RL
//! policy, with per-position decode traces.
//!
//! Every decode owns two random streams. The sample stream yields exactly two
//! uniforms per position (candidate draw, resample draw); the resample draw
//! is discarded when the gate does not fire. The gate stream feeds the random
//! criterion. Keeping the consumption fixed per position means that two
//! decodes of the same `(problem, sample)` pair under different modes or
//! thresholds see identical randomness position by position.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::{criterion_fire, Criterion, PositionMetrics};
use crate::policy::{sample_with_uniform, TabularPolicy, TokenDist, TokenId, EOS};
use crate::seed::{self, Stream};
use crate::stats::EvalResult;
use crate::task::{is_correct, Alphabet, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    BaseOnly,
    RlOnly,
    Replace,
    Extrapolate,
    ExtrapolateOnRl,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::BaseOnly => "base_only",
            DecodeMode::RlOnly => "rl_only",
            DecodeMode::Replace => "replace",
            DecodeMode::Extrapolate => "extrapolate",
            DecodeMode::ExtrapolateOnRl => "extrapolate_on_rl",
        }
    }

    fn extrapolates(self) -> bool {
        matches!(self, DecodeMode::Extrapolate | DecodeMode::ExtrapolateOnRl)
    }

    fn gated(self) -> bool {
        !matches!(self, DecodeMode::BaseOnly | DecodeMode::RlOnly)
    }

    fn samples_from_rl(self) -> bool {
        matches!(self, DecodeMode::RlOnly | DecodeMode::ExtrapolateOnRl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub mode: DecodeMode,
    pub criterion: Criterion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, max_len: usize, temperature: f64, top_p: f64) -> Self {
        DecodeConfig {
            max_len,
            temperature,
            top_p,
            mode,
            criterion: Criterion::never(),
            gamma: None,
        }
    }

    pub fn with_criterion(mut self, criterion: Criterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(LabError::Input("max_len must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(LabError::Input("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LabError::Input("top_p must lie in (0, 1]".into()));
        }
        match (self.mode.extrapolates(), self.gamma) {
            (true, None) => Err(LabError::Input(format!("mode {} requires gamma", self.mode.name()))),
            (false, Some(_)) => Err(LabError::Input(format!("mode {} takes no gamma", self.mode.name()))),
            (true, Some(g)) if !(g >= 0.0 && g.is_finite()) => Err(LabError::Input("gamma must be finite and >= 0".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    PrimarySample,
    Replaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLen,
}

/// One emitted position. `metrics.dlogp` and the two probabilities refer to
/// the emitted token; the gate itself saw the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEvent {
    pub position: usize,
    pub token: TokenId,
    pub source: TokenSource,
    pub metrics: PositionMetrics,
    pub fired: bool,
    pub base_prob: f64,
    pub rl_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub prompt: Vec<TokenId>,
    pub events: Vec<TokenEvent>,
    pub terminated_by: Termination,
    pub replace_ratio: f64,
}

impl DecodeTrace {
    pub fn response(&self) -> Vec<TokenId> {
        self.events.iter().map(|e| e.token).collect()
    }

    pub fn replaced(&self) -> usize {
        self.events.iter().filter(|e| e.source == TokenSource::Replaced).count()
    }
}

/// Random streams owned by one decode.
pub struct DecodeStreams {
    pub sample: Stream,
    pub gate: Stream,
}

impl DecodeStreams {
    pub fn new(seed: u64) -> Self {
        DecodeStreams {
            sample: seed::stream(seed::derive(seed, "sample", 0)),
            gate: seed::stream(seed::derive(seed, "gate", 0)),
        }
    }

    /// Streams for sample `k` of problem `i` under a sweep seed.
    pub fn for_pair(seed: u64, problem: usize, sample: usize) -> Self {
        let s = seed::derive(seed::derive(seed, "problem", problem as u64), "draw", sample as u64);
        DecodeStreams::new(s)
    }
}

/// `pi_rl^(1+gamma) / pi_base^gamma`, renormalized in log space.
pub fn extrapolated_dist(base: &TokenDist, rl: &TokenDist, gamma: f64) -> TokenDist {
    let weights: Vec<f64> = rl
        .log_probs
        .iter()
        .zip(&base.log_probs)
        .map(|(lr, lb)| (1.0 + gamma) * lr - gamma * lb)
        .collect();
    TokenDist::from_log_weights(&weights)
}

pub fn selective_decode(
    base: &TabularPolicy,
    rl: &TabularPolicy,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    streams: &mut DecodeStreams,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    let v = base.vocab_size();
    if rl.vocab_size() != v {
        return Err(LabError::Input("base and rl vocab sizes differ".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= v) {
        return Err(LabError::Input(format!("prompt token {bad} outside vocab of size {v}")));
    }
    let mut history = prompt.to_vec();
    let mut events = Vec::with_capacity(cfg.max_len);
    let mut terminated_by = Termination::MaxLen;
    for position in 0..cfg.max_len {
        let base_dist = base.dist_after(&history, cfg.temperature);
        let rl_dist = rl.dist_after(&history, cfg.temperature);
        let u_candidate: f64 = streams.sample.gen();
        let u_resample: f64 = streams.sample.gen();

        let primary = if cfg.mode.samples_from_rl() { &rl_dist } else { &base_dist };
        let candidate = sample_with_uniform(primary, cfg.top_p, u_candidate);
        let metrics = PositionMetrics::compute(&base_dist, &rl_dist, candidate);
        let fired = cfg.mode.gated() && criterion_fire(&cfg.criterion, &metrics, &mut streams.gate);

        let (token, source) = if fired {
            let target = match cfg.mode {
                DecodeMode::Replace => rl_dist.clone(),
                _ => extrapolated_dist(&base_dist, &rl_dist, cfg.gamma.unwrap_or(0.0)),
            };
            (sample_with_uniform(&target, cfg.top_p, u_resample), TokenSource::Replaced)
        } else {
            (candidate, TokenSource::PrimarySample)
        };
        events.push(TokenEvent {
            position,
            token,
            source,
            metrics: metrics.with_token(&base_dist, &rl_dist, token),
            fired,
            base_prob: base_dist.probs[token],
            rl_prob: rl_dist.probs[token],
        });
        history.push(token);
        if token == EOS {
            terminated_by = Termination::Eos;
            break;
        }
    }
    let replaced = events.iter().filter(|e| e.source == TokenSource::Replaced).count();
    let replace_ratio = replaced as f64 / events.len() as f64;
    Ok(DecodeTrace {
        prompt: prompt.to_vec(),
        events,
        terminated_by,
        replace_ratio,
    })
}

/// Argmax decoding of a single policy.
pub fn greedy_decode(policy: &TabularPolicy, prompt: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let tok = policy.dist_after(&history, 1.0).argmax();
        out.push(tok);
        history.push(tok);
        if tok == EOS {
            break;
        }
    }
    out
}

pub fn greedy_accuracy(policy: &TabularPolicy, alpha: &Alphabet, tasks: &[TaskInstance], max_len: usize) -> f64 {
    let correct = tasks
        .iter()
        .filter(|t| is_correct(alpha, t, &greedy_decode(policy, &t.prompt, max_len)))
        .count();
    correct as f64 / tasks.len() as f64
}

/// Gate decisions for forced candidate tokens, replaying a fixed sequence.
/// Used to check gate coverage without sampling.
pub fn replay_gate(
    base: &TabularPolicy,
    rl: &TabularPolicy,
    prompt: &[TokenId],
    candidates: &[TokenId],
    criterion: &Criterion,
    temperature: f64,
    gate_rng: &mut Stream,
) -> Vec<bool> {
    let mut history = prompt.to_vec();
    candidates
        .iter()
        .map(|&tok| {
            let b = base.dist_after(&history, temperature);
            let r = rl.dist_after(&history, temperature);
            let fired = criterion_fire(criterion, &PositionMetrics::compute(&b, &r, tok), gate_rng);
            history.push(tok);
            fired
        })
        .collect()
}

/// K decodes per task with per-pair streams, scored for correctness.
pub struct Evaluation {
    pub traces: Vec<Vec<DecodeTrace>>,
    pub result: EvalResult,
    pub mean_replace_ratio: f64,
}

pub fn evaluate(
    base: &TabularPolicy,
    rl: &TabularPolicy,
    alpha: &Alphabet,
    tasks: &[TaskInstance],
    cfg: &DecodeConfig,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<Evaluation> {
    cfg.validate()?;
    let k = samples_per_prompt;
    let traces: Vec<Vec<DecodeTrace>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            (0..k)
                .map(|j| selective_decode(base, rl, &task.prompt, cfg, &mut DecodeStreams::for_pair(seed, i, j)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = traces
        .iter()
        .zip(tasks)
        .map(|(row, t)| row.iter().map(|tr| is_correct(alpha, t, &tr.response())).collect())
        .collect();
    let total: f64 = traces.iter().flatten().map(|t| t.replace_ratio).sum();
    let count = tasks.len() * k;
    Ok(Evaluation {
        result: EvalResult::new(matrix)?,
        mean_replace_ratio: total / count as f64,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub replace_ratio: f64,
    pub accuracy: f64,
    pub per_problem: Vec<f64>,
}

/// One evaluation per threshold; rows ascending in tau.
#[allow(clippy::too_many_arguments)]
pub fn sweep_replacement(
    base: &TabularPolicy,
    rl: &TabularPolicy,
    alpha: &Alphabet,
    tasks: &[TaskInstance],
    template: &DecodeConfig,
    tau_grid: &[f64],
    samples_per_prompt: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if tau_grid.is_empty() {
        return Err(LabError::Input("tau grid is empty".into()));
    }
    let mut taus = tau_grid.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.iter()
        .map(|&tau| {
            let mut cfg = *template;
            cfg.criterion.tau = tau;
            let ev = evaluate(base, rl, alpha, tasks, &cfg, samples_per_prompt, seed)?;
            Ok(SweepRow {
                tau,
                replace_ratio: ev.mean_replace_ratio,
                accuracy: ev.result.avg_at_k(),
                per_problem: ev.result.per_problem(),
            })
        })
        .collect()
}

/// Header line of a trace in JSON Lines form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub problem: usize,
    pub sample: usize,
    pub seed: u64,
    pub config: DecodeConfig,
    /// Metrics were computed on the temperature-adjusted distributions.
    pub metrics_after_temperature: bool,
    pub prompt: Vec<TokenId>,
    pub terminated_by: Termination,
    pub replace_ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    trace: TraceHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventLine {
    pub pos: usize,
    pub tok: TokenId,
    pub src: TokenSource,
    pub fired: bool,
    pub h_base: f64,
    pub h_rl: f64,
    pub kl_rb: f64,
    pub kl_br: f64,
    pub kl_avg: f64,
    pub dlogp: f64,
}

impl From<&TokenEvent> for EventLine {
    fn from(e: &TokenEvent) -> Self {
        let m = &e.metrics;
        EventLine {
            pos: e.position,
            tok: e.token,
            src: e.source,
            fired: e.fired,
            h_base: m.entropy_base,
            h_rl: m.entropy_rl,
            kl_rb: m.kl_rl_base,
            kl_br: m.kl_base_rl,
            kl_avg: m.kl_avg,
            dlogp: m.dlogp,
        }
    }
}

impl EventLine {
    pub fn metrics(&self) -> PositionMetrics {
        PositionMetrics {
            entropy_base: self.h_base,
            entropy_rl: self.h_rl,
            kl_rl_base: self.kl_rb,
            kl_base_rl: self.kl_br,
            kl_avg: self.kl_avg,
            dlogp: self.dlogp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrace {
    pub header: TraceHeader,
    pub events: Vec<EventLine>,
}

impl StoredTrace {
    pub fn from_trace(trace: &DecodeTrace, cfg: &DecodeConfig, problem: usize, sample: usize, seed: u64) -> Self {
        StoredTrace {
            header: TraceHeader {
                problem,
                sample,
                seed,
                config: *cfg,
                metrics_after_temperature: true,
                prompt: trace.prompt.clone(),
                terminated_by: trace.terminated_by,
                replace_ratio: trace.replace_ratio,
            },
            events: trace.events.iter().map(EventLine::from).collect(),
        }
    }

    /// Probabilities of each emitted token under both policies, recomputed
    /// from the prompt and the emitted prefix.
    pub fn replay_probs(&self, base: &TabularPolicy, rl: &TabularPolicy) -> Vec<(f64, f64)> {
        let t = self.header.config.temperature;
        let mut history = self.header.prompt.clone();
        self.events
            .iter()
            .map(|e| {
                let b = base.dist_after(&history, t).probs[e.tok];
                let r = rl.dist_after(&history, t).probs[e.tok];
                history.push(e.tok);
                (b, r)
            })
            .collect()
    }
}

pub fn write_traces<W: std::io::Write>(mut w: W, traces: &[StoredTrace]) -> Result<()> {
    let io = |e| LabError::io("trace output", e);
    for t in traces {
        serde_json::to_writer(&mut w, &HeaderLine { trace: t.header.clone() })?;
        w.write_all(b"\n").map_err(io)?;
        for e in &t.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(io)?;
        }
    }
    Ok(())
}

/// Parses concatenated traces. Errors carry the 1-based line number.
pub fn parse_traces(text: &str) -> Result<Vec<StoredTrace>> {
    let mut out: Vec<StoredTrace> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| LabError::Parse { line: line_no, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if value.get("trace").is_some() {
            let h: HeaderLine = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            out.push(StoredTrace { header: h.trace, events: Vec::new() });
        } else {
            let e: EventLine = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            let current = out.last_mut().ok_or_else(|| err("event before any trace header".into()))?;
            if e.pos != current.events.len() {
                return Err(err(format!("expected pos {}, found {}", current.events.len(), e.pos)));
            }
            current.events.push(e);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CriterionKind;
    use crate::policy::{Context, Vocab};

    fn random_dist(rng: &mut Stream, v: usize) -> TokenDist {
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-5.0..5.0)).collect();
        TokenDist::from_logits(&logits, 1.0)
    }

    /// Two random policies over a small vocab where every 1-token context is
    /// populated.
    fn policy_pair(seed_value: u64) -> (TabularPolicy, TabularPolicy) {
        let vocab = Vocab::new(["<bos>", "<eos>", "<pad>", "a", "b", "c"].iter().map(|s| s.to_string()).collect()).unwrap();
        let mut rng = seed::stream(seed_value);
        let mut base = TabularPolicy::uniform(vocab.clone(), 1).unwrap();
        let mut rl = TabularPolicy::uniform(vocab, 1).unwrap();
        for t in 0..6 {
            let ctx = Context::window(1, &[t]);
            let mut b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            b[EOS] -= 1.0;
            let r: Vec<f64> = b.iter().map(|x| x + rng.gen_range(-1.5..1.5)).collect();
            base.logits.insert(ctx.clone(), b);
            rl.logits.insert(ctx, r);
        }
        (base, rl)
    }

    #[test]
    fn extrapolation_examples() {
        let base = TokenDist::from_probs(&[0.5, 0.5]);
        let rl = TokenDist::from_probs(&[0.8, 0.2]);
        let e = extrapolated_dist(&base, &rl, 1.0);
        assert!((e.probs[0] - 16.0 / 17.0).abs() < 1e-12);
        assert!((e.probs[1] - 1.0 / 17.0).abs() < 1e-12);
        let same = extrapolated_dist(&rl, &rl, 3.0);
        for (a, b) in same.probs.iter().zip(&rl.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn extrapolation_normalizes_on_random_pairs() {
        let mut rng = seed::stream(21);
        for _ in 0..1000 {
            let v = rng.gen_range(2..30);
            let base = random_dist(&mut rng, v);
            let rl = random_dist(&mut rng, v);
            for g in [0.0, 0.05, 0.1, 1.0] {
                let e = extrapolated_dist(&base, &rl, g);
                assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(e.probs.iter().all(|p| p.is_finite()));
                if g == 0.0 {
                    for (a, b) in e.probs.iter().zip(&rl.probs) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let base = TokenDist::from_logits(&[-700.0, 0.0, 700.0], 1.0);
        let rl = TokenDist::from_logits(&[700.0, 0.0, -700.0], 1.0);
        let e = extrapolated_dist(&base, &rl, 10.0);
        assert!(e.probs.iter().chain(&e.log_probs).all(|x| x.is_finite()));
    }

    fn run(base: &TabularPolicy, rl: &TabularPolicy, cfg: &DecodeConfig, s: u64) -> DecodeTrace {
        selective_decode(base, rl, &[3], cfg, &mut DecodeStreams::new(s)).unwrap()
    }

    #[test]
    fn never_firing_gate_reproduces_base_only() {
        let (base, rl) = policy_pair(1);
        for s in 0..50 {
            let plain = run(&base, &rl, &DecodeConfig::new(DecodeMode::BaseOnly, 12, 1.0, 0.9), s);
            let gated = run(
                &base,
                &rl,
                &DecodeConfig::new(DecodeMode::Replace, 12, 1.0, 0.9).with_criterion(Criterion::new(CriterionKind::Random, 0.0)),
                s,
            );
            assert_eq!(plain.response(), gated.response());
            assert_eq!(gated.replace_ratio, 0.0);
            assert!(plain.events.iter().all(|e| !e.fired));
        }
    }

    #[test]
    fn always_firing_gate_replaces_everything() {
        let (base, rl) = policy_pair(2);
        for s in 0..50 {
            let cfg = DecodeConfig::new(DecodeMode::Replace, 12, 1.0, 1.0).with_criterion(Criterion::new(CriterionKind::Random, 1.0));
            let t = run(&base, &rl, &cfg, s);
            assert!(t.events.iter().all(|e| e.source == TokenSource::Replaced && e.fired));
            assert_eq!(t.replace_ratio, 1.0);
        }
    }

    #[test]
    fn extrapolate_at_gamma_zero_matches_replace() {
        let (base, rl) = policy_pair(3);
        let crit = Criterion::new(CriterionKind::LogpDiff, 0.1);
        for s in 0..50 {
            let r = run(&base, &rl, &DecodeConfig::new(DecodeMode::Replace, 12, 1.0, 0.8).with_criterion(crit), s);
            let e = run(
                &base,
                &rl,
                &DecodeConfig::new(DecodeMode::Extrapolate, 12, 1.0, 0.8).with_criterion(crit).with_gamma(0.0),
                s,
            );
            assert_eq!(r, e);
        }
    }

    #[test]
    fn trace_invariants() {
        let (base, rl) = policy_pair(4);
        let crit = Criterion::new(CriterionKind::KlAvg, 0.2);
        for mode in [DecodeMode::BaseOnly, DecodeMode::RlOnly, DecodeMode::Replace, DecodeMode::Extrapolate, DecodeMode::ExtrapolateOnRl] {
            for s in 0..30 {
                let mut cfg = DecodeConfig::new(mode, 10, 0.7, 1.0).with_criterion(crit);
                if mode.extrapolates() {
                    cfg = cfg.with_gamma(0.1);
                }
                let t = run(&base, &rl, &cfg, s);
                assert!(!t.events.is_empty() && t.events.len() <= 10);
                assert_eq!(t.replace_ratio, t.replaced() as f64 / t.events.len() as f64);
                for e in &t.events {
                    if e.source == TokenSource::Replaced {
                        assert!(e.fired);
                    }
                    if !mode.gated() {
                        assert!(!e.fired);
                    }
                }
                match t.terminated_by {
                    Termination::Eos => assert_eq!(t.events.last().unwrap().token, EOS),
                    Termination::MaxLen => assert_eq!(t.events.len(), 10),
                }
                assert_eq!(run(&base, &rl, &cfg, s), t);
            }
        }
    }

    #[test]
    fn gamma_is_required_exactly_for_extrapolation() {
        let (base, rl) = policy_pair(5);
        let bad = DecodeConfig::new(DecodeMode::Extrapolate, 5, 1.0, 1.0);
        assert!(selective_decode(&base, &rl, &[3], &bad, &mut DecodeStreams::new(0)).is_err());
        let bad = DecodeConfig::new(DecodeMode::Replace, 5, 1.0, 1.0).with_gamma(0.1);
        assert!(bad.validate().is_err());
        let ok = DecodeConfig::new(DecodeMode::Replace, 5, 1.0, 1.0);
        assert!(selective_decode(&base, &rl, &[99], &ok, &mut DecodeStreams::new(0)).is_err());
    }

    #[test]
    fn logp_gate_coverage_is_monotone_in_tau() {
        let (base, rl) = policy_pair(6);
        let mut rng = seed::stream(77);
        for _ in 0..100 {
            let candidates: Vec<TokenId> = (0..8).map(|_| rng.gen_range(0..6)).collect();
            let mut prev: Option<Vec<bool>> = None;
            for tau in [-3.0, -1.0, -0.5, 0.0, 0.5, 2.0] {
                let mut g = seed::stream(0);
                let fired = replay_gate(&base, &rl, &[3], &candidates, &Criterion::new(CriterionKind::LogpDiff, tau), 1.0, &mut g);
                if let Some(p) = &prev {
                    for (a, b) in p.iter().zip(&fired) {
                        assert!(!a || *b, "raising tau removed a fired position");
                    }
                }
                prev = Some(fired);
            }
        }
    }

    #[test]
    fn trace_metrics_replay_from_policies() {
        let (base, rl) = policy_pair(8);
        let cfg = DecodeConfig::new(DecodeMode::Replace, 10, 0.8, 1.0).with_criterion(Criterion::new(CriterionKind::LogpDiff, -0.2));
        let t = run(&base, &rl, &cfg, 3);
        let mut history = t.prompt.clone();
        for e in &t.events {
            let b = base.dist_after(&history, 0.8);
            let r = rl.dist_after(&history, 0.8);
            assert_eq!(PositionMetrics::compute(&b, &r, e.token), e.metrics);
            history.push(e.token);
        }
    }

    #[test]
    fn traces_round_trip_through_jsonl() {
        let (base, rl) = policy_pair(9);
        let cfg = DecodeConfig::new(DecodeMode::Extrapolate, 10, 1.0, 0.9)
            .with_criterion(Criterion::new(CriterionKind::LogpDiff, f64::NEG_INFINITY))
            .with_gamma(0.1);
        let stored: Vec<StoredTrace> = (0..3)
            .map(|s| StoredTrace::from_trace(&run(&base, &rl, &cfg, s), &cfg, 0, s as usize, s))
            .collect();
        let mut buf = Vec::new();
        write_traces(&mut buf, &stored).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(parse_traces(&text).unwrap(), stored);
        let first_event = text.lines().nth(1).unwrap();
        let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(first_event)
            .unwrap()
            .keys()
            .cloned()
            .collect();
        let mut expected = ["pos", "tok", "src", "fired", "h_base", "h_rl", "kl_rb", "kl_br", "kl_avg", "dlogp"].map(String::from).to_vec();
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn malformed_trace_line_reports_line_number() {
        let (base, rl) = policy_pair(10);
        let cfg = DecodeConfig::new(DecodeMode::BaseOnly, 5, 1.0, 1.0);
        let mut buf = Vec::new();
        write_traces(&mut buf, &[StoredTrace::from_trace(&run(&base, &rl, &cfg, 0), &cfg, 0, 0, 0)]).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{not json}\n");
        let n = text.lines().count();
        match parse_traces(&text) {
            Err(LabError::Parse { line, .. }) => assert_eq!(line, n),
            other => panic!("unexpected {other:?}"),
        }
    }
}

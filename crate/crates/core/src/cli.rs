//! Command-line surface. Every command writes the resolved config next to
//! its outputs and produces byte-identical files on rerun.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::decode::{self, parse_traces, write_traces, DecodeMode, EventLine, StoredTrace};
use crate::error::{LabError, Result};
use crate::experiment::{self, min_ratio_reaching};
use crate::metrics::{Criterion, CriterionKind};
use crate::policy::TabularPolicy;
use crate::stats::{self, fmt_bound, histogram, mean, write_csv, write_json, TallyFilter};
use crate::task::write_tasks_jsonl;

#[derive(Debug, Parser)]
#[command(name = "rlvr-lab", version, about = "Token-level analysis of RL with verifiable rewards on tabular policies")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides master_seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the base policy on the noisy corpus.
    Pretrain,
    /// RL-train from the base checkpoint.
    Train {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Greedy and sampled accuracy of both policies; writes traces.
    Eval {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        rl: Option<PathBuf>,
    },
    /// Replacement ratio and Avg@K over each criterion's threshold grid.
    SweepReplace {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        rl: Option<PathBuf>,
    },
    /// Avg@K over the (tau, gamma) grid for replace and both extrapolation modes.
    SweepExtrapolate {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        rl: Option<PathBuf>,
    },
    /// Gradient-norm, finite-difference and bandit verification suites.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
    /// Histograms, Δlog p bins and token tallies for trace files.
    Analyze {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// With --rl, replays traces to attach token probabilities.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        rl: Option<PathBuf>,
    },
}

const DEFAULT_SEED: u64 = 7;

struct Ctx {
    cfg: Option<ExperimentConfig>,
    out: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn cfg(&self) -> Result<&ExperimentConfig> {
        self.cfg.as_ref().ok_or_else(|| LabError::config("--config", "this command needs a config file"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn checkpoint(&self, given: &Option<PathBuf>, default: &str) -> Result<TabularPolicy> {
        TabularPolicy::load(&given.clone().unwrap_or_else(|| self.path(default)))
    }

    fn echo_config(&self) -> Result<()> {
        if let Some(cfg) = &self.cfg {
            let path = self.path("config.resolved.json");
            std::fs::write(&path, cfg.resolved().to_json()?).map_err(|e| LabError::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => None,
    };
    if let (Some(c), Some(s)) = (cfg.as_mut(), cli.seed) {
        c.master_seed = s;
    }
    let out = match (&cli.out, &cfg) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.output_dir.clone(),
        (None, None) => PathBuf::from("."),
    };
    std::fs::create_dir_all(&out).map_err(|e| LabError::io(&out, e))?;
    let ctx = Ctx { cfg, out, seed: cli.seed };
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LabError::Input(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&ctx, &cli.command))
}

fn dispatch(ctx: &Ctx, command: &Command) -> Result<()> {
    match command {
        Command::Pretrain => cmd_pretrain(ctx),
        Command::Train { base } => cmd_train(ctx, base),
        Command::Eval { base, rl } => cmd_eval(ctx, base, rl),
        Command::SweepReplace { base, rl } => cmd_sweep_replace(ctx, base, rl),
        Command::SweepExtrapolate { base, rl } => cmd_sweep_extrapolate(ctx, base, rl),
        Command::Verify { instances } => cmd_verify(ctx, *instances),
        Command::Analyze { traces, base, rl } => cmd_analyze(ctx, traces, base, rl),
    }
}

#[derive(Serialize)]
struct PretrainReport<'a> {
    configured_correct_fraction: f64,
    corpus: &'a crate::task::CorpusStats,
}

fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.cfg()?;
    ctx.echo_config()?;
    let (base, corpus) = experiment::pretrain(cfg)?;
    base.save(&ctx.path("base.json"))?;
    write_json(
        &ctx.path("corpus_stats.json"),
        &PretrainReport { configured_correct_fraction: cfg.pretrain.correct_fraction, corpus: &corpus },
    )?;
    write_tasks_jsonl(&ctx.path("tasks_train.jsonl"), &cfg.train_tasks()?)?;
    write_tasks_jsonl(&ctx.path("tasks_heldout.jsonl"), &cfg.heldout_tasks()?)
}

#[derive(Serialize)]
struct TrainReport {
    steps: usize,
    kept_steps: usize,
    skipped_steps: usize,
    greedy_heldout: experiment::GreedyReport,
    /// Per kept step: gradient-mass share over count share for old_prob < 0.5.
    low_prob_mass_ratio: Vec<Option<f64>>,
}

const PROB_EDGES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn cmd_train(ctx: &Ctx, base: &Option<PathBuf>) -> Result<()> {
    let cfg = ctx.cfg()?;
    ctx.echo_config()?;
    let base = ctx.checkpoint(base, "base.json")?;
    let out = experiment::train(cfg, &base, true)?;
    out.policy.save(&ctx.path("rl.json"))?;
    let rows: Vec<Vec<String>> = out
        .curve
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.mean_reward.to_string(),
                r.mean_len.to_string(),
                r.entropy.to_string(),
                r.clip_frac.to_string(),
                r.dropped_groups.to_string(),
            ]
        })
        .collect();
    write_csv(&ctx.path("curve.csv"), &["step", "mean_reward", "mean_len", "entropy", "clip_frac", "dropped_groups"], &rows)?;

    let mut mass_rows = Vec::new();
    for (row, recs) in out.curve.iter().zip(&out.records) {
        for b in stats::grad_mass_summary(recs, &PROB_EDGES)? {
            mass_rows.push(vec![
                row.step.to_string(),
                fmt_bound(b.lo),
                fmt_bound(b.hi),
                b.count.to_string(),
                b.count_share.to_string(),
                b.mass_share.to_string(),
            ]);
        }
    }
    write_csv(&ctx.path("grad_mass.csv"), &["step", "prob_lo", "prob_hi", "count", "count_share", "mass_share"], &mass_rows)?;
    write_json(
        &ctx.path("train_summary.json"),
        &TrainReport {
            steps: cfg.train.steps,
            kept_steps: out.curve.len(),
            skipped_steps: out.skipped_steps,
            greedy_heldout: experiment::greedy_heldout(cfg, &base, &out.policy)?,
            low_prob_mass_ratio: out.records.iter().map(|r| stats::low_prob_mass_ratio(r, 0.5)).collect(),
        },
    )
}

#[derive(Serialize)]
struct ModeReport {
    mode: DecodeMode,
    avg_at_k: f64,
    pass_at_k: Vec<(usize, f64)>,
    mean_dlogp: f64,
}

#[derive(Serialize)]
struct EvalReport {
    samples_per_prompt: usize,
    greedy_heldout: experiment::GreedyReport,
    modes: Vec<ModeReport>,
}

fn stored(ev: &decode::Evaluation, cfg: &decode::DecodeConfig, seed: u64) -> Vec<StoredTrace> {
    ev.traces
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, t)| StoredTrace::from_trace(t, cfg, i, j, seed)))
        .collect()
}

fn save_traces(path: &Path, traces: &[StoredTrace]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_traces(&mut w, traces)?;
    std::io::Write::flush(&mut w).map_err(|e| LabError::io(path, e))
}

fn cmd_eval(ctx: &Ctx, base: &Option<PathBuf>, rl: &Option<PathBuf>) -> Result<()> {
    let cfg = ctx.cfg()?;
    ctx.echo_config()?;
    let base = ctx.checkpoint(base, "base.json")?;
    let rl = ctx.checkpoint(rl, "rl.json")?;
    let k = cfg.decode.samples_per_prompt;
    let mut ks: Vec<usize> = vec![1, (k / 2).max(1), k];
    ks.dedup();
    let mut modes = Vec::new();
    for mode in [DecodeMode::BaseOnly, DecodeMode::RlOnly] {
        let ev = experiment::evaluate_mode(cfg, &base, &rl, mode, Criterion::never(), None)?;
        let dc = cfg.decode.template(mode);
        let traces = stored(&ev, &dc, cfg.component_seed("eval"));
        save_traces(&ctx.path(&format!("traces_{}.jsonl", mode.name())), &traces)?;
        let dlogps: Vec<f64> = traces.iter().flat_map(|t| t.events.iter().map(|e| e.dlogp)).collect();
        modes.push(ModeReport {
            mode,
            avg_at_k: ev.result.avg_at_k(),
            pass_at_k: ks.iter().map(|&kk| Ok((kk, ev.result.pass_at_k(kk)?))).collect::<Result<_>>()?,
            mean_dlogp: mean(&dlogps),
        });
    }
    write_json(
        &ctx.path("eval.json"),
        &EvalReport { samples_per_prompt: k, greedy_heldout: experiment::greedy_heldout(cfg, &base, &rl)?, modes },
    )
}

#[derive(Serialize)]
struct SweepSummary {
    base_only_accuracy: f64,
    rl_only_accuracy: f64,
    /// 95% of rl_only accuracy.
    target_accuracy: f64,
    /// Smallest replacement ratio at which each criterion reaches the target.
    ratio_at_target: Vec<(CriterionKind, Option<f64>)>,
}

fn fmt_tau(t: f64) -> String {
    if t.is_infinite() {
        (if t > 0.0 { "inf" } else { "-inf" }).to_string()
    } else {
        t.to_string()
    }
}

fn cmd_sweep_replace(ctx: &Ctx, base: &Option<PathBuf>, rl: &Option<PathBuf>) -> Result<()> {
    let cfg = ctx.cfg()?;
    ctx.echo_config()?;
    let base = ctx.checkpoint(base, "base.json")?;
    let rl = ctx.checkpoint(rl, "rl.json")?;
    let sweeps = experiment::replace_sweeps(cfg, &base, &rl)?;
    let mut rows = Vec::new();
    for s in &sweeps {
        for r in &s.rows {
            rows.push(vec![s.criterion.name().to_string(), fmt_tau(r.tau), r.replace_ratio.to_string(), r.accuracy.to_string()]);
        }
        let mut header = vec!["problem".to_string()];
        header.extend(s.rows.iter().map(|r| format!("tau={}", fmt_tau(r.tau))));
        let cells: Vec<Vec<String>> = stats::per_problem_matrix(&s.rows)
            .into_iter()
            .enumerate()
            .map(|(i, row)| std::iter::once(i.to_string()).chain(row.iter().map(f64::to_string)).collect())
            .collect();
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&ctx.path(&format!("per_problem_{}.csv", s.criterion.name())), &header_refs, &cells)?;
    }
    write_csv(&ctx.path("sweep_replace.csv"), &["criterion", "tau", "replace_ratio", "accuracy"], &rows)?;

    let acc = |mode| -> Result<f64> { Ok(experiment::evaluate_mode(cfg, &base, &rl, mode, Criterion::never(), None)?.result.avg_at_k()) };
    let rl_acc = acc(DecodeMode::RlOnly)?;
    let target = 0.95 * rl_acc;
    write_json(
        &ctx.path("sweep_replace_summary.json"),
        &SweepSummary {
            base_only_accuracy: acc(DecodeMode::BaseOnly)?,
            rl_only_accuracy: rl_acc,
            target_accuracy: target,
            ratio_at_target: sweeps.iter().map(|s| (s.criterion, min_ratio_reaching(&s.rows, target))).collect(),
        },
    )
}

#[derive(Serialize)]
struct GridSummary {
    best_replace: f64,
    best_extrapolate: f64,
    rl_only_accuracy: f64,
}

fn cmd_sweep_extrapolate(ctx: &Ctx, base: &Option<PathBuf>, rl: &Option<PathBuf>) -> Result<()> {
    let cfg = ctx.cfg()?;
    ctx.echo_config()?;
    let base = ctx.checkpoint(base, "base.json")?;
    let rl = ctx.checkpoint(rl, "rl.json")?;
    let cells = experiment::extrapolate_grid(cfg, &base, &rl)?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.mode.name().to_string(),
                c.gamma.map(|g| g.to_string()).unwrap_or_default(),
                fmt_tau(c.tau),
                c.replace_ratio.to_string(),
                c.accuracy.to_string(),
                c.best.to_string(),
            ]
        })
        .collect();
    write_csv(&ctx.path("sweep_extrapolate.csv"), &["mode", "gamma", "tau", "replace_ratio", "accuracy", "best"], &rows)?;
    let (best_replace, best_extrapolate) = experiment::best_replace_and_extrapolate(&cells);
    let rl_only = experiment::evaluate_mode(cfg, &base, &rl, DecodeMode::RlOnly, Criterion::never(), None)?;
    write_json(
        &ctx.path("sweep_extrapolate_summary.json"),
        &GridSummary { best_replace, best_extrapolate, rl_only_accuracy: rl_only.result.avg_at_k() },
    )
}

fn cmd_verify(ctx: &Ctx, instances: usize) -> Result<()> {
    ctx.echo_config()?;
    let seed = ctx.cfg.as_ref().map(|c| c.master_seed).or(ctx.seed).unwrap_or(DEFAULT_SEED);
    let report = experiment::verify_suite(seed, instances);
    write_json(&ctx.path("verify.json"), &report)?;
    if report.violations > 0 {
        return Err(LabError::Verification(report.violations));
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricSummary {
    metric: &'static str,
    mean: f64,
    histogram: stats::Histogram,
}

#[derive(Serialize)]
struct AnalyzeReport {
    traces: usize,
    events: usize,
    replaced: usize,
    metrics: Vec<MetricSummary>,
    dlogp_bins: Option<Vec<stats::ProbBin>>,
    replaced_tally: Vec<(String, u64)>,
    top_dlogp_tally: Vec<(String, u64)>,
}

pub const DLOGP_EDGES: [f64; 12] = [-5.0, -4.0, -3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0, 4.0];
const MAGNITUDE_EDGES: [f64; 10] = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0];

fn cmd_analyze(ctx: &Ctx, paths: &[PathBuf], base: &Option<PathBuf>, rl: &Option<PathBuf>) -> Result<()> {
    ctx.echo_config()?;
    let mut traces = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
        traces.extend(parse_traces(&text).map_err(|e| match e {
            LabError::Parse { line, message } => LabError::Parse { line, message: format!("{}: {message}", p.display()) },
            other => other,
        })?);
    }
    let events: Vec<EventLine> = traces.iter().flat_map(|t| t.events.iter().copied()).collect();
    let pick: [(&'static str, fn(&EventLine) -> f64, &[f64]); 6] = [
        ("dlogp", |e| e.dlogp, &DLOGP_EDGES),
        ("entropy_base", |e| e.h_base, &MAGNITUDE_EDGES),
        ("entropy_rl", |e| e.h_rl, &MAGNITUDE_EDGES),
        ("kl_rl_base", |e| e.kl_rb, &MAGNITUDE_EDGES),
        ("kl_base_rl", |e| e.kl_br, &MAGNITUDE_EDGES),
        ("kl_avg", |e| e.kl_avg, &MAGNITUDE_EDGES),
    ];
    let mut metrics = Vec::new();
    let mut hist_rows = Vec::new();
    for (name, f, edges) in pick {
        let values: Vec<f64> = events.iter().map(f).collect();
        let h = histogram(&values, edges)?;
        for (i, c) in h.counts.iter().enumerate() {
            let lo = if i == 0 { None } else { Some(edges[i - 1]) };
            hist_rows.push(vec![name.to_string(), fmt_bound(lo), fmt_bound(edges.get(i).copied()), c.to_string()]);
        }
        metrics.push(MetricSummary { metric: name, mean: mean(&values), histogram: h });
    }
    write_csv(&ctx.path("histograms.csv"), &["metric", "lo", "hi", "count"], &hist_rows)?;

    let policies = match (base, rl) {
        (Some(b), Some(r)) => Some((TabularPolicy::load(b)?, TabularPolicy::load(r)?)),
        (None, None) => None,
        _ => return Err(LabError::Input("--base and --rl must be given together".into())),
    };
    let dlogp_bins = match &policies {
        Some((b, r)) => {
            let samples: Vec<(f64, f64, f64)> = traces
                .iter()
                .flat_map(|t| t.events.iter().zip(t.replay_probs(b, r)).map(|(e, (pb, pr))| (e.dlogp, pb, pr)))
                .collect();
            let bins = stats::dlogp_bins_summary(&samples, &DLOGP_EDGES)?;
            let rows: Vec<Vec<String>> = bins
                .iter()
                .map(|b| {
                    vec![fmt_bound(b.lo), fmt_bound(b.hi), b.count.to_string(), b.mean_base_prob.to_string(), b.mean_rl_prob.to_string()]
                })
                .collect();
            write_csv(&ctx.path("dlogp_bins.csv"), &["dlogp_lo", "dlogp_hi", "count", "mean_base_prob", "mean_rl_prob"], &rows)?;
            Some(bins)
        }
        None => None,
    };
    let vocab = policies.as_ref().map(|(b, _)| b.vocab.clone());
    let label = |tok: usize| match &vocab {
        Some(v) if tok < v.len() => v.symbol(tok).to_string(),
        _ => tok.to_string(),
    };
    let tally = |f| stats::token_tally(&events, f).into_iter().map(|(t, c)| (label(t), c)).collect::<Vec<_>>();
    let replaced_tally = tally(TallyFilter::ReplacedOnly);
    let top_dlogp_tally = tally(TallyFilter::TopDlogp(100));
    let mut tally_rows = Vec::new();
    for (filter, list) in [("replaced_only", &replaced_tally), ("top_dlogp_100", &top_dlogp_tally)] {
        tally_rows.extend(list.iter().map(|(t, c)| vec![filter.to_string(), t.clone(), c.to_string()]));
    }
    write_csv(&ctx.path("token_tally.csv"), &["filter", "token", "count"], &tally_rows)?;
    write_json(
        &ctx.path("analyze.json"),
        &AnalyzeReport {
            traces: traces.len(),
            events: events.len(),
            replaced: events.iter().filter(|e| e.src == decode::TokenSource::Replaced).count(),
            metrics,
            dlogp_bins,
            replaced_tally,
            top_dlogp_tally,
        },
    )
}

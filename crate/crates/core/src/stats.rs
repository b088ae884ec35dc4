//! Aggregations over traces, sweeps and training records.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::decode::{EventLine, SweepRow};
use crate::error::{LabError, Result};
use crate::policy::TokenId;
use crate::rlvr::GradRecord;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    /// Bin `i` covers `[edges[i-1], edges[i])`; the first and last bins are
    /// open-ended.
    pub fn bin_of(edges: &[f64], v: f64) -> usize {
        edges.partition_point(|&e| e <= v)
    }

    fn check_edges(edges: &[f64]) -> Result<()> {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::Input("histogram edges must be finite and strictly increasing".into()));
        }
        Ok(())
    }
}

pub fn histogram(values: &[f64], edges: &[f64]) -> Result<Histogram> {
    Histogram::check_edges(edges)?;
    if values.iter().any(|v| v.is_nan()) {
        return Err(LabError::Input("histogram value is NaN".into()));
    }
    let mut counts = vec![0u64; edges.len() + 1];
    for &v in values {
        counts[Histogram::bin_of(edges, v)] += 1;
    }
    Ok(Histogram {
        bin_edges: edges.to_vec(),
        counts,
        total: values.len() as u64,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Correctness of K samples for each problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalResult {
    matrix: Vec<Vec<bool>>,
}

impl EvalResult {
    pub fn new(matrix: Vec<Vec<bool>>) -> Result<Self> {
        let k = matrix.first().map(Vec::len).unwrap_or(0);
        if k == 0 {
            return Err(LabError::Input("evaluation needs at least one problem and one sample".into()));
        }
        if matrix.iter().any(|row| row.len() != k) {
            return Err(LabError::Input("evaluation matrix is not rectangular".into()));
        }
        Ok(EvalResult { matrix })
    }

    pub fn matrix(&self) -> &[Vec<bool>] {
        &self.matrix
    }

    pub fn samples(&self) -> usize {
        self.matrix[0].len()
    }

    pub fn avg_at_k(&self) -> f64 {
        let hits: usize = self.matrix.iter().map(|r| r.iter().filter(|&&b| b).count()).sum();
        hits as f64 / (self.matrix.len() * self.samples()) as f64
    }

    pub fn per_problem(&self) -> Vec<f64> {
        self.matrix
            .iter()
            .map(|r| r.iter().filter(|&&b| b).count() as f64 / r.len() as f64)
            .collect()
    }

    /// Unbiased pass@k per problem, averaged over problems.
    pub fn pass_at_k(&self, k: usize) -> Result<f64> {
        let n = self.samples();
        let mut total = 0.0;
        for row in &self.matrix {
            total += pass_at_k(n, row.iter().filter(|&&b| b).count(), k)?;
        }
        Ok(total / self.matrix.len() as f64)
    }
}

/// `1 - C(n-c, k) / C(n, k)`, as a running product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n || c > n {
        return Err(LabError::Input(format!("pass@k needs 1 <= k <= n and c <= n (n={n}, c={c}, k={k})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbBin {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub count: u64,
    pub mean_base_prob: f64,
    pub mean_rl_prob: f64,
}

fn bin_bounds(edges: &[f64], i: usize) -> (Option<f64>, Option<f64>) {
    let lo = if i == 0 { None } else { Some(edges[i - 1]) };
    (lo, edges.get(i).copied())
}

/// Groups `(dlogp, base_prob, rl_prob)` samples into Δlog p bins.
pub fn dlogp_bins_summary(samples: &[(f64, f64, f64)], edges: &[f64]) -> Result<Vec<ProbBin>> {
    Histogram::check_edges(edges)?;
    let mut acc = vec![(0u64, 0.0, 0.0); edges.len() + 1];
    for &(d, b, r) in samples {
        let slot = &mut acc[Histogram::bin_of(edges, d)];
        slot.0 += 1;
        slot.1 += b;
        slot.2 += r;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(i, (count, b, r))| {
            let (lo, hi) = bin_bounds(edges, i);
            let denom = count.max(1) as f64;
            ProbBin {
                lo,
                hi,
                count,
                mean_base_prob: b / denom,
                mean_rl_prob: r / denom,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassBin {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub count: u64,
    pub count_share: f64,
    pub mass_share: f64,
}

/// Token-count share and gradient-mass share per old-probability bin. When
/// the total mass is zero the mass shares fall back to the count shares.
pub fn grad_mass_summary(records: &[GradRecord], edges: &[f64]) -> Result<Vec<MassBin>> {
    Histogram::check_edges(edges)?;
    let mut acc = vec![(0u64, 0.0); edges.len() + 1];
    for r in records {
        let slot = &mut acc[Histogram::bin_of(edges, r.old_prob)];
        slot.0 += 1;
        slot.1 += r.l1_grad_norm;
    }
    let n = records.len().max(1) as f64;
    let mass: f64 = acc.iter().map(|a| a.1).sum();
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(i, (count, m))| {
            let (lo, hi) = bin_bounds(edges, i);
            let count_share = count as f64 / n;
            MassBin {
                lo,
                hi,
                count,
                count_share,
                mass_share: if mass > 0.0 { m / mass } else { count_share },
            }
        })
        .collect())
}

/// Mass share over count share for tokens with `old_prob < threshold`.
pub fn low_prob_mass_ratio(records: &[GradRecord], threshold: f64) -> Option<f64> {
    let bins = grad_mass_summary(records, &[threshold]).ok()?;
    (bins[0].count_share > 0.0).then(|| bins[0].mass_share / bins[0].count_share)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TallyFilter {
    ReplacedOnly,
    /// The N events with the largest Δlog p, earlier events first on ties.
    TopDlogp(usize),
}

/// Token counts, descending, ties by token index.
pub fn token_tally(events: &[EventLine], filter: TallyFilter) -> Vec<(TokenId, u64)> {
    let chosen: Vec<&EventLine> = match filter {
        TallyFilter::ReplacedOnly => events.iter().filter(|e| e.src == crate::decode::TokenSource::Replaced).collect(),
        TallyFilter::TopDlogp(n) => {
            let mut sorted: Vec<&EventLine> = events.iter().collect();
            sorted.sort_by(|a, b| b.dlogp.total_cmp(&a.dlogp));
            sorted.truncate(n);
            sorted
        }
    };
    let mut counts: BTreeMap<TokenId, u64> = BTreeMap::new();
    for e in chosen {
        *counts.entry(e.tok).or_default() += 1;
    }
    let mut out: Vec<(TokenId, u64)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Problems × taus, one Avg@K per cell.
pub fn per_problem_matrix(rows: &[SweepRow]) -> Vec<Vec<f64>> {
    let problems = rows.first().map(|r| r.per_problem.len()).unwrap_or(0);
    (0..problems).map(|p| rows.iter().map(|r| r.per_problem[p]).collect()).collect()
}

pub fn fmt_bound(x: Option<f64>) -> String {
    match x {
        Some(v) => v.to_string(),
        None => String::new(),
    }
}

/// Writes rows of already-formatted cells under a header.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, std::io::Error::other(e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

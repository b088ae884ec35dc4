//! Vocabulary, bounded-context tabular softmax policies and nucleus sampling.
//!
//! A [`TabularPolicy`] stores one logit vector per context window of the last
//! `n` tokens. Unseen windows fall back to `default_logits`, which are zero
//! (uniform) for freshly pretrained policies.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;

/// Logit floor used where a token has zero smoothed count. `exp(-690)` is
/// about `1e-300`, so such tokens are effectively impossible but every stored
/// logit stays finite.
pub const MIN_LOGIT: f64 = -690.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 4 {
            return Err(LabError::Input(format!(
                "vocab needs at least 4 symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(LabError::Input(format!("duplicate vocab symbol {s:?}")));
            }
        }
        for (id, name) in [(BOS, "<bos>"), (EOS, "<eos>"), (PAD, "<pad>")] {
            if symbols[id] != name {
                return Err(LabError::Input(format!(
                    "vocab index {id} must be {name}, found {:?}",
                    symbols[id]
                )));
            }
        }
        Ok(Vocab { symbols, index })
    }

    /// Reserved symbols followed by the digits `0..base`, `+`, `*` and `=`.
    pub fn arithmetic(base: usize) -> Self {
        let mut symbols: Vec<String> = ["<bos>", "<eos>", "<pad>"].iter().map(|s| s.to_string()).collect();
        symbols.extend((0..base).map(|d| d.to_string()));
        symbols.extend(["+", "*", "="].iter().map(|s| s.to_string()));
        Vocab::new(symbols).expect("arithmetic vocab is well formed")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbols.get(t).map(String::as_str).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.symbols.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let symbols = Vec::<String>::deserialize(d)?;
        Vocab::new(symbols).map_err(serde::de::Error::custom)
    }
}

/// The last `n` tokens of a history, left-padded with BOS.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(Vec<TokenId>);

impl Context {
    pub fn window(n: usize, history: &[TokenId]) -> Self {
        let mut w = vec![BOS; n];
        let take = history.len().min(n);
        w[n - take..].copy_from_slice(&history[history.len() - take..]);
        Context(w)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A normalized categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TokenDist {
    /// Softmax of `logits / temperature`, computed with max subtraction.
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        Self::from_log_weights(&scaled)
    }

    /// Normalizes arbitrary (finite) log-weights.
    pub fn from_log_weights(weights: &[f64]) -> Self {
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = weights.iter().map(|w| (w - max).exp()).sum();
        let log_z = max + sum.ln();
        let log_probs: Vec<f64> = weights.iter().map(|w| w - log_z).collect();
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        TokenDist { probs, log_probs }
    }

    /// Builds a distribution from explicit probabilities (renormalized).
    pub fn from_probs(probs: &[f64]) -> Self {
        let total: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        TokenDist { probs, log_probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the most probable token; ties go to the lowest index.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Gradient of `ln softmax(z)[chosen]` with respect to `z`.
pub fn log_softmax_grad(dist: &TokenDist, chosen: TokenId) -> Vec<f64> {
    dist.probs
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == chosen { 1.0 - p } else { -p })
        .collect()
}

/// Tokens eligible under the nucleus rule with their renormalized
/// probabilities, in descending probability order (ties by ascending index).
pub fn nucleus(dist: &TokenDist, top_p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<TokenId> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist.probs[b].total_cmp(&dist.probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut cut = order.len();
    for (i, &t) in order.iter().enumerate() {
        cum += dist.probs[t];
        if cum >= top_p - 1e-12 {
            cut = i + 1;
            break;
        }
    }
    order.truncate(cut);
    let mass: f64 = order.iter().map(|&t| dist.probs[t]).sum();
    order.into_iter().map(|t| (t, dist.probs[t] / mass)).collect()
}

/// Inverse-CDF draw from the nucleus using a supplied uniform `u` in `[0, 1)`.
pub fn sample_with_uniform(dist: &TokenDist, top_p: f64, u: f64) -> TokenId {
    let eligible = nucleus(dist, top_p);
    let mut cum = 0.0;
    for &(t, p) in &eligible {
        cum += p;
        if u < cum {
            return t;
        }
    }
    eligible.last().map(|&(t, _)| t).unwrap_or(0)
}

pub fn sample_token<R: Rng + ?Sized>(dist: &TokenDist, top_p: f64, rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    sample_with_uniform(dist, top_p, u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub vocab: Vocab,
    pub n: usize,
    pub logits: BTreeMap<Context, Vec<f64>>,
    pub default_logits: Vec<f64>,
}

impl TabularPolicy {
    /// A policy with no stored contexts; every window maps to uniform.
    pub fn uniform(vocab: Vocab, n: usize) -> Result<Self> {
        if !(1..=4).contains(&n) {
            return Err(LabError::Input(format!("context width must be in 1..=4, got {n}")));
        }
        let v = vocab.len();
        Ok(TabularPolicy {
            vocab,
            n,
            logits: BTreeMap::new(),
            default_logits: vec![0.0; v],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn context(&self, history: &[TokenId]) -> Context {
        Context::window(self.n, history)
    }

    pub fn logits_for(&self, ctx: &Context) -> &[f64] {
        self.logits.get(ctx).map(Vec::as_slice).unwrap_or(&self.default_logits)
    }

    pub fn next_dist(&self, ctx: &Context, temperature: f64) -> TokenDist {
        TokenDist::from_logits(self.logits_for(ctx), temperature)
    }

    /// Distribution after `history` (prompt plus generated prefix).
    pub fn dist_after(&self, history: &[TokenId], temperature: f64) -> TokenDist {
        self.next_dist(&self.context(history), temperature)
    }

    /// Mutable logits for `ctx`, materializing the default row on first touch.
    pub fn logits_mut(&mut self, ctx: &Context) -> &mut Vec<f64> {
        let default = &self.default_logits;
        self.logits.entry(ctx.clone()).or_insert_with(|| default.clone())
    }

    /// `logits += scale * grad`, row by row.
    pub fn apply_gradient(&mut self, grad: &BTreeMap<Context, Vec<f64>>, scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (ctx, g) in grad {
            let row = self.logits_mut(ctx);
            for (z, d) in row.iter_mut().zip(g) {
                *z += scale * d;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyDoc {
            vocab: self.vocab.clone(),
            n: self.n,
            entries: self
                .logits
                .iter()
                .map(|(c, l)| PolicyEntry {
                    context: c.clone(),
                    logits: l.clone(),
                })
                .collect(),
            default_logits: self.default_logits.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDoc = serde_json::from_str(text)?;
        let v = doc.vocab.len();
        if !(1..=4).contains(&doc.n) {
            return Err(LabError::Input(format!("context width must be in 1..=4, got {}", doc.n)));
        }
        if doc.default_logits.len() != v {
            return Err(LabError::Input("default_logits length differs from vocab size".into()));
        }
        let mut logits = BTreeMap::new();
        for e in doc.entries {
            if e.context.len() != doc.n || e.logits.len() != v {
                return Err(LabError::Input("policy entry has wrong shape".into()));
            }
            if e.context.tokens().iter().any(|&t| t >= v) || e.logits.iter().any(|z| !z.is_finite()) {
                return Err(LabError::Input("policy entry has invalid token or non-finite logit".into()));
            }
            logits.insert(e.context, e.logits);
        }
        Ok(TabularPolicy {
            vocab: doc.vocab,
            n: doc.n,
            logits,
            default_logits: doc.default_logits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyEntry {
    context: Context,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    vocab: Vocab,
    n: usize,
    entries: Vec<PolicyEntry>,
    default_logits: Vec<f64>,
}

/// `ln(count + s) - ln(total + V*s)` per token, floored at [`MIN_LOGIT`].
pub fn smoothed_logits(counts: &[f64], smoothing: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + counts.len() as f64 * smoothing;
    let log_total = total.ln();
    counts
        .iter()
        .map(|&c| {
            let w = c + smoothing;
            if w > 0.0 {
                w.ln() - log_total
            } else {
                MIN_LOGIT
            }
        })
        .collect()
}

/// Add-`smoothing` maximum-likelihood fit of a context table.
///
/// Only contexts that occur in the corpus get a row. Each sequence is scored
/// as `seq` followed by nothing: callers include EOS themselves.
pub fn mle_pretrain(vocab: &Vocab, corpus: &[Vec<TokenId>], n: usize, smoothing: f64) -> Result<TabularPolicy> {
    if corpus.is_empty() {
        return Err(LabError::config("pretrain.corpus", "corpus is empty"));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(LabError::config("pretrain.smoothing", "must be a finite nonnegative number"));
    }
    let mut policy = TabularPolicy::uniform(vocab.clone(), n)?;
    let v = vocab.len();
    let mut counts: BTreeMap<Context, Vec<f64>> = BTreeMap::new();
    for seq in corpus {
        for (t, &tok) in seq.iter().enumerate() {
            if tok >= v {
                return Err(LabError::Input(format!("corpus token {tok} outside vocab of size {v}")));
            }
            let ctx = Context::window(n, &seq[..t]);
            counts.entry(ctx).or_insert_with(|| vec![0.0; v])[tok] += 1.0;
        }
    }
    for (ctx, row) in counts {
        policy.logits.insert(ctx, smoothed_logits(&row, smoothing));
    }
    Ok(policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn toy_vocab() -> Vocab {
        Vocab::new(["<bos>", "<eos>", "<pad>", "A", "B", "C"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn vocab_rejects_bad_layouts() {
        assert!(Vocab::new(vec!["<bos>".into(), "<eos>".into(), "<pad>".into()]).is_err());
        let dup = ["<bos>", "<eos>", "<pad>", "x", "x"].iter().map(|s| s.to_string()).collect();
        assert!(Vocab::new(dup).is_err());
        let swapped = ["<eos>", "<bos>", "<pad>", "x"].iter().map(|s| s.to_string()).collect();
        assert!(Vocab::new(swapped).is_err());
    }

    #[test]
    fn context_left_pads_with_bos() {
        assert_eq!(Context::window(3, &[5]).tokens(), &[BOS, BOS, 5]);
        assert_eq!(Context::window(2, &[4, 5, 6]).tokens(), &[5, 6]);
        assert_eq!(Context::window(1, &[]).tokens(), &[BOS]);
    }

    #[test]
    fn softmax_examples() {
        let d = TokenDist::from_logits(&[0.0; 4], 1.0);
        for p in &d.probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let d = TokenDist::from_logits(&[2f64.ln(), 0.0], 1.0);
        assert!((d.probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d.probs[1] - 1.0 / 3.0).abs() < 1e-15);
        let d = TokenDist::from_logits(&[1.0, 0.0], 1000.0);
        assert!((d.probs[0] - 0.5).abs() < 1e-3 && (d.probs[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn nucleus_examples() {
        let d = TokenDist::from_probs(&[0.7, 0.2, 0.1]);
        assert_eq!(nucleus(&d, 0.7), vec![(0, 1.0)]);
        let mut rng = seed::stream(1);
        for _ in 0..200 {
            assert_eq!(sample_token(&d, 0.7, &mut rng), 0);
        }
        let d = TokenDist::from_probs(&[0.5, 0.3, 0.2]);
        let e = nucleus(&d, 0.75);
        assert_eq!(e.len(), 2);
        assert!((e[0].1 - 0.625).abs() < 1e-12 && (e[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn nucleus_ties_break_by_index() {
        let d = TokenDist::from_probs(&[0.25, 0.25, 0.25, 0.25]);
        let e = nucleus(&d, 0.5);
        assert_eq!(e.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(sample_with_uniform(&d, 1e-9, 0.99), 0);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let d = TokenDist::from_probs(&[0.25; 4]);
        let mut rng = seed::stream(42);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_token(&d, 1.0, &mut rng)] += 1;
        }
        let mut chi2 = 0.0;
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.25).abs() < 0.01);
            let e = draws as f64 * 0.25;
            chi2 += (c as f64 - e).powi(2) / e;
        }
        // 3 degrees of freedom, 0.999 quantile
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn log_softmax_grad_examples() {
        let g = log_softmax_grad(&TokenDist::from_probs(&[0.5, 0.5]), 0);
        assert_eq!(g, vec![0.5, -0.5]);
        let g = log_softmax_grad(&TokenDist::from_probs(&[0.9, 0.1]), 1);
        assert!((g[0] + 0.9).abs() < 1e-15 && (g[1] - 0.9).abs() < 1e-15);
        let d = TokenDist::from_logits(&[0.3, -1.2, 2.0, 0.0, 0.7], 1.0);
        for k in 0..5 {
            assert!(log_softmax_grad(&d, k).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn mle_examples() {
        let v = toy_vocab();
        let (a, b, c) = (3, 4, 5);
        let p = mle_pretrain(&v, &[vec![a, b]], 1, 0.0).unwrap();
        let d = p.next_dist(&Context::window(1, &[a]), 1.0);
        assert_eq!(d.probs[b], 1.0);
        assert!(p.logits.values().flatten().all(|z| z.is_finite()));

        let corpus = vec![vec![a, b], vec![a, b], vec![a, b], vec![a, c]];
        let p = mle_pretrain(&v, &corpus, 1, 0.0).unwrap();
        let d = p.next_dist(&Context::window(1, &[a]), 1.0);
        assert!((d.probs[b] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mle_smoothing_on_empty_row_is_uniform() {
        let d = TokenDist::from_logits(&smoothed_logits(&[0.0; 4], 1.0), 1.0);
        assert!(d.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let v = Vocab::new(["<bos>", "<eos>", "<pad>", "A"].iter().map(|s| s.to_string()).collect()).unwrap();
        // row for context [A] sees only EOS, but with smoothing 1 and one
        // observation the unseen context [EOS] stays at default (uniform)
        let p = mle_pretrain(&v, &[vec![3, EOS]], 1, 1.0).unwrap();
        let d = p.next_dist(&Context::window(1, &[EOS]), 1.0);
        for x in &d.probs {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert!(mle_pretrain(&v, &[], 1, 1.0).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let v = toy_vocab();
        let corpus = vec![vec![3, 4, 5, EOS], vec![3, 5, EOS], vec![4, 4, 3, EOS]];
        let p = mle_pretrain(&v, &corpus, 2, 0.37).unwrap();
        let back = TabularPolicy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        for (ctx, row) in &p.logits {
            let other = &back.logits[ctx];
            for (x, y) in row.iter().zip(other) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

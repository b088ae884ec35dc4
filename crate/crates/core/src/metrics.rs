//! Token-level comparison metrics between a base and an RL policy, and the
//! threshold gates built on them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{TokenDist, TokenId};

/// Probabilities below this are clamped inside logarithms of the second
/// argument of a KL divergence.
const KL_FLOOR: f64 = 1e-300;

pub fn entropy(dist: &TokenDist) -> f64 {
    -dist
        .probs
        .iter()
        .zip(&dist.log_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum::<f64>()
}

/// `sum_y p(y) ln(p(y) / q(y))`.
pub fn kl_divergence(p: &TokenDist, q: &TokenDist) -> f64 {
    let mut total = 0.0;
    for y in 0..p.len() {
        let py = p.probs[y];
        if py <= 0.0 {
            continue;
        }
        let lq = if q.probs[y] < KL_FLOOR { KL_FLOOR.ln() } else { q.log_probs[y] };
        total += py * (p.log_probs[y] - lq);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlVariant {
    /// KL(rl || base)
    RlBase,
    /// KL(base || rl)
    BaseRl,
    Avg,
}

pub fn kl(rl: &TokenDist, base: &TokenDist, variant: KlVariant) -> f64 {
    match variant {
        KlVariant::RlBase => kl_divergence(rl, base),
        KlVariant::BaseRl => kl_divergence(base, rl),
        KlVariant::Avg => 0.5 * (kl_divergence(rl, base) + kl_divergence(base, rl)),
    }
}

/// `ln pi_rl(token) - ln pi_base(token)`.
pub fn delta_logp(base: &TokenDist, rl: &TokenDist, token: TokenId) -> f64 {
    rl.log_probs[token] - base.log_probs[token]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionMetrics {
    pub entropy_base: f64,
    pub entropy_rl: f64,
    pub kl_rl_base: f64,
    pub kl_base_rl: f64,
    pub kl_avg: f64,
    pub dlogp: f64,
}

impl PositionMetrics {
    pub fn compute(base: &TokenDist, rl: &TokenDist, token: TokenId) -> Self {
        let kl_rl_base = kl_divergence(rl, base);
        let kl_base_rl = kl_divergence(base, rl);
        PositionMetrics {
            entropy_base: entropy(base),
            entropy_rl: entropy(rl),
            kl_rl_base,
            kl_base_rl,
            kl_avg: 0.5 * (kl_rl_base + kl_base_rl),
            dlogp: delta_logp(base, rl, token),
        }
    }

    /// Same distributions, Δlog p re-evaluated for another token.
    pub fn with_token(mut self, base: &TokenDist, rl: &TokenDist, token: TokenId) -> Self {
        self.dlogp = delta_logp(base, rl, token);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    EntropyBase,
    EntropyRl,
    KlRlBase,
    KlBaseRl,
    KlAvg,
    LogpDiff,
    Random,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 7] = [
        CriterionKind::EntropyBase,
        CriterionKind::EntropyRl,
        CriterionKind::KlRlBase,
        CriterionKind::KlBaseRl,
        CriterionKind::KlAvg,
        CriterionKind::LogpDiff,
        CriterionKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::EntropyBase => "entropy_base",
            CriterionKind::EntropyRl => "entropy_rl",
            CriterionKind::KlRlBase => "kl_rl_base",
            CriterionKind::KlBaseRl => "kl_base_rl",
            CriterionKind::KlAvg => "kl_avg",
            CriterionKind::LogpDiff => "logp_diff",
            CriterionKind::Random => "random",
        }
    }

    /// The metric a gate of this kind thresholds; `None` for the random gate.
    pub fn metric(self, m: &PositionMetrics) -> Option<f64> {
        match self {
            CriterionKind::EntropyBase => Some(m.entropy_base),
            CriterionKind::EntropyRl => Some(m.entropy_rl),
            CriterionKind::KlRlBase => Some(m.kl_rl_base),
            CriterionKind::KlBaseRl => Some(m.kl_base_rl),
            CriterionKind::KlAvg => Some(m.kl_avg),
            CriterionKind::LogpDiff => Some(m.dlogp),
            CriterionKind::Random => None,
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriterionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CriterionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown criterion {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub kind: CriterionKind,
    #[serde(with = "extended_f64")]
    pub tau: f64,
}

impl Criterion {
    pub fn new(kind: CriterionKind, tau: f64) -> Self {
        Criterion { kind, tau }
    }

    /// A gate that never fires. The random gate still consumes its draw.
    pub fn never() -> Self {
        Criterion::new(CriterionKind::Random, 0.0)
    }
}

/// Reals that may be infinite, written as `"inf"` / `"-inf"` since JSON has no
/// literal for them.
pub mod extended_f64 {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_infinite() {
            s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*x)
        }
    }

    struct ExtVisitor;

    impl Visitor<'_> for ExtVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number, \"inf\" or \"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(ExtVisitor)
    }

    /// The same encoding for a list.
    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        #[derive(Serialize, Deserialize)]
        struct Ext(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for &x in xs {
                seq.serialize_element(&Ext(x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Ext>::deserialize(d)?.into_iter().map(|e| e.0).collect())
        }
    }
}

/// Whether the gate fires at a position. The Δlog p gate fires strictly below
/// `tau`, magnitude gates strictly above, and the random gate consumes exactly
/// one uniform draw from `gate_rng` and fires with probability `tau`.
pub fn criterion_fire<R: Rng + ?Sized>(cfg: &Criterion, m: &PositionMetrics, gate_rng: &mut R) -> bool {
    match cfg.kind {
        CriterionKind::Random => {
            let rho: f64 = gate_rng.gen();
            rho < cfg.tau
        }
        CriterionKind::LogpDiff => m.dlogp < cfg.tau,
        kind => kind.metric(m).expect("metric gate") > cfg.tau,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_dist<R: Rng>(rng: &mut R, v: usize) -> TokenDist {
        let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        TokenDist::from_logits(&logits, 1.0)
    }

    fn naive_entropy(p: &[f64]) -> f64 {
        let mut h = 0.0;
        for &x in p {
            if x > 0.0 {
                h -= x * x.ln();
            }
        }
        h
    }

    fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
        let mut d = 0.0;
        for i in 0..p.len() {
            if p[i] > 0.0 {
                d += p[i] * (p[i] / q[i]).ln();
            }
        }
        d
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&TokenDist::from_probs(&[0.25; 4])) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&TokenDist::from_probs(&[1.0, 0.0, 0.0])), 0.0);
        let h = entropy(&TokenDist::from_probs(&[0.5, 0.25, 0.25]));
        assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((h - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let p = TokenDist::from_probs(&[0.5, 0.5]);
        let q = TokenDist::from_probs(&[0.25, 0.75]);
        let d = kl_divergence(&p, &q);
        assert!((d - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((d - 0.143841).abs() < 1e-6);
        for v in [KlVariant::RlBase, KlVariant::BaseRl, KlVariant::Avg] {
            assert_eq!(kl(&p, &p, v), 0.0);
        }
    }

    #[test]
    fn kl_clamps_vanishing_reference() {
        let p = TokenDist::from_probs(&[0.5, 0.5]);
        let q = TokenDist {
            probs: vec![1.0, 0.0],
            log_probs: vec![0.0, f64::NEG_INFINITY],
        };
        let d = kl_divergence(&p, &q);
        assert!(d.is_finite() && d > 0.0);
    }

    #[test]
    fn random_pairs_gibbs_symmetry_and_oracle() {
        let mut rng = seed::stream(11);
        for _ in 0..1000 {
            let v = rng.gen_range(2..20);
            let p = random_dist(&mut rng, v);
            let q = random_dist(&mut rng, v);
            let d = kl_divergence(&p, &q);
            assert!(d >= 0.0);
            assert!((d - naive_kl(&p.probs, &q.probs)).abs() < 1e-12);
            assert!((kl(&p, &q, KlVariant::Avg) - kl(&q, &p, KlVariant::Avg)).abs() < 1e-12);
            let h = entropy(&p);
            assert!(h >= 0.0 && h <= (v as f64).ln() + 1e-12);
            assert!((h - naive_entropy(&p.probs)).abs() < 1e-12);
            assert!(kl_divergence(&p, &p).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_logp_examples() {
        let base = TokenDist::from_probs(&[0.2, 0.8]);
        let rl = TokenDist::from_probs(&[0.6, 0.4]);
        assert!((delta_logp(&base, &rl, 0) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(delta_logp(&base, &base, 1), 0.0);
        assert_eq!(delta_logp(&base, &rl, 1), -delta_logp(&rl, &base, 1));
        assert_eq!(delta_logp(&base, &rl, 1), rl.log_probs[1] - base.log_probs[1]);
    }

    #[test]
    fn position_metrics_invariants() {
        let mut rng = seed::stream(5);
        for _ in 0..200 {
            let base = random_dist(&mut rng, 8);
            let rl = random_dist(&mut rng, 8);
            let m = PositionMetrics::compute(&base, &rl, 3);
            assert_eq!(m.kl_avg, (m.kl_rl_base + m.kl_base_rl) / 2.0);
            assert!(m.entropy_base >= 0.0 && m.entropy_rl <= 8f64.ln() + 1e-12);
        }
    }

    #[test]
    fn gate_examples() {
        let mut rng = seed::stream(0);
        let m = PositionMetrics {
            entropy_base: 1.0,
            entropy_rl: 0.5,
            kl_rl_base: 0.1,
            kl_base_rl: 0.2,
            kl_avg: 0.15,
            dlogp: -0.7,
        };
        assert!(criterion_fire(&Criterion::new(CriterionKind::LogpDiff, -0.4), &m, &mut rng));
        assert!(!criterion_fire(&Criterion::new(CriterionKind::LogpDiff, -0.7), &m, &mut rng));
        assert!(!criterion_fire(&Criterion::new(CriterionKind::EntropyBase, 1.0), &m, &mut rng));
        assert!(criterion_fire(&Criterion::new(CriterionKind::KlAvg, 0.1), &m, &mut rng));
        for _ in 0..1000 {
            assert!(!criterion_fire(&Criterion::new(CriterionKind::Random, 0.0), &m, &mut rng));
            assert!(criterion_fire(&Criterion::new(CriterionKind::Random, 1.0), &m, &mut rng));
        }
    }

    #[test]
    fn random_gate_consumes_one_draw_per_call() {
        let m = PositionMetrics {
            entropy_base: 0.0,
            entropy_rl: 0.0,
            kl_rl_base: 0.0,
            kl_base_rl: 0.0,
            kl_avg: 0.0,
            dlogp: 0.0,
        };
        let mut a = seed::stream(9);
        let mut b = seed::stream(9);
        for _ in 0..5 {
            criterion_fire(&Criterion::new(CriterionKind::Random, 0.5), &m, &mut a);
        }
        for _ in 0..5 {
            let _: f64 = b.gen();
        }
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        // metric gates leave the stream untouched
        let mut c = seed::stream(9);
        criterion_fire(&Criterion::new(CriterionKind::KlAvg, 0.5), &m, &mut c);
        assert_eq!(c.gen::<u64>(), seed::stream(9).gen::<u64>());
    }

    #[test]
    fn criterion_names_round_trip() {
        for k in CriterionKind::ALL {
            assert_eq!(k.name().parse::<CriterionKind>().unwrap(), k);
        }
        assert!("nope".parse::<CriterionKind>().is_err());
    }
}

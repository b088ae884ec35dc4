use crate::policy::{log_softmax_grad, TokenDist, TokenId};

/// `2 |w| (1 - p)`: the l1 norm of `w * d ln softmax(z)_k / dz`.
pub fn lemma1_norm(w: f64, p: f64) -> f64 {
    2.0 * w.abs() * (1.0 - p)
}

pub fn lemma1_grad_norm(w: f64, dist: &TokenDist, token: TokenId) -> f64 {
    lemma1_norm(w, dist.probs[token])
}

fn log_softmax_at(logits: &[f64], token: TokenId) -> f64 {
    TokenDist::from_logits(logits, 1.0).log_probs[token]
}

/// Central-difference gradient of `ln softmax(z)_token`.
pub fn fd_log_softmax_grad(logits: &[f64], token: TokenId, h: f64) -> Vec<f64> {
    (0..logits.len())
        .map(|j| {
            let mut plus = logits.to_vec();
            plus[j] += h;
            let mut minus = logits.to_vec();
            minus[j] -= h;
            (log_softmax_at(&plus, token) - log_softmax_at(&minus, token)) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Lemma1Check {
    pub analytic: f64,
    pub finite_difference: f64,
    /// `|analytic - fd| / max(1, analytic)`.
    pub rel_error: f64,
}

pub fn verify_lemma1_fd(logits: &[f64], token: TokenId, w: f64) -> Lemma1Check {
    let dist = TokenDist::from_logits(logits, 1.0);
    let analytic = lemma1_grad_norm(w, &dist, token);
    let finite_difference: f64 = fd_log_softmax_grad(logits, token, 1e-6).iter().map(|g| (w * g).abs()).sum();
    Lemma1Check {
        analytic,
        finite_difference,
        rel_error: (analytic - finite_difference).abs() / analytic.max(1.0),
    }
}

/// Largest absolute gap between the analytic score and finite differences.
pub fn verify_log_softmax_grad_fd(logits: &[f64], token: TokenId) -> f64 {
    let analytic = log_softmax_grad(&TokenDist::from_logits(logits, 1.0), token);
    analytic
        .iter()
        .zip(fd_log_softmax_grad(logits, token, 1e-6))
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn lemma1_examples() {
        let certain = TokenDist::from_probs(&[0.0, 1.0, 0.0]);
        assert_eq!(lemma1_grad_norm(3.0, &certain, 1), 0.0);
        let d = TokenDist::from_probs(&[0.25, 0.75]);
        assert_eq!(lemma1_grad_norm(2.0, &d, 0), 3.0);
        let v = 8;
        let c = verify_lemma1_fd(&vec![0.0; v], 2, 1.0);
        assert!((c.analytic - 2.0 * (1.0 - 1.0 / v as f64)).abs() < 1e-15);
        assert_eq!(verify_lemma1_fd(&[0.3, -0.2, 1.0], 0, 0.0).finite_difference, 0.0);
    }

    #[test]
    fn lemma1_matches_score_norm_and_fd() {
        let mut rng = seed::stream(12);
        for _ in 0..1000 {
            let v = rng.gen_range(2..40);
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let dist = TokenDist::from_logits(&logits, 1.0);
            let k = rng.gen_range(0..v);
            let w = rng.gen_range(-3.0..3.0);
            let l1: f64 = log_softmax_grad(&dist, k).iter().map(|g| (w * g).abs()).sum();
            assert!((l1 - lemma1_grad_norm(w, &dist, k)).abs() < 1e-12);
        }
        for _ in 0..100 {
            let logits: Vec<f64> = (0..32).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let c = verify_lemma1_fd(&logits, rng.gen_range(0..32), rng.gen_range(-2.0..2.0));
            assert!(c.rel_error <= 1e-5, "{c:?}");
            assert!(verify_log_softmax_grad_fd(&logits, 5) < 1e-6);
        }
    }
}

//! Softmax bandits under natural policy gradient, and executable checks that
//! extrapolating along `theta_t - theta_0` never lowers expected reward.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::policy::TokenDist;
use crate::seed;

pub fn softmax(theta: &[f64]) -> Vec<f64> {
    TokenDist::from_logits(theta, 1.0).probs
}

/// Accumulated relative to the first reward, so constant rewards come back
/// exactly.
pub fn expected_reward(theta: &[f64], rewards: &[f64]) -> f64 {
    let r0 = rewards[0];
    r0 + softmax(theta).iter().zip(rewards).map(|(p, r)| p * (r - r0)).sum::<f64>()
}

pub fn bandit_advantage(theta: &[f64], rewards: &[f64]) -> Vec<f64> {
    let j = expected_reward(theta, rewards);
    rewards.iter().map(|r| r - j).collect()
}

pub fn npg_step(theta: &[f64], rewards: &[f64], eta: f64) -> Vec<f64> {
    theta.iter().zip(bandit_advantage(theta, rewards)).map(|(t, a)| t + eta * a).collect()
}

pub fn extrapolate_params(theta_t: &[f64], theta0: &[f64], gamma: f64) -> Vec<f64> {
    theta_t.iter().zip(theta0).map(|(t, o)| t + gamma * (t - o)).collect()
}

fn displacement(theta_t: &[f64], theta0: &[f64]) -> Vec<f64> {
    theta_t.iter().zip(theta0).map(|(t, o)| t - o).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(1/|d|) sum_y pi(y) A(y) d_y` at `theta_t`, with `d = theta_t - theta0`;
/// zero when `d` vanishes.
pub fn directional_derivative(theta_t: &[f64], theta0: &[f64], rewards: &[f64]) -> f64 {
    let d = displacement(theta_t, theta0);
    let n = norm(&d);
    if n == 0.0 {
        return 0.0;
    }
    let pi = softmax(theta_t);
    let a = bandit_advantage(theta_t, rewards);
    pi.iter().zip(&a).zip(&d).map(|((p, a), d)| p * a * d).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub rewards: Vec<f64>,
    pub theta0: Vec<f64>,
    pub eta: f64,
    pub trajectory: Vec<Vec<f64>>,
}

impl BanditInstance {
    pub fn new(rewards: Vec<f64>, theta0: Option<Vec<f64>>, eta: f64) -> Self {
        let theta0 = theta0.unwrap_or_else(|| vec![0.0; rewards.len()]);
        BanditInstance {
            trajectory: vec![theta0.clone()],
            rewards,
            theta0,
            eta,
        }
    }

    pub fn run(&mut self, steps: usize) {
        for _ in 0..steps {
            let next = npg_step(self.trajectory.last().unwrap(), &self.rewards, self.eta);
            self.trajectory.push(next);
        }
    }

    fn range(&self) -> f64 {
        let hi = self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = self.rewards.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

pub const DEFAULT_GAMMA_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub instance: usize,
    pub step: usize,
    pub kind: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceReport {
    pub violations: Vec<Violation>,
    /// Smallest directional derivative over steps.
    pub worst_derivative: f64,
    /// Smallest best-over-grid reward change from extrapolating.
    pub worst_gamma_margin: f64,
    pub max_abs_derivative: f64,
}

/// Runs NPG and checks each step's directional derivative and grid-γ
/// improvement.
pub fn verify_theorem1(instance: &mut BanditInstance, steps: usize, gamma_grid: &[f64]) -> InstanceReport {
    instance.run(steps.saturating_sub(instance.trajectory.len() - 1));
    let mut report = InstanceReport {
        violations: Vec::new(),
        worst_derivative: f64::INFINITY,
        worst_gamma_margin: f64::INFINITY,
        max_abs_derivative: 0.0,
    };
    let nonconstant = instance.range() > 1e-6;
    for t in 1..=steps {
        let theta = &instance.trajectory[t];
        let dd = directional_derivative(theta, &instance.theta0, &instance.rewards);
        report.worst_derivative = report.worst_derivative.min(dd);
        report.max_abs_derivative = report.max_abs_derivative.max(dd.abs());
        let mut flag = |kind: &str, value: f64| {
            report.violations.push(Violation { instance: 0, step: t, kind: kind.into(), value });
        };
        if dd < -1e-10 {
            flag("negative_derivative", dd);
        }
        if nonconstant && dd <= 0.0 {
            flag("derivative_not_positive", dd);
        }
        let j = expected_reward(theta, &instance.rewards);
        let best = gamma_grid
            .iter()
            .map(|&g| expected_reward(&extrapolate_params(theta, &instance.theta0, g), &instance.rewards) - j)
            .fold(f64::NEG_INFINITY, f64::max);
        report.worst_gamma_margin = report.worst_gamma_margin.min(best);
        if best < -1e-12 {
            flag("no_improving_gamma", best);
        }
    }
    report
}

/// Checks that `d_t = theta_t - theta_0` is ordered like the rewards and the
/// Chebyshev sum inequality at every step.
pub fn verify_ordering_and_chebyshev(instance: &mut BanditInstance, steps: usize) -> Vec<Violation> {
    instance.run(steps.saturating_sub(instance.trajectory.len() - 1));
    let r = &instance.rewards;
    let mut violations = Vec::new();
    for t in 1..=steps {
        let d = displacement(&instance.trajectory[t], &instance.theta0);
        let mut ordered = true;
        for a in 0..r.len() {
            for b in 0..r.len() {
                let dr = r[a] - r[b];
                let dd = d[a] - d[b];
                if dr.abs() <= 1e-12 {
                    ordered &= dd.abs() <= 1e-9;
                } else if dr > 0.0 {
                    ordered &= dd > 0.0;
                }
            }
        }
        if !ordered {
            violations.push(Violation { instance: 0, step: t, kind: "ordering".into(), value: 0.0 });
        }
        let pi = softmax(&instance.trajectory[t]);
        let a = bandit_advantage(&instance.trajectory[t], r);
        let s_pi: f64 = pi.iter().sum();
        let s_pad: f64 = pi.iter().zip(&a).zip(&d).map(|((p, a), d)| p * a * d).sum();
        let s_pa: f64 = pi.iter().zip(&a).map(|(p, a)| p * a).sum();
        let s_pd: f64 = pi.iter().zip(&d).map(|(p, d)| p * d).sum();
        let gap = s_pi * s_pad - s_pa * s_pd;
        if gap < -1e-12 {
            violations.push(Violation { instance: 0, step: t, kind: "chebyshev".into(), value: gap });
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub steps: usize,
    pub violations: Vec<Violation>,
    pub worst_derivative: f64,
    pub worst_gamma_margin: f64,
    /// Largest |derivative| over the constant-reward instances.
    pub constant_reward_max_abs_derivative: f64,
}

/// Random instances: `arms` uniform in 2..=10, rewards iid uniform, `eta`
/// alternating over `etas`, every fourth start randomized, plus one
/// constant-reward instance per 50.
pub fn random_instance(seed_value: u64, index: usize, etas: &[f64]) -> BanditInstance {
    let mut rng = seed::stream(seed::derive(seed_value, "bandit", index as u64));
    let arms = rng.gen_range(2..=10);
    let rewards: Vec<f64> = if index % 50 == 49 {
        vec![rng.gen(); arms]
    } else {
        (0..arms).map(|_| rng.gen()).collect()
    };
    let theta0 = (index % 4 == 3).then(|| (0..arms).map(|_| rng.gen_range(-2.0..2.0)).collect());
    BanditInstance::new(rewards, theta0, etas[index % etas.len()])
}

pub fn run_suite(seed_value: u64, instances: usize, steps: usize, etas: &[f64], gamma_grid: &[f64]) -> SuiteReport {
    let results: Vec<(InstanceReport, Vec<Violation>, bool)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut inst = random_instance(seed_value, i, etas);
            let mut t1 = verify_theorem1(&mut inst, steps, gamma_grid);
            let mut order = verify_ordering_and_chebyshev(&mut inst, steps);
            for v in t1.violations.iter_mut().chain(order.iter_mut()) {
                v.instance = i;
            }
            let constant = inst.range() == 0.0;
            (t1, order, constant)
        })
        .collect();
    let mut report = SuiteReport {
        instances,
        steps,
        violations: Vec::new(),
        worst_derivative: f64::INFINITY,
        worst_gamma_margin: f64::INFINITY,
        constant_reward_max_abs_derivative: 0.0,
    };
    for (t1, order, constant) in results {
        report.worst_derivative = report.worst_derivative.min(t1.worst_derivative);
        report.worst_gamma_margin = report.worst_gamma_margin.min(t1.worst_gamma_margin);
        if constant {
            report.constant_reward_max_abs_derivative = report.constant_reward_max_abs_derivative.max(t1.max_abs_derivative);
        }
        report.violations.extend(t1.violations);
        report.violations.extend(order);
    }
    report
}

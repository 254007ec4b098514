//! Neural upper-level policy.
//!
//! The network reads `ν` concatenated with a one-hot arrival level and emits
//! one unconstrained real per `(z̄, u)` entry of a decision rule. Exploration
//! adds diagonal Gaussian noise in that unconstrained space; a rule is then
//! obtained by flooring every entry at [`ACTION_FLOOR`] and normalizing each
//! row. The log-density used for policy gradients is that of the Gaussian
//! action before normalization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::UpperLevelPolicy;
use crate::error::{Error, Result};
use crate::model::{num_tuples, DecisionRule, QueueDist};
use crate::nn::Mlp;
use crate::rng::SimRng;

pub const ACTION_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpperPolicy {
    pub buffer: usize,
    pub d: usize,
    pub num_levels: usize,
    pub net: Mlp,
    pub log_std: Vec<f64>,
    pub mode: PolicyMode,
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub rule: DecisionRule,
    /// Network output (Gaussian mean).
    pub mean: Vec<f64>,
    /// Sampled unconstrained action; equals `mean` in deterministic mode.
    pub raw_action: Vec<f64>,
    /// Gaussian log-density of `raw_action`; `None` in deterministic mode.
    pub log_prob: Option<f64>,
}

impl UpperPolicy {
    pub fn input_size(buffer: usize, num_levels: usize) -> usize {
        buffer + 1 + num_levels
    }

    pub fn output_size(buffer: usize, d: usize) -> usize {
        num_tuples(buffer, d) * d
    }

    /// Random hidden layers with a zero output layer whose bias is
    /// `output_bias`, so the initial deterministic rule is uniform.
    pub fn new<R: Rng + ?Sized>(
        buffer: usize,
        d: usize,
        num_levels: usize,
        hidden: &[usize],
        output_bias: f64,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![Self::input_size(buffer, num_levels)];
        sizes.extend_from_slice(hidden);
        sizes.push(Self::output_size(buffer, d));
        let net = Mlp::init(&sizes, 0.0, output_bias, rng);
        let log_std = vec![init_log_std; Self::output_size(buffer, d)];
        Self { buffer, d, num_levels, net, log_std, mode: PolicyMode::Deterministic }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn observe(&self, nu: &QueueDist, level: usize) -> Vec<f64> {
        observation(nu, level, self.num_levels)
    }

    pub fn with_mode(mut self, mode: PolicyMode) -> Self {
        self.mode = mode;
        self
    }
}

pub fn observation(nu: &QueueDist, level: usize, num_levels: usize) -> Vec<f64> {
    let mut obs = nu.probs().to_vec();
    obs.extend((0..num_levels).map(|k| if k == level { 1.0 } else { 0.0 }));
    obs
}

/// Floors each entry at [`ACTION_FLOOR`] and normalizes every row of `d`.
pub fn normalize_action(buffer: usize, d: usize, action: &[f64]) -> Result<DecisionRule> {
    if action.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("policy action"));
    }
    let mut table: Vec<f64> = action.iter().map(|&x| x.max(ACTION_FLOOR)).collect();
    for row in table.chunks_mut(d) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    DecisionRule::new(buffer, d, table)
}

pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn policy_decision_rule(
    policy: &UpperPolicy,
    nu: &QueueDist,
    level: usize,
    rng: &mut SimRng,
    mode: PolicyMode,
) -> Result<PolicyOutput> {
    let obs = policy.observe(nu, level);
    let mean = policy.net.forward(DMatrix::from_column_slice(obs.len(), 1, &obs)).as_slice().to_vec();
    if mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("policy network output"));
    }
    let (raw_action, log_prob) = match mode {
        PolicyMode::Deterministic => (mean.clone(), None),
        PolicyMode::Stochastic => {
            let a: Vec<f64> = mean
                .iter()
                .zip(&policy.log_std)
                .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let lp = gaussian_log_prob(&a, &mean, &policy.log_std);
            (a, Some(lp))
        }
    };
    let rule = normalize_action(policy.buffer, policy.d, &raw_action)?;
    Ok(PolicyOutput { rule, mean, raw_action, log_prob })
}

impl UpperLevelPolicy for UpperPolicy {
    fn decision_rule(&self, nu: &QueueDist, level: usize, rng: &mut SimRng) -> Result<DecisionRule> {
        Ok(policy_decision_rule(self, nu, level, rng, self.mode)?.rule)
    }

    fn name(&self) -> String {
        "learned".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn policy(seed: u64) -> UpperPolicy {
        UpperPolicy::new(5, 2, 2, &[32, 32], 1.0, 0.0, &mut SimRng::seed_from_u64(seed))
    }

    #[test]
    fn zero_network_gives_uniform_rule() {
        let mut p = policy(0);
        for l in p.net.layers.iter_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let out = policy_decision_rule(&p, &QueueDist::uniform(5), 1, &mut SimRng::seed_from_u64(0), PolicyMode::Deterministic)
            .unwrap();
        assert!(out.rule.table().iter().all(|&x| x == 0.5));
        assert!(out.log_prob.is_none());
    }

    #[test]
    fn initial_policy_is_uniform() {
        let p = policy(3);
        let nu = QueueDist::new(vec![0.2, 0.3, 0.1, 0.1, 0.2, 0.1]).unwrap();
        let h = p.decision_rule(&nu, 0, &mut SimRng::seed_from_u64(0)).unwrap();
        assert!(h.table().iter().all(|&x| x == 0.5));
        assert_eq!(p.net.sizes(), vec![8, 32, 32, 72]);
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let mut p = policy(5);
        p.net.layers[2].weight.fill(0.01);
        let nu = QueueDist::new(vec![0.5, 0.1, 0.1, 0.1, 0.1, 0.1]).unwrap();
        let a = policy_decision_rule(&p, &nu, 1, &mut SimRng::seed_from_u64(1), PolicyMode::Deterministic).unwrap();
        let b = policy_decision_rule(&p, &nu, 1, &mut SimRng::seed_from_u64(2), PolicyMode::Deterministic).unwrap();
        assert_eq!(a.rule, b.rule);
    }

    #[test]
    fn stochastic_rules_stay_row_stochastic() {
        let p = policy(9);
        let mut rng = SimRng::seed_from_u64(4);
        let nu = QueueDist::uniform(5);
        for i in 0..10_000 {
            let out = policy_decision_rule(&p, &nu, i % 2, &mut rng, PolicyMode::Stochastic).unwrap();
            for r in 0..out.rule.num_rows() {
                let row = out.rule.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&x| x > 0.0));
            }
            let lp = gaussian_log_prob(&out.raw_action, &out.mean, &p.log_std);
            assert_eq!(out.log_prob, Some(lp));
        }
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let lp = gaussian_log_prob(&[1.0, -1.0], &[0.0, 0.0], &[0.0, (2f64).ln()]);
        let expect = -0.5 - 0.5 * LN_2PI + (-0.125 - 2f64.ln() - 0.5 * LN_2PI);
        assert!((lp - expect).abs() < 1e-14);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut p = policy(1);
        p.net.layers[2].bias[0] = f64::NAN;
        let r = policy_decision_rule(&p, &QueueDist::uniform(5), 0, &mut SimRng::seed_from_u64(0), PolicyMode::Deterministic);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn floor_keeps_all_negative_rows_valid() {
        let h = normalize_action(1, 2, &[-3.0, -1.0, 2.0, 0.0, 1.0, 1.0, 0.5, 1.5]).unwrap();
        assert_eq!(h.row(0), &[0.5, 0.5]);
        assert!((h.row(1)[0] - 2.0 / (2.0 + 1e-6)).abs() < 1e-15);
        assert_eq!(h.row(3), &[0.25, 0.75]);
    }
}

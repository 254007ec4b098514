//! Exact one-epoch discretization of the mean-field queue system and the
//! upper-level MDP built on top of it.
//!
//! Within an epoch the decision rule is frozen, so a queue starting at fill
//! `z` evolves as a birth-death chain with birth rate `λ(ν, z)` and death
//! rate `α`. Appending a drop-accumulator state that integrates
//! `λ(ν, z) · P(fill = B)` gives a linear system whose matrix exponential
//! yields both the end-of-epoch fill law and the expected number of drops.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::Result;
use crate::expm::matrix_exponential;
use crate::model::{DecisionRule, QueueDist, SystemConfig};
use crate::policy::UpperLevelPolicy;
use crate::rates::effective_rates;
use crate::rng::{self, tag, SimRng};

/// Transposed rate matrix of one queue's fill chain: `d/dt p = q p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub q: DMatrix<f64>,
}

impl Generator {
    /// Birth-death chain on `0..=buffer`; arrivals at `buffer` and services
    /// at 0 are ignored.
    pub fn birth_death(buffer: usize, birth: f64, death: f64) -> Self {
        let n = buffer + 1;
        let mut q = DMatrix::zeros(n, n);
        for i in 1..n {
            q[(i, i - 1)] = birth;
            q[(i - 1, i)] = death;
        }
        for i in 0..n {
            let out: f64 = (0..n).filter(|&j| j != i).map(|j| q[(j, i)]).sum();
            q[(i, i)] = -out;
        }
        Self { q }
    }

    pub fn buffer(&self) -> usize {
        self.q.nrows() - 1
    }
}

/// Generator with an extra drop-counting row: `qbar[(B+1, B)] = λ(ν, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedGenerator {
    pub qbar: DMatrix<f64>,
}

impl ExtendedGenerator {
    pub fn new(generator: &Generator, arrival_rate: f64) -> Self {
        let b = generator.buffer();
        let mut qbar = DMatrix::zeros(b + 2, b + 2);
        qbar.view_mut((0, 0), (b + 1, b + 1)).copy_from(&generator.q);
        qbar[(b + 1, b)] = arrival_rate;
        Self { qbar }
    }
}

pub fn build_generator(
    nu: &QueueDist,
    h: &DecisionRule,
    lambda: f64,
    service_rate: f64,
    z: usize,
) -> Generator {
    Generator::birth_death(nu.buffer(), effective_rates(nu, h, lambda)[z], service_rate)
}

pub fn build_extended_generator(
    nu: &QueueDist,
    h: &DecisionRule,
    lambda: f64,
    service_rate: f64,
    z: usize,
) -> ExtendedGenerator {
    let rate = effective_rates(nu, h, lambda)[z];
    ExtendedGenerator::new(&Generator::birth_death(nu.buffer(), rate, service_rate), rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub next_nu: QueueDist,
    /// Expected drops per queue during the epoch.
    pub expected_drops: f64,
}

/// Law of one queue after `delta_t` from fill `z`, and its expected drops.
pub fn single_queue_epoch(
    buffer: usize,
    start: usize,
    arrival_rate: f64,
    service_rate: f64,
    delta_t: f64,
) -> Result<(Vec<f64>, f64)> {
    let ext = ExtendedGenerator::new(&Generator::birth_death(buffer, arrival_rate, service_rate), arrival_rate);
    let e = matrix_exponential(&ext.qbar, delta_t)?;
    let col = e.column(start);
    Ok((col.rows(0, buffer + 1).iter().copied().collect(), col[buffer + 1]))
}

/// Pushes `nu` through one epoch given per-fill-level arrival rates.
pub fn epoch_from_rates(
    nu: &QueueDist,
    rates: &[f64],
    service_rate: f64,
    delta_t: f64,
) -> Result<EpochResult> {
    let buffer = nu.buffer();
    let mut next = vec![0.0; buffer + 1];
    let mut drops = 0.0;
    for (z, &mass) in nu.probs().iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let (p, dz) = single_queue_epoch(buffer, z, rates[z], service_rate, delta_t)?;
        for (acc, pz) in next.iter_mut().zip(&p) {
            *acc += mass * pz;
        }
        drops += mass * dz;
    }
    Ok(EpochResult { next_nu: QueueDist::new(next)?, expected_drops: drops.max(0.0) })
}

pub fn epoch_transition(
    nu: &QueueDist,
    h: &DecisionRule,
    lambda: f64,
    config: &SystemConfig,
) -> Result<EpochResult> {
    epoch_from_rates(nu, &effective_rates(nu, h, lambda), config.service_rate, config.delta_t)
}

/// State of the upper-level MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct MfcState {
    pub nu: QueueDist,
    pub level: usize,
}

/// One MDP transition: deterministic `ν` update at the current arrival
/// level, then a random level switch. Returns the reward `-penalty · D_t`.
pub fn mfc_step<R: Rng + ?Sized>(
    state: &MfcState,
    h: &DecisionRule,
    config: &SystemConfig,
    rng: &mut R,
) -> Result<(MfcState, f64)> {
    let lambda = config.arrival.rate(state.level);
    let res = epoch_transition(&state.nu, h, lambda, config)?;
    let level = config.arrival.sample_next(state.level, rng);
    Ok((MfcState { nu: res.next_nu, level }, -config.drop_penalty * res.expected_drops))
}

#[derive(Debug, Clone)]
pub struct MfcTrajectory {
    /// `horizon + 1` states, the last one after the final epoch.
    pub states: Vec<MfcState>,
    pub rules: Vec<DecisionRule>,
    pub rewards: Vec<f64>,
    pub discounted_return: f64,
}

impl MfcTrajectory {
    /// Undiscounted expected drops per queue over the whole rollout.
    pub fn total_drops(&self, drop_penalty: f64) -> f64 {
        -self.rewards.iter().sum::<f64>() / drop_penalty
    }
}

/// Rolls out `policy` for `horizon` epochs from `nu0`. The arrival levels are
/// drawn from the stream `(seed, LEVELS)` in the same order the finite
/// simulator uses, so equal seeds give both systems the same level path.
pub fn mfc_rollout(
    policy: &dyn UpperLevelPolicy,
    config: &SystemConfig,
    horizon: usize,
    seed: u64,
) -> Result<MfcTrajectory> {
    let mut level_rng = rng::stream(seed, &[tag::LEVELS]);
    let mut policy_rng: SimRng = rng::stream(seed, &[tag::POLICY]);
    let mut state = MfcState { nu: config.nu0.clone(), level: config.arrival.sample_initial(&mut level_rng) };
    let mut traj = MfcTrajectory {
        states: Vec::with_capacity(horizon + 1),
        rules: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        discounted_return: 0.0,
    };
    let mut discount = 1.0;
    for _ in 0..horizon {
        let h = policy.decision_rule(&state.nu, state.level, &mut policy_rng)?;
        let (next, reward) = mfc_step(&state, &h, config, &mut level_rng)?;
        traj.discounted_return += discount * reward;
        discount *= config.discount;
        traj.states.push(std::mem::replace(&mut state, next));
        traj.rules.push(h);
        traj.rewards.push(reward);
    }
    traj.states.push(state);
    Ok(traj)
}

//! Event-exact simulation of the finite system: `N` dispatchers, `M` queues.
//!
//! Each epoch every dispatcher samples `d` queues uniformly with
//! replacement, picks one of them with the current decision rule, and keeps
//! that destination for the whole epoch. A queue's arrival rate is its share
//! of the `M·λ` total stream; queues then evolve independently as
//! birth-death chains for `Δt`, simulated with exponential waiting times.

use rand::{Rng, RngCore};
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::model::{encode_tuple, sample_categorical, DecisionRule, QueueDist, SystemConfig};
use crate::policy::UpperLevelPolicy;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteSystemState {
    pub fills: Vec<usize>,
    pub buffer: usize,
    pub level: usize,
}

impl FiniteSystemState {
    pub fn new(fills: Vec<usize>, buffer: usize, level: usize) -> Result<Self> {
        if let Some(f) = fills.iter().find(|&&f| f > buffer) {
            return Err(Error::InvalidConfig(format!("fill {f} exceeds buffer {buffer}")));
        }
        Ok(Self { fills, buffer, level })
    }

    /// Fills drawn i.i.d. from `config.nu0`.
    pub fn sample_initial<R: Rng + ?Sized>(config: &SystemConfig, level: usize, rng: &mut R) -> Self {
        let fills = (0..config.num_queues).map(|_| sample_categorical(config.nu0.probs(), rng)).collect();
        Self { fills, buffer: config.buffer, level }
    }

    pub fn num_queues(&self) -> usize {
        self.fills.len()
    }
}

pub fn empirical_distribution(state: &FiniteSystemState) -> QueueDist {
    let mut counts = vec![0usize; state.buffer + 1];
    for &f in &state.fills {
        counts[f] += 1;
    }
    let m = state.fills.len() as f64;
    QueueDist::new(counts.into_iter().map(|c| c as f64 / m).collect())
        .expect("empirical frequencies form a distribution")
}

/// Sampled queue indices (0-based), `d` per dispatcher, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSamples {
    pub d: usize,
    pub queues: Vec<usize>,
}

impl AgentSamples {
    pub fn num_agents(&self) -> usize {
        self.queues.len() / self.d
    }

    pub fn agent(&self, i: usize) -> &[usize] {
        &self.queues[i * self.d..(i + 1) * self.d]
    }
}

pub fn sample_agents<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> AgentSamples {
    let m = config.num_queues;
    let queues = (0..config.num_clients * config.d).map(|_| rng.random_range(0..m)).collect();
    AgentSamples { d: config.d, queues }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentAssignment {
    pub samples: AgentSamples,
    /// Index into each agent's sampled tuple.
    pub chosen_slot: Vec<usize>,
}

impl AgentAssignment {
    pub fn destination(&self, i: usize) -> usize {
        self.samples.agent(i)[self.chosen_slot[i]]
    }
}

/// Every agent draws its slot from `h` given the fills it observes.
pub fn apply_decision_rule<R: Rng + ?Sized>(
    state: &FiniteSystemState,
    samples: AgentSamples,
    h: &DecisionRule,
    rng: &mut R,
) -> AgentAssignment {
    assert_eq!(samples.d, h.d(), "sample width and rule disagree on d");
    let mut zbar = vec![0; samples.d];
    let chosen_slot = (0..samples.num_agents())
        .map(|i| {
            for (z, &q) in zbar.iter_mut().zip(samples.agent(i)) {
                *z = state.fills[q];
            }
            sample_categorical(h.row(encode_tuple(&zbar, state.buffer)), rng)
        })
        .collect();
    AgentAssignment { samples, chosen_slot }
}

/// `rate_j = M·λ·(#agents sending to j) / N`.
pub fn per_queue_rates(assignment: &AgentAssignment, config: &SystemConfig, lambda: f64) -> Vec<f64> {
    let mut counts = vec![0u64; config.num_queues];
    for i in 0..assignment.chosen_slot.len() {
        counts[assignment.destination(i)] += 1;
    }
    let per_agent = config.num_queues as f64 * lambda / assignment.chosen_slot.len() as f64;
    counts.into_iter().map(|c| per_agent * c as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueRun {
    pub fill: usize,
    pub drops: u64,
    pub events: u64,
}

/// Gillespie simulation of one queue for `horizon` time units. Arrivals at
/// a full buffer are dropped; services only fire from non-empty queues.
pub fn simulate_queue<R: Rng + ?Sized>(
    mut fill: usize,
    arrival_rate: f64,
    service_rate: f64,
    buffer: usize,
    horizon: f64,
    rng: &mut R,
) -> QueueRun {
    let mut t = 0.0;
    let mut drops = 0;
    let mut events = 0;
    loop {
        let service = if fill > 0 { service_rate } else { 0.0 };
        let total = arrival_rate + service;
        if total <= 0.0 {
            break;
        }
        t += rng.sample::<f64, _>(Exp1) / total;
        if t > horizon {
            break;
        }
        events += 1;
        if rng.random::<f64>() * total < arrival_rate {
            if fill == buffer {
                drops += 1;
            } else {
                fill += 1;
            }
        } else {
            fill -= 1;
        }
    }
    QueueRun { fill, drops, events }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub drops_total: u64,
    pub drops_per_queue_avg: f64,
    pub events: u64,
}

/// Advances all queues by one epoch. Each queue gets its own stream derived
/// from one word of `rng`, so the queue order is irrelevant.
pub fn simulate_epoch<R: RngCore + ?Sized>(
    state: &FiniteSystemState,
    rates: &[f64],
    config: &SystemConfig,
    rng: &mut R,
) -> (FiniteSystemState, EpochStats) {
    assert_eq!(rates.len(), state.fills.len());
    let base = rng.next_u64();
    let mut drops_total = 0;
    let mut events = 0;
    let fills = state
        .fills
        .iter()
        .zip(rates)
        .enumerate()
        .map(|(j, (&fill, &rate))| {
            let mut qrng = rng::stream(base, &[j as u64]);
            let run = simulate_queue(fill, rate, config.service_rate, state.buffer, config.delta_t, &mut qrng);
            drops_total += run.drops;
            events += run.events;
            run.fill
        })
        .collect();
    let stats = EpochStats {
        drops_total,
        drops_per_queue_avg: drops_total as f64 / state.fills.len() as f64,
        events,
    };
    (FiniteSystemState { fills, buffer: state.buffer, level: state.level }, stats)
}

#[derive(Debug, Clone)]
pub struct FiniteEpisode {
    pub epochs: Vec<EpochStats>,
    /// Arrival level in force during each epoch.
    pub levels: Vec<usize>,
    pub total_drops: u64,
    pub drops_per_queue: f64,
    pub discounted_drops_per_queue: f64,
    pub final_state: FiniteSystemState,
}

/// Runs the finite system under an upper-level policy for `horizon` epochs.
///
/// The initial level is uniform over the arrival levels and is drawn, like
/// every later level switch, from the stream `(seed, LEVELS)`.
pub fn run_finite_episode(
    policy: &dyn UpperLevelPolicy,
    config: &SystemConfig,
    horizon: usize,
    seed: u64,
) -> Result<FiniteEpisode> {
    config.validate()?;
    let mut level_rng = rng::stream(seed, &[tag::LEVELS]);
    let mut policy_rng = rng::stream(seed, &[tag::POLICY]);
    let level = sample_categorical(&config.arrival.uniform_initial(), &mut level_rng);
    let mut state = FiniteSystemState::sample_initial(config, level, &mut rng::stream(seed, &[tag::INIT]));

    let mut epochs = Vec::with_capacity(horizon);
    let mut levels = Vec::with_capacity(horizon);
    let mut discount = 1.0;
    let mut discounted = 0.0;
    for t in 0..horizon as u64 {
        let lambda = config.arrival.rate(state.level);
        let h = policy.decision_rule(&empirical_distribution(&state), state.level, &mut policy_rng)?;
        let mut agent_rng = rng::stream(seed, &[tag::AGENTS, t]);
        let samples = sample_agents(config, &mut agent_rng);
        let assignment = apply_decision_rule(&state, samples, &h, &mut agent_rng);
        let rates = per_queue_rates(&assignment, config, lambda);
        let (mut next, stats) = simulate_epoch(&state, &rates, config, &mut rng::stream(seed, &[tag::QUEUES, t]));
        next.level = config.arrival.sample_next(state.level, &mut level_rng);

        discounted += discount * stats.drops_per_queue_avg;
        discount *= config.discount;
        levels.push(state.level);
        epochs.push(stats);
        state = next;
    }
    let total_drops = epochs.iter().map(|e| e.drops_total).sum();
    Ok(FiniteEpisode {
        drops_per_queue: total_drops as f64 / config.num_queues as f64,
        total_drops,
        discounted_drops_per_queue: discounted,
        epochs,
        levels,
        final_state: state,
    })
}

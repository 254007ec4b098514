//! Monte Carlo evaluation of upper-level policies on the finite system and
//! on the mean-field MDP.
//!
//! Replication `i` uses the seed `replication_seed(master, i)` in both
//! systems. Finite episodes and mean-field rollouts with the same seed share
//! their arrival-level path, so finite-versus-limit gaps are paired.

use std::time::Instant;

use mflb_core::rng::replication_seed;
use mflb_core::{mfc_rollout, run_finite_episode, SystemConfig, UpperLevelPolicy};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, PolicySpec};
use crate::error::{Error, Result};

/// Sample summary with a normal-approximation 95% confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// `1.96 · s / √n` with the unbiased sample standard deviation; 0 for n = 1.
    pub half_width: f64,
    pub min: f64,
    pub max: f64,
}

impl EvalResult {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        assert!(!samples.is_empty(), "no samples to summarize");
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let half_width = if samples.len() == 1 {
            log::warn!("single replication: confidence half-width reported as 0");
            0.0
        } else {
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        };
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Summation round-off must not push the mean outside the sample range.
        Self { mean: mean.clamp(min, max), samples, half_width, min, max }
    }

    pub fn contains(&self, x: f64, widen: f64) -> bool {
        (x - self.mean).abs() <= widen * self.half_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Finite,
    MeanField,
}

impl SystemKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Finite => "finite",
            Self::MeanField => "mfc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    /// Realized drops over all queues; finite system only.
    pub total_drops: Option<u64>,
    pub drops_per_queue: f64,
    /// `-Σ γ^t D_t` with `D_t` the per-queue drops of epoch `t`.
    pub discounted_return: f64,
    pub epoch_drops: Vec<f64>,
    pub levels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub system: SystemKind,
    pub horizon: usize,
    pub replications: Vec<Replication>,
    /// Over replications of the total drops; finite system only.
    pub total_drops: Option<EvalResult>,
    pub drops_per_queue: EvalResult,
    pub discounted_return: EvalResult,
    pub wall_clock_secs: f64,
}

impl PolicyEval {
    fn new(system: SystemKind, horizon: usize, replications: Vec<Replication>, wall_clock_secs: f64) -> Self {
        let per_queue = replications.iter().map(|r| r.drops_per_queue).collect();
        let returns = replications.iter().map(|r| r.discounted_return).collect();
        let total_drops = match system {
            SystemKind::Finite => Some(EvalResult::from_samples(
                replications.iter().map(|r| r.total_drops.unwrap_or(0) as f64).collect(),
            )),
            SystemKind::MeanField => None,
        };
        Self {
            system,
            horizon,
            total_drops,
            drops_per_queue: EvalResult::from_samples(per_queue),
            discounted_return: EvalResult::from_samples(returns),
            replications,
            wall_clock_secs,
        }
    }
}

/// Runs `f(0..n)` on `threads` workers, returning results in index order.
fn replicate<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// `replications` independent finite-system episodes of `horizon` epochs.
pub fn evaluate_policy_finite(
    policy: &dyn UpperLevelPolicy,
    system: &SystemConfig,
    horizon: usize,
    replications: usize,
    seed: u64,
    threads: usize,
) -> Result<PolicyEval> {
    let start = Instant::now();
    let reps = replicate(replications, threads, |i| {
        let s = replication_seed(seed, i as u64);
        let ep = run_finite_episode(policy, system, horizon, s)?;
        Ok(Replication {
            index: i,
            seed: s,
            total_drops: Some(ep.total_drops),
            drops_per_queue: ep.drops_per_queue,
            discounted_return: -system.drop_penalty * ep.discounted_drops_per_queue,
            epoch_drops: ep.epochs.iter().map(|e| e.drops_per_queue_avg).collect(),
            levels: ep.levels,
        })
    })?;
    Ok(PolicyEval::new(SystemKind::Finite, horizon, reps, start.elapsed().as_secs_f64()))
}

/// `replications` mean-field rollouts of `horizon` epochs; only the arrival
/// level path differs between them.
pub fn evaluate_policy_mfc(
    policy: &dyn UpperLevelPolicy,
    system: &SystemConfig,
    horizon: usize,
    replications: usize,
    seed: u64,
    threads: usize,
) -> Result<PolicyEval> {
    let start = Instant::now();
    let reps = replicate(replications, threads, |i| {
        let s = replication_seed(seed, i as u64);
        let traj = mfc_rollout(policy, system, horizon, s)?;
        Ok(Replication {
            index: i,
            seed: s,
            total_drops: None,
            drops_per_queue: traj.total_drops(system.drop_penalty),
            discounted_return: traj.discounted_return,
            epoch_drops: traj.rewards.iter().map(|r| -r / system.drop_penalty).collect(),
            levels: traj.states[..horizon].iter().map(|s| s.level).collect(),
        })
    })?;
    Ok(PolicyEval::new(SystemKind::MeanField, horizon, reps, start.elapsed().as_secs_f64()))
}

/// One row of a system-size study: a finite evaluation at `M` queues, or the
/// mean-field limit row (`num_queues == None`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub num_queues: Option<usize>,
    pub num_clients: Option<usize>,
    pub eval: PolicyEval,
    /// `|finite − MFC|` in mean drops per queue; 0 on the limit row.
    pub gap: f64,
}

/// Finite evaluations of one policy at each `(M, N)` plus the mean-field
/// limit, all on the same replication seeds.
pub fn scaling_study(
    policy: &dyn UpperLevelPolicy,
    template: &SystemConfig,
    sizes: &[(usize, usize)],
    horizon: usize,
    replications: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<ScalingRow>> {
    if !sizes.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(Error::Config("system-size study needs strictly ascending queue counts".into()));
    }
    let limit = evaluate_policy_mfc(policy, template, horizon, replications, seed, threads)?;
    let mut rows = Vec::with_capacity(sizes.len() + 1);
    for &(m, n) in sizes {
        let mut system = template.clone();
        system.num_queues = m;
        system.num_clients = n;
        let eval = evaluate_policy_finite(policy, &system, horizon, replications, seed, threads)?;
        log::info!(
            "M={m} N={n}: {:.4} ± {:.4} drops/queue ({:.1}s)",
            eval.drops_per_queue.mean,
            eval.drops_per_queue.half_width,
            eval.wall_clock_secs
        );
        let gap = (eval.drops_per_queue.mean - limit.drops_per_queue.mean).abs();
        rows.push(ScalingRow { num_queues: Some(m), num_clients: Some(n), eval, gap });
    }
    rows.push(ScalingRow { num_queues: None, num_clients: None, eval: limit, gap: 0.0 });
    Ok(rows)
}

/// One policy evaluated at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonEntry {
    pub policy: String,
    pub delta_t: f64,
    pub num_queues: Option<usize>,
    pub num_clients: Option<usize>,
    pub eval: PolicyEval,
}

/// Every configured policy at every delay: one mean-field row and one
/// finite row per system size.
pub fn compare(cfg: &ExperimentConfig) -> Result<Vec<ComparisonEntry>> {
    let mut out = Vec::new();
    for &delta_t in &cfg.delta_ts {
        let horizon = cfg.horizon_for(delta_t);
        for spec in &cfg.policies {
            let base = cfg.system_at(delta_t, cfg.system.num_queues, cfg.system.num_clients)?;
            let policy = spec.load(&base)?;
            out.push(entry(spec, delta_t, None, evaluate_policy_mfc(&*policy, &base, horizon, cfg.replications, cfg.seed, cfg.threads)?));
            for (m, n) in cfg.sizes() {
                let system = cfg.system_at(delta_t, m, n)?;
                let eval = evaluate_policy_finite(&*policy, &system, horizon, cfg.replications, cfg.seed, cfg.threads)?;
                log::info!(
                    "{spec} Δt={delta_t} M={m} N={n}: {:.4} ± {:.4} drops/queue",
                    eval.drops_per_queue.mean,
                    eval.drops_per_queue.half_width
                );
                out.push(entry(spec, delta_t, Some((m, n)), eval));
            }
        }
    }
    Ok(out)
}

fn entry(spec: &PolicySpec, delta_t: f64, size: Option<(usize, usize)>, eval: PolicyEval) -> ComparisonEntry {
    ComparisonEntry {
        policy: spec.to_string(),
        delta_t,
        num_queues: size.map(|s| s.0),
        num_clients: size.map(|s| s.1),
        eval,
    }
}

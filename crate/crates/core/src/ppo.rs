//! Proximal policy optimization of the upper-level policy on the mean-field
//! MDP.
//!
//! Rollouts use the stochastic policy; advantages come from generalized
//! advantage estimation against a separate value network; each iteration
//! runs several epochs of shuffled minibatch Adam steps on the clipped
//! surrogate plus a fixed-coefficient KL(old ‖ new) penalty and a squared
//! error value loss.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dynamics::{mfc_rollout, mfc_step, MfcState};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::model::SystemConfig;
use crate::nn::{Adam, Mlp, MlpGrad};
use crate::policy::{observation, policy_decision_rule, PolicyMode, UpperPolicy};
use crate::rng::{self, tag, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub kl_coeff: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub train_batch: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub episode_len: usize,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    /// Initial log standard deviation of the exploration noise.
    pub init_log_std: f64,
    /// Initial (uniform) output of the policy network.
    pub output_bias: f64,
    pub value_loss_coeff: f64,
    /// Deterministic evaluation rollouts after each iteration.
    pub eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            gae_lambda: 1.0,
            kl_coeff: 0.2,
            clip: 0.3,
            learning_rate: 5e-5,
            train_batch: 4000,
            minibatch: 128,
            epochs: 30,
            episode_len: 500,
            iterations: 100,
            hidden: vec![256, 256],
            init_log_std: -1.0,
            output_bias: 0.3,
            value_loss_coeff: 1.0,
            eval_episodes: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("ppo: {m}")));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if !(self.kl_coeff >= 0.0 && self.learning_rate >= 0.0 && self.value_loss_coeff >= 0.0) {
            return bad("kl_coeff, learning_rate and value_loss_coeff must be non-negative");
        }
        if self.train_batch == 0 || self.minibatch == 0 || self.episode_len == 0 {
            return bad("train_batch, minibatch and episode_len must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if self.output_bias.is_nan() || self.output_bias <= crate::policy::ACTION_FLOOR {
            return bad("output_bias must exceed the action floor");
        }
        Ok(())
    }

    /// Keys understood by [`PpoConfig::apply_kv`].
    pub const KEYS: &'static [&'static str] = &[
        "ppo.discount",
        "ppo.gae_lambda",
        "ppo.kl_coeff",
        "ppo.clip",
        "ppo.learning_rate",
        "ppo.train_batch",
        "ppo.minibatch",
        "ppo.epochs",
        "ppo.episode_len",
        "ppo.iterations",
        "ppo.hidden",
        "ppo.init_log_std",
        "ppo.output_bias",
        "ppo.value_loss_coeff",
        "ppo.eval_episodes",
    ];

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("ppo.discount", self.discount.to_string());
        kv.insert("ppo.gae_lambda", self.gae_lambda.to_string());
        kv.insert("ppo.kl_coeff", self.kl_coeff.to_string());
        kv.insert("ppo.clip", self.clip.to_string());
        kv.insert("ppo.learning_rate", self.learning_rate.to_string());
        kv.insert("ppo.train_batch", self.train_batch.to_string());
        kv.insert("ppo.minibatch", self.minibatch.to_string());
        kv.insert("ppo.epochs", self.epochs.to_string());
        kv.insert("ppo.episode_len", self.episode_len.to_string());
        kv.insert("ppo.iterations", self.iterations.to_string());
        kv.insert("ppo.hidden", kv::join(&self.hidden));
        kv.insert("ppo.init_log_std", self.init_log_std.to_string());
        kv.insert("ppo.output_bias", self.output_bias.to_string());
        kv.insert("ppo.value_loss_coeff", self.value_loss_coeff.to_string());
        kv.insert("ppo.eval_episodes", self.eval_episodes.to_string());
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = kv.parsed(concat!("ppo.", stringify!($field)))? {
                    self.$field = v;
                }
            };
        }
        set!(discount);
        set!(gae_lambda);
        set!(kl_coeff);
        set!(clip);
        set!(learning_rate);
        set!(train_batch);
        set!(minibatch);
        set!(epochs);
        set!(episode_len);
        set!(iterations);
        set!(init_log_std);
        set!(output_bias);
        set!(value_loss_coeff);
        set!(eval_episodes);
        if let Some(h) = kv.list("ppo.hidden")? {
            self.hidden = h;
        }
        self.validate()
    }
}

/// State-value baseline. It reads the policy observation plus the fraction
/// of the episode still to go: returns are truncated at the horizon, so the
/// value of a state depends on the time left, which the stationary policy
/// does not need to see.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub net: Mlp,
}

impl ValueFunction {
    /// `obs_dim` is the policy observation size.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::init(&sizes, 1.0, 0.0, rng) }
    }

    /// Stacks observations (columns) with their time-left fractions.
    pub fn input(observations: &DMatrix<f64>, time_left: &[f64]) -> DMatrix<f64> {
        let rows = observations.nrows();
        let mut x = observations.clone().insert_row(rows, 0.0);
        x.row_mut(rows).iter_mut().zip(time_left).for_each(|(v, &t)| *v = t);
        x
    }

    pub fn values(&self, observations: &DMatrix<f64>, time_left: &[f64]) -> Vec<f64> {
        self.net.forward(Self::input(observations, time_left)).as_slice().to_vec()
    }
}

/// Per-timestep training data; observations and actions are stored
/// column-wise (`obs_dim × len`, `act_dim × len`).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub observations: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    /// Gaussian means at collection time.
    pub means: DMatrix<f64>,
    pub old_log_std: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Fraction of the episode remaining before each step, `(T - t) / T`.
    pub time_left: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Last step of an episode, either at the horizon or cut by the batch end.
    pub dones: Vec<bool>,
    /// Value of the successor state where an episode was cut by the batch
    /// end; 0 elsewhere.
    pub bootstrap: Vec<f64>,
    /// Discounted returns of the episodes that ran to the horizon.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

pub fn collect_rollouts(
    policy: &UpperPolicy,
    value_fn: &ValueFunction,
    config: &SystemConfig,
    ppo: &PpoConfig,
    rng: &mut SimRng,
) -> Result<RolloutBatch> {
    let n = ppo.train_batch;
    let obs_dim = UpperPolicy::input_size(policy.buffer, policy.num_levels);
    let act_dim = policy.action_dim();
    let mut observations = Vec::with_capacity(n * obs_dim);
    let mut actions = Vec::with_capacity(n * act_dim);
    let mut means = Vec::with_capacity(n * act_dim);
    let mut log_probs = Vec::with_capacity(n);
    let mut time_left = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut dones = Vec::with_capacity(n);
    let mut cut_state: Option<(MfcState, f64)> = None;
    let mut episode_returns = Vec::new();

    while rewards.len() < n {
        let mut state = MfcState { nu: config.nu0.clone(), level: config.arrival.sample_initial(rng) };
        let mut ret = 0.0;
        let mut discount = 1.0;
        for t in 0..ppo.episode_len {
            let out = policy_decision_rule(policy, &state.nu, state.level, rng, PolicyMode::Stochastic)?;
            let (next, reward) = mfc_step(&state, &out.rule, config, rng)?;
            if !reward.is_finite() {
                return Err(Error::NonFinite("rollout reward"));
            }
            observations.extend(observation(&state.nu, state.level, policy.num_levels));
            actions.extend_from_slice(&out.raw_action);
            means.extend_from_slice(&out.mean);
            log_probs.push(out.log_prob.expect("stochastic mode yields a log-density"));
            time_left.push((ppo.episode_len - t) as f64 / ppo.episode_len as f64);
            rewards.push(reward);
            ret += discount * reward;
            discount *= ppo.discount;
            let at_horizon = t + 1 == ppo.episode_len;
            let full = rewards.len() == n;
            dones.push(at_horizon || full);
            if at_horizon {
                episode_returns.push(ret);
            }
            if full {
                if !at_horizon {
                    let left = (ppo.episode_len - t - 1) as f64 / ppo.episode_len as f64;
                    cut_state = Some((next, left));
                }
                break;
            }
            state = next;
        }
    }

    let observations = DMatrix::from_vec(obs_dim, n, observations);
    let values = value_fn.values(&observations, &time_left);
    let mut bootstrap = vec![0.0; n];
    if let Some((s, left)) = cut_state {
        let obs = observation(&s.nu, s.level, policy.num_levels);
        bootstrap[n - 1] = value_fn.values(&DMatrix::from_vec(obs_dim, 1, obs), &[left])[0];
    }
    Ok(RolloutBatch {
        observations,
        actions: DMatrix::from_vec(act_dim, n, actions),
        means: DMatrix::from_vec(act_dim, n, means),
        old_log_std: policy.log_std.clone(),
        log_probs,
        time_left,
        rewards,
        values,
        dones,
        bootstrap,
        episode_returns,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub raw: Vec<f64>,
    /// Zero mean, unit variance over the batch.
    pub normalized: Vec<f64>,
    /// Value-function regression targets, `raw + V`.
    pub returns: Vec<f64>,
}

pub fn gae_advantages(batch: &RolloutBatch, discount: f64, gae_lambda: f64) -> Advantages {
    let n = batch.len();
    let mut raw = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if batch.dones[t] {
            (batch.bootstrap[t], 0.0)
        } else {
            (batch.values[t + 1], running)
        };
        let delta = batch.rewards[t] + discount * next_value - batch.values[t];
        running = delta + discount * gae_lambda * carry;
        raw[t] = running;
    }
    let returns = raw.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    Advantages { normalized: standardize(&raw), raw, returns }
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        x.iter().map(|v| v - mean).collect()
    } else {
        x.iter().map(|v| (v - mean) / std).collect()
    }
}

/// Losses and gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct MinibatchGrad {
    pub policy_loss: f64,
    pub kl: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub policy: MlpGrad,
    pub log_std: Vec<f64>,
    pub value: MlpGrad,
}

/// Mean over the given columns of
/// `-min(ρA, clip(ρ)A) + β·KL(old ‖ new) + c·(V - target)²`.
pub fn minibatch_loss_and_grad(
    policy: &UpperPolicy,
    value_fn: &ValueFunction,
    batch: &RolloutBatch,
    adv: &Advantages,
    idx: &[usize],
    ppo: &PpoConfig,
) -> MinibatchGrad {
    let m = idx.len();
    let inv = 1.0 / m as f64;
    let obs = batch.observations.select_columns(idx);
    let act_dim = policy.action_dim();

    let (mean, cache) = policy.net.forward_cached(obs.clone());
    let ls = &policy.log_std;
    let old_ls = &batch.old_log_std;
    let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
    // σ_old² / σ² computed directly, so it is exactly 1 while old = new.
    let var_ratio: Vec<f64> = ls.iter().zip(old_ls).map(|(l, o)| (2.0 * (o - l)).exp()).collect();
    let log_norm: f64 = ls.iter().sum::<f64>() + 0.5 * act_dim as f64 * 1.837_877_066_409_345_3;

    let mut d_mean = DMatrix::zeros(act_dim, m);
    let mut d_ls = vec![0.0; act_dim];
    let (mut policy_loss, mut kl_total, mut clipped) = (0.0, 0.0, 0usize);
    for (c, &i) in idx.iter().enumerate() {
        let a = batch.actions.column(i);
        let mu_old = batch.means.column(i);
        let mu = mean.column(c);
        let mut logp = -log_norm;
        let mut kl = 0.0;
        for k in 0..act_dim {
            let diff = a[k] - mu[k];
            logp -= 0.5 * diff * diff * inv_var[k];
            let dm = mu_old[k] - mu[k];
            kl += ls[k] - old_ls[k] + 0.5 * (var_ratio[k] + dm * dm * inv_var[k]) - 0.5;
        }
        let ratio = (logp - batch.log_probs[i]).exp();
        let a_hat = adv.normalized[i];
        let clipped_ratio = ratio.clamp(1.0 - ppo.clip, 1.0 + ppo.clip);
        let surrogate = (ratio * a_hat).min(clipped_ratio * a_hat);
        policy_loss -= surrogate;
        kl_total += kl;
        if (ratio - 1.0).abs() > ppo.clip {
            clipped += 1;
        }
        // Gradient flows through the surrogate only when the unclipped term is active.
        let active = !((a_hat > 0.0 && ratio > 1.0 + ppo.clip) || (a_hat < 0.0 && ratio < 1.0 - ppo.clip));
        let g_logp = if active { -a_hat * ratio * inv } else { 0.0 };
        let g_kl = ppo.kl_coeff * inv;
        for k in 0..act_dim {
            let diff = a[k] - mu[k];
            let dm = mu[k] - mu_old[k];
            d_mean[(k, c)] = g_logp * diff * inv_var[k] + g_kl * dm * inv_var[k];
            d_ls[k] += g_logp * (diff * diff * inv_var[k] - 1.0)
                + g_kl * (1.0 - var_ratio[k] - dm * dm * inv_var[k]);
        }
    }
    let policy_grad = policy.net.backward(&cache, d_mean);

    let left: Vec<f64> = idx.iter().map(|&i| batch.time_left[i]).collect();
    let (v, vcache) = value_fn.net.forward_cached(ValueFunction::input(&obs, &left));
    let mut value_loss = 0.0;
    let d_v = DMatrix::from_fn(1, m, |_, c| {
        let err = v[(0, c)] - adv.returns[idx[c]];
        value_loss += err * err;
        2.0 * ppo.value_loss_coeff * err * inv
    });
    let value_grad = value_fn.net.backward(&vcache, d_v);

    MinibatchGrad {
        policy_loss: policy_loss * inv,
        kl: kl_total * inv,
        value_loss: value_loss * inv,
        clip_fraction: clipped as f64 * inv,
        policy: policy_grad,
        log_std: d_ls,
        value: value_grad,
    }
}

/// Total minibatch objective, for finite-difference checks.
pub fn minibatch_loss(
    policy: &UpperPolicy,
    value_fn: &ValueFunction,
    batch: &RolloutBatch,
    adv: &Advantages,
    idx: &[usize],
    ppo: &PpoConfig,
) -> f64 {
    let g = minibatch_loss_and_grad(policy, value_fn, batch, adv, idx, ppo);
    g.policy_loss + ppo.kl_coeff * g.kl + ppo.value_loss_coeff * g.value_loss
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// The update hit a non-finite gradient and was rolled back.
    pub aborted: bool,
}

/// Policy, value function and their optimizer state.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: UpperPolicy,
    pub value_fn: ValueFunction,
    policy_opt: Adam,
    value_opt: Adam,
}

impl PpoLearner {
    pub fn new(policy: UpperPolicy, value_fn: ValueFunction, learning_rate: f64) -> Self {
        Self { policy, value_fn, policy_opt: Adam::new(learning_rate), value_opt: Adam::new(learning_rate) }
    }

    /// Runs all epochs of minibatch updates on one batch.
    pub fn update(
        &mut self,
        batch: &RolloutBatch,
        adv: &Advantages,
        ppo: &PpoConfig,
        rng: &mut SimRng,
    ) -> UpdateDiagnostics {
        let snapshot = self.clone();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut diag = UpdateDiagnostics::default();
        let mut steps = 0usize;
        for _ in 0..ppo.epochs {
            order.shuffle(rng);
            for idx in order.chunks(ppo.minibatch) {
                let g = minibatch_loss_and_grad(&self.policy, &self.value_fn, batch, adv, idx, ppo);
                if !(g.policy.is_finite() && g.value.is_finite() && g.log_std.iter().all(|x| x.is_finite())) {
                    *self = snapshot;
                    return UpdateDiagnostics { aborted: true, ..UpdateDiagnostics::default() };
                }
                diag.policy_loss += g.policy_loss;
                diag.value_loss += g.value_loss;
                diag.mean_kl += g.kl;
                diag.clip_fraction += g.clip_fraction;
                steps += 1;

                let mut params = self.policy.net.params_mut();
                params.push(self.policy.log_std.as_mut_slice());
                let mut grads = g.policy.slices();
                grads.push(&g.log_std);
                self.policy_opt.step(params, grads);
                self.value_opt.step(self.value_fn.net.params_mut(), g.value.slices());
            }
        }
        if steps > 0 {
            let s = steps as f64;
            diag.policy_loss /= s;
            diag.value_loss /= s;
            diag.mean_kl /= s;
            diag.clip_fraction /= s;
        }
        diag
    }
}

pub fn ppo_update(
    learner: &mut PpoLearner,
    batch: &RolloutBatch,
    ppo: &PpoConfig,
    rng: &mut SimRng,
) -> UpdateDiagnostics {
    let adv = gae_advantages(batch, ppo.discount, ppo.gae_lambda);
    learner.update(batch, &adv, ppo, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub timesteps: usize,
    /// Mean discounted return of the stochastic training episodes.
    pub mean_return: f64,
    /// Mean return of the deterministic policy on the evaluation seeds.
    pub eval_return: f64,
    pub best_return: f64,
    pub diagnostics: UpdateDiagnostics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: UpperPolicy,
    pub best_return: f64,
    pub final_policy: UpperPolicy,
    pub value_fn: ValueFunction,
    pub log: Vec<IterationReport>,
}

/// Mean discounted return of the deterministic policy over fixed seeds.
pub fn evaluate_deterministic(
    policy: &UpperPolicy,
    config: &SystemConfig,
    horizon: usize,
    seeds: &[u64],
) -> Result<f64> {
    let p = policy.clone().with_mode(PolicyMode::Deterministic);
    let mut total = 0.0;
    for &s in seeds {
        total += mfc_rollout(&p, config, horizon, s)?.discounted_return;
    }
    Ok(total / seeds.len().max(1) as f64)
}

/// Alternates rollout collection and PPO updates for `ppo.iterations`
/// iterations, keeping the policy with the best deterministic evaluation.
/// `observer` sees every iteration report with the current and best policy.
pub fn train(
    config: &SystemConfig,
    ppo: &PpoConfig,
    seed: u64,
    mut observer: impl FnMut(&IterationReport, &UpperPolicy, &UpperPolicy) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    ppo.validate()?;
    let mut rng = rng::stream(seed, &[tag::TRAIN]);
    let levels = config.arrival.num_levels();
    let policy = UpperPolicy::new(config.buffer, config.d, levels, &ppo.hidden, ppo.output_bias, ppo.init_log_std, &mut rng);
    let value_fn = ValueFunction::new(UpperPolicy::input_size(config.buffer, levels), &ppo.hidden, &mut rng);
    let mut learner = PpoLearner::new(policy, value_fn, ppo.learning_rate);

    let eval_seeds: Vec<u64> = (0..ppo.eval_episodes as u64).map(|k| rng::derive_seed(seed, &[tag::EVAL, k])).collect();
    let mut best = learner.policy.clone();
    let mut best_return = evaluate_deterministic(&best, config, ppo.episode_len, &eval_seeds)?;
    let mut log = Vec::with_capacity(ppo.iterations);

    for iteration in 0..ppo.iterations {
        let batch = collect_rollouts(&learner.policy, &learner.value_fn, config, ppo, &mut rng)?;
        let diagnostics = ppo_update(&mut learner, &batch, ppo, &mut rng);
        let eval_return = evaluate_deterministic(&learner.policy, config, ppo.episode_len, &eval_seeds)?;
        if eval_return > best_return {
            best_return = eval_return;
            best = learner.policy.clone();
        }
        let mean_return = if batch.episode_returns.is_empty() {
            f64::NAN
        } else {
            batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64
        };
        let report = IterationReport {
            iteration: iteration + 1,
            timesteps: (iteration + 1) * ppo.train_batch,
            mean_return,
            eval_return,
            best_return,
            diagnostics,
        };
        observer(&report, &learner.policy, &best)?;
        log.push(report);
    }
    Ok(TrainOutcome {
        best,
        best_return,
        final_policy: learner.policy,
        value_fn: learner.value_fn,
        log,
    })
}

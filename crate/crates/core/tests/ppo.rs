use mflb_core::dynamics::mfc_rollout;
use mflb_core::ppo::{evaluate_deterministic, minibatch_loss, minibatch_loss_and_grad, Advantages};
use mflb_core::rng::stream;
use mflb_core::{
    collect_rollouts, gae_advantages, ppo_update, train, FixedRule, PpoConfig, PpoLearner, QueueDist, RolloutBatch,
    SimRng, SystemConfig, UpperLevelPolicy, UpperPolicy, ValueFunction,
};
use nalgebra::DMatrix;
use rand::SeedableRng;

fn small_ppo() -> PpoConfig {
    PpoConfig {
        train_batch: 64,
        minibatch: 16,
        epochs: 2,
        episode_len: 8,
        iterations: 3,
        hidden: vec![16, 16],
        eval_episodes: 2,
        ..PpoConfig::default()
    }
}

fn learner(config: &SystemConfig, ppo: &PpoConfig, seed: u64) -> PpoLearner {
    let mut rng = SimRng::seed_from_u64(seed);
    let levels = config.arrival.num_levels();
    let policy = UpperPolicy::new(config.buffer, config.d, levels, &ppo.hidden, ppo.output_bias, ppo.init_log_std, &mut rng);
    let value = ValueFunction::new(UpperPolicy::input_size(config.buffer, levels), &ppo.hidden, &mut rng);
    PpoLearner::new(policy, value, ppo.learning_rate)
}

/// Hand-built batch with the given rewards and values; observations and
/// actions are irrelevant for advantage estimation.
fn synthetic(rewards: Vec<f64>, values: Vec<f64>, dones: Vec<bool>, bootstrap: Vec<f64>) -> RolloutBatch {
    let n = rewards.len();
    RolloutBatch {
        observations: DMatrix::zeros(1, n),
        actions: DMatrix::zeros(1, n),
        means: DMatrix::zeros(1, n),
        old_log_std: vec![0.0],
        log_probs: vec![0.0; n],
        time_left: vec![1.0; n],
        rewards,
        values,
        dones,
        bootstrap,
        episode_returns: Vec::new(),
    }
}

#[test]
fn batches_split_into_whole_episodes() {
    let config = SystemConfig::standard(5.0);
    let ppo = PpoConfig { train_batch: 8, episode_len: 4, ..small_ppo() };
    let l = learner(&config, &ppo, 1);
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(2)).unwrap();
    assert_eq!(batch.len(), 8);
    assert_eq!(batch.episode_returns.len(), 2);
    assert_eq!(batch.dones, vec![false, false, false, true, false, false, false, true]);
    assert!(batch.bootstrap.iter().all(|&b| b == 0.0));
    // Each episode starts from ν0 = δ0.
    assert_eq!(batch.observations[(0, 0)], 1.0);
    assert_eq!(batch.observations[(0, 4)], 1.0);

    let again = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(2)).unwrap();
    assert_eq!(batch, again);
}

#[test]
fn cut_episode_bootstraps_from_the_value_function() {
    let config = SystemConfig::standard(5.0);
    let ppo = PpoConfig { train_batch: 10, episode_len: 4, ..small_ppo() };
    let l = learner(&config, &ppo, 1);
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(3)).unwrap();
    assert_eq!(batch.len(), 10);
    assert!(batch.dones[9]);
    assert_eq!(batch.episode_returns.len(), 2);
    assert_ne!(batch.bootstrap[9], 0.0);
    assert!(batch.bootstrap[..9].iter().all(|&b| b == 0.0));
}

#[test]
#[allow(clippy::needless_range_loop)]
fn advantage_estimation_limits() {
    let zero = synthetic(vec![0.0; 5], vec![0.0; 5], vec![false, false, true, false, true], vec![0.0; 5]);
    let adv = gae_advantages(&zero, 0.99, 1.0);
    assert!(adv.raw.iter().all(|&a| a == 0.0));
    assert!(adv.normalized.iter().all(|&a| a == 0.0));

    let single = synthetic(vec![-1.0], vec![0.0], vec![true], vec![0.0]);
    assert_eq!(gae_advantages(&single, 0.37, 1.0).raw, vec![-1.0]);

    let rewards = vec![-0.3, -0.1, -0.7, -0.2, -0.4, -0.9];
    let values = vec![-1.0, -0.8, -0.6, -1.2, -0.5, -0.1];
    let dones = vec![false, false, true, false, false, true];
    let bootstrap = vec![0.0, 0.0, 0.0, 0.0, 0.0, -2.0];
    let b = synthetic(rewards.clone(), values.clone(), dones.clone(), bootstrap.clone());
    let g = 0.9;

    let td = gae_advantages(&b, g, 0.0);
    for t in 0..6 {
        let next = if dones[t] { bootstrap[t] } else { values[t + 1] };
        assert!((td.raw[t] - (rewards[t] + g * next - values[t])).abs() < 1e-15);
    }

    let mc = gae_advantages(&b, g, 1.0);
    for t in 0..6 {
        let end = if t < 3 { 3 } else { 6 };
        let mut ret: f64 = (t..end).map(|k| g.powi((k - t) as i32) * rewards[k]).sum();
        ret += g.powi((end - t) as i32) * bootstrap[end - 1];
        assert!((mc.raw[t] - (ret - values[t])).abs() < 1e-14);
        assert!((mc.returns[t] - ret).abs() < 1e-14);
    }
}

#[test]
fn advantages_are_standardized() {
    let config = SystemConfig::standard(5.0);
    let ppo = small_ppo();
    let l = learner(&config, &ppo, 4);
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(5)).unwrap();
    let adv = gae_advantages(&batch, ppo.discount, ppo.gae_lambda);
    let n = adv.normalized.len() as f64;
    let mean = adv.normalized.iter().sum::<f64>() / n;
    let std = (adv.normalized.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-9);
    assert!((std - 1.0).abs() < 1e-6);
}

#[test]
fn identity_ratio_reduces_to_mean_advantage() {
    let config = SystemConfig::standard(5.0);
    let ppo = small_ppo();
    let l = learner(&config, &ppo, 6);
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(7)).unwrap();
    let adv = gae_advantages(&batch, ppo.discount, ppo.gae_lambda);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let g = minibatch_loss_and_grad(&l.policy, &l.value_fn, &batch, &adv, &idx, &ppo);
    let mean_adv = adv.normalized.iter().sum::<f64>() / adv.normalized.len() as f64;
    assert!((g.policy_loss + mean_adv).abs() < 1e-12);
    assert!(g.kl.abs() < 1e-12);
    assert_eq!(g.clip_fraction, 0.0);
}

/// Flat view over every trainable parameter: policy network, log-std, value network.
fn param_slots(l: &mut PpoLearner) -> Vec<&mut [f64]> {
    let mut slots = l.policy.net.params_mut();
    slots.push(l.policy.log_std.as_mut_slice());
    slots.extend(l.value_fn.net.params_mut());
    slots
}

fn get(l: &mut PpoLearner, k: usize) -> f64 {
    let mut k = k;
    for s in param_slots(l) {
        if k < s.len() {
            return s[k];
        }
        k -= s.len();
    }
    panic!("parameter index out of range")
}

fn set(l: &mut PpoLearner, k: usize, v: f64) {
    let mut k = k;
    for s in param_slots(l) {
        if k < s.len() {
            s[k] = v;
            return;
        }
        k -= s.len();
    }
    panic!("parameter index out of range")
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut config = SystemConfig::standard(5.0);
    config.buffer = 2;
    config.nu0 = QueueDist::new(vec![0.5, 0.3, 0.2]).unwrap();
    let ppo = PpoConfig { train_batch: 10, episode_len: 5, hidden: vec![6, 5], clip: 0.02, ..small_ppo() };
    let mut l = learner(&config, &ppo, 8);
    // Give the output layer structure so the mean depends on the state.
    let mut rng = SimRng::seed_from_u64(9);
    for s in l.policy.net.params_mut() {
        for x in s.iter_mut() {
            *x += 0.3 * rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
    }
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(10)).unwrap();
    let adv = gae_advantages(&batch, ppo.discount, ppo.gae_lambda);
    // Move away from the collection point so ratios, clipping and KL are all non-trivial.
    for s in param_slots(&mut l) {
        for x in s.iter_mut() {
            *x += 0.004 * rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
    }
    let idx: Vec<usize> = (0..batch.len()).collect();

    let g = minibatch_loss_and_grad(&l.policy, &l.value_fn, &batch, &adv, &idx, &ppo);
    assert!(g.kl > 0.0);
    assert!(g.clip_fraction > 0.0 && g.clip_fraction < 1.0, "clip fraction {}", g.clip_fraction);
    let mut analytic: Vec<f64> = g.policy.slices().concat();
    analytic.extend(&g.log_std);
    analytic.extend(g.value.slices().concat());

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = get(&mut l, k);
        set(&mut l, k, orig + h);
        let up = minibatch_loss(&l.policy, &l.value_fn, &batch, &adv, &idx, &ppo);
        set(&mut l, k, orig - h);
        let down = minibatch_loss(&l.policy, &l.value_fn, &batch, &adv, &idx, &ppo);
        set(&mut l, k, orig);
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-4);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_advantages_leave_the_policy_alone() {
    let config = SystemConfig::standard(5.0);
    let ppo = small_ppo();
    let mut l = learner(&config, &ppo, 11);
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(12)).unwrap();
    let n = batch.len();
    let adv = Advantages { raw: vec![0.0; n], normalized: vec![0.0; n], returns: vec![-3.0; n] };
    let idx: Vec<usize> = (0..n).collect();
    let g = minibatch_loss_and_grad(&l.policy, &l.value_fn, &batch, &adv, &idx, &ppo);
    assert_eq!(g.policy_loss, 0.0);

    let before = l.clone();
    let diag = l.update(&batch, &adv, &ppo, &mut SimRng::seed_from_u64(13));
    assert!(!diag.aborted);
    assert_eq!(diag.policy_loss, 0.0);
    let drift = before
        .policy
        .net
        .params()
        .concat()
        .iter()
        .zip(l.policy.net.params().concat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-12, "policy drift {drift}");
    // The value function still fits its targets.
    assert_ne!(before.value_fn, l.value_fn);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let config = SystemConfig::standard(5.0);
    let ppo = PpoConfig { learning_rate: 0.0, ..small_ppo() };
    let mut l = learner(&config, &ppo, 14);
    let before = l.clone();
    let mut rng = SimRng::seed_from_u64(15);
    for _ in 0..3 {
        let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut rng).unwrap();
        ppo_update(&mut l, &batch, &ppo, &mut rng);
    }
    assert_eq!(before.policy, l.policy);
    assert_eq!(before.value_fn, l.value_fn);
}

#[test]
fn non_finite_gradients_roll_back() {
    let config = SystemConfig::standard(5.0);
    let ppo = small_ppo();
    let mut l = learner(&config, &ppo, 16);
    let batch = collect_rollouts(&l.policy, &l.value_fn, &config, &ppo, &mut SimRng::seed_from_u64(17)).unwrap();
    let mut adv = gae_advantages(&batch, ppo.discount, ppo.gae_lambda);
    // Poison a sample that will land in a late minibatch of some epoch.
    adv.returns[40] = f64::NAN;
    let before = l.clone();
    let diag = l.update(&batch, &adv, &ppo, &mut SimRng::seed_from_u64(18));
    assert!(diag.aborted);
    assert_eq!(before.policy, l.policy);
    assert_eq!(before.value_fn, l.value_fn);
}

#[test]
fn untrained_policy_is_the_uniform_rule() {
    let config = SystemConfig::standard(5.0);
    let ppo = PpoConfig { iterations: 0, episode_len: 100, ..small_ppo() };
    let out = train(&config, &ppo, 19, |_, _, _| Ok(())).unwrap();
    assert!(out.log.is_empty());
    let h = out.best.decision_rule(&QueueDist::uniform(5), 0, &mut stream(0, &[0])).unwrap();
    assert!(h.table().iter().all(|&x| x == 0.5));

    let rnd = FixedRule::mf_rnd(5, 2);
    let seeds: Vec<u64> = (0..20).collect();
    let learned = evaluate_deterministic(&out.best, &config, 100, &seeds).unwrap();
    let baseline = seeds.iter().map(|&s| mfc_rollout(&rnd, &config, 100, s).unwrap().discounted_return).sum::<f64>() / 20.0;
    assert_eq!(learned, baseline);
}

#[test]
fn training_is_reproducible_and_best_is_monotone() {
    let config = SystemConfig::standard(5.0);
    let ppo = small_ppo();
    let run = || {
        let mut seen = Vec::new();
        let out = train(&config, &ppo, 20, |r, _, _| {
            seen.push(r.best_return);
            Ok(())
        })
        .unwrap();
        (out, seen)
    };
    let (a, seen) = run();
    let (b, _) = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    assert_eq!(a.final_policy, b.final_policy);
    assert_eq!(seen.len(), 3);
    assert!(seen.windows(2).all(|w| w[1] >= w[0]));
    assert!(a.log.iter().all(|r| r.eval_return <= r.best_return));
}

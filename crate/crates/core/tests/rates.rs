use mflb_core::model::{decode_tuple, num_tuples};
use mflb_core::{effective_rates, mf_jsq_rule, mf_rnd_rule, thinned_rates, DecisionRule, QueueDist};
use proptest::prelude::*;

fn simplex(raw: Vec<f64>) -> QueueDist {
    let s: f64 = raw.iter().sum();
    QueueDist::new(raw.into_iter().map(|x| x / s).collect()).unwrap()
}

/// Some fill levels may carry no mass at all.
fn sparse_simplex(raw: Vec<f64>, holes: Vec<bool>) -> QueueDist {
    let mut w: Vec<f64> = raw.iter().zip(&holes).map(|(&x, &h)| if h { 0.0 } else { x }).collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    simplex(w)
}

fn random_rule(buffer: usize, d: usize, weights: &[f64]) -> DecisionRule {
    let rows = num_tuples(buffer, d);
    let mut table: Vec<f64> = (0..rows * d).map(|k| weights[k % weights.len()] + 1e-3).collect();
    for row in table.chunks_mut(d) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    DecisionRule::new(buffer, d, table).unwrap()
}

/// Rate seen by one tagged queue at fill `z`: it is in some slot `u` of a
/// dispatcher's sample (d ways, each with probability 1/M per dispatcher and
/// N/M dispatchers per queue cancel to a factor λ), the other slots are i.i.d.
/// `ν`, and the rule must pick slot `u`. No division by `ν(z)` is involved.
fn tagged_queue_rate(nu: &QueueDist, h: &DecisionRule, lambda: f64, z: usize) -> f64 {
    let buffer = nu.buffer();
    let d = h.d();
    let mut zbar = vec![0; d];
    let mut total = 0.0;
    for r in 0..num_tuples(buffer, d) {
        decode_tuple(r, buffer, &mut zbar);
        for u in 0..d {
            if zbar[u] != z {
                continue;
            }
            let others: f64 = (0..d).filter(|&k| k != u).map(|k| nu[zbar[k]]).product();
            total += others * h.prob(&zbar, u);
        }
    }
    lambda * total
}

#[test]
fn jsq_matches_power_of_d_closed_form() {
    // Classical power-of-d: a queue at fill z receives λ (S(z)^d − S(z+1)^d) / ν(z)
    // with S(z) = P(fill ≥ z).
    let nu = QueueDist::new(vec![0.05, 0.25, 0.3, 0.2, 0.15, 0.05]).unwrap();
    for d in 1..=4 {
        let rates = effective_rates(&nu, &mf_jsq_rule(5, d), 0.8);
        for z in 0..=5 {
            let s = |k: usize| nu.probs()[k.min(6)..].iter().sum::<f64>();
            let expected = 0.8 * (s(z).powi(d as i32) - s(z + 1).powi(d as i32)) / nu[z];
            assert!((rates[z] - expected).abs() < 1e-12, "d={d} z={z}: {} vs {expected}", rates[z]);
        }
    }
}

#[test]
fn brute_force_oracle_small_systems() {
    let mut seed = 0x1234_5678_u64;
    let mut next = || {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((seed >> 11) as f64) / (1u64 << 53) as f64
    };
    for buffer in 1..=3 {
        for d in 1..=3 {
            for _ in 0..20 {
                let nu = simplex((0..=buffer).map(|_| next() + 0.01).collect());
                let weights: Vec<f64> = (0..num_tuples(buffer, d) * d).map(|_| next()).collect();
                let h = random_rule(buffer, d, &weights);
                let rates = effective_rates(&nu, &h, 0.7);
                for (z, &rate) in rates.iter().enumerate() {
                    let oracle = tagged_queue_rate(&nu, &h, 0.7, z);
                    assert!((rate - oracle).abs() < 1e-12, "B={buffer} d={d} z={z}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn conservation_and_bounds(
        buffer in 1usize..=5,
        d in 1usize..=3,
        raw in prop::collection::vec(0.0f64..1.0, 6),
        holes in prop::collection::vec(any::<bool>(), 6),
        weights in prop::collection::vec(0.0f64..1.0, 1..64),
        lambda in 0.0f64..2.0,
    ) {
        let nu = sparse_simplex(raw[..=buffer].to_vec(), holes[..=buffer].to_vec());
        let h = random_rule(buffer, d, &weights);
        let thinned = thinned_rates(&nu, &h, lambda);
        prop_assert!((thinned.iter().sum::<f64>() - lambda).abs() < 1e-9);
        let rates = effective_rates(&nu, &h, lambda);
        let mean: f64 = rates.iter().zip(nu.probs()).map(|(r, p)| r * p).sum();
        prop_assert!((mean - lambda).abs() < 1e-9);
        for z in 0..=buffer {
            prop_assert!(rates[z] >= 0.0);
            prop_assert!(rates[z] <= d as f64 * lambda * (1.0 + 1e-12));
            if nu[z] == 0.0 {
                prop_assert_eq!(rates[z], 0.0);
                prop_assert_eq!(thinned[z], 0.0);
            }
        }
    }

    #[test]
    fn uniform_rule_passes_rate_through(
        buffer in 1usize..=5,
        d in 1usize..=3,
        raw in prop::collection::vec(0.0f64..1.0, 6),
        holes in prop::collection::vec(any::<bool>(), 6),
        lambda in 0.01f64..2.0,
    ) {
        let nu = sparse_simplex(raw[..=buffer].to_vec(), holes[..=buffer].to_vec());
        let rates = effective_rates(&nu, &mf_rnd_rule(buffer, d), lambda);
        for z in 0..=buffer {
            if nu[z] > 0.0 {
                prop_assert!((rates[z] - lambda).abs() <= 1e-12 * lambda);
            }
        }
    }

    #[test]
    fn jsq_favours_emptier_queues(
        raw in prop::collection::vec(0.01f64..1.0, 6),
        lambda in 0.01f64..2.0,
    ) {
        let nu = simplex(raw);
        let rates = effective_rates(&nu, &mf_jsq_rule(5, 2), lambda);
        for z in 1..=5 {
            prop_assert!(rates[z] <= rates[z - 1] + 1e-12);
        }
    }
}

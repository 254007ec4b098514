//! Mean-field rate algebra.
//!
//! With queue-state law `ν`, a dispatcher's `d` sampled fills are i.i.d. `ν`,
//! so the sampled tuple has the product law `μ = ν^{⊗d}`. Combined with a
//! decision rule `h` this gives the state-action law `G = μ ⊗ h`. Thinning
//! the total arrival stream by `G` yields the rate `λ'(z)` into the set of
//! queues at fill `z`, and `λ'(z) / ν(z)` is the rate seen by one such queue.

use crate::model::{decode_tuple, num_tuples, DecisionRule, QueueDist};

/// Law of a sampled tuple `z̄ ∈ {0..B}^d`, indexed like [`DecisionRule`] rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleDist {
    pub buffer: usize,
    pub d: usize,
    pub probs: Vec<f64>,
}

/// Joint law of sampled tuple and chosen slot, `table[row * d + u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDist {
    pub buffer: usize,
    pub d: usize,
    pub table: Vec<f64>,
}

impl StateActionDist {
    pub fn total(&self) -> f64 {
        self.table.iter().sum()
    }
}

pub fn product_measure(nu: &QueueDist, d: usize) -> TupleDist {
    let buffer = nu.buffer();
    let rows = num_tuples(buffer, d);
    let mut zbar = vec![0; d];
    let probs = (0..rows)
        .map(|r| {
            decode_tuple(r, buffer, &mut zbar);
            zbar.iter().map(|&z| nu[z]).product()
        })
        .collect();
    TupleDist { buffer, d, probs }
}

pub fn state_action_dist(mu: &TupleDist, h: &DecisionRule) -> StateActionDist {
    assert_eq!((mu.buffer, mu.d), (h.buffer(), h.d()), "tuple law and rule disagree on (B, d)");
    let table = mu
        .probs
        .iter()
        .enumerate()
        .flat_map(|(r, &m)| h.row(r).iter().map(move |&p| m * p))
        .collect();
    StateActionDist { buffer: mu.buffer, d: mu.d, table }
}

/// `λ'(z)` for every fill level `z`.
pub fn thinned_rates(nu: &QueueDist, h: &DecisionRule, lambda: f64) -> Vec<f64> {
    let buffer = nu.buffer();
    let d = h.d();
    let g = state_action_dist(&product_measure(nu, d), h);
    let mut out = vec![0.0; buffer + 1];
    let mut zbar = vec![0; d];
    for (r, row) in g.table.chunks(d).enumerate() {
        decode_tuple(r, buffer, &mut zbar);
        for (u, &p) in row.iter().enumerate() {
            out[zbar[u]] += p;
        }
    }
    out.iter_mut().for_each(|x| *x *= lambda);
    out
}

pub fn thinned_rate(nu: &QueueDist, h: &DecisionRule, lambda: f64, z: usize) -> f64 {
    thinned_rates(nu, h, lambda)[z]
}

/// Per-queue arrival rate `λ(ν, z) = λ'(z) / ν(z)` for every `z`; levels
/// carrying no mass get rate 0, since they contribute nothing downstream.
pub fn effective_rates(nu: &QueueDist, h: &DecisionRule, lambda: f64) -> Vec<f64> {
    thinned_rates(nu, h, lambda)
        .into_iter()
        .zip(nu.probs())
        .map(|(t, &p)| if p > 0.0 { t / p } else { 0.0 })
        .collect()
}

pub fn effective_rate(nu: &QueueDist, h: &DecisionRule, lambda: f64, z: usize) -> f64 {
    effective_rates(nu, h, lambda)[z]
}

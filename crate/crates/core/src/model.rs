//! Domain types: queue-state distributions, the Markov-modulated arrival
//! process, lower-level decision rules and the system configuration.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};

/// Tolerance for simplex-valued quantities.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Checks a probability vector, clamping round-off negatives and
/// renormalizing when the sum is within `tol` of one.
fn normalize_simplex(mut probs: Vec<f64>, tol: f64, what: &str) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what}: empty")));
    }
    for (i, p) in probs.iter_mut().enumerate() {
        if !p.is_finite() || *p < -tol || *p > 1.0 + tol {
            return Err(Error::InvalidDistribution(format!("{what}: entry {i} = {p}")));
        }
        *p = p.clamp(0.0, 1.0);
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {sum}")));
    }
    // Leave pure round-off alone so that re-validating a vector is a no-op.
    if (sum - 1.0).abs() > 1e-12 {
        probs.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(probs)
}

/// Draws an index from a probability vector with one uniform variate.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Fraction of queues at each fill level `0..=B`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueDist {
    probs: Vec<f64>,
}

impl QueueDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Ok(Self { probs: normalize_simplex(probs, SIMPLEX_TOL, "queue distribution")? })
    }

    pub fn point_mass(buffer: usize, z: usize) -> Self {
        assert!(z <= buffer, "fill level {z} above buffer {buffer}");
        let mut probs = vec![0.0; buffer + 1];
        probs[z] = 1.0;
        Self { probs }
    }

    pub fn uniform(buffer: usize) -> Self {
        Self { probs: vec![1.0 / (buffer + 1) as f64; buffer + 1] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn buffer(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn total_variation(&self, other: &QueueDist) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

impl std::ops::Index<usize> for QueueDist {
    type Output = f64;
    fn index(&self, z: usize) -> &f64 {
        &self.probs[z]
    }
}

/// Markov-modulated arrival rate: a discrete-time chain over rate levels,
/// stepped once per decision epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalProcess {
    levels: Vec<f64>,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

impl ArrivalProcess {
    pub fn new(levels: Vec<f64>, transition: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        let k = levels.len();
        if k == 0 {
            return Err(Error::InvalidConfig("arrival process needs at least one level".into()));
        }
        if let Some(l) = levels.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidConfig(format!("arrival level {l} must be positive")));
        }
        if transition.len() != k || transition.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidConfig(format!("transition matrix must be {k}x{k}")));
        }
        let transition = transition
            .into_iter()
            .map(|row| normalize_simplex(row, 1e-12, "arrival transition row"))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if initial.len() != k {
            return Err(Error::InvalidConfig(format!("initial level law must have {k} entries")));
        }
        let initial = normalize_simplex(initial, SIMPLEX_TOL, "initial level law")
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(Self { levels, transition, initial })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(vec![rate], vec![vec![1.0]], vec![1.0])
    }

    /// Two levels (high, low) with per-epoch switching probabilities and a
    /// uniform initial level.
    pub fn two_level(high: f64, low: f64, p_high_to_low: f64, p_low_to_high: f64) -> Result<Self> {
        Self::new(
            vec![high, low],
            vec![vec![1.0 - p_high_to_low, p_high_to_low], vec![p_low_to_high, 1.0 - p_low_to_high]],
            vec![0.5, 0.5],
        )
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn rate(&self, level: usize) -> f64 {
        self.levels[level]
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn uniform_initial(&self) -> Vec<f64> {
        vec![1.0 / self.levels.len() as f64; self.levels.len()]
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, level: usize, rng: &mut R) -> usize {
        sample_categorical(&self.transition[level], rng)
    }
}

/// Lower-level policy `h(u | z̄)`: for every tuple of `d` sampled fill levels,
/// a distribution over which of the `d` sampled queues to join.
///
/// Rows are indexed by the tuple read as a base-`(B+1)` number with the first
/// slot most significant; slots are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    buffer: usize,
    d: usize,
    table: Vec<f64>,
}

impl DecisionRule {
    pub fn new(buffer: usize, d: usize, mut table: Vec<f64>) -> Result<Self> {
        if d == 0 || buffer == 0 {
            return Err(Error::InvalidRule(format!("need B >= 1 and d >= 1, got B={buffer} d={d}")));
        }
        let rows = num_tuples(buffer, d);
        if table.len() != rows * d {
            return Err(Error::InvalidRule(format!(
                "table has {} entries, expected {}",
                table.len(),
                rows * d
            )));
        }
        for (r, row) in table.chunks_mut(d).enumerate() {
            let normalized = normalize_simplex(row.to_vec(), SIMPLEX_TOL, "rule row")
                .map_err(|e| Error::InvalidRule(format!("row {r}: {e}")))?;
            row.copy_from_slice(&normalized);
        }
        Ok(Self { buffer, d, table })
    }

    /// Builds a rule row by row from a function of the sampled tuple.
    pub fn from_fn(buffer: usize, d: usize, mut f: impl FnMut(&[usize]) -> Vec<f64>) -> Result<Self> {
        let rows = num_tuples(buffer, d);
        let mut table = Vec::with_capacity(rows * d);
        let mut zbar = vec![0; d];
        for r in 0..rows {
            decode_tuple(r, buffer, &mut zbar);
            table.extend(f(&zbar));
        }
        Self::new(buffer, d, table)
    }

    pub fn buffer(&self) -> usize {
        self.buffer
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_rows(&self) -> usize {
        self.table.len() / self.d
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.table[r * self.d..(r + 1) * self.d]
    }

    pub fn row_for(&self, zbar: &[usize]) -> &[f64] {
        self.row(encode_tuple(zbar, self.buffer))
    }

    pub fn prob(&self, zbar: &[usize], slot: usize) -> f64 {
        self.row_for(zbar)[slot]
    }
}

pub fn num_tuples(buffer: usize, d: usize) -> usize {
    (buffer + 1).pow(d as u32)
}

pub fn encode_tuple(zbar: &[usize], buffer: usize) -> usize {
    zbar.iter().fold(0, |acc, &z| acc * (buffer + 1) + z)
}

pub fn decode_tuple(mut index: usize, buffer: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = index % (buffer + 1);
        index /= buffer + 1;
    }
}

/// The anonymous view of one dispatcher: the fill levels of its sampled queues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentObservation {
    zbar: Vec<usize>,
}

impl AgentObservation {
    pub fn new(zbar: Vec<usize>, buffer: usize) -> Result<Self> {
        if let Some(z) = zbar.iter().find(|&&z| z > buffer) {
            return Err(Error::InvalidConfig(format!("observed fill {z} exceeds buffer {buffer}")));
        }
        Ok(Self { zbar })
    }

    pub fn zbar(&self) -> &[usize] {
        &self.zbar
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub num_queues: usize,
    pub num_clients: usize,
    /// Queues sampled per client and epoch.
    pub d: usize,
    pub buffer: usize,
    pub service_rate: f64,
    pub delta_t: f64,
    pub arrival: ArrivalProcess,
    pub nu0: QueueDist,
    pub discount: f64,
    pub drop_penalty: f64,
}

impl SystemConfig {
    /// Default experimental setting: M = 100 queues,
    /// N = 10^4 clients, d = 2, B = 5, unit service rate, arrival levels
    /// (0.9, 0.6) switching high→low w.p. 0.2 and low→high w.p. 0.5,
    /// empty initial queues, γ = 0.99 and unit drop penalty.
    pub fn standard(delta_t: f64) -> Self {
        Self {
            num_queues: 100,
            num_clients: 10_000,
            d: 2,
            buffer: 5,
            service_rate: 1.0,
            delta_t,
            arrival: ArrivalProcess::two_level(0.9, 0.6, 0.2, 0.5).expect("static arrival process"),
            nu0: QueueDist::point_mass(5, 0),
            discount: 0.99,
            drop_penalty: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_queues == 0 || self.num_clients == 0 {
            return bad("num_queues and num_clients must be positive".into());
        }
        if self.d == 0 || self.d > self.num_queues {
            return bad(format!("d = {} must satisfy 1 <= d <= M = {}", self.d, self.num_queues));
        }
        if self.buffer == 0 {
            return bad("buffer must be at least 1".into());
        }
        if !(self.service_rate > 0.0 && self.service_rate.is_finite()) {
            return bad(format!("service_rate = {} must be positive", self.service_rate));
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return bad(format!("delta_t = {} must be positive", self.delta_t));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount = {} must lie in (0, 1)", self.discount));
        }
        if !(self.drop_penalty > 0.0 && self.drop_penalty.is_finite()) {
            return bad(format!("drop_penalty = {} must be positive", self.drop_penalty));
        }
        if self.nu0.buffer() != self.buffer {
            return bad(format!(
                "nu0 has {} entries, expected B + 1 = {}",
                self.nu0.probs().len(),
                self.buffer + 1
            ));
        }
        Ok(())
    }

    /// Keys understood by [`SystemConfig::apply_kv`].
    pub const KEYS: &'static [&'static str] = &[
        "num_queues",
        "num_clients",
        "d",
        "buffer",
        "service_rate",
        "delta_t",
        "arrival_levels",
        "arrival_transition",
        "arrival_initial",
        "nu0",
        "discount",
        "drop_penalty",
    ];

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("num_queues", self.num_queues.to_string());
        kv.insert("num_clients", self.num_clients.to_string());
        kv.insert("d", self.d.to_string());
        kv.insert("buffer", self.buffer.to_string());
        kv.insert("service_rate", self.service_rate.to_string());
        kv.insert("delta_t", self.delta_t.to_string());
        kv.insert("arrival_levels", kv::join(self.arrival.levels()));
        kv.insert("arrival_transition", kv::join_matrix(self.arrival.transition()));
        kv.insert("arrival_initial", kv::join(self.arrival.initial()));
        kv.insert("nu0", kv::join(self.nu0.probs()));
        kv.insert("discount", self.discount.to_string());
        kv.insert("drop_penalty", self.drop_penalty.to_string());
        kv
    }

    /// Overrides fields present in `kv`, leaving the rest untouched.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.parsed($key)? {
                    self.$field = v;
                }
            };
        }
        set!(num_queues, "num_queues");
        set!(num_clients, "num_clients");
        set!(d, "d");
        set!(buffer, "buffer");
        set!(service_rate, "service_rate");
        set!(delta_t, "delta_t");
        set!(discount, "discount");
        set!(drop_penalty, "drop_penalty");

        let levels = kv.list::<f64>("arrival_levels")?;
        let transition = kv.matrix::<f64>("arrival_transition")?;
        let initial = kv.list::<f64>("arrival_initial")?;
        if levels.is_some() || transition.is_some() || initial.is_some() {
            let levels = levels.unwrap_or_else(|| self.arrival.levels().to_vec());
            let k = levels.len();
            let transition = match transition {
                Some(t) => t,
                None if k == self.arrival.num_levels() => self.arrival.transition().to_vec(),
                None if k == 1 => vec![vec![1.0]],
                None => {
                    return Err(Error::InvalidConfig(
                        "arrival_transition required when the number of levels changes".into(),
                    ))
                }
            };
            let initial = match initial {
                Some(i) => i,
                None if k == self.arrival.num_levels() => self.arrival.initial().to_vec(),
                None => vec![1.0 / k as f64; k],
            };
            self.arrival = ArrivalProcess::new(levels, transition, initial)?;
        }

        match kv.list::<f64>("nu0")? {
            Some(p) => self.nu0 = QueueDist::new(p)?,
            // Keep the "all empty" default meaningful when B changes.
            None if self.nu0.buffer() != self.buffer && self.nu0.probs()[0] == 1.0 => {
                self.nu0 = QueueDist::point_mass(self.buffer, 0);
            }
            None => {}
        }
        self.validate()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::standard(1.0);
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }
}

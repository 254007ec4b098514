//! Experiment configuration: the system and learner settings plus what to
//! evaluate, how often, and where to write results.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mflb_core::kv::KvMap;
use mflb_core::policy::PolicyCheckpoint;
use mflb_core::{FixedRule, PolicyMode, PpoConfig, SystemConfig, UpperLevelPolicy};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    MfJsq,
    MfRnd,
    Learned(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mf_jsq" | "jsq" => Ok(Self::MfJsq),
            "mf_rnd" | "rnd" => Ok(Self::MfRnd),
            other => match other.strip_prefix("learned:") {
                Some(path) if !path.is_empty() => Ok(Self::Learned(PathBuf::from(path))),
                _ => Err(Error::Config(format!(
                    "unknown policy `{other}` (expected mf_jsq, mf_rnd or learned:<checkpoint>)"
                ))),
            },
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MfJsq => f.write_str("mf_jsq"),
            Self::MfRnd => f.write_str("mf_rnd"),
            Self::Learned(p) => write!(f, "learned:{}", p.display()),
        }
    }
}

impl PolicySpec {
    /// Instantiates the policy for `system`; learned policies run
    /// deterministically and must match its buffer, `d` and level count.
    pub fn load(&self, system: &SystemConfig) -> Result<Box<dyn UpperLevelPolicy>> {
        Ok(match self {
            Self::MfJsq => Box::new(FixedRule::mf_jsq(system.buffer, system.d)),
            Self::MfRnd => Box::new(FixedRule::mf_rnd(system.buffer, system.d)),
            Self::Learned(path) => {
                let ckpt = PolicyCheckpoint::load(path).map_err(|e| match e {
                    mflb_core::Error::Io(source) => Error::File { path: path.clone(), source },
                    other => other.into(),
                })?;
                ckpt.check_compatible(system)?;
                Box::new(ckpt.policy.with_mode(PolicyMode::Deterministic))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub ppo: PpoConfig,
    pub policies: Vec<PolicySpec>,
    /// Evaluation episode length; when unset it is `round(total_time / Δt)`.
    pub horizon: Option<usize>,
    pub total_time: f64,
    pub replications: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    /// Delays swept by `sweep` and `compare`.
    pub delta_ts: Vec<f64>,
    /// Queue counts swept by `sweep` and `compare`.
    pub queues: Vec<usize>,
    /// Client counts paired with `queues`; `N = M²` when unset.
    pub clients: Option<Vec<usize>>,
}

const EXPERIMENT_KEYS: &[&str] = &[
    "experiment.policies",
    "experiment.horizon",
    "experiment.total_time",
    "experiment.replications",
    "experiment.seed",
    "experiment.out",
    "experiment.threads",
    "sweep.delta_t",
    "sweep.queues",
    "sweep.clients",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let system = SystemConfig::standard(1.0);
        Self {
            delta_ts: vec![system.delta_t],
            queues: vec![system.num_queues],
            system,
            ppo: PpoConfig::default(),
            policies: vec![PolicySpec::MfJsq, PolicySpec::MfRnd],
            horizon: None,
            total_time: 500.0,
            replications: 100,
            seed: 0,
            out: PathBuf::from("results"),
            threads: 1,
            clients: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File { path: path.into(), source })?;
        Self::from_kv(&KvMap::parse(&text)?)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    /// Overrides the fields present in `kv`; unknown keys are rejected.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(key) = kv.keys().find(|k| {
            !SystemConfig::KEYS.contains(k) && !PpoConfig::KEYS.contains(k) && !EXPERIMENT_KEYS.contains(k)
        }) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let delta_t_before = self.system.delta_t;
        let queues_before = self.system.num_queues;
        self.system.apply_kv(kv)?;
        self.ppo.apply_kv(kv)?;
        // Single-point sweeps follow the system unless given explicitly.
        if self.delta_ts == [delta_t_before] {
            self.delta_ts = vec![self.system.delta_t];
        }
        if self.queues == [queues_before] {
            self.queues = vec![self.system.num_queues];
        }

        if let Some(list) = kv.list::<String>("experiment.policies")? {
            self.policies = list.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(h) = kv.parsed("experiment.horizon")? {
            self.horizon = Some(h);
        }
        if let Some(t) = kv.parsed("experiment.total_time")? {
            self.total_time = t;
        }
        if let Some(n) = kv.parsed("experiment.replications")? {
            self.replications = n;
        }
        if let Some(s) = kv.parsed("experiment.seed")? {
            self.seed = s;
        }
        if let Some(o) = kv.get("experiment.out") {
            self.out = PathBuf::from(o);
        }
        if let Some(t) = kv.parsed("experiment.threads")? {
            self.threads = t;
        }
        if let Some(d) = kv.list("sweep.delta_t")? {
            self.delta_ts = d;
        }
        if let Some(q) = kv.list("sweep.queues")? {
            self.queues = q;
        }
        if let Some(c) = kv.list("sweep.clients")? {
            self.clients = Some(c);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replications == 0 {
            return bad("experiment.replications must be at least 1".into());
        }
        if self.horizon == Some(0) {
            return bad("experiment.horizon must be at least 1".into());
        }
        if !(self.total_time > 0.0 && self.total_time.is_finite()) {
            return bad("experiment.total_time must be positive".into());
        }
        if self.policies.is_empty() {
            return bad("experiment.policies must not be empty".into());
        }
        if self.delta_ts.is_empty() || self.delta_ts.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return bad("sweep.delta_t must be a non-empty list of positive delays".into());
        }
        if self.queues.is_empty() || self.queues.contains(&0) {
            return bad("sweep.queues must be a non-empty list of positive counts".into());
        }
        if let Some(c) = &self.clients {
            if c.len() != self.queues.len() || c.contains(&0) {
                return bad("sweep.clients must give one positive count per entry of sweep.queues".into());
            }
        }
        Ok(())
    }

    /// Evaluation episode length at delay `delta_t`.
    pub fn horizon_for(&self, delta_t: f64) -> usize {
        self.horizon.unwrap_or_else(|| ((self.total_time / delta_t).round() as usize).max(1))
    }

    /// `(M, N)` pairs of the size sweep.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        match &self.clients {
            Some(c) => self.queues.iter().copied().zip(c.iter().copied()).collect(),
            None => self.queues.iter().map(|&m| (m, m * m)).collect(),
        }
    }

    /// The system at one sweep point.
    pub fn system_at(&self, delta_t: f64, num_queues: usize, num_clients: usize) -> Result<SystemConfig> {
        let mut s = self.system.clone();
        s.delta_t = delta_t;
        s.num_queues = num_queues;
        s.num_clients = num_clients;
        s.validate()?;
        Ok(s)
    }
}

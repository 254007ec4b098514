//! Policy checkpoints in the flat key-value format.
//!
//! Parameters are written as IEEE-754 bit patterns (hex), weights in the
//! column-major order of the in-memory matrices, so a save/load cycle is
//! bit-exact. The system configuration the policy was trained for is stored
//! under the `system.` prefix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::upper::{PolicyMode, UpperPolicy};
use crate::error::{Error, Result};
use crate::kv::{decode_f64s, encode_f64s, join, KvMap};
use crate::model::SystemConfig;
use crate::nn::{Dense, Mlp};

const FORMAT: &str = "mflb-upper-policy";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub config: SystemConfig,
    pub policy: UpperPolicy,
}

fn field<'a>(kv: &'a KvMap, key: &str) -> Result<&'a str> {
    kv.get(key).ok_or_else(|| Error::Checkpoint(format!("missing key `{key}`")))
}

fn number<T: std::str::FromStr>(kv: &KvMap, key: &str) -> Result<T> {
    field(kv, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
}

impl PolicyCheckpoint {
    pub fn to_kv(&self) -> KvMap {
        let p = &self.policy;
        let mut kv = KvMap::new();
        kv.insert("format", FORMAT);
        kv.insert("version", VERSION.to_string());
        let sys = self.config.to_kv();
        for key in sys.keys() {
            kv.insert(format!("system.{key}"), sys.get(key).unwrap_or_default());
        }
        kv.insert("policy.buffer", p.buffer.to_string());
        kv.insert("policy.d", p.d.to_string());
        kv.insert("policy.num_levels", p.num_levels.to_string());
        kv.insert("policy.mode", match p.mode {
            PolicyMode::Deterministic => "deterministic",
            PolicyMode::Stochastic => "stochastic",
        });
        kv.insert("policy.sizes", join(&p.net.sizes()));
        for (i, layer) in p.net.layers.iter().enumerate() {
            kv.insert(format!("policy.layer{i}.weight"), encode_f64s(layer.weight.as_slice()));
            kv.insert(format!("policy.layer{i}.bias"), encode_f64s(layer.bias.as_slice()));
        }
        kv.insert("policy.log_std", encode_f64s(&p.log_std));
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        if field(kv, "format")? != FORMAT {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let version: u32 = number(kv, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut sys = KvMap::new();
        for key in kv.keys() {
            if let Some(k) = key.strip_prefix("system.") {
                sys.insert(k, kv.get(key).unwrap_or_default());
            }
        }
        let config = SystemConfig::from_kv(&sys)?;

        let buffer: usize = number(kv, "policy.buffer")?;
        let d: usize = number(kv, "policy.d")?;
        let num_levels: usize = number(kv, "policy.num_levels")?;
        let mode = match field(kv, "policy.mode")? {
            "deterministic" => PolicyMode::Deterministic,
            "stochastic" => PolicyMode::Stochastic,
            other => return Err(Error::Checkpoint(format!("unknown mode `{other}`"))),
        };
        let sizes: Vec<usize> = kv
            .list("policy.sizes")
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .ok_or_else(|| Error::Checkpoint("missing key `policy.sizes`".into()))?;
        if sizes.len() < 2
            || sizes[0] != UpperPolicy::input_size(buffer, num_levels)
            || sizes[sizes.len() - 1] != UpperPolicy::output_size(buffer, d)
        {
            return Err(Error::Checkpoint(format!("layer sizes {sizes:?} do not fit B={buffer}, d={d}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = decode_f64s(field(kv, &format!("policy.layer{i}.weight"))?)?;
                let bias = decode_f64s(field(kv, &format!("policy.layer{i}.bias"))?)?;
                if weight.len() != w[0] * w[1] || bias.len() != w[1] {
                    return Err(Error::Checkpoint(format!("layer {i} has the wrong parameter count")));
                }
                Ok(Dense {
                    weight: DMatrix::from_column_slice(w[1], w[0], &weight),
                    bias: DVector::from_vec(bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_std = decode_f64s(field(kv, "policy.log_std")?)?;
        if log_std.len() != sizes[sizes.len() - 1] {
            return Err(Error::Checkpoint("log_std length does not match the action size".into()));
        }
        let policy = UpperPolicy { buffer, d, num_levels, net: Mlp { layers }, log_std, mode };
        Ok(Self { config, policy })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv().render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv(&KvMap::parse(&text)?)
    }

    /// Checks that the policy's input/output layout fits `config`.
    pub fn check_compatible(&self, config: &SystemConfig) -> Result<()> {
        let p = &self.policy;
        if p.buffer != config.buffer || p.d != config.d || p.num_levels != config.arrival.num_levels() {
            return Err(Error::Checkpoint(format!(
                "checkpoint trained for B={}, d={}, {} levels; config has B={}, d={}, {} levels",
                p.buffer,
                p.d,
                p.num_levels,
                config.buffer,
                config.d,
                config.arrival.num_levels()
            )));
        }
        Ok(())
    }
}

//! Experiment orchestration on top of `mflb-core`: configuration files,
//! Monte Carlo evaluation with confidence intervals, the delay and system
//! size sweeps, and CSV output.

pub mod config;
pub mod error;
pub mod eval;
pub mod records;

pub use config::{ExperimentConfig, PolicySpec};
pub use error::{Error, Result};
pub use eval::{
    compare, evaluate_policy_finite, evaluate_policy_mfc, scaling_study, EvalResult, PolicyEval, Replication,
    ScalingRow, SystemKind,
};

//! Upper-level policies: maps from `(ν, arrival level)` to a decision rule.

mod checkpoint;
mod rules;
mod upper;

pub use checkpoint::PolicyCheckpoint;
pub use rules::{mf_jsq_rule, mf_rnd_rule, FixedRule, RuleKind};
pub use upper::{
    gaussian_log_prob, normalize_action, observation, policy_decision_rule, PolicyMode,
    PolicyOutput, UpperPolicy, ACTION_FLOOR,
};

use crate::error::Result;
use crate::model::{DecisionRule, QueueDist};
use crate::rng::SimRng;

pub trait UpperLevelPolicy: Send + Sync {
    fn decision_rule(&self, nu: &QueueDist, level: usize, rng: &mut SimRng) -> Result<DecisionRule>;

    fn name(&self) -> String;
}

impl<P: UpperLevelPolicy + ?Sized> UpperLevelPolicy for Box<P> {
    fn decision_rule(&self, nu: &QueueDist, level: usize, rng: &mut SimRng) -> Result<DecisionRule> {
        (**self).decision_rule(nu, level, rng)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

use super::UpperLevelPolicy;
use crate::error::Result;
use crate::model::{DecisionRule, QueueDist};
use crate::rng::SimRng;

/// Join-the-shortest of the sampled queues, splitting ties evenly.
pub fn mf_jsq_rule(buffer: usize, d: usize) -> DecisionRule {
    DecisionRule::from_fn(buffer, d, |zbar| {
        let min = *zbar.iter().min().expect("d >= 1");
        let ties = zbar.iter().filter(|&&z| z == min).count() as f64;
        zbar.iter().map(|&z| if z == min { 1.0 / ties } else { 0.0 }).collect()
    })
    .expect("JSQ rows are stochastic")
}

/// Uniform choice among the sampled queues.
pub fn mf_rnd_rule(buffer: usize, d: usize) -> DecisionRule {
    DecisionRule::from_fn(buffer, d, |_| vec![1.0 / d as f64; d]).expect("uniform rows are stochastic")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    MfJsq,
    MfRnd,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::MfJsq => "mf_jsq",
            RuleKind::MfRnd => "mf_rnd",
        }
    }
}

/// A decision rule applied regardless of the queue state and arrival level.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedRule {
    pub kind: RuleKind,
    pub rule: DecisionRule,
}

impl FixedRule {
    pub fn new(kind: RuleKind, buffer: usize, d: usize) -> Self {
        let rule = match kind {
            RuleKind::MfJsq => mf_jsq_rule(buffer, d),
            RuleKind::MfRnd => mf_rnd_rule(buffer, d),
        };
        Self { kind, rule }
    }

    pub fn mf_jsq(buffer: usize, d: usize) -> Self {
        Self::new(RuleKind::MfJsq, buffer, d)
    }

    pub fn mf_rnd(buffer: usize, d: usize) -> Self {
        Self::new(RuleKind::MfRnd, buffer, d)
    }
}

impl UpperLevelPolicy for FixedRule {
    fn decision_rule(&self, _nu: &QueueDist, _level: usize, _rng: &mut SimRng) -> Result<DecisionRule> {
        Ok(self.rule.clone())
    }

    fn name(&self) -> String {
        self.kind.name().to_string()
    }
}

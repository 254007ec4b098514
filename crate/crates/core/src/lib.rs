//! Mean-field control for load balancing in large parallel queueing systems
//! where dispatchers only see queue states at synchronized epochs.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] and [`rates`]: domain types and the mean-field rate algebra
//!   (product measure over sampled queues, Poisson thinning, effective
//!   per-queue arrival rates).
//! * [`expm`] and [`dynamics`]: the exact one-epoch discretization of the
//!   mean-field system through an extended-generator matrix exponential,
//!   plus the upper-level MDP step and rollout.
//! * [`finite`]: an event-exact simulator of the finite N-client, M-queue
//!   system driven by any upper-level policy.
//! * [`policy`]: fixed decision rules (JSQ / RND) and the learned
//!   neural upper-level policy with its checkpoint format.
//! * [`nn`] and [`ppo`]: a small hand-written MLP and the PPO learner.

pub mod dynamics;
pub mod error;
pub mod expm;
pub mod finite;
pub mod kv;
pub mod model;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rates;
pub mod rng;

pub use dynamics::{
    build_extended_generator, build_generator, epoch_transition, mfc_rollout, mfc_step,
    EpochResult, ExtendedGenerator, Generator, MfcState, MfcTrajectory,
};
pub use error::{Error, Result};
pub use expm::matrix_exponential;
pub use finite::{
    apply_decision_rule, empirical_distribution, per_queue_rates, run_finite_episode,
    sample_agents, simulate_epoch, AgentAssignment, AgentSamples, EpochStats, FiniteEpisode,
    FiniteSystemState,
};
pub use model::{AgentObservation, ArrivalProcess, DecisionRule, QueueDist, SystemConfig};
pub use policy::{
    mf_jsq_rule, mf_rnd_rule, policy_decision_rule, FixedRule, PolicyMode, PolicyOutput,
    RuleKind, UpperLevelPolicy, UpperPolicy,
};
pub use rates::{
    effective_rate, effective_rates, product_measure, state_action_dist, thinned_rate, thinned_rates,
};
pub use ppo::{
    collect_rollouts, gae_advantages, ppo_update, train, PpoConfig, PpoLearner, RolloutBatch,
    TrainOutcome, ValueFunction,
};
pub use rng::SimRng;

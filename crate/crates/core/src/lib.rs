//! Temperature-conditional generative flow networks.
//!
//! The crate covers the full training stack for GFlowNets whose sampling
//! distribution is conditioned on an inverse temperature `beta`, so that a
//! single model approximates `p(x | beta) ∝ R(x)^beta` for a range of `beta`:
//!
//! - [`env`]: DAG-structured environments (hypergrid, prepend/append
//!   sequences), reward oracles and offline datasets.
//! - [`nn`]: a small multilayer perceptron with reverse-mode gradients, Adam
//!   and a finite-difference gradient checker.
//! - [`policy`]: the conditional model (unconditional, layer-conditioned,
//!   logit-scaled and logit-scaled + layer-conditioned), forward/backward
//!   policies and trajectory sampling.
//! - [`objective`]: trajectory balance, detailed balance and
//!   sub-trajectory balance losses with analytic gradients.
//! - [`trainer`]: temperature schedules, reward-prioritized replay, the
//!   online discovery loop and offline training.
//! - [`eval`]: exact tempered targets, exact model marginals by dynamic
//!   programming, L1 distances, mode counting and reward statistics.
//!
//! Everything is `no_std` + `alloc`; file formats, configuration and the
//! command-line runner live in the companion `logit-gfn` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod env;
pub mod eval;
pub mod nn;
pub mod objective;
pub mod policy;
pub mod trainer;

pub use env::{
    ActionId, AnyEnv, EnvError, EnvKind, EnvState, Environment, Hypergrid, OfflineDataset,
    Payload, RewardOracle, RewardScale, RewardSpec, SequenceEnv, StateId,
};
pub use eval::{EvalError, ModeSpec, RewardStats, TerminalDistribution, ThresholdBase};
pub use nn::{Activation, AdamState, Mlp, NnError, Tape};
pub use objective::{LossKind, LossSpec, ObjectiveError};
pub use policy::{
    BetaInput, ConditioningMode, Direction, Gradients, Head, ModelBundle, ModelConfig, PolicyError,
    Thermometer, Trajectory,
};
pub use trainer::{
    BetaEval, BetaSource, EvalPlan, MetricsRecord, OfflineConfig, OfflineTrainer, OnlineTrainer,
    Optimizer, ReplayBuffer, RoundConfig, TemperatureSchedule, TrainError,
};

/// Seeded RNG used by every stochastic routine in the crate.
pub type Rng64 = rand_chacha::ChaCha8Rng;

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

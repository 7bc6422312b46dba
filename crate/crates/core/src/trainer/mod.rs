//! Temperature schedules, replay, optimization and the training loops.

mod offline;
mod online;
mod replay;
mod schedule;

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::env::EnvError;
use crate::eval::{EvalError, RewardStats};
use crate::nn::{adam_step, AdamState, NnError};
use crate::objective::ObjectiveError;
use crate::policy::{Gradients, Head, ModelBundle, PolicyError};

pub use offline::{train_offline, OfflineConfig, OfflineTrainer};
pub use online::{EvalPlan, OnlineTrainer};
pub use replay::ReplayBuffer;
pub use schedule::TemperatureSchedule;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid schedule: {0}")]
    Schedule(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("round {round}: {source}")]
    AtRound { round: u64, source: Box<TrainError> },
}

impl TrainError {
    /// Whether this error is a numerical blow-up that a training loop may skip.
    pub fn is_non_finite(&self) -> bool {
        match self {
            TrainError::Objective(e) => objective_non_finite(e),
            TrainError::Nn(NnError::NonFiniteGradient(_)) => true,
            TrainError::AtRound { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }
}

fn objective_non_finite(e: &ObjectiveError) -> bool {
    match e {
        ObjectiveError::NonFinite(_) => true,
        ObjectiveError::InBatch { source, .. } => objective_non_finite(source),
        _ => false,
    }
}

/// Where the beta for a replayed trajectory's loss comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BetaSource {
    /// A fresh draw from the training distribution.
    Relabel,
    /// The beta the trajectory was sampled under.
    Inherit,
}

/// Settings of the online discovery loop.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RoundConfig {
    /// Trajectories sampled per round.
    pub trajectories_per_round: usize,
    /// Gradient steps per round.
    pub grad_steps: usize,
    pub batch_size: usize,
    pub rounds: u64,
    pub lr_policy: f64,
    pub lr_log_z: f64,
    pub prioritized: bool,
    pub buffer_capacity: Option<usize>,
    pub exploration: f64,
    pub beta_source: BetaSource,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    /// Skip steps with non-finite loss or gradients instead of failing.
    pub skip_non_finite: bool,
    pub metrics_interval: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            trajectories_per_round: 32,
            grad_steps: 1,
            batch_size: 32,
            rounds: 1000,
            lr_policy: 1e-4,
            lr_log_z: 1e-2,
            prioritized: true,
            buffer_capacity: None,
            exploration: 0.0,
            beta_source: BetaSource::Relabel,
            clip_norm: None,
            skip_non_finite: true,
            metrics_interval: 100,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.trajectories_per_round == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("trajectories_per_round and batch_size must be at least 1"));
        }
        if self.metrics_interval == 0 {
            return Err(TrainError::Config("metrics_interval must be at least 1"));
        }
        if self.buffer_capacity == Some(0) {
            return Err(TrainError::Config("buffer_capacity must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.exploration) {
            return Err(TrainError::Config("exploration must lie in [0, 1)"));
        }
        validate_rates(self.lr_policy, self.lr_log_z, self.clip_norm)
    }
}

fn validate_rates(lr_policy: f64, lr_log_z: f64, clip: Option<f64>) -> Result<(), TrainError> {
    if !(lr_policy > 0.0 && lr_policy.is_finite() && lr_log_z > 0.0 && lr_log_z.is_finite()) {
        return Err(TrainError::Config("learning rates must be positive"));
    }
    if clip.is_some_and(|c| !(c > 0.0)) {
        return Err(TrainError::Config("clip_norm must be positive"));
    }
    Ok(())
}

/// One Adam state per model head; the log-partition head has its own rate.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Optimizer {
    states: Vec<Option<AdamState>>,
    clip_norm: Option<f64>,
}

impl Optimizer {
    pub fn new(model: &ModelBundle, lr_policy: f64, lr_log_z: f64, clip_norm: Option<f64>) -> Self {
        let states = Head::ALL
            .iter()
            .map(|&h| {
                let lr = if h == Head::LogPartition { lr_log_z } else { lr_policy };
                model.head(h).map(|net| AdamState::new(net.num_params(), lr))
            })
            .collect();
        Optimizer { states, clip_norm }
    }

    pub fn state(&self, head: Head) -> Option<&AdamState> {
        self.states[head.index()].as_ref()
    }

    /// Applies one update to every head. Non-finite gradients reject the
    /// whole step and leave the model untouched.
    pub fn step(&mut self, model: &mut ModelBundle, grads: &Gradients) -> Result<(), TrainError> {
        if let Some(i) = grads.flatten().iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient(i).into());
        }
        let factor = match self.clip_norm {
            Some(c) => {
                let norm = grads.norm();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for head in Head::ALL {
            let (Some(net), Some(state)) = (model.head_mut(head), self.states[head.index()].as_mut()) else {
                continue;
            };
            let g = grads.head(head);
            if factor == 1.0 {
                adam_step(net.params_mut(), g, state)?;
            } else {
                let scaled: Vec<f64> = g.iter().map(|x| x * factor).collect();
                adam_step(net.params_mut(), &scaled, state)?;
            }
        }
        Ok(())
    }
}

/// Exact evaluation at one beta.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BetaEval {
    pub beta: f64,
    /// Summed L1 distance between the model's terminal marginal and the target.
    pub l1: f64,
    /// `l1` divided by the number of terminals.
    pub l1_mean: f64,
    /// Learned softmax temperature (logit modes only).
    pub temperature: Option<f64>,
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    /// Zero-based index of the last completed round or step.
    pub round: u64,
    /// Mean loss over the gradient steps since the previous record.
    pub loss_mean: Option<f64>,
    /// Steps skipped so far because of non-finite values.
    pub skipped: u64,
    pub exact: Vec<BetaEval>,
    pub modes_found: Option<usize>,
    pub mode_threshold: Option<f64>,
    /// Raw-reward statistics of the trajectories sampled in this round.
    pub rewards: Option<RewardStats>,
}

/// Running mean of the losses since the last metrics record.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub(crate) struct LossAccumulator {
    sum: f64,
    count: u64,
}

impl LossAccumulator {
    fn push(&mut self, loss: f64) {
        self.sum += loss;
        self.count += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let mean = (self.count > 0).then(|| self.sum / self.count as f64);
        *self = LossAccumulator::default();
        mean
    }
}

/// Runs one gradient step, counting it as skipped when it blows up and
/// skipping is enabled.
pub(crate) fn guarded_step<F>(
    model: &mut ModelBundle,
    optimizer: &mut Optimizer,
    skip_non_finite: bool,
    skipped: &mut u64,
    compute: F,
) -> Result<Option<f64>, TrainError>
where
    F: FnOnce(&ModelBundle) -> Result<(f64, Gradients), ObjectiveError>,
{
    let outcome = compute(model)
        .map_err(TrainError::from)
        .and_then(|(loss, grads)| optimizer.step(model, &grads).map(|_| loss));
    match outcome {
        Ok(loss) => Ok(Some(loss)),
        Err(e) if skip_non_finite && e.is_non_finite() => {
            *skipped += 1;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests;

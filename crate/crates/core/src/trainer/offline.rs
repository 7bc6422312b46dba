use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use super::{guarded_step, validate_rates, LossAccumulator, MetricsRecord, Optimizer, TemperatureSchedule, TrainError};
use crate::env::{EnvError, EnvState, Environment, OfflineDataset, RewardScale};
use crate::objective::{batch_loss, LossSpec};
use crate::policy::{sample_backward_trajectory, ModelBundle};
use crate::Rng64;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OfflineConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_log_z: f64,
    pub clip_norm: Option<f64>,
    pub skip_non_finite: bool,
    pub metrics_interval: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            steps: 1000,
            batch_size: 32,
            lr_policy: 1e-4,
            lr_log_z: 1e-2,
            clip_norm: None,
            skip_non_finite: true,
            metrics_interval: 100,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.metrics_interval == 0 {
            return Err(TrainError::Config("batch_size and metrics_interval must be at least 1"));
        }
        validate_rates(self.lr_policy, self.lr_log_z, self.clip_norm)
    }
}

/// Training from a fixed dataset of terminals: each step draws dataset
/// entries, walks back to the initial state with the learned backward
/// policy and minimizes the loss at betas drawn from `p_train`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OfflineTrainer {
    pub model: ModelBundle,
    pub optimizer: Optimizer,
    pub rng: Rng64,
    /// Number of completed steps.
    pub step: u64,
    pub skipped: u64,
    losses: LossAccumulator,
}

impl OfflineTrainer {
    pub fn new(model: ModelBundle, cfg: &OfflineConfig, seed: u64) -> Self {
        let optimizer = Optimizer::new(&model, cfg.lr_policy, cfg.lr_log_z, cfg.clip_norm);
        OfflineTrainer { model, optimizer, rng: Rng64::seed_from_u64(seed), step: 0, skipped: 0, losses: LossAccumulator::default() }
    }

    /// Trains until `cfg.steps` steps are complete. `scale` normalizes the
    /// dataset rewards; no other reward information is used.
    #[allow(clippy::too_many_arguments)]
    pub fn run<E: Environment + ?Sized, F: FnMut(&MetricsRecord)>(
        &mut self,
        env: &E,
        dataset: &OfflineDataset,
        scale: &RewardScale,
        loss: &LossSpec,
        cfg: &OfflineConfig,
        p_train: &TemperatureSchedule,
        mut sink: F,
    ) -> Result<(), TrainError> {
        cfg.validate()?;
        loss.validate()?;
        p_train.validate()?;
        let entries = resolve(env, dataset)?;
        while self.step < cfg.steps {
            let t = self.step;
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut betas = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (state, log_raw) = &entries[self.rng.random_range(0..entries.len())];
                let beta = p_train.sample(t, &mut self.rng)?;
                batch.push(sample_backward_trajectory(&self.model, env, state, *log_raw, beta, &mut self.rng)?);
                betas.push(beta);
            }
            let outcome = guarded_step(&mut self.model, &mut self.optimizer, cfg.skip_non_finite, &mut self.skipped, |m| {
                batch_loss(m, env, &batch, &betas, scale, loss)
            })
            .map_err(|e| TrainError::AtRound { round: t, source: alloc::boxed::Box::new(e) })?;
            if let Some(l) = outcome {
                self.losses.push(l);
            }
            self.step += 1;
            if t % cfg.metrics_interval == 0 || self.step == cfg.steps {
                sink(&MetricsRecord {
                    round: t,
                    loss_mean: self.losses.take(),
                    skipped: self.skipped,
                    exact: Vec::new(),
                    modes_found: None,
                    mode_threshold: None,
                    rewards: None,
                });
            }
        }
        Ok(())
    }
}

/// Decodes dataset ids to terminal states with their log raw rewards.
fn resolve<E: Environment + ?Sized>(env: &E, dataset: &OfflineDataset) -> Result<Vec<(EnvState, f64)>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Config("offline dataset is empty"));
    }
    dataset
        .entries
        .iter()
        .map(|&(id, raw)| {
            let state = env.state(id)?;
            if !env.is_terminal(&state) {
                return Err(EnvError::Contract("dataset entry is not a terminal state").into());
            }
            Ok((state, libm::log(raw)))
        })
        .collect()
}

/// Convenience wrapper: trains a fresh offline run and returns the model.
#[allow(clippy::too_many_arguments)]
pub fn train_offline<E: Environment + ?Sized>(
    env: &E,
    model: ModelBundle,
    dataset: &OfflineDataset,
    scale: &RewardScale,
    loss: &LossSpec,
    cfg: &OfflineConfig,
    p_train: &TemperatureSchedule,
    seed: u64,
) -> Result<ModelBundle, TrainError> {
    let mut trainer = OfflineTrainer::new(model, cfg, seed);
    trainer.run(env, dataset, scale, loss, cfg, p_train, |_| {})?;
    Ok(trainer.model)
}

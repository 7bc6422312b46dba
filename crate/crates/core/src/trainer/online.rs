use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::SeedableRng;

use super::{
    guarded_step, BetaEval, BetaSource, LossAccumulator, MetricsRecord, Optimizer, ReplayBuffer, RoundConfig,
    TemperatureSchedule, TrainError,
};
use crate::env::{Environment, RewardSpec, StateId};
use crate::eval::{count_modes, exact_marginal, exact_target, l1_distance, reward_percentiles, ModeSpec};
use crate::objective::{batch_loss, LossSpec};
use crate::policy::{sample_trajectory, ModelBundle};
use crate::Rng64;

/// What to evaluate when a metrics record is emitted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalPlan {
    /// Betas at which the exact marginal is compared with the exact target.
    pub exact_betas: Vec<f64>,
    /// State-count cap for exact evaluation.
    pub cap: u64,
    pub modes: Option<ModeSpec>,
}

/// State of the online discovery loop; serializing it captures everything
/// needed to resume bit-identically.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OnlineTrainer {
    pub model: ModelBundle,
    pub optimizer: Optimizer,
    pub buffer: ReplayBuffer,
    pub rng: Rng64,
    /// Number of completed rounds.
    pub round: u64,
    pub skipped: u64,
    /// Every distinct terminal sampled so far, with its log raw reward.
    pub discovered: BTreeMap<StateId, f64>,
    losses: LossAccumulator,
}

impl OnlineTrainer {
    pub fn new(model: ModelBundle, cfg: &RoundConfig, seed: u64) -> Self {
        let optimizer = Optimizer::new(&model, cfg.lr_policy, cfg.lr_log_z, cfg.clip_norm);
        OnlineTrainer {
            model,
            optimizer,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.prioritized),
            rng: Rng64::seed_from_u64(seed),
            round: 0,
            skipped: 0,
            discovered: BTreeMap::new(),
            losses: LossAccumulator::default(),
        }
    }

    /// Runs one round: `M` rollouts at betas from `p_exp`, then `K` replay
    /// gradient steps. Returns the raw rewards of this round's samples.
    pub fn step_round<E: Environment + ?Sized>(
        &mut self,
        env: &E,
        reward: &RewardSpec,
        loss: &LossSpec,
        cfg: &RoundConfig,
        p_train: &TemperatureSchedule,
        p_exp: &TemperatureSchedule,
    ) -> Result<Vec<f64>, TrainError> {
        let t = self.round;
        let at_round = |e: TrainError| TrainError::AtRound { round: t, source: Box::new(e) };
        let mut round_rewards = Vec::with_capacity(cfg.trajectories_per_round);
        for _ in 0..cfg.trajectories_per_round {
            let beta = p_exp.sample(t, &mut self.rng).map_err(at_round)?;
            let traj = sample_trajectory(&self.model, env, reward, beta, &mut self.rng, cfg.exploration)
                .map_err(|e| at_round(e.into()))?;
            self.discovered.insert(traj.terminal().id, traj.log_raw_reward);
            round_rewards.push(libm::exp(traj.log_raw_reward));
            self.buffer.insert(traj);
        }
        let scale = reward.scale();
        for _ in 0..cfg.grad_steps {
            let batch = self.buffer.sample(cfg.batch_size, &mut self.rng).map_err(at_round)?;
            let betas = match cfg.beta_source {
                BetaSource::Relabel => {
                    (0..batch.len()).map(|_| p_train.sample(t, &mut self.rng)).collect::<Result<Vec<_>, _>>()
                }
                BetaSource::Inherit => Ok(batch.iter().map(|tr| tr.beta_used).collect()),
            }
            .map_err(at_round)?;
            let outcome = guarded_step(&mut self.model, &mut self.optimizer, cfg.skip_non_finite, &mut self.skipped, |m| {
                batch_loss(m, env, &batch, &betas, &scale, loss)
            })
            .map_err(at_round)?;
            if let Some(l) = outcome {
                self.losses.push(l);
            }
        }
        self.round += 1;
        Ok(round_rewards)
    }

    /// A copy with an empty replay buffer, for storing the buffer
    /// separately.
    pub fn without_buffer(&self) -> Self {
        OnlineTrainer {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            buffer: self.buffer.empty_like(),
            rng: self.rng.clone(),
            round: self.round,
            skipped: self.skipped,
            discovered: self.discovered.clone(),
            losses: self.losses.clone(),
        }
    }

    /// Trains until `cfg.rounds` rounds are complete, passing a record to
    /// `sink` after every `metrics_interval`-th round and after the last.
    #[allow(clippy::too_many_arguments)]
    pub fn run<E: Environment + ?Sized, F: FnMut(&MetricsRecord)>(
        &mut self,
        env: &E,
        reward: &RewardSpec,
        loss: &LossSpec,
        cfg: &RoundConfig,
        p_train: &TemperatureSchedule,
        p_exp: &TemperatureSchedule,
        plan: &EvalPlan,
        mut sink: F,
    ) -> Result<(), TrainError> {
        cfg.validate()?;
        loss.validate()?;
        p_train.validate()?;
        p_exp.validate()?;
        while self.round < cfg.rounds {
            let rewards = self.step_round(env, reward, loss, cfg, p_train, p_exp)?;
            let done = self.round - 1;
            if done % cfg.metrics_interval == 0 || self.round == cfg.rounds {
                let record = self.metrics(env, reward, plan, &rewards)?;
                sink(&record);
            }
        }
        Ok(())
    }

    /// Snapshot after the most recent round.
    pub fn metrics<E: Environment + ?Sized>(
        &mut self,
        env: &E,
        reward: &RewardSpec,
        plan: &EvalPlan,
        round_rewards: &[f64],
    ) -> Result<MetricsRecord, TrainError> {
        let exact = evaluate_exact(&self.model, env, reward, plan)?;
        let (modes_found, mode_threshold) = match &plan.modes {
            Some(spec) if !self.discovered.is_empty() => {
                let samples: Vec<(StateId, f64)> =
                    self.discovered.iter().map(|(&id, &lr)| (id, libm::exp(lr))).collect();
                let count = count_modes(&samples, env, reward, spec)?;
                (Some(count.count), count.threshold)
            }
            _ => (None, None),
        };
        Ok(MetricsRecord {
            round: self.round.saturating_sub(1),
            loss_mean: self.losses.take(),
            skipped: self.skipped,
            exact,
            modes_found,
            mode_threshold,
            rewards: reward_percentiles(round_rewards).ok(),
        })
    }
}

/// Exact L1 (and learned temperature) at each planned beta.
pub(crate) fn evaluate_exact<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    reward: &RewardSpec,
    plan: &EvalPlan,
) -> Result<Vec<BetaEval>, TrainError> {
    plan.exact_betas
        .iter()
        .map(|&beta| {
            let target = exact_target(env, reward, beta, plan.cap)?;
            let marginal = exact_marginal(model, env, beta, plan.cap)?;
            let l1 = l1_distance(&marginal, &target)?;
            let temperature = model.softmax_temperature(beta).ok();
            Ok(BetaEval { beta, l1, l1_mean: l1 / target.len() as f64, temperature })
        })
        .collect()
}

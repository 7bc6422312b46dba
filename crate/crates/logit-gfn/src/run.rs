//! The `train`, `eval` and `enumerate` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use logit_gfn_core::eval::{
    exact_marginal, exact_target, l1_distance, reward_percentiles, sample_terminals, TerminalDistribution,
};
use logit_gfn_core::{
    AnyEnv, EnvError, Environment, EvalError, EvalPlan, MetricsRecord, ModelBundle, OfflineTrainer, OnlineTrainer,
    RewardScale, Rng64, TrainError,
};
use rand::SeedableRng;

use crate::checkpoint::{Checkpoint, CheckpointError, TrainerState};
use crate::config::{ConfigError, Protocol, Resolved};
use crate::io::{csv_bytes, csv_line, write_atomic, IoError, LineLog};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const MODES_FILE: &str = "modes.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.csv";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl RunError {
    /// 2 for problems with the inputs as configured, 1 for failures while
    /// running.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Checkpoint(CheckpointError::Mismatch(_)) => 2,
            _ => 1,
        }
    }
}

/// Seeds for model initialization and for the training stream.
fn seeds(seed: u64) -> (u64, u64) {
    (seed, seed ^ 0x9e37_79b9_7f4a_7c15)
}

pub fn initial_model(run: &Resolved) -> Result<ModelBundle, RunError> {
    let mut rng = Rng64::seed_from_u64(seeds(run.config.seed).0);
    ModelBundle::new(run.config.model.clone(), &run.env, &mut rng).map_err(|e| TrainError::from(e).into())
}

fn enumerable(env: &AnyEnv, cap: u64) -> bool {
    env.num_states() <= cap
}

/// Output of a finished training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
}

/// Writes metrics, timings and mode-report lines as records arrive.
struct Recorder {
    metrics: LineLog,
    timings: LineLog,
    modes: Option<LineLog>,
    start: Instant,
    records: Vec<MetricsRecord>,
    error: Option<IoError>,
}

impl Recorder {
    fn new(out: &Path, with_modes: bool) -> Result<Self, IoError> {
        let modes = if with_modes {
            Some(LineLog::with_header(out.join(MODES_FILE), "round,modes_found,threshold")?)
        } else {
            None
        };
        Ok(Recorder {
            metrics: LineLog::create(out.join(METRICS_FILE))?,
            timings: LineLog::create(out.join(TIMINGS_FILE))?,
            modes,
            start: Instant::now(),
            records: Vec::new(),
            error: None,
        })
    }

    fn record(&mut self, r: &MetricsRecord) {
        self.records.push(r.clone());
        if self.error.is_some() {
            return;
        }
        let elapsed = self.start.elapsed().as_secs_f64();
        info!(
            "round {}: loss {} skipped {}{}",
            r.round,
            r.loss_mean.map_or("-".to_owned(), |l| format!("{l:.4}")),
            r.skipped,
            r.exact.iter().map(|e| format!(" l1@{}={:.4}", e.beta, e.l1)).collect::<String>()
        );
        let line = serde_json::to_string(r).expect("metrics records serialize");
        let timing = serde_json::json!({ "round": r.round, "wall_time_s": elapsed }).to_string();
        let mut result = self.metrics.append(&line).and_then(|_| self.timings.append(&timing));
        if let (Some(log), Some(count)) = (self.modes.as_mut(), r.modes_found) {
            let threshold = r.mode_threshold.map(|t| t.to_string()).unwrap_or_default();
            result = result.and_then(|_| log.append(&csv_line([r.round.to_string(), count.to_string(), threshold])));
        }
        self.error = result.err();
    }

    fn finish(self) -> Result<Vec<MetricsRecord>, IoError> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.records),
        }
    }
}

/// Trains per the config and writes `metrics.jsonl`, `timings.jsonl`,
/// `modes.csv` (when modes are configured), `config.toml` and
/// `checkpoint.json` into `out`.
pub fn train(run: &Resolved, out: &Path) -> Result<TrainOutcome, RunError> {
    let cfg = &run.config;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    let model = initial_model(run)?;
    let train_seed = seeds(cfg.seed).1;
    let mut recorder = Recorder::new(out, run.modes.is_some() && cfg.train.protocol == Protocol::Online)?;
    let state = match cfg.train.protocol {
        Protocol::Online => {
            let exact_betas = if enumerable(&run.env, cfg.eval.cap) {
                cfg.eval.exact_betas.clone()
            } else {
                if !cfg.eval.exact_betas.is_empty() {
                    warn!("state space exceeds eval.cap; exact evaluation disabled");
                }
                Vec::new()
            };
            let plan = EvalPlan { exact_betas, cap: cfg.eval.cap, modes: run.modes.clone() };
            let mut trainer = OnlineTrainer::new(model, &cfg.train.online, train_seed);
            trainer.run(
                &run.env,
                &run.reward,
                &run.loss,
                &cfg.train.online,
                &cfg.schedule.train,
                &cfg.schedule.exploration,
                &plan,
                |r| recorder.record(r),
            )?;
            TrainerState::Online(trainer)
        }
        Protocol::Offline => {
            let dataset = run.dataset.as_ref().expect("resolved offline runs carry a dataset");
            let scale = offline_scale(run);
            info!("offline dataset: {} entries, max reward {}", dataset.len(), dataset.max_reward());
            let mut trainer = OfflineTrainer::new(model, &cfg.train.offline, train_seed);
            trainer.run(&run.env, dataset, &scale, &run.loss, &cfg.train.offline, &cfg.schedule.train, |r| {
                recorder.record(r)
            })?;
            TrainerState::Offline(trainer)
        }
    };
    let records = recorder.finish()?;
    let checkpoint = Checkpoint::new(run.env.clone(), state);
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome { records, checkpoint })
}

/// Offline rewards are normalized by the dataset maximum, the only reward
/// information the protocol may use.
pub fn offline_scale(run: &Resolved) -> RewardScale {
    let r = &run.config.env.reward;
    let max = run.dataset.as_ref().map_or(f64::NAN, |d| d.max_reward());
    RewardScale::new(r.exponent, r.norm_constant, max.ln())
}

/// One row of `eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub beta: f64,
    pub p25: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Exact summed and mean L1 to the target, when enumerable.
    pub l1: Option<(f64, f64)>,
    /// Learned softmax temperature (logit modes).
    pub temperature: Option<f64>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub enumerable: bool,
}

/// Samples the checkpointed model at each beta and writes `eval.csv` and,
/// when the space is enumerable, `marginal_beta_<b>.csv`.
pub fn evaluate(run: &Resolved, checkpoint: &Path, betas: &[f64], samples: usize, out: &Path) -> Result<EvalOutcome, RunError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&run.env, &run.config.model)?;
    let model = ckpt.model();
    let cap = run.config.eval.cap;
    let exact = enumerable(&run.env, cap);
    let logit = model.mode().scales_logits();
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        // Same stream for every beta, so beta-blind models give equal rows.
        let mut rng = Rng64::seed_from_u64(run.config.seed);
        let draws = sample_terminals(model, &run.env, &run.reward, beta, samples, &mut rng)?;
        let raws: Vec<f64> = draws.iter().map(|d| d.1).collect();
        let stats = reward_percentiles(&raws)?;
        let l1 = if exact {
            let target = exact_target(&run.env, &run.reward, beta, cap)?;
            let marginal = exact_marginal(model, &run.env, beta, cap)?;
            write_distribution(&run.env, &marginal, &out.join(format!("marginal_beta_{beta}.csv")))?;
            let l1 = l1_distance(&marginal, &target)?;
            Some((l1, l1 / target.len() as f64))
        } else {
            None
        };
        let temperature = if logit { Some(model.softmax_temperature(beta).map_err(TrainError::from)?) } else { None };
        rows.push(EvalRow { beta, p25: stats.p25, median: stats.median, mean: stats.mean, max: stats.max, l1, temperature });
    }
    let mut header = vec!["beta", "p25", "median", "mean", "max"];
    if exact {
        header.extend(["l1", "l1_mean"]);
    }
    if logit {
        header.push("temperature");
    }
    let lines = rows.iter().map(|r| {
        let mut f = vec![r.beta.to_string(), r.p25.to_string(), r.median.to_string(), r.mean.to_string(), r.max.to_string()];
        if let Some((l1, mean)) = r.l1 {
            f.extend([l1.to_string(), mean.to_string()]);
        }
        if let Some(t) = r.temperature {
            f.push(t.to_string());
        }
        f
    });
    write_atomic(&out.join(EVAL_FILE), &csv_bytes(&header, lines))?;
    Ok(EvalOutcome { rows, enumerable: exact })
}

/// Writes the exact tempered target at each beta to `target_beta_<b>.csv`.
pub fn enumerate(run: &Resolved, betas: &[f64], out: &Path) -> Result<Vec<PathBuf>, RunError> {
    betas
        .iter()
        .map(|&beta| {
            let target = exact_target(&run.env, &run.reward, beta, run.config.eval.cap)?;
            let path = out.join(format!("target_beta_{beta}.csv"));
            write_distribution(&run.env, &target, &path)?;
            Ok(path)
        })
        .collect()
}

/// Plain decimal for ordinary magnitudes, exponent form for tiny ones; both
/// parse back exactly.
fn format_probability(p: f64) -> String {
    if p != 0.0 && p.abs() < 1e-4 {
        format!("{p:e}")
    } else {
        p.to_string()
    }
}

pub fn write_distribution(env: &AnyEnv, dist: &TerminalDistribution, path: &Path) -> Result<(), RunError> {
    let rows = dist
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let state = env.terminal_at(i as u64)?;
            Ok(vec![i.to_string(), env.format_state(&state), format_probability(p)])
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    write_atomic(path, &csv_bytes(&["terminal_id", "state_string", "probability"], rows))?;
    Ok(())
}

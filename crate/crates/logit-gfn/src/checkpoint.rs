//! Versioned JSON checkpoints of the full trainer state.
//!
//! Replay-buffer trajectories are stored as state ids and decoded against
//! the checkpoint's own environment on load, which keeps long runs with
//! unbounded buffers to a manageable file size.

use std::path::Path;

use logit_gfn_core::{
    ActionId, AnyEnv, EnvState, Environment, ModelBundle, ModelConfig, OfflineTrainer, OnlineTrainer, StateId,
    Trajectory,
};
use serde::{Deserialize, Serialize, Serializer};

use crate::io::{write_atomic, IoError};

pub const FORMAT: &str = "logit-gfn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {message}")]
    Decode { path: String, message: String },
    #[error("{path}: unsupported checkpoint version {found} (expected {VERSION})")]
    Version { path: String, found: u32 },
    #[error("checkpoint does not match the config: {0}")]
    Mismatch(&'static str),
}

/// Parameters, optimizer moments, RNG stream, replay buffer and counters:
/// restoring one continues training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainerState {
    Online(OnlineTrainer),
    Offline(OfflineTrainer),
}

impl TrainerState {
    pub fn model(&self) -> &ModelBundle {
        match self {
            TrainerState::Online(t) => &t.model,
            TrainerState::Offline(t) => &t.model,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub env: AnyEnv,
    pub state: TrainerState,
}

/// Only the header, read first so version errors beat decode errors.
#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format: &'static str,
    version: u32,
    env: &'a AnyEnv,
    #[serde(skip_serializing_if = "Option::is_none")]
    online: Option<OnlineOut<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    offline: Option<&'a OfflineTrainer>,
}

#[derive(Serialize)]
struct OnlineOut<'a> {
    trainer: OnlineTrainer,
    #[serde(serialize_with = "buffer_entries")]
    buffer: &'a OnlineTrainer,
}

/// Exactly one of `online` and `offline` is present.
#[derive(Deserialize)]
struct FileIn {
    env: AnyEnv,
    online: Option<OnlineIn>,
    offline: Option<OfflineTrainer>,
}

#[derive(Deserialize)]
struct OnlineIn {
    trainer: OnlineTrainer,
    buffer: Vec<StoredTrajectory>,
}

#[derive(Serialize, Deserialize)]
struct StoredTrajectory {
    states: Vec<StateId>,
    actions: Vec<ActionId>,
    beta_used: f64,
    log_raw_reward: f64,
}

impl StoredTrajectory {
    fn from_trajectory(t: &Trajectory) -> Self {
        StoredTrajectory {
            states: t.states.iter().map(|s| s.id).collect(),
            actions: t.actions.clone(),
            beta_used: t.beta_used,
            log_raw_reward: t.log_raw_reward,
        }
    }

    fn decode(self, env: &AnyEnv) -> Result<Trajectory, String> {
        let states = self
            .states
            .into_iter()
            .map(|id| env.state(id))
            .collect::<Result<Vec<EnvState>, _>>()
            .map_err(|e| e.to_string())?;
        let t = Trajectory { states, actions: self.actions, beta_used: self.beta_used, log_raw_reward: self.log_raw_reward };
        t.validate(env).map_err(|e| e.to_string())?;
        Ok(t)
    }
}

fn buffer_entries<S: Serializer>(trainer: &&OnlineTrainer, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(trainer.buffer.entries().map(StoredTrajectory::from_trajectory))
}

impl Checkpoint {
    pub fn new(env: AnyEnv, state: TrainerState) -> Self {
        Checkpoint { env, state }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let (online, offline) = match &self.state {
            TrainerState::Online(t) => (Some(OnlineOut { trainer: t.without_buffer(), buffer: t }), None),
            TrainerState::Offline(t) => (None, Some(t)),
        };
        let file = FileOut { format: FORMAT, version: VERSION, env: &self.env, online, offline };
        let bytes = serde_json::to_vec(&file).map_err(|e| CheckpointError::Decode {
            path: path.display().to_string(),
            message: format!("cannot encode: {e}"),
        })?;
        write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let shown = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| IoError { path: path.to_owned(), source })?;
        let decode = |message: String| CheckpointError::Decode { path: shown.clone(), message };
        let header: Header = serde_json::from_slice(&bytes).map_err(|e| decode(e.to_string()))?;
        if header.format != FORMAT {
            return Err(decode(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != VERSION {
            return Err(CheckpointError::Version { path: shown, found: header.version });
        }
        let file: FileIn = serde_json::from_slice(&bytes).map_err(|e| decode(e.to_string()))?;
        let state = match (file.online, file.offline) {
            (Some(OnlineIn { mut trainer, buffer }), None) => {
                for (i, stored) in buffer.into_iter().enumerate() {
                    let traj = stored.decode(&file.env).map_err(|e| decode(format!("buffer entry {i}: {e}")))?;
                    trainer.buffer.insert(traj);
                }
                TrainerState::Online(trainer)
            }
            (None, Some(trainer)) => TrainerState::Offline(trainer),
            _ => return Err(decode("expected exactly one of `online` and `offline`".to_owned())),
        };
        Ok(Checkpoint { env: file.env, state })
    }

    pub fn model(&self) -> &ModelBundle {
        self.state.model()
    }

    /// Rejects checkpoints trained on another environment or architecture.
    pub fn check_compatible(&self, env: &AnyEnv, model: &ModelConfig) -> Result<(), CheckpointError> {
        if &self.env != env {
            return Err(CheckpointError::Mismatch("environment differs"));
        }
        if &self.model().config != model {
            return Err(CheckpointError::Mismatch("model settings differ"));
        }
        Ok(())
    }
}

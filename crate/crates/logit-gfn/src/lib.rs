//! Config files, checkpoints and the commands behind the `logit-gfn`
//! binary. The algorithms live in `logit-gfn-core`.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod run;

pub use checkpoint::{Checkpoint, CheckpointError, TrainerState};
pub use config::{ConfigError, Resolved, RunConfig};
pub use run::{enumerate, evaluate, train, EvalOutcome, EvalRow, RunError, TrainOutcome};

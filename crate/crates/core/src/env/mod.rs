//! DAG-structured environments, reward oracles and offline datasets.
//!
//! Every environment assigns each state a canonical integer id. Ids are a
//! mixed-radix encoding of the payload and strictly increase along every
//! edge, so iterating ids in ascending order is a topological order of the
//! state graph. Children and parents are deduplicated by state: when two
//! actions lead to the same state (prepend-`t` and append-`t` on `t…t`)
//! only the first is kept, so the transition graph is a simple DAG.

mod dataset;
mod hypergrid;
mod reward;
mod sequence;

use alloc::string::String;
use alloc::vec::Vec;

pub use dataset::{parse_offline_dataset, DatasetError, OfflineDataset};
pub use hypergrid::Hypergrid;
pub use reward::{HypergridReward, RewardOracle, RewardScale, RewardSpec, RewardTable, SyntheticSeparable};
pub use sequence::SequenceEnv;

/// Default cap on the number of terminals an environment may enumerate.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct StateId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ActionId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EnvKind {
    Hypergrid,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Payload {
    /// Coordinates in `[0, H-1]^n`; `terminal` marks the copy produced by the
    /// stop action.
    Grid { coords: Vec<u32>, terminal: bool },
    /// Token indices into the alphabet.
    Seq { tokens: Vec<u8> },
}

/// A state of an environment: its canonical id together with the decoded
/// payload.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvState {
    pub id: StateId,
    pub payload: Payload,
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        match self.payload {
            Payload::Grid { .. } => EnvKind::Hypergrid,
            Payload::Seq { .. } => EnvKind::Sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("contract violation: {0}")]
    Contract(&'static str),
    #[error("state id {0} is outside the state space")]
    UnknownId(u64),
    #[error("state does not belong to this environment")]
    ForeignState,
    #[error("cannot parse state {text:?}: {reason}")]
    Parse { text: String, reason: &'static str },
    #[error("enumeration of {count} items exceeds the cap of {cap}")]
    TooLarge { count: u64, cap: u64 },
    #[error("reward must be strictly positive, got {0}")]
    RewardDomain(f64),
    #[error("invalid environment parameters: {0}")]
    Invalid(&'static str),
    #[error("reward oracle does not match the environment: {0}")]
    OracleMismatch(&'static str),
}

/// A finite DAG-structured MDP with a unique initial state.
///
/// All methods are pure; implementations are immutable after construction.
pub trait Environment {
    fn kind(&self) -> EnvKind;

    /// Number of canonical ids; valid ids are `0..num_states()`.
    fn num_states(&self) -> u64;

    fn num_terminals(&self) -> u64;

    fn initial(&self) -> EnvState;

    /// Decodes a canonical id.
    fn state(&self, id: StateId) -> Result<EnvState, EnvError>;

    fn is_terminal(&self, state: &EnvState) -> bool;

    fn is_initial(&self, state: &EnvState) -> bool {
        state.id == self.initial().id
    }

    /// Every child of a non-terminal state, each exactly once.
    fn children(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError>;

    /// Every parent of a non-initial state, each exactly once. The action id
    /// is the forward action leading from the parent to `state`.
    fn parents(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError>;

    /// Length of the multi-hot state encoding.
    fn feature_dim(&self) -> usize;

    /// Appends the indices of the active (value 1) features of `state`.
    fn active_features(&self, state: &EnvState, out: &mut Vec<usize>);

    /// Position of a terminal in canonical terminal order.
    fn terminal_index(&self, state: &EnvState) -> Option<u64>;

    fn terminal_at(&self, index: u64) -> Result<EnvState, EnvError>;

    /// Text form used by dataset and distribution files.
    fn format_state(&self, state: &EnvState) -> String;

    /// Parses the text form of a terminal state.
    fn parse_terminal(&self, text: &str) -> Result<EnvState, EnvError>;

    /// Upper bound on the number of transitions of any complete trajectory.
    fn max_trajectory_len(&self) -> usize;

    fn as_sequence(&self) -> Option<&SequenceEnv> {
        None
    }
}

/// Every terminal exactly once, in canonical order.
pub fn enumerate_terminals<E: Environment + ?Sized>(
    env: &E,
    cap: u64,
) -> Result<Vec<EnvState>, EnvError> {
    let count = env.num_terminals();
    if count > cap {
        return Err(EnvError::TooLarge { count, cap });
    }
    (0..count).map(|i| env.terminal_at(i)).collect()
}

/// Either built-in environment, for configuration-driven code.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AnyEnv {
    Hypergrid(Hypergrid),
    Sequence(SequenceEnv),
}

macro_rules! delegate {
    ($self:ident, $env:ident => $body:expr) => {
        match $self {
            AnyEnv::Hypergrid($env) => $body,
            AnyEnv::Sequence($env) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn kind(&self) -> EnvKind {
        delegate!(self, e => e.kind())
    }
    fn num_states(&self) -> u64 {
        delegate!(self, e => e.num_states())
    }
    fn num_terminals(&self) -> u64 {
        delegate!(self, e => e.num_terminals())
    }
    fn initial(&self) -> EnvState {
        delegate!(self, e => e.initial())
    }
    fn state(&self, id: StateId) -> Result<EnvState, EnvError> {
        delegate!(self, e => e.state(id))
    }
    fn is_terminal(&self, state: &EnvState) -> bool {
        delegate!(self, e => e.is_terminal(state))
    }
    fn is_initial(&self, state: &EnvState) -> bool {
        delegate!(self, e => e.is_initial(state))
    }
    fn children(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError> {
        delegate!(self, e => e.children(state))
    }
    fn parents(&self, state: &EnvState) -> Result<Vec<(ActionId, EnvState)>, EnvError> {
        delegate!(self, e => e.parents(state))
    }
    fn feature_dim(&self) -> usize {
        delegate!(self, e => e.feature_dim())
    }
    fn active_features(&self, state: &EnvState, out: &mut Vec<usize>) {
        delegate!(self, e => e.active_features(state, out))
    }
    fn terminal_index(&self, state: &EnvState) -> Option<u64> {
        delegate!(self, e => e.terminal_index(state))
    }
    fn terminal_at(&self, index: u64) -> Result<EnvState, EnvError> {
        delegate!(self, e => e.terminal_at(index))
    }
    fn format_state(&self, state: &EnvState) -> String {
        delegate!(self, e => e.format_state(state))
    }
    fn parse_terminal(&self, text: &str) -> Result<EnvState, EnvError> {
        delegate!(self, e => e.parse_terminal(text))
    }
    fn max_trajectory_len(&self) -> usize {
        delegate!(self, e => e.max_trajectory_len())
    }
    fn as_sequence(&self) -> Option<&SequenceEnv> {
        delegate!(self, e => e.as_sequence())
    }
}

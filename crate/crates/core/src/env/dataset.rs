use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use super::{enumerate_terminals, EnvError, Environment, RewardSpec, StateId};

/// Terminal states paired with raw rewards.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OfflineDataset {
    pub entries: Vec<(StateId, f64)>,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{source_path}:{line}: {kind}")]
pub struct DatasetError {
    pub source_path: String,
    pub line: usize,
    pub kind: DatasetErrorKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetErrorKind {
    #[error("expected `state<TAB>reward`")]
    Malformed,
    #[error("unknown state: {0}")]
    UnknownState(EnvError),
    #[error("reward must be a strictly positive number, got {0:?}")]
    NonPositiveReward(String),
    #[error("duplicate state (first seen on line {0})")]
    Duplicate(usize),
    #[error("dataset is empty")]
    Empty,
}

/// Parses the tab-separated dataset format: one `state<TAB>raw_reward` per
/// line, `#` comment lines and blank lines ignored.
pub fn parse_offline_dataset<E: Environment + ?Sized>(
    text: &str,
    env: &E,
    source_path: &str,
) -> Result<OfflineDataset, DatasetError> {
    let fail = |line, kind| DatasetError { source_path: source_path.into(), line, kind };
    let mut entries = Vec::new();
    let mut seen = alloc::collections::BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(state_text), Some(reward_text), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(fail(line_no, DatasetErrorKind::Malformed));
        };
        let state = env
            .parse_terminal(state_text.trim())
            .map_err(|e| fail(line_no, DatasetErrorKind::UnknownState(e)))?;
        let reward: f64 = reward_text
            .trim()
            .parse()
            .ok()
            .filter(|r: &f64| *r > 0.0 && r.is_finite())
            .ok_or_else(|| fail(line_no, DatasetErrorKind::NonPositiveReward(reward_text.trim().into())))?;
        if let Some(&first) = seen.get(&state.id) {
            return Err(fail(line_no, DatasetErrorKind::Duplicate(first)));
        }
        seen.insert(state.id, line_no);
        entries.push((state.id, reward));
    }
    if entries.is_empty() {
        return Err(fail(0, DatasetErrorKind::Empty));
    }
    Ok(OfflineDataset { entries, source_path: source_path.into() })
}

impl OfflineDataset {
    /// Enumerates every terminal and keeps those whose reward rank lies
    /// strictly below the `fraction` quantile (ascending reward, ties broken
    /// by id); `fraction = 0.5` keeps the lower half.
    pub fn below_quantile<E: Environment + ?Sized>(
        env: &E,
        reward: &RewardSpec,
        fraction: f64,
        cap: u64,
    ) -> Result<Self, EnvError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(EnvError::Invalid("quantile fraction must lie in (0, 1]"));
        }
        let terminals = enumerate_terminals(env, cap)?;
        let mut scored = terminals
            .iter()
            .map(|s| Ok((s.id, reward.log_raw(env, s)?)))
            .collect::<Result<Vec<_>, EnvError>>()?;
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let keep = libm::floor(fraction * scored.len() as f64) as usize;
        scored.truncate(keep);
        scored.sort_by_key(|e| e.0);
        Ok(OfflineDataset {
            entries: scored.into_iter().map(|(id, lr)| (id, libm::exp(lr))).collect(),
            source_path: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_reward(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Serializes in the format read by [`parse_offline_dataset`].
    pub fn to_tsv<E: Environment + ?Sized>(&self, env: &E) -> Result<String, EnvError> {
        let mut out = String::new();
        for &(id, reward) in &self.entries {
            let state = env.state(id)?;
            let _ = writeln!(out, "{}\t{:?}", env.format_state(&state), reward);
        }
        Ok(out)
    }
}

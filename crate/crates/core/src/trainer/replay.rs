use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use super::TrainError;
use crate::policy::Trajectory;

/// Trajectory store with optional reward-prioritized sampling.
///
/// With `prioritized` set, `ceil(batch * top_share)` draws come uniformly
/// from the `top_fraction` highest-reward entries and the rest uniformly
/// from the whole buffer. Sampling is with replacement.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplayBuffer {
    entries: VecDeque<Trajectory>,
    capacity: Option<usize>,
    prioritized: bool,
    top_fraction: f64,
    top_share: f64,
    #[cfg_attr(feature = "serde", serde(skip))]
    ranks: Option<RankIndex>,
}

/// Equality ignores the cached top-reward index.
impl PartialEq for ReplayBuffer {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
            && self.capacity == other.capacity
            && self.prioritized == other.prioritized
            && self.top_fraction == other.top_fraction
            && self.top_share == other.top_share
    }
}

impl ReplayBuffer {
    pub const TOP_FRACTION: f64 = 0.1;
    pub const TOP_SHARE: f64 = 0.5;

    pub fn new(capacity: Option<usize>, prioritized: bool) -> Self {
        ReplayBuffer {
            entries: VecDeque::new(),
            capacity,
            prioritized,
            top_fraction: Self::TOP_FRACTION,
            top_share: Self::TOP_SHARE,
            ranks: None,
        }
    }

    pub fn with_priority_mix(mut self, top_fraction: f64, top_share: f64) -> Self {
        self.top_fraction = top_fraction;
        self.top_share = top_share;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Trajectory> {
        self.entries.iter()
    }

    pub fn is_prioritized(&self) -> bool {
        self.prioritized
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// A buffer with the same settings and no entries.
    pub fn empty_like(&self) -> Self {
        ReplayBuffer::new(self.capacity, self.prioritized).with_priority_mix(self.top_fraction, self.top_share)
    }

    /// Appends `traj`, evicting the oldest entry when full.
    pub fn insert(&mut self, traj: Trajectory) {
        if self.capacity == Some(0) {
            return;
        }
        if let Some(cap) = self.capacity {
            while self.entries.len() >= cap {
                if let (Some(old), Some(ranks)) = (self.entries.pop_front(), self.ranks.as_mut()) {
                    ranks.evict_front(old.log_raw_reward);
                }
            }
        }
        if let Some(ranks) = self.ranks.as_mut() {
            ranks.push(traj.log_raw_reward, self.entries.len());
        }
        self.entries.push_back(traj);
    }

    /// Index of the `n`-th best entry by raw reward, ties going to older
    /// entries.
    fn ranked(&mut self, n: usize) -> usize {
        let entries = &self.entries;
        self.ranks.get_or_insert_with(|| RankIndex::build(entries.iter().map(|t| t.log_raw_reward))).nth(n)
    }

    pub fn sample_indices<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Result<Vec<usize>, TrainError> {
        if self.entries.is_empty() {
            return Err(TrainError::EmptyBuffer);
        }
        let n = self.entries.len();
        let mut picks = Vec::with_capacity(batch);
        if self.prioritized {
            let from_top = libm::ceil(batch as f64 * self.top_share) as usize;
            let k = (libm::ceil(self.top_fraction * n as f64) as usize).clamp(1, n);
            for _ in 0..from_top.min(batch) {
                let r = rng.random_range(0..k);
                picks.push(self.ranked(r));
            }
        }
        while picks.len() < batch {
            picks.push(rng.random_range(0..n));
        }
        Ok(picks)
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Result<Vec<Trajectory>, TrainError> {
        let picks = self.sample_indices(batch, rng)?;
        Ok(picks.into_iter().map(|i| self.entries[i].clone()).collect())
    }
}

/// Buffer positions in best-first order (higher reward, then older), held
/// in bounded sorted chunks so that inserts, evictions and rank lookups stay
/// cheap for long runs.
#[derive(Clone, Debug)]
struct RankIndex {
    chunks: Vec<Vec<Key>>,
    /// Sequence number of the buffer's front entry.
    base: u64,
}

#[derive(Clone, Copy, Debug)]
struct Key {
    log_reward: f64,
    seq: u64,
}

impl Key {
    fn rank_cmp(&self, other: &Key) -> Ordering {
        other.log_reward.total_cmp(&self.log_reward).then(self.seq.cmp(&other.seq))
    }
}

impl RankIndex {
    const CHUNK: usize = 256;

    fn build(rewards: impl Iterator<Item = f64>) -> Self {
        let mut keys: Vec<Key> = rewards.enumerate().map(|(i, log_reward)| Key { log_reward, seq: i as u64 }).collect();
        keys.sort_by(Key::rank_cmp);
        RankIndex { chunks: keys.chunks(Self::CHUNK).map(<[Key]>::to_vec).collect(), base: 0 }
    }

    /// Chunk that holds, or would hold, `key`.
    fn chunk_for(&self, key: &Key) -> usize {
        let c = self.chunks.partition_point(|c| c.last().is_some_and(|last| last.rank_cmp(key) == Ordering::Less));
        c.min(self.chunks.len().saturating_sub(1))
    }

    /// Adds the entry now at buffer position `position`.
    fn push(&mut self, log_reward: f64, position: usize) {
        let key = Key { log_reward, seq: self.base + position as u64 };
        if self.chunks.is_empty() {
            self.chunks.push(vec![key]);
            return;
        }
        let c = self.chunk_for(&key);
        let chunk = &mut self.chunks[c];
        let at = chunk.partition_point(|k| k.rank_cmp(&key) == Ordering::Less);
        chunk.insert(at, key);
        if chunk.len() > 2 * Self::CHUNK {
            let tail = chunk.split_off(Self::CHUNK);
            self.chunks.insert(c + 1, tail);
        }
    }

    /// Drops the front entry, whose reward was `log_reward`.
    fn evict_front(&mut self, log_reward: f64) {
        let key = Key { log_reward, seq: self.base };
        self.base += 1;
        if self.chunks.is_empty() {
            return;
        }
        let c = self.chunk_for(&key);
        let chunk = &mut self.chunks[c];
        let at = chunk.partition_point(|k| k.rank_cmp(&key) == Ordering::Less);
        if chunk.get(at).is_some_and(|k| k.seq == key.seq) {
            chunk.remove(at);
            if chunk.is_empty() {
                self.chunks.remove(c);
            }
        }
    }

    /// Buffer position of the `n`-th best entry.
    fn nth(&self, mut n: usize) -> usize {
        for chunk in &self.chunks {
            if let Some(k) = chunk.get(n) {
                return (k.seq - self.base) as usize;
            }
            n -= chunk.len();
        }
        unreachable!("rank beyond the buffer length")
    }
}

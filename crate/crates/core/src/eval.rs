//! Exact and sampled evaluation of terminal distributions.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::env::{EnvError, EnvState, Environment, Payload, RewardSpec, SequenceEnv, StateId};
use crate::log_sum_exp;
use crate::policy::{sample_trajectory, ModelBundle, PolicyError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("distributions have different supports ({left} vs {right} terminals)")]
    IndexMismatch { left: usize, right: usize },
    #[error("state {0:?} is not a terminal of this environment")]
    NotTerminal(StateId),
    #[error("no samples")]
    NoSamples,
    #[error("{0}")]
    KindMismatch(&'static str),
    #[error("invalid mode settings: {0}")]
    InvalidSpec(&'static str),
}

/// Probabilities indexed by terminal index (see [`Environment::terminal_index`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalDistribution {
    probs: Vec<f64>,
    normalized: bool,
}

impl TerminalDistribution {
    /// Wraps nonnegative weights, normalizing them if `normalize` is set.
    pub fn from_weights(mut weights: Vec<f64>, normalize: bool) -> Self {
        if normalize {
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
        }
        TerminalDistribution { probs: weights, normalized: normalize }
    }

    /// Normalizes log-weights with log-sum-exp.
    pub fn from_log_weights(log_weights: &[f64]) -> Self {
        let lse = log_sum_exp(log_weights);
        let probs = log_weights.iter().map(|&l| libm::exp(l - lse)).collect();
        TerminalDistribution { probs, normalized: true }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn check_enumerable<E: Environment + ?Sized>(env: &E, cap: u64) -> Result<(), EnvError> {
    let n = env.num_states();
    if n > cap {
        return Err(EnvError::TooLarge { count: n, cap });
    }
    Ok(())
}

/// The tempered target `p(x | beta) ∝ exp(e * beta * log r(x))`.
pub fn exact_target<E: Environment + ?Sized>(
    env: &E,
    reward: &RewardSpec,
    beta: f64,
    cap: u64,
) -> Result<TerminalDistribution, EvalError> {
    if env.num_terminals() > cap {
        return Err(EnvError::TooLarge { count: env.num_terminals(), cap }.into());
    }
    let scale = reward.scale();
    let log_weights = (0..env.num_terminals())
        .map(|i| Ok(scale.log_tempered(reward.log_raw(env, &env.terminal_at(i)?)?, beta)))
        .collect::<Result<Vec<f64>, EnvError>>()?;
    Ok(TerminalDistribution::from_log_weights(&log_weights))
}

/// Terminal marginal of `P_F(. | beta)` by forward dynamic programming.
///
/// Canonical ids increase along every edge, so visiting states in id order
/// is a topological sweep. `cap` bounds the number of states.
pub fn exact_marginal<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    beta: f64,
    cap: u64,
) -> Result<TerminalDistribution, EvalError> {
    check_enumerable(env, cap)?;
    let ctx = model.context(beta)?;
    let mut mass = vec![0.0; env.num_states() as usize];
    mass[env.initial().id.0 as usize] = 1.0;
    let mut terminal = vec![0.0; env.num_terminals() as usize];
    for id in 0..env.num_states() {
        let m = mass[id as usize];
        if m == 0.0 {
            continue;
        }
        let state = env.state(StateId(id))?;
        if env.is_terminal(&state) {
            let index = env.terminal_index(&state).ok_or(EvalError::NotTerminal(state.id))?;
            terminal[index as usize] += m;
            continue;
        }
        let kids = env.children(&state)?;
        let probs = model.forward_policy_in(env, &state, &ctx)?;
        for ((_, child), p) in kids.iter().zip(probs) {
            mass[child.id.0 as usize] += m * p;
        }
    }
    Ok(TerminalDistribution { probs: terminal, normalized: true })
}

fn check_same_support(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<(), EvalError> {
    if p.len() != q.len() {
        return Err(EvalError::IndexMismatch { left: p.len(), right: q.len() });
    }
    Ok(())
}

/// Summed L1 distance `sum_x |p(x) - q(x)|`.
pub fn l1_distance(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64, EvalError> {
    check_same_support(p, q)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| libm::fabs(a - b)).sum())
}

/// L1 distance divided by the number of terminals.
pub fn mean_l1_distance(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64, EvalError> {
    Ok(l1_distance(p, q)? / p.len().max(1) as f64)
}

/// Normalized histogram of sampled terminal ids.
pub fn empirical_distribution<E: Environment + ?Sized>(
    samples: &[StateId],
    env: &E,
) -> Result<TerminalDistribution, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut counts = vec![0.0; env.num_terminals() as usize];
    for &id in samples {
        let state = env.state(id)?;
        let index = env.terminal_index(&state).ok_or(EvalError::NotTerminal(id))?;
        counts[index as usize] += 1.0;
    }
    Ok(TerminalDistribution::from_weights(counts, true))
}

/// Which reward set the top-fraction threshold is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ThresholdBase {
    /// Every terminal, falling back to the samples when the space is too large.
    Enumerated,
    Samples,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModeSpec {
    /// Rewards at or above the top-`fraction` quantile.
    Threshold { fraction: f64, base: ThresholdBase, cap: u64 },
    /// Sequences whose reward is at least that of every same-length
    /// substitution neighbor within `radius`.
    Hamming { radius: usize },
    Predefined { ids: BTreeSet<StateId> },
}

impl ModeSpec {
    pub const DEFAULT_FRACTION: f64 = 0.005;
    pub const DEFAULT_RADIUS: usize = 2;

    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            ModeSpec::Threshold { fraction, .. } if !(*fraction > 0.0 && *fraction < 1.0) => {
                Err(EvalError::InvalidSpec("fraction must lie in (0, 1)"))
            }
            ModeSpec::Hamming { radius: 0 } => Err(EvalError::InvalidSpec("radius must be at least 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeCount {
    pub count: usize,
    /// Raw-reward threshold used by the threshold kind.
    pub threshold: Option<f64>,
}

/// The `k`-th highest value with `k = ceil(fraction * len)` (at least 1).
fn top_fraction_threshold(mut values: Vec<f64>, fraction: f64) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    let k = (libm::ceil(fraction * values.len() as f64) as usize).clamp(1, values.len());
    values[k - 1]
}

/// Counts distinct modes among `samples` of `(terminal id, raw reward)`.
pub fn count_modes<E: Environment + ?Sized>(
    samples: &[(StateId, f64)],
    env: &E,
    reward: &RewardSpec,
    spec: &ModeSpec,
) -> Result<ModeCount, EvalError> {
    spec.validate()?;
    let distinct: BTreeSet<StateId> = samples.iter().map(|s| s.0).collect();
    match spec {
        ModeSpec::Predefined { ids } => Ok(ModeCount { count: distinct.intersection(ids).count(), threshold: None }),
        ModeSpec::Threshold { fraction, base, cap } => {
            let enumerable = env.num_terminals() <= *cap;
            if *base == ThresholdBase::Enumerated && enumerable {
                let log_raws = (0..env.num_terminals())
                    .map(|i| reward.log_raw(env, &env.terminal_at(i)?))
                    .collect::<Result<Vec<f64>, EnvError>>()?;
                let threshold = top_fraction_threshold(log_raws, *fraction);
                let mut count = 0;
                for &id in &distinct {
                    if reward.log_raw(env, &env.state(id)?)? >= threshold {
                        count += 1;
                    }
                }
                Ok(ModeCount { count, threshold: Some(libm::exp(threshold)) })
            } else {
                if samples.is_empty() {
                    return Err(EvalError::NoSamples);
                }
                let threshold = top_fraction_threshold(samples.iter().map(|s| s.1).collect(), *fraction);
                let above: BTreeSet<StateId> = samples.iter().filter(|s| s.1 >= threshold).map(|s| s.0).collect();
                Ok(ModeCount { count: above.len(), threshold: Some(threshold) })
            }
        }
        ModeSpec::Hamming { radius } => {
            let seq = env.as_sequence().ok_or(EvalError::KindMismatch("hamming modes need a sequence environment"))?;
            let mut count = 0;
            for &id in &distinct {
                let state = seq.state(id)?;
                let Payload::Seq { tokens } = &state.payload else {
                    return Err(EvalError::NotTerminal(id));
                };
                if tokens.len() != seq.max_len() {
                    return Err(EvalError::NotTerminal(id));
                }
                if is_local_optimum(seq, reward, tokens, *radius)? {
                    count += 1;
                }
            }
            Ok(ModeCount { count, threshold: None })
        }
    }
}

fn is_local_optimum(
    seq: &SequenceEnv,
    reward: &RewardSpec,
    tokens: &[u8],
    radius: usize,
) -> Result<bool, EvalError> {
    let own = reward.log_raw(seq, &seq.from_tokens(tokens)?)?;
    let mut better = false;
    for_each_neighbor(tokens, seq.alphabet_size(), radius, &mut |neighbor| {
        if better {
            return Ok(());
        }
        if reward.log_raw(seq, &seq.from_tokens(neighbor)?)? > own {
            better = true;
        }
        Ok(())
    })?;
    Ok(!better)
}

/// Calls `f` on every same-length substitution neighbor at Hamming
/// distance `1..=radius`.
pub fn for_each_neighbor(
    tokens: &[u8],
    alphabet_size: usize,
    radius: usize,
    f: &mut dyn FnMut(&[u8]) -> Result<(), EvalError>,
) -> Result<(), EvalError> {
    fn recurse(
        work: &mut Vec<u8>,
        original: &[u8],
        start: usize,
        left: usize,
        alphabet_size: usize,
        f: &mut dyn FnMut(&[u8]) -> Result<(), EvalError>,
    ) -> Result<(), EvalError> {
        if left == 0 {
            return Ok(());
        }
        for pos in start..original.len() {
            for t in 0..alphabet_size as u8 {
                if t == original[pos] {
                    continue;
                }
                work[pos] = t;
                f(work)?;
                recurse(work, original, pos + 1, left - 1, alphabet_size, f)?;
            }
            work[pos] = original[pos];
        }
        Ok(())
    }
    let mut work = tokens.to_vec();
    recurse(&mut work, tokens, 0, radius, alphabet_size, f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardStats {
    pub p25: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn reward_percentiles(samples: &[f64]) -> Result<RewardStats, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(RewardStats {
        p25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        max: sorted[sorted.len() - 1],
    })
}

/// Draws `count` terminals from `P_F(. | beta)` and returns them with their
/// raw rewards.
pub fn sample_terminals<E: Environment + ?Sized, R: Rng + ?Sized>(
    model: &ModelBundle,
    env: &E,
    reward: &RewardSpec,
    beta: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(EnvState, f64)>, EvalError> {
    (0..count)
        .map(|_| {
            let traj = sample_trajectory(model, env, reward, beta, rng, 0.0)?;
            let raw = libm::exp(traj.log_raw_reward);
            Ok((traj.states.last().cloned().expect("nonempty trajectory"), raw))
        })
        .collect()
}

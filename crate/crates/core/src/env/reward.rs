use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use super::{EnvError, EnvKind, EnvState, Environment, Payload};

/// Standard hypergrid reward
/// `R0 + R1 * prod_i [0.25 < |x_i/(H-1) - 0.5| <= 0.5] + R2 * prod_i [0.3 < |x_i/(H-1) - 0.5| < 0.4]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HypergridReward {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
}

impl Default for HypergridReward {
    fn default() -> Self {
        HypergridReward { r0: 1e-3, r1: 0.5, r2: 2.0 }
    }
}

impl HypergridReward {
    fn outer_band(u: f64) -> bool {
        let d = libm::fabs(u - 0.5);
        d > 0.25 && d <= 0.5
    }

    fn inner_band(u: f64) -> bool {
        let d = libm::fabs(u - 0.5);
        d > 0.3 && d < 0.4
    }

    pub fn raw(&self, coords: &[u32], side: u32) -> f64 {
        let scale = f64::from(side - 1);
        let outer = coords.iter().all(|&x| Self::outer_band(f64::from(x) / scale));
        let inner = coords.iter().all(|&x| Self::inner_band(f64::from(x) / scale));
        self.r0 + if outer { self.r1 } else { 0.0 } + if inner { self.r2 } else { 0.0 }
    }

    fn max_raw(&self, side: u32) -> f64 {
        let scale = f64::from(side - 1);
        let values = || (0..side).map(|x| f64::from(x) / scale);
        // Every coordinate may independently sit in the band, so the best cell
        // is the one with all coordinates in the best available band. The
        // inner band is contained in the outer one.
        let has_outer = values().any(Self::outer_band);
        let has_inner = values().any(Self::inner_band);
        let mut best = self.r0;
        if has_outer {
            best = best.max(self.r0 + self.r1);
        }
        if has_inner {
            best = best.max(self.r0 + self.r1 + self.r2);
        }
        best
    }
}

/// Raw rewards for every terminal, indexed by canonical terminal index.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardTable {
    log_raw: Vec<f64>,
}

impl RewardTable {
    pub fn from_raw(raw: &[f64]) -> Result<Self, EnvError> {
        let log_raw = raw
            .iter()
            .map(|&r| if r > 0.0 && r.is_finite() { Ok(libm::log(r)) } else { Err(EnvError::RewardDomain(r)) })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RewardTable { log_raw })
    }

    pub fn len(&self) -> usize {
        self.log_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_raw.is_empty()
    }
}

/// Position-separable sequence reward `exp(sum_i w[i, x_i])` with a seeded
/// weight table `w[i, t] ~ U[0, scale)`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSeparable {
    length: usize,
    alphabet_size: usize,
    weights: Vec<f64>,
}

impl SyntheticSeparable {
    pub fn seeded(length: usize, alphabet_size: usize, seed: u64, scale: f64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..length * alphabet_size).map(|_| scale * rng.random::<f64>()).collect();
        SyntheticSeparable { length, alphabet_size, weights }
    }

    pub fn from_weights(length: usize, alphabet_size: usize, weights: Vec<f64>) -> Result<Self, EnvError> {
        if weights.len() != length * alphabet_size || weights.iter().any(|w| !w.is_finite()) {
            return Err(EnvError::Invalid("weight table must be finite with length x alphabet entries"));
        }
        Ok(SyntheticSeparable { length, alphabet_size, weights })
    }

    pub fn weight(&self, position: usize, token: usize) -> f64 {
        self.weights[position * self.alphabet_size + token]
    }

    pub fn log_raw(&self, tokens: &[u8]) -> f64 {
        tokens.iter().enumerate().map(|(i, &t)| self.weight(i, usize::from(t))).sum()
    }

    fn log_max(&self) -> f64 {
        self.weights
            .chunks(self.alphabet_size)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum RewardOracle {
    Hypergrid(HypergridReward),
    Table(RewardTable),
    Synthetic(SyntheticSeparable),
}

/// Reward exponent `e`, normalization constant `C` and the raw oracle.
///
/// The normalized reward is `r(x) = C * R_raw(x) / max R_raw`, and the
/// tempered log-reward at inverse temperature `beta` is `e * beta * log r(x)`.
/// Everything is computed in log space.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardSpec {
    exponent: f64,
    norm_constant: f64,
    oracle: RewardOracle,
    side: u32,
    log_max_raw: f64,
}

/// The affine map from a cached raw log-reward to a tempered log-reward.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardScale {
    pub exponent: f64,
    /// `log C - log max R_raw`, so that `log r(x) = log R_raw(x) + log_offset`.
    pub log_offset: f64,
}

impl RewardScale {
    pub fn new(exponent: f64, norm_constant: f64, log_max_raw: f64) -> Self {
        RewardScale { exponent, log_offset: libm::log(norm_constant) - log_max_raw }
    }

    pub fn log_tempered(&self, log_raw: f64, beta: f64) -> f64 {
        self.exponent * beta * (log_raw + self.log_offset)
    }
}

impl RewardSpec {
    pub fn new<E: Environment + ?Sized>(
        env: &E,
        exponent: f64,
        norm_constant: f64,
        oracle: RewardOracle,
    ) -> Result<Self, EnvError> {
        if !(exponent > 0.0 && exponent.is_finite()) {
            return Err(EnvError::Invalid("reward exponent must be positive"));
        }
        if !(norm_constant > 0.0 && norm_constant.is_finite()) {
            return Err(EnvError::Invalid("reward normalization constant must be positive"));
        }
        let mut side = 0;
        let log_max_raw = match (&oracle, env.kind()) {
            (RewardOracle::Hypergrid(h), EnvKind::Hypergrid) => {
                if !(h.r0 >= 0.0 && h.r1 >= 0.0 && h.r2 >= 0.0) {
                    return Err(EnvError::Invalid("hypergrid reward coefficients must be nonnegative"));
                }
                let Payload::Grid { coords, .. } = env.initial().payload else {
                    return Err(EnvError::OracleMismatch("expected a hypergrid"));
                };
                side = grid_side(env, coords.len())?;
                let max = h.max_raw(side);
                if max <= 0.0 {
                    return Err(EnvError::RewardDomain(max));
                }
                libm::log(max)
            }
            (RewardOracle::Table(t), _) => {
                if t.log_raw.len() as u64 != env.num_terminals() {
                    return Err(EnvError::OracleMismatch("reward table must cover every terminal"));
                }
                t.log_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
            (RewardOracle::Synthetic(s), EnvKind::Sequence) => {
                let probe = env.terminal_at(0)?;
                let Payload::Seq { tokens } = &probe.payload else {
                    return Err(EnvError::OracleMismatch("expected a sequence environment"));
                };
                if tokens.len() != s.length || env.feature_dim() != s.length * (s.alphabet_size + 1) {
                    return Err(EnvError::OracleMismatch("synthetic weights do not match the sequence shape"));
                }
                s.log_max()
            }
            (RewardOracle::Hypergrid(_), _) => return Err(EnvError::OracleMismatch("hypergrid reward needs a hypergrid")),
            (RewardOracle::Synthetic(_), _) => {
                return Err(EnvError::OracleMismatch("synthetic reward needs a sequence environment"))
            }
        };
        Ok(RewardSpec { exponent, norm_constant, oracle, side, log_max_raw })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn norm_constant(&self) -> f64 {
        self.norm_constant
    }

    pub fn oracle(&self) -> &RewardOracle {
        &self.oracle
    }

    pub fn log_max_raw(&self) -> f64 {
        self.log_max_raw
    }

    pub fn scale(&self) -> RewardScale {
        RewardScale::new(self.exponent, self.norm_constant, self.log_max_raw)
    }

    /// `log R_raw(x)` for a terminal state.
    pub fn log_raw<E: Environment + ?Sized>(&self, env: &E, state: &EnvState) -> Result<f64, EnvError> {
        if !env.is_terminal(state) {
            return Err(EnvError::Contract("rewards are defined on terminal states only"));
        }
        match (&self.oracle, &state.payload) {
            (RewardOracle::Hypergrid(h), Payload::Grid { coords, .. }) => {
                let raw = h.raw(coords, self.side);
                if raw > 0.0 {
                    Ok(libm::log(raw))
                } else {
                    Err(EnvError::RewardDomain(raw))
                }
            }
            (RewardOracle::Table(t), _) => {
                let index = env.terminal_index(state).ok_or(EnvError::ForeignState)?;
                t.log_raw.get(index as usize).copied().ok_or(EnvError::ForeignState)
            }
            (RewardOracle::Synthetic(s), Payload::Seq { tokens }) => Ok(s.log_raw(tokens)),
            _ => Err(EnvError::ForeignState),
        }
    }

    /// `log r(x)` with `r(x) = C * R_raw(x) / max R_raw`.
    pub fn log_reward<E: Environment + ?Sized>(&self, env: &E, state: &EnvState) -> Result<f64, EnvError> {
        Ok(self.log_raw(env, state)? + self.scale().log_offset)
    }

    /// `e * beta * log r(x)`.
    pub fn log_tempered_reward<E: Environment + ?Sized>(
        &self,
        env: &E,
        state: &EnvState,
        beta: f64,
    ) -> Result<f64, EnvError> {
        Ok(self.scale().log_tempered(self.log_raw(env, state)?, beta))
    }
}

fn grid_side<E: Environment + ?Sized>(env: &E, ndim: usize) -> Result<u32, EnvError> {
    // feature_dim = ndim * side + 1
    let side = (env.feature_dim() - 1) / ndim;
    u32::try_from(side).map_err(|_| EnvError::OracleMismatch("hypergrid side out of range"))
}

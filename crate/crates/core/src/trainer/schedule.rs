use rand::Rng;
use rand_distr::Distribution;

use super::TrainError;

/// A rule mapping a training round and an RNG to an inverse temperature.
///
/// Bounded kinds always return values in `[a, b]`. The annealed kinds move a
/// window of half-width `half_width` across `[a, b]` over `total_rounds`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields))]
pub enum TemperatureSchedule {
    Fixed { value: f64 },
    Uniform { a: f64, b: f64 },
    /// `log` of a uniform draw on `[e^a, e^b]`.
    #[cfg_attr(feature = "serde", serde(rename = "loguniform"))]
    LogUniform { a: f64, b: f64 },
    /// `exp` of a uniform draw on `[log a, log b]`.
    #[cfg_attr(feature = "serde", serde(rename = "expuniform"))]
    ExpUniform { a: f64, b: f64 },
    /// Normal draw clipped to `[a, b]`.
    Normal { mean: f64, std: f64, a: f64, b: f64 },
    SimAnneal { a: f64, b: f64, total_rounds: u64, #[cfg_attr(feature = "serde", serde(default = "half_width"))] half_width: f64 },
    SimAnnealInverse { a: f64, b: f64, total_rounds: u64, #[cfg_attr(feature = "serde", serde(default = "half_width"))] half_width: f64 },
}

#[cfg(feature = "serde")]
fn half_width() -> f64 {
    TemperatureSchedule::DEFAULT_HALF_WIDTH
}

impl TemperatureSchedule {
    pub const DEFAULT_HALF_WIDTH: f64 = 0.5;

    pub fn sim_anneal(a: f64, b: f64, total_rounds: u64) -> Self {
        TemperatureSchedule::SimAnneal { a, b, total_rounds, half_width: Self::DEFAULT_HALF_WIDTH }
    }

    pub fn sim_anneal_inverse(a: f64, b: f64, total_rounds: u64) -> Self {
        TemperatureSchedule::SimAnnealInverse { a, b, total_rounds, half_width: Self::DEFAULT_HALF_WIDTH }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        use TemperatureSchedule::*;
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let ok = match *self {
            Fixed { value } => finite(&[value]),
            Uniform { a, b } | LogUniform { a, b } => finite(&[a, b]) && a < b,
            ExpUniform { a, b } => {
                if !(a > 0.0) {
                    return Err(TrainError::Schedule("expuniform needs a > 0"));
                }
                finite(&[a, b]) && a < b
            }
            Normal { mean, std, a, b } => {
                if !(std > 0.0) {
                    return Err(TrainError::Schedule("normal schedule needs std > 0"));
                }
                finite(&[mean, std, a, b]) && a < b
            }
            SimAnneal { a, b, total_rounds, half_width } | SimAnnealInverse { a, b, total_rounds, half_width } => {
                if total_rounds == 0 || !(half_width > 0.0) {
                    return Err(TrainError::Schedule("annealing needs total_rounds >= 1 and half_width > 0"));
                }
                finite(&[a, b, half_width]) && a < b
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Schedule("schedule bounds must be finite with a < b"))
        }
    }

    /// Window centre of the annealed kinds at round `t` (clamped to `t <= T`).
    pub fn midpoint(&self, t: u64) -> Option<f64> {
        match *self {
            TemperatureSchedule::SimAnneal { a, b, total_rounds, .. } => Some((b - a) * progress(t, total_rounds) + a),
            TemperatureSchedule::SimAnnealInverse { a, b, total_rounds, .. } => {
                Some((b - a) * (1.0 - progress(t, total_rounds)) + a)
            }
            _ => None,
        }
    }

    /// Closed interval containing every value [`sample`](Self::sample) can
    /// return at round `t`.
    pub fn support(&self, t: u64) -> (f64, f64) {
        use TemperatureSchedule::*;
        match *self {
            Fixed { value } => (value, value),
            Uniform { a, b } | LogUniform { a, b } | ExpUniform { a, b } | Normal { a, b, .. } => (a, b),
            SimAnneal { a, b, half_width, .. } | SimAnnealInverse { a, b, half_width, .. } => {
                let mu = self.midpoint(t).unwrap_or(a);
                ((mu - half_width).max(a), (mu + half_width).min(b))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: u64, rng: &mut R) -> Result<f64, TrainError> {
        use TemperatureSchedule::*;
        self.validate()?;
        let beta = match *self {
            Fixed { value } => value,
            Uniform { a, b } => uniform(a, b, rng),
            LogUniform { a, b } => {
                // log(e^a + u (e^b - e^a)) written to avoid overflowing e^b.
                let u: f64 = rng.random();
                b + libm::log(u + (1.0 - u) * libm::exp(a - b))
            }
            ExpUniform { a, b } => libm::exp(uniform(libm::log(a), libm::log(b), rng)),
            Normal { mean, std, .. } => {
                rand_distr::Normal::new(mean, std).map_err(|_| TrainError::Schedule("invalid normal parameters"))?.sample(rng)
            }
            SimAnneal { .. } | SimAnnealInverse { .. } => {
                let (lo, hi) = self.support(t);
                uniform(lo, hi, rng)
            }
        };
        let (lo, hi) = self.support(t);
        Ok(beta.clamp(lo, hi))
    }
}

fn progress(t: u64, total: u64) -> f64 {
    (t as f64 / total as f64).min(1.0)
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

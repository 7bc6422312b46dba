//! TOML run configuration.
//!
//! A config has the blocks `[env]` (with `[env.reward]` and
//! `[env.reward.oracle]`), `[model]`, `[train]` (with `[train.online]`,
//! `[train.offline]` and `[train.dataset]`), `[schedule.train]`,
//! `[schedule.exploration]` and `[eval]`, plus top-level `seed` and
//! `output_dir`. Every block except `[env]` has defaults. Relative file
//! paths are resolved against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use logit_gfn_core::env::{parse_offline_dataset, HypergridReward, RewardTable, SyntheticSeparable, DEFAULT_ENUMERATION_CAP};
use logit_gfn_core::{
    AnyEnv, Environment, Hypergrid, LossKind, LossSpec, ModeSpec, ModelConfig, OfflineConfig, OfflineDataset,
    RewardOracle, RewardSpec, RoundConfig, SequenceEnv, StateId, TemperatureSchedule, ThresholdBase,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid { key: key.to_owned(), message: message.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: Schedules,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKindName {
    Hypergrid,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKindName,
    /// Hypergrid dimension.
    pub ndim: Option<usize>,
    /// Hypergrid side length `H`.
    pub side: Option<u32>,
    /// Sequence alphabet, one character per token.
    pub alphabet: Option<String>,
    /// Sequence length `L`.
    pub length: Option<usize>,
    pub reward: RewardConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "one")]
    pub exponent: f64,
    #[serde(default = "one")]
    pub norm_constant: f64,
    pub oracle: OracleConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleConfig {
    Hypergrid {
        #[serde(default = "r0")]
        r0: f64,
        #[serde(default = "r1")]
        r1: f64,
        #[serde(default = "r2")]
        r2: f64,
    },
    /// `state<TAB>raw_reward` file covering every terminal.
    Table { path: PathBuf },
    Synthetic {
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn r0() -> f64 {
    HypergridReward::default().r0
}
fn r1() -> f64 {
    HypergridReward::default().r1
}
fn r2() -> f64 {
    HypergridReward::default().r2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub loss: LossKind,
    /// SubTB decay; only valid with `loss = "subtb"`.
    pub lambda: Option<f64>,
    pub online: RoundConfig,
    pub offline: OfflineConfig,
    pub dataset: Option<DatasetConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            protocol: Protocol::Online,
            loss: LossKind::Tb,
            lambda: None,
            online: RoundConfig::default(),
            offline: OfflineConfig::default(),
            dataset: None,
        }
    }
}

/// Offline data: a TSV file, or every terminal whose reward lies below a
/// quantile of the enumerated space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: Option<PathBuf>,
    pub below_quantile: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub train: TemperatureSchedule,
    pub exploration: TemperatureSchedule,
}

impl Default for Schedules {
    fn default() -> Self {
        Schedules { train: TemperatureSchedule::Fixed { value: 1.0 }, exploration: TemperatureSchedule::Fixed { value: 1.0 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Betas at which training records the exact L1 to the target.
    pub exact_betas: Vec<f64>,
    /// Largest state space evaluated exactly.
    pub cap: u64,
    pub modes: Option<ModesConfig>,
    /// Samples drawn per beta by `eval`.
    pub samples: usize,
    /// Query betas for `eval` and `enumerate`.
    pub betas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            exact_betas: vec![1.0],
            cap: DEFAULT_ENUMERATION_CAP,
            modes: None,
            samples: 2048,
            betas: vec![1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModesConfig {
    Threshold {
        #[serde(default = "default_fraction")]
        fraction: f64,
        #[serde(default = "default_base")]
        base: ThresholdBase,
    },
    Hamming {
        #[serde(default = "default_radius")]
        radius: usize,
    },
    /// Mode states in their text form.
    Predefined { states: Vec<String> },
}

fn default_fraction() -> f64 {
    ModeSpec::DEFAULT_FRACTION
}
fn default_base() -> ThresholdBase {
    ThresholdBase::Enumerated
}
fn default_radius() -> usize {
    ModeSpec::DEFAULT_RADIUS
}

impl RunConfig {
    /// Reads and parses a config file, resolving relative input paths
    /// against its directory. Does not validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::from_toml_str(&text, Some(base))
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(base) = base_dir {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let OracleConfig::Table { path } = &mut self.env.reward.oracle {
            *path = base.join(&*path);
        }
        if let Some(DatasetConfig { path: Some(path), .. }) = &mut self.train.dataset {
            *path = base.join(&*path);
        }
    }

    pub fn loss_spec(&self) -> Result<LossSpec, ConfigError> {
        let spec = LossSpec { kind: self.train.loss, lambda: self.train.lambda };
        spec.validate().map_err(|e| invalid("train.lambda", e))?;
        Ok(spec)
    }

    pub fn build_env(&self) -> Result<AnyEnv, ConfigError> {
        let env = &self.env;
        fn need<T>(v: Option<T>, key: &str) -> Result<T, ConfigError> {
            v.ok_or_else(|| invalid(key, "required for this environment kind"))
        }
        match env.kind {
            EnvKindName::Hypergrid => {
                for (set, key) in [(env.alphabet.is_some(), "env.alphabet"), (env.length.is_some(), "env.length")] {
                    if set {
                        return Err(invalid(key, "not used by hypergrid environments"));
                    }
                }
                let grid = Hypergrid::new(need(env.ndim, "env.ndim")?, need(env.side, "env.side")?)
                    .map_err(|e| invalid("env", e))?;
                Ok(AnyEnv::Hypergrid(grid))
            }
            EnvKindName::Sequence => {
                for (set, key) in [(env.ndim.is_some(), "env.ndim"), (env.side.is_some(), "env.side")] {
                    if set {
                        return Err(invalid(key, "not used by sequence environments"));
                    }
                }
                let alphabet = need(env.alphabet.as_deref(), "env.alphabet")?;
                let seq = SequenceEnv::new(alphabet, need(env.length, "env.length")?).map_err(|e| invalid("env", e))?;
                Ok(AnyEnv::Sequence(seq))
            }
        }
    }

    pub fn build_reward(&self, env: &AnyEnv) -> Result<RewardSpec, ConfigError> {
        let r = &self.env.reward;
        for (value, key) in [(r.exponent, "env.reward.exponent"), (r.norm_constant, "env.reward.norm_constant")] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(invalid(key, "must be a positive number"));
            }
        }
        let oracle = match &r.oracle {
            OracleConfig::Hypergrid { r0, r1, r2 } => {
                if !matches!(env, AnyEnv::Hypergrid(_)) {
                    return Err(invalid("env.reward.oracle.kind", "the hypergrid oracle needs a hypergrid environment"));
                }
                RewardOracle::Hypergrid(HypergridReward { r0: *r0, r1: *r1, r2: *r2 })
            }
            OracleConfig::Synthetic { seed, scale } => {
                let Some(seq) = env.as_sequence() else {
                    return Err(invalid("env.reward.oracle.kind", "the synthetic oracle needs a sequence environment"));
                };
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(invalid("env.reward.oracle.scale", "must be a positive number"));
                }
                RewardOracle::Synthetic(SyntheticSeparable::seeded(seq.max_len(), seq.alphabet_size(), *seed, *scale))
            }
            OracleConfig::Table { path } => RewardOracle::Table(load_table(env, path, self.eval.cap)?),
        };
        RewardSpec::new(env, r.exponent, r.norm_constant, oracle).map_err(|e| invalid("env.reward", e))
    }

    pub fn build_modes(&self, env: &AnyEnv) -> Result<Option<ModeSpec>, ConfigError> {
        let Some(modes) = &self.eval.modes else {
            return Ok(None);
        };
        let spec = match modes {
            ModesConfig::Threshold { fraction, base } => {
                ModeSpec::Threshold { fraction: *fraction, base: *base, cap: self.eval.cap }
            }
            ModesConfig::Hamming { radius } => {
                if env.as_sequence().is_none() {
                    return Err(invalid("eval.modes.kind", "hamming modes need a sequence environment"));
                }
                ModeSpec::Hamming { radius: *radius }
            }
            ModesConfig::Predefined { states } => {
                let ids = states
                    .iter()
                    .map(|s| env.parse_terminal(s).map(|st| st.id))
                    .collect::<Result<BTreeSet<StateId>, _>>()
                    .map_err(|e| invalid("eval.modes.states", e))?;
                ModeSpec::Predefined { ids }
            }
        };
        spec.validate().map_err(|e| invalid("eval.modes", e))?;
        Ok(Some(spec))
    }

    pub fn build_dataset(&self, env: &AnyEnv, reward: &RewardSpec) -> Result<OfflineDataset, ConfigError> {
        let key = "train.dataset";
        let cfg = self.train.dataset.as_ref().ok_or_else(|| invalid(key, "offline training needs a dataset"))?;
        match (&cfg.path, cfg.below_quantile) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| invalid("train.dataset.path", format!("{}: {e}", path.display())))?;
                parse_offline_dataset(&text, env, &path.display().to_string()).map_err(|e| invalid("train.dataset.path", e))
            }
            (None, Some(q)) => OfflineDataset::below_quantile(env, reward, q, self.eval.cap)
                .map_err(|e| invalid("train.dataset.below_quantile", e)),
            _ => Err(invalid(key, "set exactly one of `path` and `below_quantile`")),
        }
    }

    /// Checks every block and builds the run's environment, reward and
    /// evaluation settings.
    pub fn resolve(self) -> Result<Resolved, ConfigError> {
        let env = self.build_env()?;
        let reward = self.build_reward(&env)?;
        let loss = self.loss_spec()?;
        self.model.validate().map_err(|e| invalid("model", e))?;
        if loss.kind.needs_state_flow() && !self.model.state_flow {
            return Err(invalid(
                "train.loss",
                format!("loss `{}` needs a state-flow head; set model.state_flow = true", loss_name(loss.kind)),
            ));
        }
        self.schedule.train.validate().map_err(|e| invalid("schedule.train", e))?;
        self.schedule.exploration.validate().map_err(|e| invalid("schedule.exploration", e))?;
        let dataset = match self.train.protocol {
            Protocol::Online => {
                self.train.online.validate().map_err(|e| invalid("train.online", e))?;
                if self.train.dataset.is_some() {
                    return Err(invalid("train.dataset", "only used with protocol = \"offline\""));
                }
                None
            }
            Protocol::Offline => {
                self.train.offline.validate().map_err(|e| invalid("train.offline", e))?;
                Some(self.build_dataset(&env, &reward)?)
            }
        };
        let modes = self.build_modes(&env)?;
        if self.eval.samples == 0 {
            return Err(invalid("eval.samples", "must be at least 1"));
        }
        for (betas, key) in [(&self.eval.exact_betas, "eval.exact_betas"), (&self.eval.betas, "eval.betas")] {
            if betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
                return Err(invalid(key, "betas must be finite and nonnegative"));
            }
        }
        Ok(Resolved { config: self, env, reward, loss, modes, dataset })
    }
}

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Tb => "tb",
        LossKind::Db => "db",
        LossKind::SubTb => "subtb",
    }
}

/// Reads a reward table in dataset format and orders it by terminal index.
fn load_table(env: &AnyEnv, path: &Path, cap: u64) -> Result<RewardTable, ConfigError> {
    let key = "env.reward.oracle.path";
    let text = std::fs::read_to_string(path).map_err(|e| invalid(key, format!("{}: {e}", path.display())))?;
    let data = parse_offline_dataset(&text, env, &path.display().to_string()).map_err(|e| invalid(key, e))?;
    let n = env.num_terminals();
    if n > cap {
        return Err(invalid(key, format!("a table needs an enumerable space; {n} terminals exceed the cap {cap}")));
    }
    let mut raw = vec![f64::NAN; n as usize];
    for &(id, r) in &data.entries {
        let state = env.state(id).map_err(|e| invalid(key, e))?;
        let index = env.terminal_index(&state).ok_or_else(|| invalid(key, "entry is not a terminal state"))?;
        raw[index as usize] = r;
    }
    if let Some(missing) = raw.iter().position(|r| r.is_nan()) {
        let state = env.terminal_at(missing as u64).map_err(|e| invalid(key, e))?;
        return Err(invalid(key, format!("no reward for terminal {:?}", env.format_state(&state))));
    }
    RewardTable::from_raw(&raw).map_err(|e| invalid(key, e))
}

/// A validated config with its built objects.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub env: AnyEnv,
    pub reward: RewardSpec,
    pub loss: LossSpec,
    pub modes: Option<ModeSpec>,
    pub dataset: Option<OfflineDataset>,
}

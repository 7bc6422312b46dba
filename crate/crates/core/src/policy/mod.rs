//! The temperature-conditional GFlowNet model.
//!
//! Edge logits use the state-pair parameterization: the network input is
//! the concatenated encodings of `(s, s')`. Four conditioning modes are
//! supported:
//!
//! | mode          | edge-net input              | softmax temperature |
//! |---------------|-----------------------------|---------------------|
//! | unconditional | `enc(s), enc(s')`           | 1                   |
//! | layer         | `enc(s), enc(s'), g(beta)`  | 1                   |
//! | logit         | `enc(s), enc(s')`           | `f2(f1(beta))`      |
//! | logit+layer   | `enc(s), enc(s'), f1(beta)` | `f2(f1(beta))`      |
//!
//! `g` and the encoder `f1` are the same network slot (`temp_embed`); the
//! decoder `f2` ends in a softplus so the temperature is always positive.

mod sample;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::env::{ActionId, EnvError, EnvState, Environment};
use crate::log_sum_exp;
use crate::nn::{Activation, Mlp, NnError, Tape};

pub use sample::{sample_backward_trajectory, sample_trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("operation not available in {mode:?} mode: {what}")]
    Mode { mode: ConditioningMode, what: &'static str },
    #[error("not an edge of the state graph")]
    IllegalEdge,
    #[error("model has no {0:?} head")]
    MissingHead(Head),
    #[error("invalid inverse temperature {0}")]
    InvalidBeta(f64),
    #[error("invalid model configuration: {0}")]
    Config(&'static str),
    #[error("exploration rate must lie in [0, 1), got {0}")]
    InvalidExploration(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ConditioningMode {
    Unconditional,
    Layer,
    Logit,
    #[cfg_attr(feature = "serde", serde(rename = "logit+layer"))]
    LogitLayer,
}

impl ConditioningMode {
    pub fn is_conditional(self) -> bool {
        self != ConditioningMode::Unconditional
    }

    /// Whether edge networks see a beta embedding.
    pub fn embeds_in_layers(self) -> bool {
        matches!(self, ConditioningMode::Layer | ConditioningMode::LogitLayer)
    }

    /// Whether logits are divided by a learned temperature.
    pub fn scales_logits(self) -> bool {
        matches!(self, ConditioningMode::Logit | ConditioningMode::LogitLayer)
    }
}

/// How beta is presented to the beta networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BetaInput {
    Raw,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Thermometer {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Thermometer code of `beta`: bin `i` is `clamp((beta - edge_i) / step, 0, 1)`
/// with `step = (hi - lo) / bins` and `edge_i = lo + i * step`.
pub fn thermometer_encode(beta: f64, bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let step = (hi - lo) / bins as f64;
    (0..bins)
        .map(|i| {
            let edge = lo + i as f64 * step;
            ((beta - edge) / step).clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub mode: ConditioningMode,
    /// Hidden widths of the edge networks.
    pub policy_hidden: Vec<usize>,
    /// Hidden width of every beta network and of the state-flow head.
    pub beta_hidden: usize,
    pub embed_dim: usize,
    pub beta_input: BetaInput,
    pub thermometer: Option<Thermometer>,
    pub state_flow: bool,
    pub uniform_pb: bool,
    /// Divide backward logits by the same learned temperature as forward ones.
    pub scale_backward: bool,
    pub init_log_z: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ConditioningMode::Logit,
            policy_hidden: vec![128],
            beta_hidden: 32,
            embed_dim: 32,
            beta_input: BetaInput::Log,
            thermometer: None,
            state_flow: false,
            uniform_pb: false,
            scale_backward: true,
            init_log_z: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.policy_hidden.iter().any(|&h| h == 0) || self.beta_hidden == 0 || self.embed_dim == 0 {
            return Err(PolicyError::Config("layer widths must be positive"));
        }
        if let Some(t) = self.thermometer {
            if t.bins == 0 || !(t.lo < t.hi) || !t.lo.is_finite() || !t.hi.is_finite() {
                return Err(PolicyError::Config("thermometer needs bins >= 1 and lo < hi"));
            }
        }
        if !self.init_log_z.is_finite() {
            return Err(PolicyError::Config("initial log Z must be finite"));
        }
        Ok(())
    }

    fn beta_dim(&self) -> usize {
        self.thermometer.map_or(1, |t| t.bins)
    }
}

/// Parameter groups of a [`ModelBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Head {
    Forward,
    Backward,
    TempEmbed,
    ScalerDecoder,
    LogPartition,
    StateFlow,
}

impl Head {
    pub const ALL: [Head; 6] =
        [Head::Forward, Head::Backward, Head::TempEmbed, Head::ScalerDecoder, Head::LogPartition, Head::StateFlow];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub pf_net: Mlp,
    pub pb_net: Mlp,
    /// `g` in layer mode, the encoder `f1` in logit modes.
    pub temp_embed: Option<Mlp>,
    /// The decoder `f2`, ending in softplus.
    pub scaler_decoder: Option<Mlp>,
    /// A zero-input network (a learned scalar) when unconditional.
    pub logz_head: Mlp,
    pub state_flow_head: Option<Mlp>,
}

/// Gradient buffers matching every head of a [`ModelBundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    heads: [Vec<f64>; 6],
}

impl Gradients {
    pub fn zeros_for(model: &ModelBundle) -> Self {
        let heads = Head::ALL.map(|h| vec![0.0; model.head(h).map_or(0, Mlp::num_params)]);
        Gradients { heads }
    }

    pub fn head(&self, head: Head) -> &[f64] {
        &self.heads[head.index()]
    }

    pub fn head_mut(&mut self, head: Head) -> &mut [f64] {
        &mut self.heads[head.index()]
    }

    pub fn scale(&mut self, factor: f64) {
        self.heads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.heads.iter().flatten().map(|g| g * g).sum())
    }

    /// All heads concatenated in [`Head::ALL`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.heads.iter().flatten().copied().collect()
    }
}

/// Everything that depends on beta alone, evaluated once per beta.
#[derive(Clone, Debug)]
pub struct BetaContext {
    pub beta: f64,
    features: Vec<f64>,
    embed: Option<Tape>,
    decoder: Option<Tape>,
    log_z: Tape,
    temperature: f64,
    /// First-layer pre-activations of the forward and backward edge
    /// networks with the embedding folded in; layer-conditioned modes only.
    edge_bases: Option<[Vec<f64>; 2]>,
}

impl BetaContext {
    pub fn embedding(&self) -> &[f64] {
        self.embed.as_ref().map_or(&[], |t| t.output())
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn log_z(&self) -> f64 {
        self.log_z.output()[0]
    }

    pub(crate) fn embed_tape(&self) -> Option<&Tape> {
        self.embed.as_ref()
    }

    pub(crate) fn decoder_tape(&self) -> Option<&Tape> {
        self.decoder.as_ref()
    }

    pub(crate) fn log_z_tape(&self) -> &Tape {
        &self.log_z
    }

    pub(crate) fn edge_base(&self, dir: Direction) -> Option<&[f64]> {
        self.edge_bases.as_ref().map(|b| b[dir as usize].as_slice())
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Logits and log-probabilities over the neighbors of one state.
#[derive(Clone, Debug)]
pub(crate) struct EdgeSet {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Empty when the distribution has no parameters (uniform backward policy).
    pub tapes: Vec<Tape>,
    pub temperature: f64,
    /// Whether `temperature` is the learned one (gradients flow into it).
    pub learned_temperature: bool,
}

/// A complete trajectory `s_0 -> ... -> s_n = x`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<ActionId>,
    pub beta_used: f64,
    pub log_raw_reward: f64,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn terminal(&self) -> &EnvState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Checks the trajectory invariants against `env`.
    pub fn validate<E: Environment + ?Sized>(&self, env: &E) -> Result<(), PolicyError> {
        if self.states.len() != self.actions.len() + 1 || self.actions.is_empty() {
            return Err(PolicyError::IllegalEdge);
        }
        if !env.is_initial(&self.states[0]) || !env.is_terminal(self.terminal()) {
            return Err(PolicyError::IllegalEdge);
        }
        for (w, a) in self.states.windows(2).zip(&self.actions) {
            let kids = env.children(&w[0])?;
            if !kids.iter().any(|(b, c)| b == a && c.id == w[1].id) {
                return Err(PolicyError::IllegalEdge);
            }
        }
        Ok(())
    }
}

pub(crate) fn log_softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|s| s - lse).collect()
}

fn beta_net<R: Rng + ?Sized>(
    dims: &[usize],
    output: Activation,
    rng: &mut R,
) -> Result<Mlp, NnError> {
    Mlp::init_uniform(dims, &[Activation::LeakyRelu, output], rng)
}

impl ModelBundle {
    pub fn new<E: Environment + ?Sized, R: Rng + ?Sized>(
        config: ModelConfig,
        env: &E,
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        config.validate()?;
        let mode = config.mode;
        let features = env.feature_dim();
        let embed = config.embed_dim;
        let beta_dim = config.beta_dim();
        let edge_in = 2 * features + if mode.embeds_in_layers() { embed } else { 0 };

        let mut policy_dims = vec![edge_in];
        policy_dims.extend_from_slice(&config.policy_hidden);
        policy_dims.push(1);
        let mut policy_acts = vec![Activation::LeakyRelu; config.policy_hidden.len()];
        policy_acts.push(Activation::Identity);
        let pf_net = Mlp::init_uniform(&policy_dims, &policy_acts, rng)?;
        let pb_net = Mlp::init_uniform(&policy_dims, &policy_acts, rng)?;

        let temp_embed = if mode.is_conditional() {
            Some(beta_net(&[beta_dim, config.beta_hidden, embed], Activation::Identity, rng)?)
        } else {
            None
        };
        let scaler_decoder = if mode.scales_logits() {
            Some(beta_net(&[embed, config.beta_hidden, 1], Activation::Softplus, rng)?)
        } else {
            None
        };
        let mut logz_head = if mode.is_conditional() {
            beta_net(&[beta_dim, config.beta_hidden, 1], Activation::Identity, rng)?
        } else {
            Mlp::zeros(&[0, 1], &[Activation::Identity])?
        };
        let last = logz_head.activations().len() - 1;
        logz_head.set_bias(last, 0, config.init_log_z);

        let state_flow_head = if config.state_flow {
            let flow_in = features + if mode.is_conditional() { embed } else { 0 };
            Some(beta_net(&[flow_in, config.beta_hidden, 1], Activation::Identity, rng)?)
        } else {
            None
        };
        Ok(ModelBundle { config, feature_dim: features, pf_net, pb_net, temp_embed, scaler_decoder, logz_head, state_flow_head })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.config.mode
    }

    /// Checks the head layout against the configuration (used after loading).
    pub fn validate(&self) -> Result<(), PolicyError> {
        self.config.validate()?;
        let mode = self.config.mode;
        for head in Head::ALL {
            if let Some(net) = self.head(head) {
                net.validate()?;
            }
        }
        if mode.is_conditional() != self.temp_embed.is_some() {
            return Err(PolicyError::Config("beta embedding must exist exactly in conditional modes"));
        }
        if mode.scales_logits() != self.scaler_decoder.is_some() {
            return Err(PolicyError::Config("logit-scaling decoder must exist exactly in logit modes"));
        }
        if self.config.state_flow != self.state_flow_head.is_some() {
            return Err(PolicyError::Config("state-flow head presence must match the configuration"));
        }
        let edge_in = 2 * self.feature_dim + if mode.embeds_in_layers() { self.config.embed_dim } else { 0 };
        if self.pf_net.input_dim() != edge_in || self.pb_net.input_dim() != edge_in {
            return Err(PolicyError::Config("edge network input width does not match the features"));
        }
        let beta_in = if mode.is_conditional() { self.config.beta_dim() } else { 0 };
        if self.logz_head.input_dim() != beta_in {
            return Err(PolicyError::Config("log-partition head input width mismatch"));
        }
        Ok(())
    }

    pub fn head(&self, head: Head) -> Option<&Mlp> {
        match head {
            Head::Forward => Some(&self.pf_net),
            Head::Backward => Some(&self.pb_net),
            Head::TempEmbed => self.temp_embed.as_ref(),
            Head::ScalerDecoder => self.scaler_decoder.as_ref(),
            Head::LogPartition => Some(&self.logz_head),
            Head::StateFlow => self.state_flow_head.as_ref(),
        }
    }

    pub fn head_mut(&mut self, head: Head) -> Option<&mut Mlp> {
        match head {
            Head::Forward => Some(&mut self.pf_net),
            Head::Backward => Some(&mut self.pb_net),
            Head::TempEmbed => self.temp_embed.as_mut(),
            Head::ScalerDecoder => self.scaler_decoder.as_mut(),
            Head::LogPartition => Some(&mut self.logz_head),
            Head::StateFlow => self.state_flow_head.as_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        Head::ALL.iter().filter_map(|&h| self.head(h)).map(Mlp::num_params).sum()
    }

    /// All parameters concatenated in [`Head::ALL`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        Head::ALL.iter().filter_map(|&h| self.head(h)).flat_map(|n| n.params().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), PolicyError> {
        if flat.len() != self.num_params() {
            return Err(NnError::Dimension { expected: self.num_params(), got: flat.len() }.into());
        }
        let mut offset = 0;
        for head in Head::ALL {
            if let Some(net) = self.head_mut(head) {
                let n = net.num_params();
                net.params_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    fn beta_features(&self, beta: f64) -> Result<Vec<f64>, PolicyError> {
        if !beta.is_finite() {
            return Err(PolicyError::InvalidBeta(beta));
        }
        let x = match self.config.beta_input {
            BetaInput::Raw => beta,
            BetaInput::Log if beta > 0.0 => libm::log(beta),
            BetaInput::Log => return Err(PolicyError::InvalidBeta(beta)),
        };
        Ok(match self.config.thermometer {
            Some(t) => thermometer_encode(x, t.bins, t.lo, t.hi),
            None => vec![x],
        })
    }

    /// Evaluates the beta embedding, temperature and log-partition at `beta`.
    pub fn context(&self, beta: f64) -> Result<BetaContext, PolicyError> {
        let features = if self.config.mode.is_conditional() { self.beta_features(beta)? } else { Vec::new() };
        let embed = self.temp_embed.as_ref().map(|net| net.forward(&features)).transpose()?;
        let decoder = match (&self.scaler_decoder, &embed) {
            (Some(net), Some(e)) => Some(net.forward(e.output())?),
            _ => None,
        };
        let temperature = decoder.as_ref().map_or(1.0, |t| t.output()[0]);
        let log_z = self.logz_head.forward(&features)?;
        let edge_bases = match &embed {
            Some(e) if self.config.mode.embeds_in_layers() => {
                let from = 2 * self.feature_dim;
                Some([self.pf_net.first_layer_base(e.output(), from)?, self.pb_net.first_layer_base(e.output(), from)?])
            }
            _ => None,
        };
        Ok(BetaContext { beta, features, embed, decoder, log_z, temperature, edge_bases })
    }

    /// Encodes the `from -> to` pair; a beta embedding, if the edge networks
    /// take one, arrives through [`BetaContext::edge_base`].
    pub(crate) fn edge_input<E: Environment + ?Sized>(
        &self,
        env: &E,
        from: &EnvState,
        to: &EnvState,
        scratch: &mut Vec<usize>,
    ) -> Vec<f64> {
        let f = self.feature_dim;
        let mut input = vec![0.0; 2 * f];
        scratch.clear();
        env.active_features(from, scratch);
        for &i in scratch.iter() {
            input[i] = 1.0;
        }
        scratch.clear();
        env.active_features(to, scratch);
        for &i in scratch.iter() {
            input[f + i] = 1.0;
        }
        input
    }

    fn edge_forward(&self, dir: Direction, net: &Mlp, input: &[f64], ctx: &BetaContext) -> Result<Tape, NnError> {
        match ctx.edge_base(dir) {
            Some(base) => net.forward_with_base(input, base),
            None => net.forward(input),
        }
    }

    pub(crate) fn flow_input<E: Environment + ?Sized>(
        &self,
        env: &E,
        state: &EnvState,
        ctx: &BetaContext,
        scratch: &mut Vec<usize>,
    ) -> Vec<f64> {
        let f = self.feature_dim;
        let emb = ctx.embedding();
        let mut input = vec![0.0; f + emb.len()];
        scratch.clear();
        env.active_features(state, scratch);
        for &i in scratch.iter() {
            input[i] = 1.0;
        }
        input[f..].copy_from_slice(emb);
        input
    }

    fn direction_temperature(&self, dir: Direction, ctx: &BetaContext) -> (f64, bool) {
        let scaled = self.config.mode.scales_logits()
            && (dir == Direction::Forward || self.config.scale_backward);
        if scaled {
            (ctx.temperature(), true)
        } else {
            (1.0, false)
        }
    }

    /// Evaluates logits and log-probabilities over `neighbors` of `state`
    /// (children for [`Direction::Forward`], parents for
    /// [`Direction::Backward`]).
    pub(crate) fn edge_set<E: Environment + ?Sized>(
        &self,
        dir: Direction,
        env: &E,
        state: &EnvState,
        neighbors: &[(ActionId, EnvState)],
        ctx: &BetaContext,
        keep_tapes: bool,
    ) -> Result<EdgeSet, PolicyError> {
        if dir == Direction::Backward && self.config.uniform_pb {
            let logits = vec![0.0; neighbors.len()];
            let log_probs = log_softmax_scaled(&logits, 1.0);
            return Ok(EdgeSet { logits, log_probs, tapes: Vec::new(), temperature: 1.0, learned_temperature: false });
        }
        let net = match dir {
            Direction::Forward => &self.pf_net,
            Direction::Backward => &self.pb_net,
        };
        let mut scratch = Vec::new();
        let mut logits = Vec::with_capacity(neighbors.len());
        let mut tapes = Vec::with_capacity(if keep_tapes { neighbors.len() } else { 0 });
        for (_, other) in neighbors {
            let input = self.edge_input(env, state, other, &mut scratch);
            let tape = self.edge_forward(dir, net, &input, ctx)?;
            logits.push(tape.output()[0]);
            if keep_tapes {
                tapes.push(tape);
            }
        }
        let (temperature, learned_temperature) = self.direction_temperature(dir, ctx);
        let log_probs = log_softmax_scaled(&logits, temperature);
        Ok(EdgeSet { logits, log_probs, tapes, temperature, learned_temperature })
    }

    /// Pre-temperature logit of the edge `from -> to` (forward) or of
    /// choosing parent `to` from `from` (backward).
    pub fn edge_logit<E: Environment + ?Sized>(
        &self,
        dir: Direction,
        env: &E,
        from: &EnvState,
        to: &EnvState,
        beta: f64,
    ) -> Result<f64, PolicyError> {
        let neighbors = match dir {
            Direction::Forward => env.children(from)?,
            Direction::Backward => env.parents(from)?,
        };
        if !neighbors.iter().any(|(_, n)| n.id == to.id) {
            return Err(PolicyError::IllegalEdge);
        }
        let ctx = self.context(beta)?;
        let net = match dir {
            Direction::Forward => &self.pf_net,
            Direction::Backward => &self.pb_net,
        };
        let input = self.edge_input(env, from, to, &mut Vec::new());
        Ok(self.edge_forward(dir, net, &input, &ctx)?.output()[0])
    }

    /// The learned softmax temperature `T = softplus(f2(f1(beta)))`.
    pub fn softmax_temperature(&self, beta: f64) -> Result<f64, PolicyError> {
        if !self.config.mode.scales_logits() {
            return Err(PolicyError::Mode { mode: self.config.mode, what: "softmax temperature" });
        }
        Ok(self.context(beta)?.temperature())
    }

    /// `P_F(. | state; beta)` aligned with `env.children(state)`.
    pub fn forward_policy<E: Environment + ?Sized>(
        &self,
        env: &E,
        state: &EnvState,
        beta: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        let ctx = self.context(beta)?;
        self.forward_policy_in(env, state, &ctx)
    }

    pub fn forward_policy_in<E: Environment + ?Sized>(
        &self,
        env: &E,
        state: &EnvState,
        ctx: &BetaContext,
    ) -> Result<Vec<f64>, PolicyError> {
        let kids = env.children(state)?;
        let set = self.edge_set(Direction::Forward, env, state, &kids, ctx, false)?;
        Ok(set.log_probs.iter().map(|&l| libm::exp(l)).collect())
    }

    /// `P_B(. | state; beta)` aligned with `env.parents(state)`.
    pub fn backward_policy<E: Environment + ?Sized>(
        &self,
        env: &E,
        state: &EnvState,
        beta: f64,
    ) -> Result<Vec<f64>, PolicyError> {
        let parents = env.parents(state)?;
        let ctx = self.context(beta)?;
        let set = self.edge_set(Direction::Backward, env, state, &parents, &ctx, false)?;
        Ok(set.log_probs.iter().map(|&l| libm::exp(l)).collect())
    }

    /// `log Z(beta)`; a learned constant in unconditional mode.
    pub fn log_partition(&self, beta: f64) -> Result<f64, PolicyError> {
        Ok(self.context(beta)?.log_z())
    }

    /// `log F(state; beta)` from the state-flow head.
    pub fn state_flow<E: Environment + ?Sized>(
        &self,
        env: &E,
        state: &EnvState,
        beta: f64,
    ) -> Result<f64, PolicyError> {
        let head = self.state_flow_head.as_ref().ok_or(PolicyError::MissingHead(Head::StateFlow))?;
        let ctx = self.context(beta)?;
        let input = self.flow_input(env, state, &ctx, &mut Vec::new());
        Ok(head.forward(&input)?.output()[0])
    }
}

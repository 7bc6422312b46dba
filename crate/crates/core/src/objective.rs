//! Temperature-conditional balance losses with analytic gradients.
//!
//! Every loss is a function of a handful of per-trajectory log-space terms
//! (`log Z(beta)`, `log P_F`, `log P_B`, `log F(s)`, the tempered
//! log-reward). The loss and its derivatives with respect to those terms are
//! computed first; the term derivatives are then pushed back through the
//! networks.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::env::{EnvState, Environment, RewardScale};
use crate::nn::Mlp;
use crate::policy::{BetaContext, Direction, EdgeSet, Gradients, Head, ModelBundle, PolicyError, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LossKind {
    Tb,
    Db,
    SubTb,
}

impl LossKind {
    pub fn needs_state_flow(self) -> bool {
        self != LossKind::Tb
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossSpec {
    pub kind: LossKind,
    /// Sub-trajectory weight decay; set exactly when `kind` is `SubTb`.
    pub lambda: Option<f64>,
}

impl LossSpec {
    pub const DEFAULT_LAMBDA: f64 = 0.9;

    pub fn tb() -> Self {
        LossSpec { kind: LossKind::Tb, lambda: None }
    }

    pub fn db() -> Self {
        LossSpec { kind: LossKind::Db, lambda: None }
    }

    pub fn subtb(lambda: f64) -> Result<Self, ObjectiveError> {
        let spec = LossSpec { kind: LossKind::SubTb, lambda: Some(lambda) };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match (self.kind, self.lambda) {
            (LossKind::SubTb, Some(l)) if l > 0.0 && l <= 1.0 => Ok(()),
            (LossKind::SubTb, Some(l)) => Err(ObjectiveError::InvalidLambda(l)),
            (LossKind::SubTb, None) => Err(ObjectiveError::InvalidLambda(f64::NAN)),
            (_, Some(l)) => Err(ObjectiveError::InvalidLambda(l)),
            (_, None) => Ok(()),
        }
    }
}

/// A log-space quantity entering a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    LogPartition,
    /// `log P_F(s_{t+1} | s_t)`.
    LogPf(usize),
    /// `log P_B(s_t | s_{t+1})`.
    LogPb(usize),
    /// `log F(s_t)`.
    LogFlow(usize),
    LogReward,
    Loss,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("loss needs a state-flow head")]
    MissingStateFlow,
    #[error("sub-trajectory lambda must lie in (0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("non-finite value in {0:?}")]
    NonFinite(Term),
    #[error("trajectory does not follow the state graph at step {0}")]
    BrokenTrajectory(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {trajectories} trajectories but {betas} betas")]
    BatchShape { trajectories: usize, betas: usize },
    #[error("trajectory {index}: {source}")]
    InBatch { index: usize, source: Box<ObjectiveError> },
}

/// Loss inputs for one trajectory at one beta.
#[derive(Clone, Debug, PartialEq)]
pub struct Terms {
    pub log_z: f64,
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    /// `log F(s_t)` for `t < n`; empty for trajectory balance.
    pub log_flow: Vec<f64>,
    pub log_reward: f64,
}

/// Derivatives of a loss with respect to its [`Terms`].
#[derive(Clone, Debug, PartialEq)]
pub struct TermGrads {
    pub log_z: f64,
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    pub log_flow: Vec<f64>,
}

impl Terms {
    fn check(&self) -> Result<(), ObjectiveError> {
        let bad = |v: f64| !v.is_finite();
        if bad(self.log_z) {
            return Err(ObjectiveError::NonFinite(Term::LogPartition));
        }
        if bad(self.log_reward) {
            return Err(ObjectiveError::NonFinite(Term::LogReward));
        }
        for (terms, wrap) in [
            (&self.log_pf, Term::LogPf as fn(usize) -> Term),
            (&self.log_pb, Term::LogPb),
            (&self.log_flow, Term::LogFlow),
        ] {
            if let Some(t) = terms.iter().position(|&v| bad(v)) {
                return Err(ObjectiveError::NonFinite(wrap(t)));
            }
        }
        Ok(())
    }
}

/// Evaluates a loss and its term derivatives.
pub fn loss_from_terms(spec: &LossSpec, terms: &Terms) -> Result<(f64, TermGrads), ObjectiveError> {
    spec.validate()?;
    terms.check()?;
    let n = terms.log_pf.len();
    let mut g = TermGrads { log_z: 0.0, log_pf: vec![0.0; n], log_pb: vec![0.0; n], log_flow: vec![0.0; terms.log_flow.len()] };
    if spec.kind.needs_state_flow() && terms.log_flow.len() != n {
        return Err(ObjectiveError::MissingStateFlow);
    }
    let loss = match spec.kind {
        LossKind::Tb => {
            let r = terms.log_z + terms.log_pf.iter().sum::<f64>() - terms.log_reward - terms.log_pb.iter().sum::<f64>();
            g.log_z = 2.0 * r;
            g.log_pf.fill(2.0 * r);
            g.log_pb.fill(-2.0 * r);
            r * r
        }
        LossKind::Db => {
            let mut total = 0.0;
            for t in 0..n {
                let next = if t + 1 < n { terms.log_flow[t + 1] } else { terms.log_reward };
                let r = terms.log_flow[t] + terms.log_pf[t] - next - terms.log_pb[t];
                total += r * r;
                g.log_flow[t] += 2.0 * r;
                g.log_pf[t] += 2.0 * r;
                g.log_pb[t] -= 2.0 * r;
                if t + 1 < n {
                    g.log_flow[t + 1] -= 2.0 * r;
                }
            }
            total
        }
        LossKind::SubTb => {
            let lambda = spec.lambda.unwrap_or(LossSpec::DEFAULT_LAMBDA);
            // Prefix sums of log P_F - log P_B.
            let mut prefix = vec![0.0; n + 1];
            for t in 0..n {
                prefix[t + 1] = prefix[t] + terms.log_pf[t] - terms.log_pb[t];
            }
            let mut norm = 0.0;
            let mut total = 0.0;
            let mut d_span = vec![0.0; n + 1];
            for i in 0..n {
                let mut w = 1.0;
                for j in i + 1..=n {
                    w *= lambda;
                    let end = if j == n { terms.log_reward } else { terms.log_flow[j] };
                    let r = terms.log_flow[i] + prefix[j] - prefix[i] - end;
                    norm += w;
                    total += w * r * r;
                    let d = 2.0 * w * r;
                    g.log_flow[i] += d;
                    if j < n {
                        g.log_flow[j] -= d;
                    }
                    d_span[j] += d;
                    d_span[i] -= d;
                }
            }
            // d prefix[k] / d(log_pf[t]) = [t < k].
            let mut acc = 0.0;
            for t in (0..n).rev() {
                acc += d_span[t + 1];
                g.log_pf[t] = acc;
                g.log_pb[t] = -acc;
            }
            for v in g.log_flow.iter_mut().chain(&mut g.log_pf).chain(&mut g.log_pb) {
                *v /= norm;
            }
            total / norm
        }
    };
    if !loss.is_finite() {
        return Err(ObjectiveError::NonFinite(Term::Loss));
    }
    Ok((loss, g))
}

struct Chosen {
    set: EdgeSet,
    index: usize,
}

/// Network evaluations for one trajectory, kept for the backward pass.
struct Pass {
    ctx: BetaContext,
    forward: Vec<Chosen>,
    backward: Vec<Chosen>,
    flows: Vec<crate::nn::Tape>,
    terms: Terms,
}

fn locate(neighbors: &[(crate::env::ActionId, EnvState)], target: &EnvState, step: usize) -> Result<usize, ObjectiveError> {
    neighbors.iter().position(|(_, s)| s.id == target.id).ok_or(ObjectiveError::BrokenTrajectory(step))
}

fn run_pass<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
    with_flows: bool,
    keep_tapes: bool,
) -> Result<Pass, ObjectiveError> {
    let n = traj.actions.len();
    if n == 0 || traj.states.len() != n + 1 {
        return Err(ObjectiveError::BrokenTrajectory(0));
    }
    let ctx = model.context(beta)?;
    let mut forward = Vec::with_capacity(n);
    let mut backward = Vec::with_capacity(n);
    let mut log_pf = Vec::with_capacity(n);
    let mut log_pb = Vec::with_capacity(n);
    for t in 0..n {
        let (here, next) = (&traj.states[t], &traj.states[t + 1]);
        let kids = env.children(here).map_err(PolicyError::from)?;
        let index = locate(&kids, next, t)?;
        let set = model.edge_set(Direction::Forward, env, here, &kids, &ctx, keep_tapes)?;
        log_pf.push(set.log_probs[index]);
        forward.push(Chosen { set, index });

        let parents = env.parents(next).map_err(PolicyError::from)?;
        let index = locate(&parents, here, t)?;
        let set = model.edge_set(Direction::Backward, env, next, &parents, &ctx, keep_tapes)?;
        log_pb.push(set.log_probs[index]);
        backward.push(Chosen { set, index });
    }
    let mut flows = Vec::new();
    let mut log_flow = Vec::new();
    if with_flows {
        let head = model.state_flow_head.as_ref().ok_or(ObjectiveError::MissingStateFlow)?;
        let mut scratch = Vec::new();
        for state in &traj.states[..n] {
            let tape = head.forward(&model.flow_input(env, state, &ctx, &mut scratch)).map_err(PolicyError::from)?;
            log_flow.push(tape.output()[0]);
            if keep_tapes {
                flows.push(tape);
            }
        }
    }
    let terms = Terms {
        log_z: ctx.log_z(),
        log_pf,
        log_pb,
        log_flow,
        log_reward: scale.log_tempered(traj.log_raw_reward, beta),
    };
    Ok(Pass { ctx, forward, backward, flows, terms })
}

/// Pushes `d loss / d log p_chosen = g` into the edge network that produced
/// `chosen`, accumulating the temperature derivative and, for networks with
/// a folded beta embedding, the first-layer base gradient.
fn backprop_edges(
    net: &Mlp,
    chosen: &Chosen,
    g: f64,
    grad: &mut [f64],
    base_grad: Option<&mut [f64]>,
    d_temperature: &mut f64,
) -> Result<(), ObjectiveError> {
    let set = &chosen.set;
    if set.tapes.is_empty() || g == 0.0 {
        return Ok(());
    }
    let t = set.temperature;
    let probs: Vec<f64> = set.log_probs.iter().map(|&l| libm::exp(l)).collect();
    let mut base_grad = base_grad;
    for (k, tape) in set.tapes.iter().enumerate() {
        let indicator = if k == chosen.index { 1.0 } else { 0.0 };
        let d_logit = g * (indicator - probs[k]) / t;
        if d_logit == 0.0 {
            continue;
        }
        match base_grad.as_deref_mut() {
            Some(bg) => net.backward_with_base(tape, &[d_logit], grad, bg),
            None => net.backward_into(tape, &[d_logit], grad, None),
        }
        .map_err(PolicyError::from)?;
    }
    if set.learned_temperature {
        let mean: f64 = probs.iter().zip(&set.logits).map(|(p, a)| p * a).sum();
        *d_temperature += -g * (set.logits[chosen.index] - mean) / (t * t);
    }
    Ok(())
}

fn backprop(model: &ModelBundle, pass: &Pass, tg: &TermGrads, grads: &mut Gradients) -> Result<(), ObjectiveError> {
    let embed_dim = pass.ctx.embedding().len();
    let layer_embed = if model.mode().embeds_in_layers() { embed_dim } else { 0 };
    let edge_offset = 2 * model.feature_dim;
    let mut d_embed = vec![0.0; embed_dim];
    let mut d_temperature = 0.0;
    let mut scratch = Vec::new();

    let edges = [
        (Direction::Forward, &model.pf_net, Head::Forward, &pass.forward, &tg.log_pf),
        (Direction::Backward, &model.pb_net, Head::Backward, &pass.backward, &tg.log_pb),
    ];
    for (dir, net, head, sets, gs) in edges {
        let mut base_grad = pass.ctx.edge_base(dir).map(|b| vec![0.0; b.len()]);
        for (chosen, &g) in sets.iter().zip(gs) {
            backprop_edges(net, chosen, g, grads.head_mut(head), base_grad.as_deref_mut(), &mut d_temperature)?;
        }
        if let Some(bg) = base_grad {
            if bg.iter().any(|&d| d != 0.0) {
                net.fold_base_grad(
                    pass.ctx.embedding(),
                    edge_offset,
                    &bg,
                    grads.head_mut(head),
                    Some(&mut d_embed[..layer_embed]),
                )
                .map_err(PolicyError::from)?;
            }
        }
    }
    if let Some(head) = &model.state_flow_head {
        let flow_offset = model.feature_dim;
        for (tape, &g) in pass.flows.iter().zip(&tg.log_flow) {
            if g == 0.0 {
                continue;
            }
            if embed_dim == 0 {
                head.backward_into(tape, &[g], grads.head_mut(Head::StateFlow), None).map_err(PolicyError::from)?;
            } else {
                scratch.clear();
                scratch.resize(head.input_dim(), 0.0);
                head.backward_into(tape, &[g], grads.head_mut(Head::StateFlow), Some(&mut scratch))
                    .map_err(PolicyError::from)?;
                for (d, &v) in d_embed.iter_mut().zip(&scratch[flow_offset..]) {
                    *d += v;
                }
            }
        }
    }
    if tg.log_z != 0.0 {
        model
            .logz_head
            .backward_into(pass.ctx.log_z_tape(), &[tg.log_z], grads.head_mut(Head::LogPartition), None)
            .map_err(PolicyError::from)?;
    }
    if let (Some(decoder), Some(tape)) = (&model.scaler_decoder, pass.ctx.decoder_tape()) {
        if d_temperature != 0.0 {
            decoder
                .backward_into(tape, &[d_temperature], grads.head_mut(Head::ScalerDecoder), Some(&mut d_embed))
                .map_err(PolicyError::from)?;
        }
    }
    if let (Some(embed), Some(tape)) = (&model.temp_embed, pass.ctx.embed_tape()) {
        if d_embed.iter().any(|&d| d != 0.0) {
            embed
                .backward_into(tape, &d_embed, grads.head_mut(Head::TempEmbed), None)
                .map_err(PolicyError::from)?;
        }
    }
    Ok(())
}

fn check_spec(model: &ModelBundle, spec: &LossSpec) -> Result<(), ObjectiveError> {
    spec.validate()?;
    if spec.kind.needs_state_flow() && model.state_flow_head.is_none() {
        return Err(ObjectiveError::MissingStateFlow);
    }
    Ok(())
}

/// The loss terms of `traj` evaluated at `beta`.
pub fn trajectory_terms<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
    with_flows: bool,
) -> Result<Terms, ObjectiveError> {
    Ok(run_pass(model, env, traj, beta, scale, with_flows, false)?.terms)
}

/// Loss of one trajectory, with gradients accumulated into `grads`.
pub fn trajectory_loss_into<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
    spec: &LossSpec,
    grads: &mut Gradients,
) -> Result<f64, ObjectiveError> {
    check_spec(model, spec)?;
    let pass = run_pass(model, env, traj, beta, scale, spec.kind.needs_state_flow(), true)?;
    let (loss, tg) = loss_from_terms(spec, &pass.terms)?;
    backprop(model, &pass, &tg, grads)?;
    Ok(loss)
}

/// Loss of one trajectory and its gradients.
pub fn trajectory_loss<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
    spec: &LossSpec,
) -> Result<(f64, Gradients), ObjectiveError> {
    let mut grads = Gradients::zeros_for(model);
    let loss = trajectory_loss_into(model, env, traj, beta, scale, spec, &mut grads)?;
    Ok((loss, grads))
}

/// Loss value only; no tapes are kept.
pub fn trajectory_loss_value<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
    spec: &LossSpec,
) -> Result<f64, ObjectiveError> {
    check_spec(model, spec)?;
    let terms = trajectory_terms(model, env, traj, beta, scale, spec.kind.needs_state_flow())?;
    Ok(loss_from_terms(spec, &terms)?.0)
}

pub fn tb_loss<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
) -> Result<(f64, Gradients), ObjectiveError> {
    trajectory_loss(model, env, traj, beta, scale, &LossSpec::tb())
}

pub fn db_loss<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
) -> Result<(f64, Gradients), ObjectiveError> {
    trajectory_loss(model, env, traj, beta, scale, &LossSpec::db())
}

pub fn subtb_loss<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    traj: &Trajectory,
    beta: f64,
    scale: &RewardScale,
    lambda: f64,
) -> Result<(f64, Gradients), ObjectiveError> {
    trajectory_loss(model, env, traj, beta, scale, &LossSpec::subtb(lambda)?)
}

fn check_batch(trajs: &[Trajectory], betas: &[f64]) -> Result<(), ObjectiveError> {
    if trajs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if trajs.len() != betas.len() {
        return Err(ObjectiveError::BatchShape { trajectories: trajs.len(), betas: betas.len() });
    }
    Ok(())
}

fn in_batch(index: usize) -> impl Fn(ObjectiveError) -> ObjectiveError {
    move |e| ObjectiveError::InBatch { index, source: Box::new(e) }
}

/// Mean loss over a batch where trajectory `i` is evaluated at `betas[i]`,
/// with the gradient of the mean.
pub fn batch_loss<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    trajs: &[Trajectory],
    betas: &[f64],
    scale: &RewardScale,
    spec: &LossSpec,
) -> Result<(f64, Gradients), ObjectiveError> {
    check_batch(trajs, betas)?;
    let mut grads = Gradients::zeros_for(model);
    let mut total = 0.0;
    for (i, (traj, &beta)) in trajs.iter().zip(betas).enumerate() {
        total += trajectory_loss_into(model, env, traj, beta, scale, spec, &mut grads).map_err(in_batch(i))?;
    }
    let b = trajs.len() as f64;
    grads.scale(1.0 / b);
    Ok((total / b, grads))
}

/// Mean loss over a batch, without gradients.
pub fn batch_loss_value<E: Environment + ?Sized>(
    model: &ModelBundle,
    env: &E,
    trajs: &[Trajectory],
    betas: &[f64],
    scale: &RewardScale,
    spec: &LossSpec,
) -> Result<f64, ObjectiveError> {
    check_batch(trajs, betas)?;
    let mut total = 0.0;
    for (i, (traj, &beta)) in trajs.iter().zip(betas).enumerate() {
        total += trajectory_loss_value(model, env, traj, beta, scale, spec).map_err(in_batch(i))?;
    }
    Ok(total / trajs.len() as f64)
}

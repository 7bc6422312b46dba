use alloc::vec;

use rand::Rng;

use super::{Direction, ModelBundle, PolicyError, Trajectory};
use crate::env::{EnvError, EnvState, Environment, RewardSpec};

/// Index drawn from a distribution given by log-probabilities.
pub(crate) fn draw_index<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += libm::exp(lp);
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass at the top: take the last positive entry.
    log_probs.iter().rposition(|&lp| lp > f64::NEG_INFINITY).unwrap_or(log_probs.len() - 1)
}

/// Rolls out `P_F(. | beta)` from the initial state. With probability `eps`
/// per step a uniformly random child replaces the policy's choice.
pub fn sample_trajectory<E, R>(
    model: &ModelBundle,
    env: &E,
    reward: &RewardSpec,
    beta: f64,
    rng: &mut R,
    eps: f64,
) -> Result<Trajectory, PolicyError>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    if !(0.0..1.0).contains(&eps) {
        return Err(PolicyError::InvalidExploration(eps));
    }
    let ctx = model.context(beta)?;
    let mut state = env.initial();
    let mut states = vec![state.clone()];
    let mut actions = vec![];
    while !env.is_terminal(&state) {
        let mut kids = env.children(&state)?;
        let pick = if eps > 0.0 && rng.random::<f64>() < eps {
            rng.random_range(0..kids.len())
        } else {
            let set = model.edge_set(Direction::Forward, env, &state, &kids, &ctx, false)?;
            draw_index(&set.log_probs, rng)
        };
        let (action, next) = kids.swap_remove(pick);
        actions.push(action);
        states.push(next.clone());
        state = next;
    }
    let log_raw_reward = reward.log_raw(env, &state)?;
    Ok(Trajectory { states, actions, beta_used: beta, log_raw_reward })
}

/// Samples a path from `terminal` back to the initial state using
/// `P_B(. | beta)` and returns it in forward order.
pub fn sample_backward_trajectory<E, R>(
    model: &ModelBundle,
    env: &E,
    terminal: &EnvState,
    log_raw_reward: f64,
    beta: f64,
    rng: &mut R,
) -> Result<Trajectory, PolicyError>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    if !env.is_terminal(terminal) {
        return Err(EnvError::Contract("backward sampling starts from a terminal state").into());
    }
    let ctx = model.context(beta)?;
    let mut state = terminal.clone();
    let mut states = vec![state.clone()];
    let mut actions = vec![];
    while !env.is_initial(&state) {
        let mut parents = env.parents(&state)?;
        let set = model.edge_set(Direction::Backward, env, &state, &parents, &ctx, false)?;
        let (action, prev) = parents.swap_remove(draw_index(&set.log_probs, rng));
        actions.push(action);
        states.push(prev.clone());
        state = prev;
    }
    states.reverse();
    actions.reverse();
    Ok(Trajectory { states, actions, beta_used: beta, log_raw_reward })
}

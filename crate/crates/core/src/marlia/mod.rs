//! Multi-agent actor-critic control of the contract bid offsets.
//!
//! Every contract is an agent. All agents share one actor and one critic and
//! are told apart by their observations. At each step boundary an agent nudges
//! its α by `δ · p_j`; the critic regresses the outcome obtained by freezing all
//! α right after the action, and the actor follows the critic's action gradient.

pub mod net;
pub mod replay;
mod train;

pub use net::{Grads, Head, MlpNet, Optimizer, OptimizerKind};
pub use replay::{ReplayMemory, Transition};
pub use train::{
    subsample_day, train, EpisodeLog, EvalSet, MarliaConfig, MarliaModel, MarliaPolicy, TrainError, TrainOutcome,
};

use crate::market::{EpisodeState, Market};
use thiserror::Error;

pub const OBS_DIM: usize = 8;
/// Largest per-step change of α, in units of the contract penalty.
pub const ACTION_BOUND: f64 = 0.1;

/// Features seen by one agent at a step boundary:
/// `[t/T, e_j/d_j, speed, t/T - e_j/d_j, α_j/p_j, mean fulfillment, RTB win rate, d_j/Σd]`.
pub type Observation = [f64; OBS_DIM];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("action {0} outside [-{ACTION_BOUND}, {ACTION_BOUND}]")]
    OutOfRange(f64),
}

/// Observation of contract `j` before step `t` is allocated.
pub fn build_observation(market: &Market<'_>, state: &EpisodeState, j: usize, t: usize) -> Observation {
    let contracts = market.contracts;
    let horizon = market.horizon as f64;
    let c = &contracts[j];
    let demand = c.demand as f64;
    let time = t as f64 / horizon;
    let fulfillment = state.fulfillment(contracts, j);
    let speed = if c.demand == 0 { 0.0 } else { state.last_step_wins[j] as f64 / (demand / horizon) };
    let m = contracts.len() as f64;
    let mean_fulfillment = (0..contracts.len()).map(|k| state.fulfillment(contracts, k)).sum::<f64>() / m;
    let rtb_rate = if state.allocated == 0 { 0.0 } else { state.rtb_wins as f64 / state.allocated as f64 };
    let total_demand: u64 = contracts.iter().map(|c| c.demand).sum();
    let share = if total_demand == 0 { 0.0 } else { demand / total_demand as f64 };
    [time, fulfillment, speed, time - fulfillment, state.alphas[j] / c.penalty, mean_fulfillment, rtb_rate, share]
}

/// `min(α + δ p_j, p_j)`. There is no lower clamp.
pub fn apply_action(alpha: f64, delta: f64, penalty: f64) -> Result<f64, ActionError> {
    if delta.is_nan() || delta.abs() > ACTION_BOUND {
        return Err(ActionError::OutOfRange(delta));
    }
    Ok((alpha + delta * penalty).min(penalty))
}

/// Outcome (net of prepaid revenue) of the rest of the day from `snapshot`,
/// with every α frozen at `frozen_alphas`. Includes the terminal penalty.
pub fn rollout_value(market: &Market<'_>, snapshot: &EpisodeState, frozen_alphas: &[f64]) -> f64 {
    let mut state = snapshot.clone();
    state.alphas.copy_from_slice(frozen_alphas);
    market.rollout(state)
}

fn critic_input(obs: &Observation, action: f64) -> [f64; OBS_DIM + 1] {
    let mut x = [0.0; OBS_DIM + 1];
    x[..OBS_DIM].copy_from_slice(obs);
    x[OBS_DIM] = action;
    x
}

/// Mean squared error of the critic on `batch`, before the step.
pub fn critic_loss(batch: &[&Transition], critic: &MlpNet) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch
        .iter()
        .map(|t| {
            let d = critic.forward(&critic_input(&t.observation, t.action)) - t.value;
            d * d
        })
        .sum::<f64>()
        / batch.len() as f64
}

/// Gradient of the critic's batch loss with respect to its parameters.
pub fn critic_gradient(batch: &[&Transition], critic: &MlpNet, grads: &mut Grads) -> f64 {
    grads.clear();
    if batch.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut cache = net::Cache::default();
    let mut loss = 0.0;
    for t in batch {
        let q = critic.forward_cached(&critic_input(&t.observation, t.action), &mut cache);
        let diff = q - t.value;
        loss += diff * diff * scale;
        critic.backward(&cache, 2.0 * diff * scale, Some(grads), None);
    }
    loss
}

/// One descent step on the critic's squared error. Returns the batch loss
/// measured before the step; an empty batch is a no-op.
pub fn critic_update(batch: &[&Transition], critic: &mut MlpNet, optimizer: &mut Optimizer, grads: &mut Grads) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let loss = critic_gradient(batch, critic, grads);
    optimizer.descend(critic, grads);
    loss
}

/// `∂Q/∂δ` at `(obs, action)`.
pub fn critic_action_gradient(critic: &MlpNet, obs: &Observation, action: f64) -> f64 {
    let mut cache = net::Cache::default();
    critic.forward_cached(&critic_input(obs, action), &mut cache);
    let mut d_in = [0.0; OBS_DIM + 1];
    critic.backward(&cache, 1.0, None, Some(&mut d_in));
    d_in[OBS_DIM]
}

/// Deterministic policy gradient `mean_k ∇θ π(o_k) ∇δ Q(o_k, δ)|δ=π(o_k)`,
/// written into `grads` with the sign of a loss (descending it raises Q).
pub fn actor_gradient(observations: &[&Observation], actor: &MlpNet, critic: &MlpNet, grads: &mut Grads) {
    policy_gradient(observations, actor, |obs, action| critic_action_gradient(critic, obs, action), grads);
}

/// [`actor_gradient`] with `∂Q/∂δ` supplied by `dq`.
pub fn policy_gradient<F>(observations: &[&Observation], actor: &MlpNet, mut dq: F, grads: &mut Grads)
where
    F: FnMut(&Observation, f64) -> f64,
{
    grads.clear();
    if observations.is_empty() {
        return;
    }
    let scale = 1.0 / observations.len() as f64;
    let mut cache = net::Cache::default();
    for obs in observations {
        let action = actor.forward_cached(*obs, &mut cache);
        let slope = dq(obs, action);
        actor.backward(&cache, -slope * scale, Some(grads), None);
    }
}

/// One policy-gradient ascent step with the critic held fixed. Returns the
/// norm of the gradient.
pub fn actor_update(
    observations: &[&Observation],
    actor: &mut MlpNet,
    critic: &MlpNet,
    optimizer: &mut Optimizer,
    grads: &mut Grads,
) -> f64 {
    if observations.is_empty() {
        return 0.0;
    }
    actor_gradient(observations, actor, critic, grads);
    let norm = grads.norm();
    optimizer.descend(actor, grads);
    norm
}

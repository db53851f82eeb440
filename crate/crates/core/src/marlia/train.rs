use super::net::{Grads, Head, MlpNet, Optimizer, OptimizerKind};
use super::replay::{ReplayMemory, Transition};
use super::{actor_update, build_observation, critic_update, Observation, ACTION_BOUND, OBS_DIM};
use crate::lp::{solve_dual, DualConfig, LpError};
use crate::market::{Contract, Controller, EpisodeState, Impression, Market, MarketError};
use crate::rng::substream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarliaConfig {
    pub episodes: usize,
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Standard deviation of the Gaussian exploration noise on δ.
    pub noise_sigma: f64,
    /// Share of the training day replayed during training.
    pub train_fraction: f64,
    /// Draw a fresh subsample every episode instead of once.
    pub resample: bool,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Stop as soon as the selection set reaches this R/R*.
    pub stop_at_ratio: Option<f64>,
}

impl Default for MarliaConfig {
    fn default() -> Self {
        Self {
            episodes: 1200,
            hidden: 32,
            actor_lr: 1e-5,
            critic_lr: 1e-3,
            batch_size: 32,
            replay_capacity: 100_000,
            noise_sigma: 0.05,
            train_fraction: 0.1,
            resample: false,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            stop_at_ratio: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in episode {episode} at step {step}: {what}")]
    Divergence { episode: usize, step: usize, what: &'static str },
    #[error("initial alphas have {got} entries for {expected} contracts")]
    BadInit { expected: usize, got: usize },
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Actor, critic and the value scale used to normalize rollout values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarliaModel {
    pub actor: MlpNet,
    pub critic: MlpNet,
    pub value_scale: f64,
}

impl MarliaModel {
    pub fn new<R: Rng + ?Sized>(hidden: usize, value_scale: f64, rng: &mut R) -> Self {
        Self {
            actor: MlpNet::new(&[OBS_DIM, hidden, hidden, 1], Head::ScaledTanh { bound: ACTION_BOUND }, rng),
            critic: MlpNet::new(&[OBS_DIM + 1, hidden, hidden, 1], Head::Linear, rng),
            value_scale,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    pub fn policy(&self, initial_alphas: Vec<f64>) -> MarliaPolicy<'_> {
        MarliaPolicy { actor: &self.actor, initial_alphas, noise: None }
    }
}

type Noise<'a> = (&'a mut dyn rand::RngCore, Normal<f64>, &'a mut Vec<(Observation, f64)>);

/// Runs the shared actor for every contract at each step boundary.
pub struct MarliaPolicy<'a> {
    actor: &'a MlpNet,
    initial_alphas: Vec<f64>,
    noise: Option<Noise<'a>>,
}

impl MarliaPolicy<'_> {
    fn act(&mut self, t: usize, market: &Market<'_>, state: &mut EpisodeState) {
        let m = market.n_contracts();
        let observations: Vec<Observation> = (0..m).map(|j| build_observation(market, state, j, t)).collect();
        if let Some((_, _, record)) = self.noise.as_mut() {
            record.clear();
        }
        for (j, obs) in observations.into_iter().enumerate() {
            let mut delta = self.actor.forward(&obs);
            if let Some((rng, normal, record)) = self.noise.as_mut() {
                delta = (delta + normal.sample(rng)).clamp(-ACTION_BOUND, ACTION_BOUND);
                record.push((obs, delta));
            }
            let p = market.contracts[j].penalty;
            state.alphas[j] = (state.alphas[j] + delta * p).min(p);
        }
    }
}

impl Controller for MarliaPolicy<'_> {
    fn begin_step(&mut self, t: usize, market: &Market<'_>, state: &mut EpisodeState) {
        if t == 1 {
            state.alphas.clone_from(&self.initial_alphas);
        } else {
            self.act(t, market, state);
        }
    }
}

/// Day used to score checkpoints.
#[derive(Debug, Clone)]
pub struct EvalSet<'a> {
    pub impressions: &'a [Impression],
    pub contracts: &'a [Contract],
    pub r_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_star")]
    pub r_star: f64,
    pub ratio: f64,
    pub critic_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best R/R* on the selection set.
    pub best: MarliaModel,
    pub best_episode: usize,
    pub best_ratio: f64,
    pub last: MarliaModel,
    pub log: Vec<EpisodeLog>,
}

/// Keeps each impression with probability `fraction` and scales demands by
/// the share actually kept.
pub fn subsample_day<R: Rng + ?Sized>(
    impressions: &[Impression],
    contracts: &[Contract],
    fraction: f64,
    rng: &mut R,
) -> (Vec<Impression>, Vec<Contract>) {
    if fraction >= 1.0 || impressions.is_empty() {
        return (impressions.to_vec(), contracts.to_vec());
    }
    let kept: Vec<Impression> = impressions.iter().filter(|_| rng.random::<f64>() < fraction).cloned().collect();
    let share = kept.len() as f64 / impressions.len() as f64;
    let scaled =
        contracts.iter().map(|c| Contract { demand: (c.demand as f64 * share).round() as u64, ..c.clone() }).collect();
    (kept, scaled)
}

fn evaluate(model: &MarliaModel, set: &EvalSet<'_>, horizon: usize, init: &[f64]) -> Result<f64, MarketError> {
    let market = Market::new(set.contracts, set.impressions, horizon)?;
    let mut policy = model.policy(init.to_vec());
    Ok(market.run_episode(init.to_vec(), &mut policy)?.total)
}

/// Trains the shared actor-critic on replays of the training day.
///
/// Every episode starts from `init_alphas` plus exploration noise, lets the
/// agents act at steps `2..=T`, and after each step stores one transition per
/// agent whose value is the rest-of-day outcome with α frozen. After every
/// episode the noiseless policy is replayed on `eval[0]` (or on the training
/// day itself when `eval` is empty) and the best checkpoint is kept.
pub fn train(
    impressions: &[Impression],
    contracts: &[Contract],
    horizon: usize,
    init_alphas: &[f64],
    eval: &[EvalSet<'_>],
    config: &MarliaConfig,
) -> Result<TrainOutcome, TrainError> {
    let m = contracts.len();
    if init_alphas.len() != m {
        return Err(TrainError::BadInit { expected: m, got: init_alphas.len() });
    }
    Market::new(contracts, impressions, horizon)?;

    let mut sub_rng = substream(config.seed, "subsample");
    let mut explore = substream(config.seed, "exploration");
    let mut replay_rng = substream(config.seed, "replay");
    let mut init_rng = substream(config.seed, "init");

    let (mut train_imps, mut train_contracts) =
        subsample_day(impressions, contracts, config.train_fraction, &mut sub_rng);
    let dual_cfg = DualConfig::default();
    let train_r_star = solve_dual(&train_imps, &train_contracts, &dual_cfg)?.r_star;
    let value_scale = if train_r_star.abs() > 0.0 { train_r_star.abs() } else { 1.0 };

    let own_eval;
    let selection = match eval.first() {
        Some(set) => set.clone(),
        None => {
            own_eval = solve_dual(impressions, contracts, &dual_cfg)?.r_star;
            EvalSet { impressions, contracts, r_star: own_eval }
        }
    };

    let mut model = MarliaModel::new(config.hidden, value_scale, &mut init_rng);
    let mut actor_opt = Optimizer::new(config.optimizer, config.actor_lr, &model.actor);
    let mut critic_opt = Optimizer::new(config.optimizer, config.critic_lr, &model.critic);
    let mut actor_grads = Grads::zeros_like(&model.actor);
    let mut critic_grads = Grads::zeros_like(&model.critic);
    let mut memory = ReplayMemory::new(config.replay_capacity);
    let normal = Normal::new(0.0, config.noise_sigma).expect("noise sigma must be finite and non-negative");

    let ratio_of = |total: f64| if selection.r_star == 0.0 { 1.0 } else { total / selection.r_star };

    let started = Instant::now();
    let r0 = evaluate(&model, &selection, horizon, init_alphas)?;
    let mut log = vec![EpisodeLog {
        episode: 0,
        r: r0,
        r_star: selection.r_star,
        ratio: ratio_of(r0),
        critic_loss: f64::NAN,
        wall_ms: started.elapsed().as_millis() as u64,
    }];
    let mut best = model.clone();
    let mut best_ratio = ratio_of(r0);
    let mut best_episode = 0;
    let mut record: Vec<(Observation, f64)> = Vec::with_capacity(m);

    for episode in 1..=config.episodes {
        if config.stop_at_ratio.is_some_and(|target| best_ratio >= target) {
            break;
        }
        let t0 = Instant::now();
        if config.resample && episode > 1 {
            (train_imps, train_contracts) = subsample_day(impressions, contracts, config.train_fraction, &mut sub_rng);
        }
        let market = Market::new(&train_contracts, &train_imps, horizon)?;

        let start: Vec<f64> = train_contracts
            .iter()
            .zip(init_alphas)
            .map(|(c, &a)| {
                let n = normal.sample(&mut explore).clamp(-ACTION_BOUND, ACTION_BOUND);
                (a + n * c.penalty).min(c.penalty)
            })
            .collect();
        let mut state = market.start(start)?;
        let mut hold = crate::market::HoldAlphas;
        market.allocate_step(&mut state, &mut hold);

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for t in 2..=horizon {
            {
                let mut policy = MarliaPolicy {
                    actor: &model.actor,
                    initial_alphas: Vec::new(),
                    noise: Some((&mut explore, normal, &mut record)),
                };
                policy.act(t, &market, &mut state);
            }
            let reward = market.allocate_step(&mut state, &mut hold);
            let v = reward + market.rollout(state.clone());
            let value = v / value_scale;
            for (obs, delta) in record.drain(..) {
                memory.push(Transition { observation: obs, action: delta, value });
            }

            let batch = memory.sample(&mut replay_rng, config.batch_size);
            let loss = critic_update(&batch, &mut model.critic, &mut critic_opt, &mut critic_grads);
            if !loss.is_finite() || !model.critic.is_finite() {
                return Err(TrainError::Divergence { episode, step: t, what: "critic loss is not finite" });
            }
            let observations: Vec<&Observation> = batch.iter().map(|tr| &tr.observation).collect();
            let norm = actor_update(&observations, &mut model.actor, &model.critic, &mut actor_opt, &mut actor_grads);
            if !norm.is_finite() || !model.actor.is_finite() {
                return Err(TrainError::Divergence { episode, step: t, what: "actor gradient is not finite" });
            }
            if !batch.is_empty() {
                loss_sum += loss;
                loss_n += 1;
            }
        }

        let r = evaluate(&model, &selection, horizon, init_alphas)?;
        let ratio = ratio_of(r);
        if ratio > best_ratio {
            best_ratio = ratio;
            best_episode = episode;
            best.clone_from(&model);
        }
        log.push(EpisodeLog {
            episode,
            r,
            r_star: selection.r_star,
            ratio,
            critic_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }

    Ok(TrainOutcome { best, best_episode, best_ratio, last: model, log })
}

mod common;

use common::{central, flat, gradient_check, rel};

use impalloc::lp::{solve_dual, DualConfig};
use impalloc::market::{HoldAlphas, Market};
use impalloc::marlia::{
    actor_gradient, actor_update, build_observation, critic_gradient, critic_loss, critic_update, policy_gradient,
    rollout_value, train, EvalSet, Grads, Head, MarliaConfig, MarliaModel, MlpNet, Observation, Optimizer,
    OptimizerKind, ReplayMemory, Transition, OBS_DIM,
};
use impalloc::{Contract, Impression};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_obs<R: Rng>(rng: &mut R) -> Observation {
    std::array::from_fn(|_| rng.random_range(-1.0..1.0))
}

#[test]
fn actor_gradients_match_finite_differences() {
    let worst = gradient_check(&[OBS_DIM, 32, 32, 1], Head::ScaledTanh { bound: 0.1 }, 100, 1);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn critic_gradients_match_finite_differences() {
    let worst = gradient_check(&[OBS_DIM + 1, 32, 32, 1], Head::Linear, 100, 2);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut critic = MlpNet::new(&[OBS_DIM + 1, 16, 16, 1], Head::Linear, &mut rng);
    let batch: Vec<Transition> = (0..8)
        .map(|_| Transition {
            observation: random_obs(&mut rng),
            action: rng.random_range(-0.1..0.1),
            value: rng.random_range(-1.0..1.0),
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut g = Grads::zeros_like(&critic);
    critic_gradient(&refs, &critic, &mut g);
    let analytic = flat(&g);
    for _ in 0..100 {
        let k = rng.random_range(0..critic.n_params());
        let base = *critic.params().nth(k).unwrap();
        let numeric = central(base, |v| {
            *critic.params_mut().nth(k).unwrap() = v;
            critic_loss(&refs, &critic)
        });
        *critic.params_mut().nth(k).unwrap() = base;
        assert!(rel(analytic[k], numeric) < 1e-4, "param {k}: {} vs {numeric}", analytic[k]);
    }
}

#[test]
fn actor_gradient_matches_finite_differences_of_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut actor = MlpNet::new(&[OBS_DIM, 16, 16, 1], Head::ScaledTanh { bound: 0.1 }, &mut rng);
    let critic = MlpNet::new(&[OBS_DIM + 1, 16, 16, 1], Head::Linear, &mut rng);
    let obs: Vec<Observation> = (0..6).map(|_| random_obs(&mut rng)).collect();
    let refs: Vec<&Observation> = obs.iter().collect();
    let mean_q = |actor: &MlpNet| {
        obs.iter()
            .map(|o| {
                let a = actor.forward(o);
                let mut x = o.to_vec();
                x.push(a);
                critic.forward(&x)
            })
            .sum::<f64>()
            / obs.len() as f64
    };
    let mut g = Grads::zeros_like(&actor);
    actor_gradient(&refs, &actor, &critic, &mut g);
    let analytic = flat(&g);
    for _ in 0..100 {
        let k = rng.random_range(0..actor.n_params());
        let base = *actor.params().nth(k).unwrap();
        // the stored gradient is of the loss -Q
        let numeric = -central(base, |v| {
            *actor.params_mut().nth(k).unwrap() = v;
            mean_q(&actor)
        });
        *actor.params_mut().nth(k).unwrap() = base;
        assert!(rel(analytic[k], numeric) < 1e-4, "param {k}: {} vs {numeric}", analytic[k]);
    }
}

#[test]
fn perfect_critic_has_zero_loss_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut critic = MlpNet::new(&[OBS_DIM + 1, 8, 1], Head::Linear, &mut rng);
    critic.params_mut().for_each(|p| *p = 0.0);
    *critic.layers.last_mut().unwrap().bias.first_mut().unwrap() = 0.7;
    let batch: Vec<Transition> =
        (0..5).map(|_| Transition { observation: random_obs(&mut rng), action: 0.02, value: 0.7 }).collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut g = Grads::zeros_like(&critic);
    assert_eq!(critic_gradient(&refs, &critic, &mut g), 0.0);
    assert_eq!(g.norm(), 0.0);
}

#[test]
fn critic_overfits_a_constant_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut critic = MlpNet::new(&[OBS_DIM + 1, 32, 32, 1], Head::Linear, &mut rng);
    let batch: Vec<Transition> = (0..32)
        .map(|_| Transition { observation: random_obs(&mut rng), action: rng.random_range(-0.1..0.1), value: 0.8 })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-3, &critic);
    let mut g = Grads::zeros_like(&critic);
    let mut prev = f64::INFINITY;
    for _ in 0..200 {
        let loss = critic_update(&refs, &mut critic, &mut opt, &mut g);
        assert!(loss < prev, "loss went up: {loss} after {prev}");
        prev = loss;
    }
    assert!(
        critic_loss(&refs, &critic)
            < 0.5
                * critic_loss(
                    &refs,
                    &MlpNet::new(&[OBS_DIM + 1, 32, 32, 1], Head::Linear, &mut ChaCha8Rng::seed_from_u64(6))
                )
    );
}

#[test]
fn zero_critic_gives_zero_actor_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let actor = MlpNet::new(&[OBS_DIM, 8, 1], Head::ScaledTanh { bound: 0.1 }, &mut rng);
    let mut critic = MlpNet::new(&[OBS_DIM + 1, 8, 1], Head::Linear, &mut rng);
    critic.params_mut().for_each(|p| *p = 0.0);
    let obs: Vec<Observation> = (0..4).map(|_| random_obs(&mut rng)).collect();
    let refs: Vec<&Observation> = obs.iter().collect();
    let mut g = Grads::zeros_like(&actor);
    actor_gradient(&refs, &actor, &critic, &mut g);
    assert_eq!(g.norm(), 0.0);
}

#[test]
fn actor_climbs_a_planted_critic() {
    // Q(o, δ) = -(δ - 0.05)^2, so ∂Q/∂δ = -2 (δ - 0.05).
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut actor = MlpNet::new(&[OBS_DIM, 32, 32, 1], Head::ScaledTanh { bound: 0.1 }, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &actor);
    let mut g = Grads::zeros_like(&actor);
    for _ in 0..2000 {
        let obs: Vec<Observation> = (0..32).map(|_| random_obs(&mut rng)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        policy_gradient(&refs, &actor, |_, d| -2.0 * (d - 0.05), &mut g);
        opt.descend(&mut actor, &g);
    }
    for _ in 0..100 {
        let a = actor.forward(&random_obs(&mut rng));
        assert!((a - 0.05).abs() < 5e-3, "{a}");
    }
}

#[test]
fn agents_share_one_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut actor = MlpNet::new(&[OBS_DIM, 8, 8, 1], Head::ScaledTanh { bound: 0.1 }, &mut rng);
    let critic = MlpNet::new(&[OBS_DIM + 1, 8, 8, 1], Head::Linear, &mut rng);
    let agent_a = random_obs(&mut rng);
    let agent_b = random_obs(&mut rng);
    let before = actor.forward(&agent_b);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, &actor);
    let mut g = Grads::zeros_like(&actor);
    actor_update(&[&agent_a], &mut actor, &critic, &mut opt, &mut g);
    assert_ne!(actor.forward(&agent_b), before);
}

#[test]
fn replay_sampling_is_uniform_with_replacement() {
    let mut mem = ReplayMemory::new(4);
    for v in 0..4 {
        mem.push(Transition { observation: [0.0; OBS_DIM], action: 0.0, value: v as f64 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut counts = [0usize; 4];
    for t in mem.sample(&mut rng, 40_000) {
        counts[t.value as usize] += 1;
    }
    assert!(counts.iter().all(|&c| (c as f64 - 10_000.0).abs() < 400.0), "{counts:?}");
}

/// Two-impression day: a contract with demand 1 and penalty 0.5.
fn worked() -> (Vec<Contract>, Vec<Impression>) {
    let contracts = vec![Contract { id: 0, demand: 1, unit_price: 0.0, penalty: 0.5, quality_weight: 1.0 }];
    let imps = vec![
        Impression { id: 0, step: 1, first_bid: 0.4, second_bid: 0.3, quality: vec![0.2] },
        Impression { id: 1, step: 2, first_bid: 0.7, second_bid: 0.6, quality: vec![0.1] },
    ];
    (contracts, imps)
}

#[test]
fn rollout_on_worked_instance() {
    let (cs, imps) = worked();
    let market = Market::new(&cs, &imps, 2).unwrap();
    let state = market.start(vec![0.3]).unwrap();
    assert!((rollout_value(&market, &state, &[0.3]) - 0.8).abs() < 1e-12);

    let empty: Vec<Contract> = vec![];
    let bare: Vec<Impression> = imps.iter().map(|i| Impression { quality: vec![], ..i.clone() }).collect();
    let market = Market::new(&empty, &bare, 2).unwrap();
    let state = market.start(vec![]).unwrap();
    assert!((rollout_value(&market, &state, &[]) - 0.9).abs() < 1e-12);
}

#[test]
fn mid_episode_observation_is_pinned() {
    let (cs, imps) = common::random_instance(&mut ChaCha8Rng::seed_from_u64(42), 40, 2, 8);
    let market = Market::new(&cs, &imps, 8).unwrap();
    let mut state = market.start(vec![0.1, 0.2]).unwrap();
    for _ in 0..4 {
        market.allocate_step(&mut state, &mut HoldAlphas);
    }
    let o = build_observation(&market, &state, 1, 5);
    // recompute every feature by hand from the state
    let d: Vec<f64> = cs.iter().map(|c| c.demand as f64).collect();
    let e: Vec<f64> = state.delivered.iter().map(|&e| e as f64).collect();
    let time = 5.0 / 8.0;
    let expected = [
        time,
        e[1] / d[1],
        state.last_step_wins[1] as f64 / (d[1] / 8.0),
        time - e[1] / d[1],
        0.2 / cs[1].penalty,
        (e[0] / d[0] + e[1] / d[1]) / 2.0,
        state.rtb_wins as f64 / state.allocated as f64,
        d[1] / (d[0] + d[1]),
    ];
    for (a, b) in o.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{o:?} vs {expected:?}");
    }
}

#[test]
fn zero_contract_day_is_optimal_from_the_start() {
    let imps: Vec<Impression> = (0..50)
        .map(|i| Impression { id: i, step: (i / 10 + 1) as u32, first_bid: 1.0, second_bid: 0.5, quality: vec![] })
        .collect();
    let cfg = MarliaConfig { episodes: 3, train_fraction: 1.0, ..Default::default() };
    let out = train(&imps, &[], 5, &[], &[], &cfg).unwrap();
    assert!((out.log[0].ratio - 1.0).abs() < 1e-12);
    assert!(out.log.iter().all(|e| (e.ratio - 1.0).abs() < 1e-12));
}

#[test]
fn single_contract_stationary_day_converges() {
    use impalloc::traffic::{generate_day, TrafficConfig};
    let cfg = TrafficConfig { n_impressions: 20_000, m_contracts: 1, seed: 3, ..Default::default() };
    let day = generate_day(&cfg).unwrap();
    let sol = solve_dual(&day.impressions, &day.contracts, &DualConfig::default()).unwrap();
    let eval = [EvalSet { impressions: &day.impressions, contracts: &day.contracts, r_star: sol.r_star }];
    let mcfg = MarliaConfig { episodes: 300, stop_at_ratio: Some(0.95), seed: 1, ..Default::default() };
    let out = train(&day.impressions, &day.contracts, 96, &sol.alphas, &eval, &mcfg).unwrap();
    assert!(out.best_ratio >= 0.95, "best {}", out.best_ratio);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    use impalloc::traffic::{generate_pair, TrafficConfig};
    let cfg = TrafficConfig { n_impressions: 4_000, m_contracts: 3, seed: 5, ..Default::default() };
    let pair = generate_pair(&cfg).unwrap();
    let sol = solve_dual(&pair.train, &pair.contracts, &DualConfig::default()).unwrap();
    let mcfg = MarliaConfig { episodes: 5, seed: 9, ..Default::default() };
    let a = train(&pair.train, &pair.contracts, 96, &sol.alphas, &[], &mcfg).unwrap();
    let b = train(&pair.train, &pair.contracts, 96, &sol.alphas, &[], &mcfg).unwrap();
    assert_eq!(a.last, b.last);
    let strip =
        |l: &[impalloc::marlia::EpisodeLog]| l.iter().map(|e| (e.r, e.critic_loss.to_bits())).collect::<Vec<_>>();
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(MarliaModel::from_json(&a.best.to_json()).unwrap(), a.best);
}

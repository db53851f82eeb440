//! Comparison controllers: fixed α, MSVV and PID pacing.

use crate::market::{AllocationDecision, Contract, Controller, EpisodeState, Impression, Market, Target};
use serde::{Deserialize, Serialize};

/// Keeps α at the training-day optimum for the whole day.
#[derive(Debug, Clone)]
pub struct FixedParameter {
    pub alphas: Vec<f64>,
}

impl FixedParameter {
    pub fn new(alpha_star: Vec<f64>) -> Self {
        Self { alphas: alpha_star }
    }
}

impl Controller for FixedParameter {
    fn begin_step(&mut self, t: usize, _market: &Market<'_>, state: &mut EpisodeState) {
        if t == 1 {
            state.alphas.clone_from(&self.alphas);
        }
    }
}

/// Spent fraction `x_j = min(1, e_j / d_j)` per contract; an empty demand counts as spent.
#[derive(Debug, Clone, PartialEq)]
pub struct MsvvState {
    pub spent: Vec<f64>,
}

impl MsvvState {
    pub fn from_delivery(contracts: &[Contract], delivered: &[u64]) -> Self {
        let spent = contracts
            .iter()
            .zip(delivered)
            .map(|(c, &e)| if c.demand == 0 { 1.0 } else { (e as f64 / c.demand as f64).min(1.0) })
            .collect();
        Self { spent }
    }
}

/// `(p_j + λ_j q_ij) (1 - e^{x_j - 1})`.
pub fn msvv_bid(contract: &Contract, quality: f64, spent: f64) -> f64 {
    (contract.penalty + contract.quality_weight * quality) * (1.0 - (spent - 1.0).exp())
}

/// `b_i2 (1 - e^{-1})`.
pub fn msvv_rtb_scale(second_bid: f64) -> f64 {
    second_bid * (1.0 - (-1.0f64).exp())
}

/// MSVV-style allocation: scaled contract bids against the scaled RTB price.
#[derive(Debug, Clone, Default)]
pub struct Msvv;

impl Controller for Msvv {
    fn begin_step(&mut self, _t: usize, _market: &Market<'_>, _state: &mut EpisodeState) {}

    fn decide(&mut self, impression: &Impression, contracts: &[Contract], state: &EpisodeState) -> AllocationDecision {
        let rtb = msvv_rtb_scale(impression.second_bid);
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in contracts.iter().enumerate() {
            let spent = if c.demand == 0 { 1.0 } else { (state.delivered[j] as f64 / c.demand as f64).min(1.0) };
            let bid = msvv_bid(c, impression.quality[j], spent);
            if best.is_none_or(|(_, b)| bid > b) {
                best = Some((j, bid));
            }
        }
        match best {
            Some((k, bid)) if bid > rtb => AllocationDecision { target: Target::Contract(k), payment: 0.0 },
            _ => AllocationDecision::rtb(impression.second_bid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self { kp: 0.5, ki: 0.05, kd: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    pub integral: Vec<f64>,
    pub prev_error: Vec<f64>,
    pub gains: PidGains,
}

impl PidState {
    pub fn new(m: usize, gains: PidGains) -> Self {
        assert!(gains.kp >= 0.0 && gains.ki >= 0.0 && gains.kd >= 0.0, "PID gains must be non-negative");
        Self { integral: vec![0.0; m], prev_error: vec![0.0; m], gains }
    }

    pub fn reset(&mut self) {
        self.integral.iter_mut().for_each(|v| *v = 0.0);
        self.prev_error.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Control signal for contract `j` given its current pacing error.
    pub fn signal(&mut self, j: usize, error: f64) -> f64 {
        self.integral[j] += error;
        let delta = error - self.prev_error[j];
        self.prev_error[j] = error;
        self.gains.kp * error + self.gains.ki * self.integral[j] + self.gains.kd * delta
    }
}

/// Cumulative share of the day's volume delivered by the end of each step.
pub fn volume_target_curve(impressions: &[Impression], horizon: usize) -> Vec<f64> {
    let mut counts = vec![0usize; horizon];
    for imp in impressions {
        let t = (imp.step as usize).clamp(1, horizon);
        counts[t - 1] += 1;
    }
    let n = impressions.len().max(1) as f64;
    let mut acc = 0usize;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            if impressions.is_empty() {
                1.0
            } else {
                acc as f64 / n
            }
        })
        .collect()
}

/// Even-pacing controller on α: at every boundary, compares each contract's
/// delivered fraction with the target curve and moves α additively in units
/// of its penalty, clamped above at the penalty.
#[derive(Debug, Clone)]
pub struct PidPacing {
    pub initial_alphas: Vec<f64>,
    /// Cumulative target fraction at the end of each step.
    pub target_curve: Vec<f64>,
    pub state: PidState,
}

impl PidPacing {
    pub fn new(initial_alphas: Vec<f64>, target_curve: Vec<f64>, gains: PidGains) -> Self {
        let m = initial_alphas.len();
        Self { initial_alphas, target_curve, state: PidState::new(m, gains) }
    }
}

impl Controller for PidPacing {
    fn begin_step(&mut self, t: usize, market: &Market<'_>, state: &mut EpisodeState) {
        if t == 1 {
            self.state.reset();
            state.alphas.clone_from(&self.initial_alphas);
            return;
        }
        let target = self.target_curve.get(t - 2).copied().unwrap_or(1.0);
        for (j, c) in market.contracts.iter().enumerate() {
            let error = target - state.fulfillment(market.contracts, j);
            let signal = self.state.signal(j, error);
            state.alphas[j] = (state.alphas[j] + signal * c.penalty).min(c.penalty);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::HoldAlphas;

    fn contract(p: f64, lambda: f64, d: u64) -> Contract {
        Contract { id: 0, demand: d, unit_price: 0.0, penalty: p, quality_weight: lambda }
    }

    #[test]
    fn msvv_values() {
        let c = contract(1.0, 1.0, 10);
        assert!((msvv_bid(&c, 0.0, 0.0) - 0.632_120_558_8).abs() < 1e-9);
        assert_eq!(msvv_bid(&c, 0.7, 1.0), 0.0);
        assert!((msvv_rtb_scale(1.0) - 0.632_120_558_8).abs() < 1e-9);
    }

    #[test]
    fn msvv_state_caps_at_one() {
        let cs = vec![contract(1.0, 0.0, 4), contract(1.0, 0.0, 0)];
        let s = MsvvState::from_delivery(&cs, &[6, 0]);
        assert_eq!(s.spent, vec![1.0, 1.0]);
    }

    #[test]
    fn msvv_self_caps() {
        let cs = vec![contract(1.0, 0.0, 1)];
        let imps: Vec<_> = (0..3)
            .map(|i| Impression { id: i, step: 1, first_bid: 0.2, second_bid: 0.1, quality: vec![0.5] })
            .collect();
        let market = Market::new(&cs, &imps, 1).unwrap();
        let r = market.run_episode(vec![0.0], &mut Msvv).unwrap();
        assert_eq!(r.delivered, vec![1]);
    }

    #[test]
    fn pid_signal_arithmetic() {
        let mut s = PidState::new(1, PidGains::default());
        assert_eq!(s.signal(0, 0.0), 0.0);
        let mut p = PidState::new(1, PidGains { kp: 1.0, ki: 0.0, kd: 0.0 });
        assert!((p.signal(0, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn pid_clamps_alpha_at_penalty() {
        let cs = vec![contract(1.0, 0.0, 100)];
        // Nothing can be won, so the contract stays behind pace all day.
        let imps: Vec<_> = (1..=4)
            .map(|t| Impression { id: t as u64, step: t, first_bid: 5.0, second_bid: 5.0, quality: vec![0.0] })
            .collect();
        let curve = volume_target_curve(&imps, 4);
        let mut pid = PidPacing::new(vec![1.0], curve, PidGains::default());
        let market = Market::new(&cs, &imps, 4).unwrap();
        let mut state = market.start(vec![1.0]).unwrap();
        for t in 1..=4 {
            pid.begin_step(t, &market, &mut state);
            assert!(state.alphas[0] <= 1.0);
            market.allocate_step(&mut state, &mut HoldAlphas);
        }
        assert_eq!(state.alphas[0], 1.0);
    }

    #[test]
    fn target_curve_is_cumulative() {
        let imps: Vec<_> = [1u32, 1, 2, 4]
            .iter()
            .map(|&t| Impression { id: 0, step: t, first_bid: 0.0, second_bid: 0.0, quality: vec![] })
            .collect();
        assert_eq!(volume_target_curve(&imps, 4), vec![0.5, 0.75, 0.75, 1.0]);
    }
}

//! Contracts, impressions, the contract bidding function and the auction that
//! splits each impression between guaranteed contracts and RTB.

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Default number of control steps per day (15-minute steps).
pub const DEFAULT_HORIZON: usize = 96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("alpha vector has {got} entries but there are {expected} contracts")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("impression {index} has step {step} after step {previous}; stream must be sorted by step")]
    UnsortedStream { index: usize, step: u32, previous: u32 },
    #[error("impression {index} has step {step} outside the horizon 1..={horizon}")]
    StepOutOfRange { index: usize, step: u32, horizon: usize },
    #[error("invalid contract {id}: {reason}")]
    InvalidContract { id: u32, reason: &'static str },
    #[error("invalid impression {id}: {reason}")]
    InvalidImpression { id: u64, reason: &'static str },
}

/// A guaranteed-delivery line item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub id: u32,
    /// Impressions owed by the end of the day.
    pub demand: u64,
    /// Prepaid price per impression.
    pub unit_price: f64,
    /// Charged per undelivered impression.
    pub penalty: f64,
    /// Converts impression quality into money.
    pub quality_weight: f64,
}

impl Contract {
    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |reason| Err(MarketError::InvalidContract { id: self.id, reason });
        if !(self.penalty.is_finite() && self.penalty > 0.0) {
            return bad("penalty must be positive and finite");
        }
        if !(self.quality_weight.is_finite() && self.quality_weight >= 0.0) {
            return bad("quality weight must be non-negative and finite");
        }
        if !(self.unit_price.is_finite() && self.unit_price >= 0.0) {
            return bad("unit price must be non-negative and finite");
        }
        Ok(())
    }

    /// Prepaid revenue `c_j * d_j`.
    pub fn prepaid(&self) -> f64 {
        self.unit_price * self.demand as f64
    }
}

/// One auction opportunity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub id: u64,
    /// 1-based control step.
    pub step: u32,
    /// Highest RTB bid.
    #[serde(rename = "b1")]
    pub first_bid: f64,
    /// Second highest RTB bid: the price RTB pays when it wins.
    #[serde(rename = "b2")]
    pub second_bid: f64,
    /// Quality score per contract, e.g. predicted CTR.
    #[serde(rename = "q")]
    pub quality: Vec<f64>,
}

impl Impression {
    pub fn validate(&self, n_contracts: usize) -> Result<(), MarketError> {
        let bad = |reason| Err(MarketError::InvalidImpression { id: self.id, reason });
        if !(self.second_bid.is_finite() && self.first_bid.is_finite()) {
            return bad("bids must be finite");
        }
        if self.second_bid < 0.0 || self.first_bid < self.second_bid {
            return bad("bids must satisfy b1 >= b2 >= 0");
        }
        if self.quality.len() != n_contracts {
            return bad("quality vector length differs from contract count");
        }
        if self.quality.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("quality scores must lie in [0, 1]");
        }
        if self.step == 0 {
            return bad("steps are 1-based");
        }
        Ok(())
    }
}

/// Who receives an impression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Rtb,
    Contract(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub target: Target,
    /// `b_i2` when RTB wins; contracts are prepaid so they pay nothing here.
    pub payment: f64,
}

impl AllocationDecision {
    pub fn rtb(second_bid: f64) -> Self {
        Self { target: Target::Rtb, payment: second_bid }
    }

    pub fn contract(k: usize) -> Self {
        Self { target: Target::Contract(k), payment: 0.0 }
    }
}

/// End-of-day accounting for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    /// Prepaid contract revenue net of penalties.
    pub r_gc: f64,
    pub r_rtb: f64,
    /// Quality-weighted value of contract impressions.
    pub q_gc: f64,
    pub total: f64,
    pub shortfalls: Vec<u64>,
    pub delivered: Vec<u64>,
}

/// Bid of a contract for one impression: `λ_j q_ij + α_j`.
#[inline]
pub fn contract_bid(contract: &Contract, quality: f64, alpha: f64) -> f64 {
    contract.quality_weight * quality + alpha
}

/// Highest contract bid and its index, lowest index on ties. `None` without contracts.
#[inline]
pub(crate) fn best_contract_bid(
    impression: &Impression,
    contracts: &[Contract],
    alphas: &[f64],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, (c, &a)) in contracts.iter().zip(alphas).enumerate() {
        let bid = contract_bid(c, impression.quality[j], a);
        match best {
            Some((_, b)) if bid <= b => {}
            _ => best = Some((j, bid)),
        }
    }
    best
}

/// Allocates one impression: the highest contract bid wins if it strictly beats
/// the second RTB bid, otherwise RTB wins and pays `b_i2`.
pub fn allocate(
    impression: &Impression,
    contracts: &[Contract],
    alphas: &[f64],
) -> Result<AllocationDecision, MarketError> {
    if alphas.len() != contracts.len() {
        return Err(MarketError::DimensionMismatch { expected: contracts.len(), got: alphas.len() });
    }
    if impression.quality.len() != contracts.len() {
        return Err(MarketError::DimensionMismatch { expected: contracts.len(), got: impression.quality.len() });
    }
    Ok(allocate_unchecked(impression, contracts, alphas))
}

#[inline]
pub(crate) fn allocate_unchecked(
    impression: &Impression,
    contracts: &[Contract],
    alphas: &[f64],
) -> AllocationDecision {
    match best_contract_bid(impression, contracts, alphas) {
        Some((k, bid)) if bid > impression.second_bid => AllocationDecision::contract(k),
        _ => AllocationDecision::rtb(impression.second_bid),
    }
}

/// Immediate reward of one step: RTB revenue plus contract quality, minus the
/// under-delivery penalty on the terminal step. Prepaid revenue is excluded.
pub fn step_reward<'a, I>(allocations: I, contracts: &[Contract], terminal_shortfalls: Option<&[u64]>) -> f64
where
    I: IntoIterator<Item = (&'a Impression, AllocationDecision)>,
{
    let mut reward = 0.0;
    for (imp, decision) in allocations {
        reward += match decision.target {
            Target::Rtb => imp.second_bid,
            Target::Contract(j) => contracts[j].quality_weight * imp.quality[j],
        };
    }
    if let Some(y) = terminal_shortfalls {
        reward -= contracts.iter().zip(y).map(|(c, &y)| c.penalty * y as f64).sum::<f64>();
    }
    reward
}

/// Result of replacing the top RTB bid with `probe_bid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub won: bool,
    pub payment: f64,
}

/// Replays an impression with a probing RTB bidder in place of the top bidder.
///
/// The strongest remaining RTB bid is the original `b_i2`. An equal bid from the
/// incumbent keeps the top slot.
pub fn ic_probe(
    impression: &Impression,
    contracts: &[Contract],
    alphas: &[f64],
    probe_bid: f64,
) -> Result<ProbeOutcome, MarketError> {
    let other = impression.second_bid;
    let (top_is_probe, second) = if probe_bid > other { (true, other) } else { (false, probe_bid) };
    let probed = Impression { first_bid: probe_bid.max(other), second_bid: second.max(0.0), ..impression.clone() };
    let decision = allocate(&probed, contracts, alphas)?;
    let won = top_is_probe && decision.target == Target::Rtb;
    Ok(ProbeOutcome { won, payment: if won { decision.payment } else { 0.0 } })
}

/// Mutable per-episode bookkeeping. Cloning it gives an independent snapshot
/// for rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    /// Bid offsets in force for the current step.
    pub alphas: Vec<f64>,
    /// Contract wins so far, `e_j`.
    pub delivered: Vec<u64>,
    /// Contract wins during the last completed step.
    pub last_step_wins: Vec<u64>,
    pub rtb_wins: u64,
    pub allocated: u64,
    /// Next step to allocate (1-based); `horizon + 1` once finished.
    pub next_step: usize,
    pub r_rtb: f64,
    pub q_gc: f64,
}

impl EpisodeState {
    pub fn new(alphas: Vec<f64>) -> Self {
        let m = alphas.len();
        Self {
            alphas,
            delivered: vec![0; m],
            last_step_wins: vec![0; m],
            rtb_wins: 0,
            allocated: 0,
            next_step: 1,
            r_rtb: 0.0,
            q_gc: 0.0,
        }
    }

    pub fn shortfalls(&self, contracts: &[Contract]) -> Vec<u64> {
        contracts.iter().zip(&self.delivered).map(|(c, &e)| c.demand.saturating_sub(e)).collect()
    }

    /// `e_j / d_j`, with a zero-demand contract counted as fulfilled.
    pub fn fulfillment(&self, contracts: &[Contract], j: usize) -> f64 {
        let d = contracts[j].demand;
        if d == 0 {
            1.0
        } else {
            self.delivered[j] as f64 / d as f64
        }
    }
}

/// Per-step α control (and optionally a custom allocation rule) driven by
/// [`Market::run_episode`].
pub trait Controller {
    /// Fires once at every step boundary, before step `t` is allocated.
    fn begin_step(&mut self, t: usize, market: &Market<'_>, state: &mut EpisodeState);

    fn decide(&mut self, impression: &Impression, contracts: &[Contract], state: &EpisodeState) -> AllocationDecision {
        allocate_unchecked(impression, contracts, &state.alphas)
    }
}

/// Keeps whatever α the episode started with.
#[derive(Debug, Clone, Default)]
pub struct HoldAlphas;

impl Controller for HoldAlphas {
    fn begin_step(&mut self, _t: usize, _market: &Market<'_>, _state: &mut EpisodeState) {}
}

/// One replayable day: contracts plus a step-sorted impression stream.
#[derive(Debug, Clone)]
pub struct Market<'a> {
    pub contracts: &'a [Contract],
    pub impressions: &'a [Impression],
    pub horizon: usize,
    steps: Vec<Range<usize>>,
}

impl<'a> Market<'a> {
    pub fn new(contracts: &'a [Contract], impressions: &'a [Impression], horizon: usize) -> Result<Self, MarketError> {
        for c in contracts {
            c.validate()?;
        }
        let mut steps = vec![0..0; horizon];
        let mut previous = 0u32;
        let mut start = 0usize;
        for (index, imp) in impressions.iter().enumerate() {
            if imp.quality.len() != contracts.len() {
                return Err(MarketError::DimensionMismatch { expected: contracts.len(), got: imp.quality.len() });
            }
            if imp.step == 0 || imp.step as usize > horizon {
                return Err(MarketError::StepOutOfRange { index, step: imp.step, horizon });
            }
            if imp.step < previous {
                return Err(MarketError::UnsortedStream { index, step: imp.step, previous });
            }
            if imp.step != previous {
                if previous > 0 {
                    steps[previous as usize - 1] = start..index;
                }
                start = index;
                previous = imp.step;
            }
        }
        if previous > 0 {
            steps[previous as usize - 1] = start..impressions.len();
        }
        Ok(Self { contracts, impressions, horizon, steps })
    }

    pub fn n_contracts(&self) -> usize {
        self.contracts.len()
    }

    /// Impressions arriving during step `t` (1-based).
    pub fn step_impressions(&self, t: usize) -> &'a [Impression] {
        &self.impressions[self.steps[t - 1].clone()]
    }

    /// Impressions from step `t` to the end of the day.
    pub fn remaining_from(&self, t: usize) -> &'a [Impression] {
        if t > self.horizon {
            return &[];
        }
        let start = self.steps[..t - 1].iter().map(|r| r.end).max().unwrap_or(0);
        &self.impressions[start..]
    }

    pub fn prepaid(&self) -> f64 {
        self.contracts.iter().map(Contract::prepaid).sum()
    }

    pub fn start(&self, alphas: Vec<f64>) -> Result<EpisodeState, MarketError> {
        if alphas.len() != self.contracts.len() {
            return Err(MarketError::DimensionMismatch { expected: self.contracts.len(), got: alphas.len() });
        }
        Ok(EpisodeState::new(alphas))
    }

    /// Allocates every impression of `state.next_step` with the controller's
    /// rule and returns the step reward (terminal penalty included on the last
    /// step). The controller hook is not called here.
    pub fn allocate_step<C: Controller + ?Sized>(&self, state: &mut EpisodeState, controller: &mut C) -> f64 {
        let t = state.next_step;
        debug_assert!(t >= 1 && t <= self.horizon);
        state.last_step_wins.iter_mut().for_each(|w| *w = 0);
        let mut reward = 0.0;
        for imp in self.step_impressions(t) {
            let decision = controller.decide(imp, self.contracts, state);
            match decision.target {
                Target::Rtb => {
                    reward += imp.second_bid;
                    state.r_rtb += imp.second_bid;
                    state.rtb_wins += 1;
                }
                Target::Contract(j) => {
                    let q = self.contracts[j].quality_weight * imp.quality[j];
                    reward += q;
                    state.q_gc += q;
                    state.delivered[j] += 1;
                    state.last_step_wins[j] += 1;
                }
            }
            state.allocated += 1;
        }
        state.next_step += 1;
        if t == self.horizon {
            reward -= self.penalty(state);
        }
        reward
    }

    /// Same as [`allocate_step`](Self::allocate_step) with the default auction rule
    /// and the state's own α; used by rollouts.
    pub fn allocate_step_fixed(&self, state: &mut EpisodeState) -> f64 {
        self.allocate_step(state, &mut HoldAlphas)
    }

    fn penalty(&self, state: &EpisodeState) -> f64 {
        self.contracts.iter().zip(&state.delivered).map(|(c, &e)| c.penalty * c.demand.saturating_sub(e) as f64).sum()
    }

    /// Sum of rewards from `state.next_step` to the end of the day with α held
    /// fixed. Consumes the snapshot.
    pub fn rollout(&self, mut state: EpisodeState) -> f64 {
        let mut v = 0.0;
        while state.next_step <= self.horizon {
            v += self.allocate_step_fixed(&mut state);
        }
        v
    }

    pub fn report(&self, state: &EpisodeState) -> OutcomeReport {
        let shortfalls = state.shortfalls(self.contracts);
        let r_gc = self.prepaid() - self.penalty(state);
        OutcomeReport {
            r_gc,
            r_rtb: state.r_rtb,
            q_gc: state.q_gc,
            total: r_gc + state.r_rtb + state.q_gc,
            shortfalls,
            delivered: state.delivered.clone(),
        }
    }

    /// Replays the whole day, firing the controller at every step boundary.
    /// Returns the outcome and the reward of each step.
    pub fn run_episode_traced<C: Controller + ?Sized>(
        &self,
        initial_alphas: Vec<f64>,
        controller: &mut C,
    ) -> Result<(OutcomeReport, Vec<f64>), MarketError> {
        let mut state = self.start(initial_alphas)?;
        let mut rewards = Vec::with_capacity(self.horizon);
        for t in 1..=self.horizon {
            controller.begin_step(t, self, &mut state);
            rewards.push(self.allocate_step(&mut state, controller));
        }
        Ok((self.report(&state), rewards))
    }

    pub fn run_episode<C: Controller + ?Sized>(
        &self,
        initial_alphas: Vec<f64>,
        controller: &mut C,
    ) -> Result<OutcomeReport, MarketError> {
        self.run_episode_traced(initial_alphas, controller).map(|(r, _)| r)
    }
}

/// Convenience wrapper: builds a [`Market`] and replays it once.
pub fn run_episode<C: Controller + ?Sized>(
    impressions: &[Impression],
    contracts: &[Contract],
    horizon: usize,
    initial_alphas: Vec<f64>,
    controller: &mut C,
) -> Result<OutcomeReport, MarketError> {
    Market::new(contracts, impressions, horizon)?.run_episode(initial_alphas, controller)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contract(lambda: f64, penalty: f64, demand: u64) -> Contract {
        Contract { id: 0, demand, unit_price: 0.0, penalty, quality_weight: lambda }
    }

    fn imp(step: u32, b2: f64, q: Vec<f64>) -> Impression {
        Impression { id: 0, step, first_bid: b2, second_bid: b2, quality: q }
    }

    /// The two-impression day used throughout the LP tests.
    pub(crate) fn worked_instance() -> (Vec<Contract>, Vec<Impression>) {
        let contracts = vec![contract(1.0, 0.5, 1)];
        let imps = vec![
            Impression { id: 0, step: 1, first_bid: 0.4, second_bid: 0.3, quality: vec![0.2] },
            Impression { id: 1, step: 2, first_bid: 0.7, second_bid: 0.6, quality: vec![0.1] },
        ];
        (contracts, imps)
    }

    #[test]
    fn bid_is_linear_in_quality_plus_offset() {
        assert_eq!(contract_bid(&contract(1.0, 1.0, 1), 0.2, 0.5), 0.7);
        assert_eq!(contract_bid(&contract(2.0, 1.0, 1), 0.0, 0.3), 0.3);
        assert_eq!(contract_bid(&contract(1.0, 1.0, 1), 0.2, 0.3), 0.5);
    }

    #[test]
    fn rtb_wins_when_every_contract_bid_is_below_b2() {
        let cs = vec![contract(1.0, 1.0, 1), contract(1.0, 1.0, 1)];
        let d = allocate(&imp(1, 0.6, vec![0.0, 0.0]), &cs, &[0.4, 0.5]).unwrap();
        assert_eq!(d, AllocationDecision { target: Target::Rtb, payment: 0.6 });
    }

    #[test]
    fn highest_contract_bid_wins_above_b2() {
        let cs = vec![contract(1.0, 1.0, 1), contract(1.0, 1.0, 1)];
        let d = allocate(&imp(1, 0.6, vec![0.0, 0.0]), &cs, &[0.5, 0.7]).unwrap();
        assert_eq!(d, AllocationDecision { target: Target::Contract(1), payment: 0.0 });
    }

    #[test]
    fn ties_go_to_rtb_then_lowest_contract() {
        let one = vec![contract(1.0, 1.0, 1)];
        let d = allocate(&imp(1, 0.6, vec![0.0]), &one, &[0.6]).unwrap();
        assert_eq!(d.target, Target::Rtb);

        let two = vec![contract(1.0, 1.0, 1), contract(1.0, 1.0, 1)];
        let d = allocate(&imp(1, 0.1, vec![0.0, 0.0]), &two, &[0.5, 0.5]).unwrap();
        assert_eq!(d.target, Target::Contract(0));
    }

    #[test]
    fn allocate_rejects_mismatched_alphas() {
        let cs = vec![contract(1.0, 1.0, 1)];
        let err = allocate(&imp(1, 0.6, vec![0.0]), &cs, &[0.1, 0.2]).unwrap_err();
        assert_eq!(err, MarketError::DimensionMismatch { expected: 1, got: 2 });
    }

    #[test]
    fn episode_without_contracts_sells_everything_to_rtb() {
        let imps = vec![imp(1, 0.3, vec![]), imp(1, 0.2, vec![]), imp(3, 0.9, vec![])];
        let r = run_episode(&imps, &[], 4, vec![], &mut HoldAlphas).unwrap();
        assert!((r.total - 1.4).abs() < 1e-12);
        assert_eq!(r.r_gc, 0.0);
        assert_eq!(r.q_gc, 0.0);
    }

    #[test]
    fn worked_instance_with_constant_alpha() {
        let (cs, imps) = worked_instance();
        let r = run_episode(&imps, &cs, 2, vec![0.3], &mut HoldAlphas).unwrap();
        assert_eq!(r.delivered, vec![1]);
        assert_eq!(r.shortfalls, vec![0]);
        assert!((r.total - 0.8).abs() < 1e-12);
    }

    #[test]
    fn never_winning_contracts_pay_full_penalty() {
        let (mut cs, imps) = worked_instance();
        cs[0].unit_price = 0.25;
        let b_max = imps.iter().map(|i| i.second_bid).fold(0.0, f64::max);
        let r = run_episode(&imps, &cs, 2, vec![-b_max - cs[0].quality_weight], &mut HoldAlphas).unwrap();
        let all_rtb: f64 = imps.iter().map(|i| i.second_bid).sum();
        let expected = all_rtb + cs[0].prepaid() - cs[0].penalty * cs[0].demand as f64;
        assert!((r.total - expected).abs() < 1e-12);
    }

    #[test]
    fn unsorted_stream_is_rejected() {
        let imps = vec![imp(2, 0.3, vec![]), imp(1, 0.2, vec![])];
        let err = Market::new(&[], &imps, 4).unwrap_err();
        assert!(matches!(err, MarketError::UnsortedStream { index: 1, .. }));
        let late = vec![imp(5, 0.3, vec![])];
        assert!(matches!(Market::new(&[], &late, 4), Err(MarketError::StepOutOfRange { .. })));
    }

    #[test]
    fn step_reward_terms() {
        let cs = vec![contract(2.0, 1.5, 3), contract(1.0, 0.5, 2)];
        let a = imp(1, 0.3, vec![0.1, 0.2]);
        let b = imp(1, 0.7, vec![0.4, 0.2]);
        let all_rtb = step_reward([(&a, AllocationDecision::rtb(0.3)), (&b, AllocationDecision::rtb(0.7))], &cs, None);
        assert!((all_rtb - 1.0).abs() < 1e-12);
        let one = step_reward([(&b, AllocationDecision::contract(0))], &cs, None);
        assert!((one - 0.8).abs() < 1e-12);
        let terminal = step_reward(std::iter::empty(), &cs, Some(&[3, 2]));
        assert!((terminal + (1.5 * 3.0 + 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn probe_examples() {
        let cs = vec![contract(1.0, 1.0, 1)];
        let i = Impression { id: 0, step: 1, first_bid: 0.9, second_bid: 0.4, quality: vec![0.1] };
        // contract bid 0.3 < other RTB bid 0.4
        let alphas = [0.2];
        let low = ic_probe(&i, &cs, &alphas, 0.25).unwrap();
        assert!(!low.won);
        let high = ic_probe(&i, &cs, &alphas, 0.8).unwrap();
        assert!(high.won);
        assert_eq!(high.payment, 0.4);
        let higher = ic_probe(&i, &cs, &alphas, 5.0).unwrap();
        assert_eq!(higher.payment, high.payment);
        // contract bid above the other RTB bid keeps the impression
        let strong = ic_probe(&i, &cs, &[0.6], 10.0).unwrap();
        assert!(!strong.won);
    }

    #[test]
    fn remaining_from_skips_earlier_steps() {
        let imps = vec![imp(1, 0.1, vec![]), imp(3, 0.2, vec![]), imp(3, 0.3, vec![])];
        let m = Market::new(&[], &imps, 4).unwrap();
        assert_eq!(m.remaining_from(1).len(), 3);
        assert_eq!(m.remaining_from(2).len(), 2);
        assert_eq!(m.remaining_from(4).len(), 0);
        assert_eq!(m.remaining_from(5).len(), 0);
        assert_eq!(m.step_impressions(2).len(), 0);
    }
}

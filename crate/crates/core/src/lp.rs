//! The outcome-maximization LP, its dual in α, and solvers for both.
//!
//! Removing the constants `Σ c_j d_j` and `Σ b_i2`, the primal is a
//! transportation problem: impression `i` assigned to contract `j` gains
//! `w_ij = λ_j q_ij + p_j - b_i2` over selling it to RTB, contract `j` takes at
//! most `d_j` impressions, and every impression goes to at most one contract.
//! With β eliminated the dual is the convex piecewise-linear function
//!
//! ```text
//! g(α) = Σ_i max(0, max_j (λ_j q_ij + α_j - b_i2)) - Σ_j α_j d_j,   α_j <= p_j
//! ```
//!
//! and `R* = g(α*) + Σ_i b_i2 + Σ_j c_j d_j`.

use crate::market::{best_contract_bid, Contract, Impression, MarketError, Target};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

pub const BRUTE_FORCE_MAX_IMPRESSIONS: usize = 10;
pub const BRUTE_FORCE_MAX_CONTRACTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("alpha {alpha} of contract {contract} exceeds its penalty {penalty}")]
    AlphaAbovePenalty { contract: usize, alpha: f64, penalty: f64 },
    #[error("subgradient descent stopped after {iters} iterations with relative gap {gap:.3e}")]
    NotConverged { best: Box<DualSolution>, gap: f64, iters: usize },
    #[error("instance with {n} impressions and {m} contracts is too large to enumerate")]
    TooLarge { n: usize, m: usize },
    #[error("primal value {primal} and dual value {dual} disagree")]
    DualityGap { primal: f64, dual: f64 },
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    /// Optimal outcome including prepaid revenue.
    pub r_star: f64,
    /// `g(α)` at the returned alphas.
    pub dual_objective: f64,
    pub iters: usize,
}

impl DualSolution {
    /// Shadow prices `β_i = max(0, max_j (λ_j q_ij + α_j - b_i2))`.
    pub fn betas(&self, impressions: &[Impression], contracts: &[Contract]) -> Vec<f64> {
        impressions.iter().map(|imp| hinge(imp, contracts, &self.alphas)).collect()
    }

    /// `R*` without the prepaid constant.
    pub fn r_star_net_of_prepaid(&self, contracts: &[Contract]) -> f64 {
        self.r_star - contracts.iter().map(Contract::prepaid).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalSolution {
    pub assignment: Vec<Target>,
    pub shortfalls: Vec<u64>,
    /// `R_GC + R_RTB + Q_GC`.
    pub objective: f64,
    /// Objective without the constants `Σ b_i2` and `Σ c_j d_j`.
    pub net_objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DualMethod {
    /// Exact combinatorial solve of the primal, then dual prices from its
    /// residual graph.
    #[default]
    Exact,
    /// Projected subgradient descent on `g` with step `c / sqrt(k)`.
    Subgradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualConfig {
    pub method: DualMethod,
    /// Relative duality gap accepted by the subgradient method.
    pub tol: f64,
    pub max_iters: usize,
    /// Scale of the subgradient step, in units of the largest penalty.
    pub step_scale: f64,
    /// Keep every subgradient iterate in the returned trace.
    #[serde(skip)]
    pub record_iterates: bool,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self { method: DualMethod::Exact, tol: 1e-6, max_iters: 5000, step_scale: 0.5, record_iterates: false }
    }
}

#[inline]
fn hinge(imp: &Impression, contracts: &[Contract], alphas: &[f64]) -> f64 {
    match best_contract_bid(imp, contracts, alphas) {
        Some((_, bid)) => (bid - imp.second_bid).max(0.0),
        None => 0.0,
    }
}

#[inline]
fn weight(imp: &Impression, c: &Contract, j: usize) -> f64 {
    c.quality_weight * imp.quality[j] + c.penalty - imp.second_bid
}

fn check_dims(impressions: &[Impression], contracts: &[Contract]) -> Result<(), LpError> {
    for c in contracts {
        c.validate()?;
    }
    for imp in impressions {
        if imp.quality.len() != contracts.len() {
            return Err(MarketError::DimensionMismatch { expected: contracts.len(), got: imp.quality.len() }.into());
        }
    }
    Ok(())
}

fn check_box(alphas: &[f64], contracts: &[Contract]) -> Result<(), LpError> {
    if alphas.len() != contracts.len() {
        return Err(MarketError::DimensionMismatch { expected: contracts.len(), got: alphas.len() }.into());
    }
    for (j, (c, &a)) in contracts.iter().zip(alphas).enumerate() {
        if a > c.penalty {
            return Err(LpError::AlphaAbovePenalty { contract: j, alpha: a, penalty: c.penalty });
        }
    }
    Ok(())
}

/// Lower end of the α box: at or below it contract `j` cannot beat any `b_i2`.
pub fn alpha_floor(impressions: &[Impression], contract: &Contract) -> f64 {
    let b_max = impressions.iter().map(|i| i.second_bid).fold(0.0, f64::max);
    -(b_max + contract.quality_weight)
}

/// Evaluates `g(α)`; rejects α above the penalty box.
pub fn dual_objective(alphas: &[f64], impressions: &[Impression], contracts: &[Contract]) -> Result<f64, LpError> {
    check_box(alphas, contracts)?;
    check_dims(impressions, contracts)?;
    Ok(dual_objective_unchecked(alphas, impressions, contracts))
}

fn dual_objective_unchecked(alphas: &[f64], impressions: &[Impression], contracts: &[Contract]) -> f64 {
    let hinges: f64 = impressions.iter().map(|imp| hinge(imp, contracts, alphas)).sum();
    hinges - contracts.iter().zip(alphas).map(|(c, a)| a * c.demand as f64).sum::<f64>()
}

fn constants(impressions: &[Impression], contracts: &[Contract]) -> f64 {
    impressions.iter().map(|i| i.second_bid).sum::<f64>() + contracts.iter().map(Contract::prepaid).sum::<f64>()
}

/// Solves the dual of the allocation LP and reconstructs `R*`.
pub fn solve_dual(
    impressions: &[Impression],
    contracts: &[Contract],
    config: &DualConfig,
) -> Result<DualSolution, LpError> {
    check_dims(impressions, contracts)?;
    match config.method {
        DualMethod::Exact => solve_exact(impressions, contracts),
        DualMethod::Subgradient => subgradient_descent(impressions, contracts, config).and_then(|run| {
            if run.converged {
                Ok(run.solution)
            } else {
                Err(LpError::NotConverged { gap: run.gap, iters: run.solution.iters, best: Box::new(run.solution) })
            }
        }),
    }
}

/// Solves the residual problem left after contracts have already won
/// `delivered` impressions: demands become `max(0, d_j - e_j)`.
pub fn solve_subproblem(
    remaining: &[Impression],
    contracts: &[Contract],
    delivered: &[u64],
    config: &DualConfig,
) -> Result<DualSolution, LpError> {
    if delivered.len() != contracts.len() {
        return Err(MarketError::DimensionMismatch { expected: contracts.len(), got: delivered.len() }.into());
    }
    let residual = residual_contracts(contracts, delivered);
    solve_dual(remaining, &residual, config)
}

pub fn residual_contracts(contracts: &[Contract], delivered: &[u64]) -> Vec<Contract> {
    contracts
        .iter()
        .zip(delivered)
        .map(|(c, &e)| Contract { demand: c.demand.saturating_sub(e), ..c.clone() })
        .collect()
}

// ---------------------------------------------------------------------------
// Exact solver

#[derive(Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Maximum-weight assignment of impressions to contracts under demand caps,
/// by successive shortest augmenting paths. Impression nodes are contracted
/// away: the residual graph only keeps a source, the contracts and a sink, and
/// per-pair heaps give the cheapest impression realizing each edge.
fn max_weight_assignment(impressions: &[Impression], contracts: &[Contract]) -> Vec<Option<usize>> {
    let n = impressions.len();
    let m = contracts.len();
    let mut assign: Vec<Option<usize>> = vec![None; n];
    if m == 0 || n == 0 {
        return assign;
    }
    let w = |i: usize, j: usize| weight(&impressions[i], &contracts[j], j);
    let mut load = vec![0u64; m];

    // Highest-weight unassigned impression per contract.
    let mut free: Vec<BinaryHeap<(Key, usize)>> = (0..m).map(|j| (0..n).map(|i| (Key(w(i, j)), i)).collect()).collect();
    // moves[j * m + k]: impressions held by j, keyed by -(w_ij - w_ik).
    let mut moves: Vec<BinaryHeap<(Key, usize)>> = (0..m * m).map(|_| BinaryHeap::new()).collect();

    let src = m;
    let sink = m + 1;
    let nodes = m + 2;
    let mut pot = vec![0.0f64; nodes];
    for (j, heap) in free.iter().enumerate() {
        pot[j] = -heap.peek().map(|(k, _)| k.0).unwrap_or(0.0);
    }
    pot[sink] = (0..m).filter(|&j| contracts[j].demand > 0).map(|j| pot[j]).fold(0.0, f64::min);

    let mut dist = vec![f64::INFINITY; nodes];
    let mut done = vec![false; nodes];
    // (previous node, impression moved along the edge)
    let mut prev: Vec<Option<(usize, Option<usize>)>> = vec![None; nodes];

    loop {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        done.iter_mut().for_each(|d| *d = false);
        prev.iter_mut().for_each(|p| *p = None);
        dist[src] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nodes {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u == sink {
                break;
            }
            let base = dist[u] + pot[u];
            if u == src {
                for j in 0..m {
                    let heap = &mut free[j];
                    while let Some(&(_, i)) = heap.peek() {
                        if assign[i].is_some() {
                            heap.pop();
                        } else {
                            break;
                        }
                    }
                    if let Some(&(Key(wij), i)) = heap.peek() {
                        let nd = base - wij - pot[j];
                        let nd = nd.max(dist[u]);
                        if nd < dist[j] {
                            dist[j] = nd;
                            prev[j] = Some((src, Some(i)));
                        }
                    }
                }
            } else {
                let j = u;
                for k in 0..m {
                    if k == j || done[k] {
                        continue;
                    }
                    let heap = &mut moves[j * m + k];
                    while let Some(&(_, i)) = heap.peek() {
                        if assign[i] != Some(j) {
                            heap.pop();
                        } else {
                            break;
                        }
                    }
                    if let Some(&(Key(neg), i)) = heap.peek() {
                        let nd = (base - neg - pot[k]).max(dist[u]);
                        if nd < dist[k] {
                            dist[k] = nd;
                            prev[k] = Some((j, Some(i)));
                        }
                    }
                }
                if load[j] < contracts[j].demand {
                    let nd = (base - pot[sink]).max(dist[u]);
                    if nd < dist[sink] {
                        dist[sink] = nd;
                        prev[sink] = Some((j, None));
                    }
                }
            }
        }
        let reach = dist[sink];
        if !reach.is_finite() {
            break;
        }
        // Cost of the path in original weights; stop once it no longer gains.
        if reach + pot[sink] - pot[src] >= 0.0 {
            break;
        }
        for v in 0..nodes {
            pot[v] += dist[v].min(reach);
        }

        let (mut node, _) = prev[sink].expect("sink reached without predecessor");
        load[node] += 1;
        while node != src {
            let (from, imp) = prev[node].expect("broken augmenting path");
            let i = imp.expect("contract edges carry an impression");
            assign[i] = Some(node);
            for k in 0..m {
                if k != node {
                    moves[node * m + k].push((Key(-(w(i, node) - w(i, k))), i));
                }
            }
            node = from;
        }
    }
    assign
}

/// Shortest distances over a dense graph (`f64::INFINITY` = no edge).
fn bellman_ford(edges: &[Vec<f64>], from: usize) -> Vec<f64> {
    let n = edges.len();
    let mut dist = vec![f64::INFINITY; n];
    dist[from] = 0.0;
    for _ in 0..n {
        let mut changed = false;
        for u in 0..n {
            if !dist[u].is_finite() {
                continue;
            }
            for v in 0..n {
                let c = edges[u][v];
                if c.is_finite() && dist[u] + c < dist[v] {
                    dist[v] = dist[u] + c;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    dist
}

/// Tightens every difference constraint that some feasible point satisfies
/// strictly, by a margin small enough to keep the system feasible. The
/// extremes of the tightened system then leave all such constraints slack, so
/// their midpoint lies in the relative interior of the original face.
/// Constraints on a zero-length cycle hold with equality everywhere and are
/// left alone.
#[allow(clippy::needless_range_loop)]
fn shrink_slack_constraints(edges: &mut [Vec<f64>]) {
    let n = edges.len();
    let mut d: Vec<Vec<f64>> = edges.to_vec();
    for (v, row) in d.iter_mut().enumerate() {
        row[v] = row[v].min(0.0);
    }
    for k in 0..n {
        for u in 0..n {
            let duk = d[u][k];
            if !duk.is_finite() {
                continue;
            }
            for v in 0..n {
                let via = duk + d[k][v];
                if via < d[u][v] {
                    d[u][v] = via;
                }
            }
        }
    }
    let scale = edges.iter().flatten().filter(|c| c.is_finite()).fold(1.0f64, |s, c| s.max(c.abs()));
    let forced = 1e-12 * scale;
    // slack of constraint u -> v is c(u, v) + dist(v, u)
    let mut min_slack = f64::INFINITY;
    for u in 0..n {
        for v in 0..n {
            let s = edges[u][v] + d[v][u];
            if u != v && s.is_finite() && s > forced {
                min_slack = min_slack.min(s);
            }
        }
    }
    if !min_slack.is_finite() {
        return;
    }
    // a simple cycle has at most n edges, so this keeps every cycle non-negative
    let eps = min_slack / (2 * n) as f64;
    for u in 0..n {
        for v in 0..n {
            if u != v && edges[u][v].is_finite() && edges[u][v] + d[v][u] > forced {
                edges[u][v] -= eps;
            }
        }
    }
}

fn solve_exact(impressions: &[Impression], contracts: &[Contract]) -> Result<DualSolution, LpError> {
    let m = contracts.len();
    let assign = max_weight_assignment(impressions, contracts);
    let primal = primal_from_assignment(impressions, contracts, &assign);

    // Dual prices u_j = p_j - α_j. Every optimal price vector keeps each
    // impression on its (weakly) best option, so the optimal set is described
    // by difference constraints u_a <= u_b + c(b -> a) over the contracts and
    // an RTB node r with u_r = 0.
    let r = m;
    let mut edges = vec![vec![f64::INFINITY; m + 1]; m + 1];
    for (imp, a) in impressions.iter().zip(&assign) {
        let wa = match a {
            Some(j) => weight(imp, &contracts[*j], *j),
            None => 0.0,
        };
        let a = a.unwrap_or(r);
        for b in 0..=m {
            if b == a {
                continue;
            }
            let wb = if b == r { 0.0 } else { weight(imp, &contracts[b], b) };
            let c = wa - wb;
            if c < edges[b][a] {
                edges[b][a] = c;
            }
        }
    }
    let load = {
        let mut l = vec![0u64; m];
        for j in assign.iter().flatten() {
            l[*j] += 1;
        }
        l
    };
    for (j, c) in contracts.iter().enumerate() {
        // u_j >= 0
        edges[j][r] = edges[j][r].min(0.0);
        // u_j <= 0 while the contract still has room
        let cap = if load[j] < c.demand { 0.0 } else { c.penalty - alpha_floor(impressions, c) };
        edges[r][j] = edges[r][j].min(cap);
    }
    shrink_slack_constraints(&mut edges);
    let upper = bellman_ford(&edges, r);
    let reversed: Vec<Vec<f64>> = (0..=m).map(|u| (0..=m).map(|v| edges[v][u]).collect()).collect();
    let lower: Vec<f64> = bellman_ford(&reversed, r).into_iter().map(|d| -d).collect();

    // Centre of the optimal face between the lowest and highest price vectors.
    let alphas: Vec<f64> = contracts.iter().enumerate().map(|(j, c)| c.penalty - 0.5 * (upper[j] + lower[j])).collect();
    let g = dual_objective_unchecked(&alphas, impressions, contracts);
    let r_star = g + constants(impressions, contracts);
    let scale = 1.0 + primal.objective.abs().max(constants(impressions, contracts).abs());
    if (r_star - primal.objective).abs() > 1e-9 * scale {
        return Err(LpError::DualityGap { primal: primal.objective, dual: r_star });
    }
    Ok(DualSolution { alphas, r_star, dual_objective: g, iters: 0 })
}

fn primal_from_assignment(
    impressions: &[Impression],
    contracts: &[Contract],
    assign: &[Option<usize>],
) -> PrimalSolution {
    let m = contracts.len();
    let mut load = vec![0u64; m];
    let mut gain = 0.0;
    for (imp, a) in impressions.iter().zip(assign) {
        if let Some(j) = *a {
            load[j] += 1;
            gain += weight(imp, &contracts[j], j);
        }
    }
    let penalty_all: f64 = contracts.iter().map(|c| c.penalty * c.demand as f64).sum();
    let net = gain - penalty_all;
    PrimalSolution {
        assignment: assign.iter().map(|a| a.map_or(Target::Rtb, Target::Contract)).collect(),
        shortfalls: contracts.iter().zip(&load).map(|(c, &l)| c.demand.saturating_sub(l)).collect(),
        objective: net + constants(impressions, contracts),
        net_objective: net,
    }
}

/// Exact optimum of the primal via the augmenting-path solver.
pub fn solve_primal(impressions: &[Impression], contracts: &[Contract]) -> Result<PrimalSolution, LpError> {
    check_dims(impressions, contracts)?;
    let assign = max_weight_assignment(impressions, contracts);
    Ok(primal_from_assignment(impressions, contracts, &assign))
}

// ---------------------------------------------------------------------------
// Subgradient descent

#[derive(Debug, Clone)]
pub struct SubgradientRun {
    pub solution: DualSolution,
    pub converged: bool,
    /// Final relative gap between the best dual value and the best feasible
    /// primal value found along the way.
    pub gap: f64,
    /// Best dual value after each iteration.
    pub best_history: Vec<f64>,
    /// Every iterate, when requested in the config.
    pub iterates: Vec<Vec<f64>>,
}

/// `g(α)` and one subgradient: `#{i won by j at α} - d_j`.
fn value_and_subgradient(alphas: &[f64], impressions: &[Impression], contracts: &[Contract], grad: &mut [f64]) -> f64 {
    grad.iter_mut().zip(contracts).for_each(|(g, c)| *g = -(c.demand as f64));
    let mut hinges = 0.0;
    for imp in impressions {
        if let Some((j, bid)) = best_contract_bid(imp, contracts, alphas) {
            if bid > imp.second_bid {
                hinges += bid - imp.second_bid;
                grad[j] += 1.0;
            }
        }
    }
    hinges - contracts.iter().zip(alphas).map(|(c, a)| a * c.demand as f64).sum::<f64>()
}

/// Feasible primal value induced by α: bids as usual, but a full contract
/// passes the impression to the next best bidder.
fn greedy_primal_net(alphas: &[f64], impressions: &[Impression], contracts: &[Contract]) -> f64 {
    let m = contracts.len();
    let mut load = vec![0u64; m];
    let mut gain = 0.0;
    for imp in impressions {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..m {
            if load[j] >= contracts[j].demand {
                continue;
            }
            let bid = contracts[j].quality_weight * imp.quality[j] + alphas[j];
            if bid > imp.second_bid && best.is_none_or(|(_, b)| bid > b) {
                best = Some((j, bid));
            }
        }
        if let Some((j, _)) = best {
            load[j] += 1;
            gain += weight(imp, &contracts[j], j);
        }
    }
    gain - contracts.iter().map(|c| c.penalty * c.demand as f64).sum::<f64>()
}

/// Projected subgradient descent on `g` over the box `[alpha_floor, p_j]`.
pub fn subgradient_descent(
    impressions: &[Impression],
    contracts: &[Contract],
    config: &DualConfig,
) -> Result<SubgradientRun, LpError> {
    check_dims(impressions, contracts)?;
    let m = contracts.len();
    let lo: Vec<f64> = contracts.iter().map(|c| alpha_floor(impressions, c)).collect();
    let hi: Vec<f64> = contracts.iter().map(|c| c.penalty).collect();
    let p_max = hi.iter().cloned().fold(0.0, f64::max);
    let scale = impressions.iter().map(|i| i.second_bid).sum::<f64>()
        + contracts.iter().map(|c| c.penalty * c.demand as f64).sum::<f64>();
    let scale = if scale > 0.0 { scale } else { 1.0 };

    let mut alphas: Vec<f64> = (0..m).map(|j| 0.0f64.clamp(lo[j], hi[j])).collect();
    let mut grad = vec![0.0; m];
    let mut best_g = f64::INFINITY;
    let mut best_alphas = alphas.clone();
    let mut best_primal = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut iterates = Vec::new();
    let mut gap = f64::INFINITY;
    let mut iters = 0;
    let mut converged = false;

    for k in 1..=config.max_iters.max(1) {
        iters = k;
        if config.record_iterates {
            iterates.push(alphas.clone());
        }
        let g = value_and_subgradient(&alphas, impressions, contracts, &mut grad);
        if g < best_g {
            best_g = g;
            best_alphas.clone_from(&alphas);
        }
        best_primal = best_primal.max(greedy_primal_net(&alphas, impressions, contracts));
        history.push(best_g);
        gap = (best_g - best_primal) / scale;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gap <= config.tol || norm == 0.0 {
            converged = true;
            break;
        }
        let step = config.step_scale * p_max / (norm * (k as f64).sqrt());
        for j in 0..m {
            alphas[j] = (alphas[j] - step * grad[j]).clamp(lo[j], hi[j]);
        }
    }

    let solution = DualSolution {
        r_star: best_g + constants(impressions, contracts),
        dual_objective: best_g,
        alphas: best_alphas,
        iters,
    };
    Ok(SubgradientRun { solution, converged, gap, best_history: history, iterates })
}

// ---------------------------------------------------------------------------
// Brute force

/// Enumerates every integral allocation respecting the demand caps.
pub fn brute_force_primal(impressions: &[Impression], contracts: &[Contract]) -> Result<PrimalSolution, LpError> {
    let n = impressions.len();
    let m = contracts.len();
    if n > BRUTE_FORCE_MAX_IMPRESSIONS || m > BRUTE_FORCE_MAX_CONTRACTS {
        return Err(LpError::TooLarge { n, m });
    }
    check_dims(impressions, contracts)?;

    struct Search<'a> {
        impressions: &'a [Impression],
        contracts: &'a [Contract],
        current: Vec<Option<usize>>,
        load: Vec<u64>,
        best: Option<(f64, Vec<Option<usize>>)>,
    }

    impl Search<'_> {
        fn go(&mut self, i: usize, value: f64) {
            if i == self.impressions.len() {
                let penalty: f64 = self
                    .contracts
                    .iter()
                    .zip(&self.load)
                    .map(|(c, &l)| c.penalty * c.demand.saturating_sub(l) as f64)
                    .sum();
                let total = value - penalty;
                if self.best.as_ref().is_none_or(|(b, _)| total > *b) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            let imp = &self.impressions[i];
            self.current[i] = None;
            self.go(i + 1, value + imp.second_bid);
            for j in 0..self.contracts.len() {
                if self.load[j] < self.contracts[j].demand {
                    self.load[j] += 1;
                    self.current[i] = Some(j);
                    let q = self.contracts[j].quality_weight * imp.quality[j];
                    self.go(i + 1, value + q);
                    self.load[j] -= 1;
                }
            }
            self.current[i] = None;
        }
    }

    let mut search = Search { impressions, contracts, current: vec![None; n], load: vec![0; m], best: None };
    search.go(0, 0.0);
    let (_, assign) = search.best.expect("enumeration visits at least the all-RTB allocation");
    Ok(primal_from_assignment(impressions, contracts, &assign))
}

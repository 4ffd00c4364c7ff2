//! Outer congestion loop linking the virtual and physical layers.

use std::collections::BTreeMap;

use log::{info, warn};
use thiserror::Error;

use crate::agents::{self, AgentError};
use crate::matching::{self, MatchingError, MatchingOptions, MatchingTraceRow, TradeState};
use crate::opf::{self, OpfError, OpfOptions, OpfTraceRow, PhysicalSolution};
use crate::scenario::{Scenario, ScenarioError};

/// Trades below this size are not counted as using a line.
pub const PAIR_THRESHOLD: f64 = 1e-4;
/// Slack allowed on line limits before a line counts as congested.
pub const CAPACITY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Congestion prices keyed by `(line, seller, buyer)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CongestionLedger {
    pub eta: BTreeMap<(usize, usize, usize), f64>,
    /// Overload per line, one map per completed round.
    pub kappa: Vec<BTreeMap<usize, f64>>,
    pub round: usize,
}

impl CongestionLedger {
    pub fn get(&self, line: usize, seller: usize, buyer: usize) -> f64 {
        self.eta.get(&(line, seller, buyer)).copied().unwrap_or(0.0)
    }

    pub fn eta_sum(&self) -> f64 {
        self.eta.values().sum()
    }

    /// Charge per unit of `|p_ij|` for every pair, summed over the lines
    /// on their path and both orientations.
    pub fn pair_weights(&self, scenario: &Scenario) -> Vec<Vec<f64>> {
        let n = scenario.n_bus();
        let mut w = vec![vec![0.0; n]; n];
        for (&(_, i, j), &price) in &self.eta {
            w[i][j] += price;
            w[j][i] += price;
        }
        w
    }
}

/// `(S/S_max − 1)·Σ |p_ij|` over the pairs whose path crosses `line`.
pub fn overload(
    scenario: &Scenario,
    line: usize,
    phys: &PhysicalSolution,
    trades: &TradeState,
) -> Result<f64, ScenarioError> {
    let s_max = scenario.line(line)?.s_max;
    let pairs = scenario.pairs_using_line(line, &trades.p, PAIR_THRESHOLD)?;
    let gross: f64 = pairs.iter().map(|&(i, j)| trades.settled(i, j).abs()).sum();
    let signed: f64 = pairs.iter().map(|&(i, j)| trades.settled(i, j)).sum();
    if (gross - signed).abs() > 1e-12 {
        log::debug!("line {line}: signed pair sum {signed:.6} differs from gross {gross:.6}");
    }
    Ok(overload_value(phys.s[line], s_max, gross))
}

pub fn overload_value(s: f64, s_max: f64, traded: f64) -> f64 {
    (s / s_max - 1.0) * traded
}

/// Raises prices on the pairs of every congested line by `γ·κ`.
///
/// `congested` maps each congested line to its overload and pair set;
/// all other prices are left alone.
pub fn update_eta(
    ledger: &CongestionLedger,
    congested: &BTreeMap<usize, (f64, Vec<(usize, usize)>)>,
    gamma: f64,
) -> CongestionLedger {
    let mut next = ledger.clone();
    for (&line, (kappa, pairs)) in congested {
        for &(i, j) in pairs {
            let entry = next.eta.entry((line, i, j)).or_insert(0.0);
            *entry = (*entry + gamma * kappa).max(0.0);
        }
    }
    next.kappa
        .push(congested.iter().map(|(&l, (k, _))| (l, *k)).collect());
    next.round += 1;
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub welfare: f64,
    pub max_overload: f64,
    pub eta_sum: f64,
    pub inner_iters: usize,
    pub opf_iters: usize,
    pub losses: f64,
    /// Apparent flow per line (bus-indexed).
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// No line above its limit.
    Resolved,
    /// Lines are still congested but no matched pair crosses any of them,
    /// so congestion prices have nothing left to act on.
    Stalled,
    RoundCap,
}

#[derive(Debug, Clone)]
pub struct MarketOutcome {
    pub trades: TradeState,
    pub physical: PhysicalSolution,
    pub ledger: CongestionLedger,
    pub rounds: Vec<RoundRecord>,
    pub first_trades: TradeState,
    pub first_physical: PhysicalSolution,
    pub termination: Termination,
}

impl MarketOutcome {
    pub fn resolved(&self) -> bool {
        self.termination == Termination::Resolved
    }

    pub fn welfare_trajectory(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.welfare).collect()
    }
}

#[derive(Debug, Default)]
pub struct MarketTrace {
    pub matching: Vec<(usize, MatchingTraceRow)>,
    pub opf: Vec<(usize, OpfTraceRow)>,
}

pub fn run_market(scenario: &Scenario) -> Result<MarketOutcome, MarketError> {
    run_market_traced(scenario, None)
}

pub fn run_market_traced(
    scenario: &Scenario,
    mut trace: Option<&mut MarketTrace>,
) -> Result<MarketOutcome, MarketError> {
    let m_opts = MatchingOptions::from_scenario(scenario);
    let o_opts = OpfOptions::from_scenario(scenario);
    let mut ledger = CongestionLedger::default();
    let mut rounds = Vec::new();
    let mut first: Option<(TradeState, PhysicalSolution)> = None;
    let mut prev: Option<TradeState> = None;
    let mut prev_opf: Option<opf::OpfState> = None;

    for round in 1..=scenario.algo.max_outer_rounds.max(1) {
        let mut m_rows = Vec::new();
        let mut o_rows = Vec::new();
        let tracing = trace.is_some();
        let trades = matching::run_matching_with(
            scenario,
            &ledger,
            &m_opts,
            prev.as_ref(),
            tracing.then_some(&mut m_rows),
        )?;
        if !trades.converged {
            warn!("round {round}: matching did not converge");
        }
        let phys = opf::run_opf_with(
            scenario,
            &trades.dispatch(),
            &o_opts,
            prev_opf.as_ref(),
            tracing.then_some(&mut o_rows),
        )?;
        if !phys.converged {
            warn!("round {round}: power flow did not converge");
        }
        if let Some(t) = trace.as_deref_mut() {
            t.matching.extend(m_rows.into_iter().map(|r| (round, r)));
            t.opf.extend(o_rows.into_iter().map(|r| (round, r)));
        }

        let mut congested = BTreeMap::new();
        let mut max_overload: f64 = f64::NEG_INFINITY;
        for line in scenario.lines() {
            let ratio = phys.s[line.id] / line.s_max - 1.0;
            max_overload = max_overload.max(ratio);
            if phys.s[line.id] > line.s_max + CAPACITY_TOL {
                let kappa = overload(scenario, line.id, &phys, &trades)?;
                let pairs = scenario.pairs_using_line(line.id, &trades.p, PAIR_THRESHOLD)?;
                congested.insert(line.id, (kappa, pairs));
            }
        }
        let welfare = matching::social_welfare(scenario, &trades);
        info!(
            "round {round}: welfare {welfare:.4}, max overload {:.3e}, {} congested",
            max_overload,
            congested.len()
        );
        rounds.push(RoundRecord {
            round,
            welfare,
            max_overload,
            eta_sum: ledger.eta_sum(),
            inner_iters: trades.iter,
            opf_iters: phys.iterations,
            losses: phys.total_losses,
            s: phys.s.clone(),
        });
        if first.is_none() {
            first = Some((trades.clone(), phys.clone()));
        }
        let termination = if congested.is_empty() {
            Some(Termination::Resolved)
        } else if congested.values().all(|(_, pairs)| pairs.is_empty()) {
            warn!("round {round}: congested lines carry no matched pairs");
            Some(Termination::Stalled)
        } else if round == scenario.algo.max_outer_rounds {
            Some(Termination::RoundCap)
        } else {
            None
        };
        if let Some(termination) = termination {
            let (first_trades, first_physical) = first.expect("one round ran");
            return Ok(MarketOutcome {
                trades,
                physical: phys,
                ledger,
                rounds,
                first_trades,
                first_physical,
                termination,
            });
        }
        ledger = update_eta(&ledger, &congested, scenario.algo.gamma);
        prev_opf = Some(phys.state.clone());
        prev = Some(trades);
    }
    unreachable!("loop returns on its last round")
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSettlement {
    pub seller: usize,
    pub buyer: usize,
    pub quantity: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragePrice {
    /// Σ λ·q / Σ q.
    pub weighted: f64,
    /// Plain mean over matched pairs.
    pub unweighted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settlement {
    pub pairs: Vec<PairSettlement>,
    pub average: AveragePrice,
    /// Average price restricted to pairs using each line.
    pub by_line: BTreeMap<usize, AveragePrice>,
    /// Bus-indexed; slack entry is 0.
    pub welfare: Vec<f64>,
    pub social_welfare: f64,
    pub jfi: f64,
    /// Bus-indexed buying quote.
    pub grid_quote: Vec<f64>,
}

fn average(pairs: &[&PairSettlement]) -> AveragePrice {
    let q: f64 = pairs.iter().map(|p| p.quantity).sum();
    let weighted = if q > 0.0 {
        pairs.iter().map(|p| p.price * p.quantity).sum::<f64>() / q
    } else {
        0.0
    };
    let unweighted = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|p| p.price).sum::<f64>() / pairs.len() as f64
    };
    AveragePrice {
        weighted,
        unweighted,
    }
}

/// Per-pair clearing, average prices, prosumer welfare and fairness.
pub fn settlement(scenario: &Scenario, trades: &TradeState) -> Result<Settlement, MarketError> {
    let n = scenario.n_bus();
    let mut pairs = Vec::new();
    for i in scenario.prosumer_ids() {
        for j in scenario.prosumer_ids().filter(|&j| j > i) {
            let q = trades.settled(i, j);
            if q.abs() <= PAIR_THRESHOLD {
                continue;
            }
            let (seller, buyer) = if q > 0.0 { (i, j) } else { (j, i) };
            pairs.push(PairSettlement {
                seller,
                buyer,
                quantity: q.abs(),
                price: trades.lambda[i][j],
            });
        }
    }
    let all: Vec<&PairSettlement> = pairs.iter().collect();
    let mut by_line = BTreeMap::new();
    for line in scenario.lines() {
        let on: Vec<&PairSettlement> = pairs
            .iter()
            .filter(|p| {
                scenario.in_subtree(line.id, p.seller) != scenario.in_subtree(line.id, p.buyer)
            })
            .collect();
        by_line.insert(line.id, average(&on));
    }

    let quotes = matching::quotes(scenario, trades);
    let mut welfare = vec![0.0; n];
    for i in scenario.prosumer_ids() {
        let own = agents::prosumer_welfare(
            trades.d[i].max(0.0),
            trades.g[i],
            trades.p_grid[i],
            &quotes[i],
            scenario.prosumer(i),
        )?;
        let bilateral: f64 = scenario
            .prosumer_ids()
            .filter(|&j| j != i)
            .map(|j| trades.lambda[i][j] * trades.settled(i, j))
            .sum();
        welfare[i] = own + bilateral;
    }
    let jfi = agents::jain_fairness(&welfare[1..])?;
    Ok(Settlement {
        average: average(&all),
        pairs,
        by_line,
        social_welfare: welfare.iter().sum(),
        welfare,
        jfi,
        grid_quote: quotes.iter().map(|q| q.buy_price).collect(),
    })
}

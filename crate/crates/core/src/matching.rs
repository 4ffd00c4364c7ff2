//! Decentralized bilateral matching in the virtual layer.
//!
//! Every prosumer repeatedly solves a small local program for its own
//! consumption, generation, grid exchange and bilateral offers; pair
//! prices then move against the mismatch `p_ij + p_ji`.

use log::debug;
use rayon::prelude::*;
use thiserror::Error;

use crate::agents::{self, GridPriceQuote};
use crate::congestion::CongestionLedger;
use crate::convex::{self, ConicProgram, KernelError, SolveStatus, DEFAULT_TOL};
use crate::scenario::{Scenario, Scheme};

const INF: f64 = f64::INFINITY;
/// Residual-balancing ratio and step.
const BALANCE_MU: f64 = 10.0;
const BALANCE_TAU: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("prosumer {id}: {source}")]
    Kernel { id: usize, source: KernelError },
    #[error("prosumer {id}: local problem is infeasible")]
    Infeasible { id: usize },
}

/// Bus-indexed market state; row and column 0 (the slack) stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeState {
    /// `p[i][j]`: energy `i` offers to sell to `j` (negative = buy).
    pub p: Vec<Vec<f64>>,
    /// Signed grid exchange `p_i0` (positive = selling to the grid).
    pub p_grid: Vec<f64>,
    /// Pair prices, stored symmetric.
    pub lambda: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
    pub iter: usize,
    pub rho: f64,
    pub converged: bool,
}

impl TradeState {
    pub fn new(n: usize, rho: f64) -> Self {
        Self {
            p: vec![vec![0.0; n]; n],
            p_grid: vec![0.0; n],
            lambda: vec![vec![0.0; n]; n],
            d: vec![0.0; n],
            g: vec![0.0; n],
            iter: 0,
            rho,
            converged: false,
        }
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Grid purchases `max(p_0i, 0)` per bus.
    pub fn grid_loads(&self) -> Vec<f64> {
        self.p_grid.iter().map(|p| (-p).max(0.0)).collect()
    }

    pub fn grid_purchase(&self) -> f64 {
        self.grid_loads().iter().sum()
    }

    /// Σ (d_i − grid purchase_i): demand served by other prosumers.
    pub fn p2p_energy(&self) -> f64 {
        crate::oracle::p2p_energy(&self.d, &self.p_grid)
    }

    /// Largest `|p_ij + p_ji|`.
    pub fn max_mismatch(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 1..n {
            for j in i + 1..n {
                worst = worst.max((self.p[i][j] + self.p[j][i]).abs());
            }
        }
        worst
    }

    /// Agreed quantity `½(p_ij − p_ji)` seen from `i`.
    pub fn settled(&self, i: usize, j: usize) -> f64 {
        0.5 * (self.p[i][j] - self.p[j][i])
    }

    /// Largest violation of `g_i − d_i = p_i0 + Σ_j p_ij`.
    pub fn balance_error(&self) -> f64 {
        (1..self.n())
            .map(|i| {
                let out: f64 = self.p[i].iter().sum();
                (self.g[i] - self.d[i] - self.p_grid[i] - out).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Physical dispatch with each pair settled at `½(p_ij − p_ji)`; the
    /// grid exchange absorbs any leftover mismatch, so the result balances.
    pub fn dispatch(&self) -> crate::opf::Dispatch {
        let n = self.n();
        let mut p_grid = vec![0.0; n];
        for i in 1..n {
            let traded: f64 = (1..n).filter(|&j| j != i).map(|j| self.settled(i, j)).sum();
            p_grid[i] = self.g[i] - self.d[i] - traded;
        }
        crate::opf::Dispatch {
            d: self.d.clone(),
            g: self.g.clone(),
            p_grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub rho: f64,
}

impl ResidualReport {
    /// `‖p + pᵀ‖`, the primal residual norm.
    pub fn r_norm(&self) -> f64 {
        self.r.iter().sum::<f64>().sqrt()
    }

    /// `ρ‖Δp‖`, the dual residual norm.
    pub fn s_norm(&self) -> f64 {
        self.rho * self.s.iter().sum::<f64>().sqrt()
    }
}

/// Quantities chosen by one prosumer in a local step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRow {
    pub p: Vec<f64>,
    pub p_grid: f64,
    pub d: f64,
    pub g: f64,
}

/// Linear and quadratic coefficients the local step charges for buying
/// `buy` from the grid, given the others' purchases `others`.
///
/// DPS bills each prosumer its own quadratic. Under UPS the charge is the
/// increase of the grid's aggregate cost, `C0(others + buy) − C0(others)`.
pub fn grid_charge(scenario: &Scenario, others: f64) -> (f64, f64) {
    let grid = &scenario.grid;
    match grid.scheme {
        Scheme::Dps => (grid.b0, grid.a0),
        Scheme::Ups => (grid.b0 + 2.0 * grid.a0 * others, grid.a0),
    }
}

fn coupling_weight(scenario: &Scenario) -> f64 {
    match scenario.grid.scheme {
        Scheme::Dps => 0.0,
        Scheme::Ups => scenario.grid.a0 * scenario.prosumer_ids().len().saturating_sub(1) as f64,
    }
}

/// One prosumer's local problem.
///
/// `pair_eta[i][j]` is the congestion charge per unit of `|p_ij|`.
pub fn local_step(
    scenario: &Scenario,
    i: usize,
    state: &TradeState,
    others_purchase: f64,
    pair_eta: &[Vec<f64>],
) -> Result<LocalRow, MatchingError> {
    let n = state.n();
    let rho = state.rho;
    let pr = scenario.prosumer(i);
    let d_hi = pr.d_p_max.min(agents::saturation(pr)).max(pr.d_p_min);

    let mut prog = ConicProgram::new(0);
    let d = prog.add_var(pr.d_p_min, d_hi);
    let g = prog.add_var(pr.g_p_min, pr.g_p_max);
    let buy = prog.add_var(0.0, INF);
    let sell = prog.add_var(0.0, INF);
    let spare = prog.add_var(0.0, INF);

    prog.add_quadratic(d, d, pr.alpha).add_linear(d, -pr.beta);
    prog.add_quadratic(g, g, pr.a).add_linear(g, pr.b);
    let (lin, quad) = grid_charge(scenario, others_purchase);
    prog.add_quadratic(buy, buy, quad).add_linear(buy, lin);
    prog.add_linear(sell, -scenario.grid.lambda_sell);
    // w·(p_i0 − p_i0^t)² with p_i0 = sell − buy. Under UPS the others react
    // to this purchase in the same sweep, so the weight grows with their number.
    let w = 1.0 / rho + coupling_weight(scenario);
    let prev = state.p_grid[i];
    prog.add_quadratic(sell, sell, w)
        .add_quadratic(buy, buy, w)
        .add_quadratic(sell, buy, -2.0 * w)
        .add_linear(sell, -2.0 * w * prev)
        .add_linear(buy, 2.0 * w * prev)
        .add_constant(w * prev * prev);
    // Grid purchases only cover own consumption, grid sales only own output.
    prog.add_equality(vec![(buy, 1.0), (spare, 1.0), (d, -1.0)], 0.0);
    let surplus = prog.add_var(0.0, INF);
    prog.add_equality(vec![(sell, 1.0), (surplus, 1.0), (g, -1.0)], 0.0);

    let mut balance = vec![(g, 1.0), (d, -1.0), (sell, -1.0), (buy, 1.0)];
    let mut trade = Vec::new();
    for j in scenario.prosumer_ids().filter(|&j| j != i) {
        let x = prog.add_var(-INF, INF);
        let target = 0.5 * (state.p[i][j] - state.p[j][i]) + state.lambda[i][j] / rho;
        prog.add_quadratic(x, x, 0.5 * rho)
            .add_linear(x, -rho * target)
            .add_constant(0.5 * rho * target * target);
        if pair_eta[i][j] > 0.0 {
            prog.add_l1(x, pair_eta[i][j]);
        }
        balance.push((x, -1.0));
        trade.push((j, x));
    }
    prog.add_equality(balance, 0.0);

    let sol = convex::solve(&prog, DEFAULT_TOL, None)
        .map_err(|source| MatchingError::Kernel { id: i, source })?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(MatchingError::Infeasible { id: i }),
        SolveStatus::IterLimit => {
            debug!(
                "prosumer {i}: kernel stopped at kkt {:.2e}",
                sol.kkt_residual
            );
        }
    }
    let x = &sol.x;
    let mut row = vec![0.0; n];
    for &(j, k) in &trade {
        row[j] = x[k];
    }
    // Restore the balance exactly on the grid term.
    let traded: f64 = row.iter().sum();
    let p_grid = x[g] - x[d] - traded;
    Ok(LocalRow {
        p: row,
        p_grid,
        d: x[d],
        g: x[g],
    })
}

/// `λ_ij ← λ_ij − (ρ/2)(p_ij + p_ji)`, applied symmetrically.
pub fn update_prices(state: &TradeState, rho: f64) -> TradeState {
    let mut next = state.clone();
    let n = state.n();
    for i in 1..n {
        for j in i + 1..n {
            let price = state.lambda[i][j] - 0.5 * rho * (state.p[i][j] + state.p[j][i]);
            next.lambda[i][j] = price;
            next.lambda[j][i] = price;
        }
    }
    next
}

/// `r_i = Σ_j (p_ij + p_ji)²`, `s_i = Σ_j (p_ij − p_ij^prev)²`.
pub fn residuals(prev: &TradeState, next: &TradeState) -> ResidualReport {
    let n = next.n();
    let mut r = vec![0.0; n];
    let mut s = vec![0.0; n];
    for i in 1..n {
        for j in 1..n {
            if i == j {
                continue;
            }
            r[i] += (next.p[i][j] + next.p[j][i]).powi(2);
            s[i] += (next.p[i][j] - prev.p[i][j]).powi(2);
        }
    }
    ResidualReport {
        r,
        s,
        rho: prev.rho,
    }
}

/// Residual balancing on plain norms.
pub fn balance_rho(r_norm: f64, s_norm: f64, rho: f64, bounds: [f64; 2]) -> f64 {
    if r_norm > BALANCE_MU * s_norm {
        (rho * BALANCE_TAU).min(bounds[1])
    } else if s_norm > BALANCE_MU * r_norm {
        (rho / BALANCE_TAU).max(bounds[0])
    } else {
        rho
    }
}

/// Prices are kept unscaled, so nothing else changes with ρ.
pub fn adapt_rho(report: &ResidualReport, rho: f64, bounds: [f64; 2]) -> f64 {
    balance_rho(report.r_norm(), report.s_norm(), rho, bounds)
}

#[derive(Debug, Clone, Copy)]
pub struct MatchingOptions {
    pub rho_init: f64,
    pub rho_bounds: [f64; 2],
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub max_iters: usize,
}

impl MatchingOptions {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self {
            rho_init: scenario.algo.rho_init,
            rho_bounds: scenario.algo.rho_bounds,
            eps_pri: scenario.algo.eps_pri,
            eps_dual: scenario.algo.eps_dual,
            max_iters: scenario.algo.max_inner_iters,
        }
    }
}

/// One row of the optional per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingTraceRow {
    pub iter: usize,
    pub prosumer: usize,
    pub p_grid: f64,
    pub r: f64,
    pub s: f64,
    pub rho: f64,
}

pub fn run_matching(
    scenario: &Scenario,
    eta: &CongestionLedger,
) -> Result<TradeState, MatchingError> {
    run_matching_with(
        scenario,
        eta,
        &MatchingOptions::from_scenario(scenario),
        None,
        None,
    )
}

/// Runs the matching loop, optionally from a previous state.
pub fn run_matching_with(
    scenario: &Scenario,
    eta: &CongestionLedger,
    opts: &MatchingOptions,
    start: Option<&TradeState>,
    mut trace: Option<&mut Vec<MatchingTraceRow>>,
) -> Result<TradeState, MatchingError> {
    let n = scenario.n_bus();
    let pair_eta = eta.pair_weights(scenario);
    let mut state = match start {
        Some(s) => TradeState {
            iter: 0,
            converged: false,
            ..s.clone()
        },
        None => TradeState::new(n, opts.rho_init),
    };
    let ids: Vec<usize> = scenario.prosumer_ids().collect();

    for t in 1..=opts.max_iters {
        let loads = state.grid_loads();
        let total: f64 = loads.iter().sum();
        let rows: Result<Vec<LocalRow>, MatchingError> = ids
            .par_iter()
            .map(|&i| local_step(scenario, i, &state, total - loads[i], &pair_eta))
            .collect();
        let mut next = state.clone();
        for (&i, row) in ids.iter().zip(rows?) {
            next.p[i] = row.p;
            next.p_grid[i] = row.p_grid;
            next.d[i] = row.d;
            next.g[i] = row.g;
        }
        next.iter = t;
        let report = residuals(&state, &next);
        let mut next = update_prices(&next, state.rho);
        if let Some(rows) = trace.as_deref_mut() {
            for &i in &ids {
                rows.push(MatchingTraceRow {
                    iter: t,
                    prosumer: i,
                    p_grid: next.p_grid[i],
                    r: report.r[i],
                    s: report.s[i],
                    rho: state.rho,
                });
            }
        }
        let done = ids.iter().all(|&i| {
            report.r[i] <= opts.eps_pri * opts.eps_pri
                && report.s[i] <= opts.eps_dual * opts.eps_dual
        });
        if done {
            next.converged = true;
            debug!("matching converged after {t} iterations");
            return Ok(next);
        }
        next.rho = adapt_rho(&report, state.rho, opts.rho_bounds);
        if t % 500 == 0 {
            debug!(
                "matching iter {t}: r {:.3e} s {:.3e} rho {:.3e}",
                report.r_norm(),
                report.s_norm(),
                next.rho
            );
        }
        state = next;
    }
    debug!(
        "matching hit the iteration cap, mismatch {:.3e}",
        state.max_mismatch()
    );
    Ok(state)
}

/// Σ U(d) − Σ C(g) − grid payments + grid sales income.
pub fn social_welfare(scenario: &Scenario, state: &TradeState) -> f64 {
    let mut total = 0.0;
    for i in scenario.prosumer_ids() {
        let pr = scenario.prosumer(i);
        total += agents::consumer_utility(state.d[i].max(0.0), pr).unwrap_or(0.0)
            - agents::cost_curve(state.g[i], pr)
            + scenario.grid.lambda_sell * state.p_grid[i].max(0.0);
    }
    total - agents::grid_payments(&state.grid_loads(), &scenario.grid, scenario.grid.scheme)
}

/// Quotes each prosumer sees for the given state.
pub fn quotes(scenario: &Scenario, state: &TradeState) -> Vec<GridPriceQuote> {
    agents::grid_price_quote(&state.grid_loads(), &scenario.grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn price_update_examples() {
        let mut s = TradeState::new(3, 2.0);
        s.lambda[1][2] = 9.62;
        s.lambda[2][1] = 9.62;
        s.p[1][2] = 0.05;
        s.p[2][1] = -0.05;
        close(update_prices(&s, 2.0).lambda[1][2], 9.62, 1e-15);
        s.lambda[1][2] = 10.0;
        s.p[2][1] = 0.05;
        let next = update_prices(&s, 2.0);
        close(next.lambda[1][2], 9.9, 1e-12);
        assert_eq!(next.lambda[2][1], next.lambda[1][2]);
        s.lambda[1][2] = 0.0;
        s.p[1][2] = -0.25;
        s.p[2][1] = -0.25;
        close(update_prices(&s, 2.0).lambda[1][2], 0.5, 1e-12);
    }

    #[test]
    fn residual_examples() {
        let mut s = TradeState::new(4, 1.0);
        s.p[1][2] = 0.1;
        s.p[2][1] = -0.1;
        let rep = residuals(&s, &s);
        assert!(rep.r.iter().chain(&rep.s).all(|&x| x == 0.0));
        let mut t = s.clone();
        t.p[2][1] = -0.08;
        let rep = residuals(&s, &t);
        close(rep.r[1], 4e-4, 1e-15);
        close(rep.s[2], 4e-4, 1e-15);
        assert_eq!(rep.s[1], 0.0);
    }

    #[test]
    fn rho_examples() {
        let b = [1e-4, 1e5];
        assert_eq!(balance_rho(1.0, 0.01, 1.0, b), 2.0);
        assert_eq!(balance_rho(0.3, 0.3, 1.0, b), 1.0);
        assert_eq!(balance_rho(1.0, 0.0, 1e5, b), 1e5);
        assert_eq!(balance_rho(0.0, 1.0, 1e-4, b), 1e-4);
        assert_eq!(balance_rho(0.01, 1.0, 1.0, b), 0.5);
    }

    #[test]
    fn pure_consumer_buys_from_grid() {
        let s = Scenario::ieee15_case2();
        let mut state = TradeState::new(s.n_bus(), 1.0);
        for j in s.prosumer_ids() {
            state.lambda[1][j] = 26.0;
            state.lambda[j][1] = 26.0;
        }
        let eta = vec![vec![0.0; s.n_bus()]; s.n_bus()];
        let row = local_step(&s, 1, &state, 0.0, &eta).unwrap();
        assert!(row.p.iter().all(|x| x.abs() < 1e-6));
        close(row.d, 0.0201, 1e-6);
        close(row.p_grid, -0.0201, 1e-6);
    }

    #[test]
    fn priced_out_consumer_stays_idle() {
        let mut s = Scenario::ieee15_case2();
        s.prosumer_mut(2).beta = 20.0;
        let mut state = TradeState::new(s.n_bus(), 1.0);
        for j in s.prosumer_ids() {
            state.lambda[2][j] = 26.0;
            state.lambda[j][2] = 26.0;
        }
        let eta = vec![vec![0.0; s.n_bus()]; s.n_bus()];
        let row = local_step(&s, 2, &state, 0.0, &eta).unwrap();
        assert!(row.d.abs() < 1e-7 && row.p_grid.abs() < 1e-7);
    }

    #[test]
    fn seller_hits_capacity_at_high_price() {
        let s = Scenario::ieee15();
        let mut state = TradeState::new(s.n_bus(), 1.0);
        for j in s.prosumer_ids() {
            state.lambda[12][j] = 9.62;
            state.lambda[j][12] = 9.62;
        }
        let eta = vec![vec![0.0; s.n_bus()]; s.n_bus()];
        let row = local_step(&s, 12, &state, 0.0, &eta).unwrap();
        close(row.g, 0.4, 1e-6);
    }
}

//! Centralized reference programs: social welfare maximization with or
//! without network constraints, loss-minimizing OPF for a fixed dispatch,
//! and a fixed-price comparison market.

use thiserror::Error;

use crate::agents::{self, saturation};
use crate::convex::{self, AffineExpr, ConicProgram, KernelError, SocBlock, SolveStatus};
use crate::opf::{loss_price, Dispatch, NetworkPoint};
use crate::scenario::{Scenario, Scheme, SLACK};

/// Tolerance of the monolithic solves.
pub const ORACLE_TOL: f64 = 1e-10;

const INF: f64 = f64::INFINITY;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("centralized program is infeasible")]
    Infeasible,
    #[error("centralized program did not converge (kkt residual {0:.3e})")]
    NotConverged(f64),
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// Σ W_i over prosumers with grid payments deducted; for the OPF
    /// program this is minus the loss-compensation cost.
    pub social_welfare: f64,
    /// Objective of the conic program as solved (a minimization).
    pub objective: f64,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
    /// Signed grid exchange `p_i0` per bus (positive = selling to the grid).
    pub p_grid: Vec<f64>,
    /// Total bought from the grid, `Σ max(p_0i, 0)`.
    pub grid_purchase: f64,
    /// What prosumers pay the grid under the scheme in force.
    pub grid_payment: f64,
    pub network: Option<NetworkPoint>,
    /// Loss-compensation generation per bus (slack at index 0).
    pub g_loss: Vec<f64>,
    pub status: SolveStatus,
}

impl OracleSolution {
    pub fn consumer_utility(&self, scenario: &Scenario) -> f64 {
        scenario
            .prosumer_ids()
            .map(|i| agents::consumer_utility(self.d[i], scenario.prosumer(i)).unwrap_or(0.0))
            .sum()
    }

    pub fn producer_cost(&self, scenario: &Scenario) -> f64 {
        scenario
            .prosumer_ids()
            .map(|i| agents::cost_curve(self.g[i], scenario.prosumer(i)))
            .sum()
    }

    /// Consumption served by community generation (a prosumer's own
    /// included), i.e. demand not bought from the grid.
    pub fn p2p_energy(&self) -> f64 {
        p2p_energy(&self.d, &self.p_grid)
    }

    pub fn total_losses(&self, scenario: &Scenario) -> f64 {
        self.network.as_ref().map_or(0.0, |n| n.losses(scenario))
    }
}

pub(crate) fn p2p_energy(d: &[f64], p_grid: &[f64]) -> f64 {
    d.iter()
        .zip(p_grid)
        .skip(1)
        .map(|(d, p)| (d - (-p).max(0.0)).max(0.0))
        .sum()
}

struct MarketVars {
    d: Vec<usize>,
    g: Vec<usize>,
    /// Physical generation including loss compensation (network model only).
    g_hat: Vec<usize>,
    buy: Vec<usize>,
    sell: Vec<usize>,
    slack_loss: Option<usize>,
}

/// The economic part of P2 as a minimization of minus welfare: bounds,
/// the community energy balance and the no-resale rows `buy ≤ d`.
fn market_program(
    scenario: &Scenario,
    scheme: Scheme,
    buy_price: Option<f64>,
    physical: bool,
) -> (ConicProgram, MarketVars) {
    let n = scenario.n_bus();
    let grid = &scenario.grid;
    let mut prog = ConicProgram::new(0);
    let mut mv = MarketVars {
        d: vec![usize::MAX; n],
        g: vec![usize::MAX; n],
        g_hat: vec![usize::MAX; n],
        buy: vec![usize::MAX; n],
        sell: vec![usize::MAX; n],
        slack_loss: None,
    };
    let mut balance = Vec::new();
    for i in scenario.prosumer_ids() {
        let p = scenario.prosumer(i);
        let d = prog.add_var(p.d_p_min, p.d_p_max.min(saturation(p)).max(p.d_p_min));
        let g = prog.add_var(p.g_p_min, p.g_p_max);
        let buy = prog.add_var(0.0, INF);
        let sell = prog.add_var(0.0, INF);
        let spare = prog.add_var(0.0, INF);
        prog.add_quadratic(d, d, p.alpha).add_linear(d, -p.beta);
        prog.add_linear(sell, -grid.lambda_sell);
        prog.add_equality(vec![(buy, 1.0), (d, -1.0), (spare, 1.0)], 0.0);
        let cost_var = if physical {
            let gh = prog.add_var(p.g_p_min, p.g_p_max);
            let extra = prog.add_var(0.0, INF);
            prog.add_equality(vec![(gh, 1.0), (g, -1.0), (extra, -1.0)], 0.0);
            mv.g_hat[i] = gh;
            gh
        } else {
            g
        };
        prog.add_quadratic(cost_var, cost_var, p.a)
            .add_linear(cost_var, p.b);
        match (buy_price, scheme) {
            (Some(price), _) => {
                prog.add_linear(buy, price);
            }
            (None, Scheme::Dps) => {
                prog.add_quadratic(buy, buy, grid.a0)
                    .add_linear(buy, grid.b0);
            }
            (None, Scheme::Ups) => {}
        }
        balance.extend([(g, 1.0), (d, -1.0), (buy, 1.0), (sell, -1.0)]);
        mv.d[i] = d;
        mv.g[i] = g;
        mv.buy[i] = buy;
        mv.sell[i] = sell;
    }
    prog.add_equality(balance, 0.0);
    if physical {
        mv.slack_loss = Some(prog.add_var(0.0, INF));
    }
    match (buy_price, scheme, mv.slack_loss) {
        (None, Scheme::Ups, sl) => {
            // UPS bills the aggregate, so loss energy bought at the slack
            // rides on the same quadratic.
            let pt = prog.add_var(0.0, INF);
            let mut row: Vec<(usize, f64)> =
                scenario.prosumer_ids().map(|i| (mv.buy[i], 1.0)).collect();
            if let Some(sl) = sl {
                row.push((sl, 1.0));
            }
            row.push((pt, -1.0));
            prog.add_equality(row, 0.0);
            prog.add_quadratic(pt, pt, grid.a0).add_linear(pt, grid.b0);
        }
        (_, _, Some(sl)) => {
            prog.add_quadratic(sl, sl, grid.a0).add_linear(sl, grid.b0);
        }
        _ => {}
    }
    (prog, mv)
}

fn check(sol: &convex::ConicSolution) -> Result<(), OracleError> {
    match sol.status {
        SolveStatus::Optimal => Ok(()),
        SolveStatus::Infeasible => Err(OracleError::Infeasible),
        SolveStatus::IterLimit => Err(OracleError::NotConverged(sol.kkt_residual)),
    }
}

fn market_solution(
    scenario: &Scenario,
    scheme: Scheme,
    buy_price: Option<f64>,
    mv: &MarketVars,
    sol: &convex::ConicSolution,
) -> OracleSolution {
    let n = scenario.n_bus();
    let x = &sol.x;
    let mut d = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut p_grid = vec![0.0; n];
    for i in scenario.prosumer_ids() {
        d[i] = x[mv.d[i]].max(0.0);
        g[i] = x[mv.g[i]].max(0.0);
        p_grid[i] = x[mv.sell[i]].max(0.0) - x[mv.buy[i]].max(0.0);
    }
    let loads: Vec<f64> = p_grid.iter().map(|p| -p).collect();
    let purchase: f64 = loads.iter().map(|p| p.max(0.0)).sum();
    let payment = match buy_price {
        Some(price) => price * purchase,
        None => agents::grid_payments(&loads, &scenario.grid, scheme),
    };
    let mut welfare = -payment;
    for i in scenario.prosumer_ids() {
        let p = scenario.prosumer(i);
        welfare += agents::consumer_utility(d[i], p).unwrap_or(0.0) - agents::cost_curve(g[i], p)
            + scenario.grid.lambda_sell * p_grid[i].max(0.0);
    }
    OracleSolution {
        social_welfare: welfare,
        objective: sol.objective,
        d,
        g,
        p_grid,
        grid_purchase: purchase,
        grid_payment: payment,
        network: None,
        g_loss: vec![0.0; n],
        status: sol.status,
    }
}

/// Social welfare maximization. With `with_capacity`, the branch-flow
/// model, voltage limits and line capacities are enforced as well, and
/// line losses must be covered by extra generation.
pub fn solve_centralized_p2(
    scenario: &Scenario,
    scheme: Scheme,
    with_capacity: bool,
) -> Result<OracleSolution, OracleError> {
    let (mut prog, mv) = market_program(scenario, scheme, None, with_capacity);
    let nv = with_capacity.then(|| {
        let nv = add_network(scenario, &mut prog, true);
        let sl = mv.slack_loss.expect("network model");
        add_balances(scenario, &mut prog, &nv, |i| {
            if i == SLACK {
                let mut row = vec![(sl, 1.0)];
                for k in scenario.prosumer_ids() {
                    row.push((mv.buy[k], 1.0));
                    row.push((mv.sell[k], -1.0));
                }
                (row, 0.0)
            } else {
                (vec![(mv.g_hat[i], 1.0), (mv.d[i], -1.0)], 0.0)
            }
        });
        nv
    });
    let sol = convex::solve(&prog, ORACLE_TOL, None)?;
    check(&sol)?;
    let mut out = market_solution(scenario, scheme, None, &mv, &sol);
    if let Some(nv) = nv {
        out.network = Some(network_point(scenario, &nv, &sol.x));
        out.g_loss[SLACK] = sol.x[mv.slack_loss.expect("network model")].max(0.0);
        for i in scenario.prosumer_ids() {
            out.g_loss[i] = (sol.x[mv.g_hat[i]] - sol.x[mv.g[i]]).max(0.0);
        }
    }
    Ok(out)
}

/// The comparison market in which the grid sells at a constant price.
pub fn solve_fixed_price_baseline(
    scenario: &Scenario,
    buy_price: f64,
) -> Result<OracleSolution, OracleError> {
    let scheme = scenario.grid.scheme;
    let (prog, mv) = market_program(scenario, scheme, Some(buy_price), false);
    let sol = convex::solve(&prog, ORACLE_TOL, None)?;
    check(&sol)?;
    Ok(market_solution(
        scenario,
        scheme,
        Some(buy_price),
        &mv,
        &sol,
    ))
}

/// Loss-minimizing power flow for a fixed dispatch, as one program.
pub fn solve_centralized_opf(
    scenario: &Scenario,
    dispatch: &Dispatch,
) -> Result<OracleSolution, OracleError> {
    let n = scenario.n_bus();
    let mut prog = ConicProgram::new(0);
    let mut gl = vec![usize::MAX; n];
    let purchase = dispatch.grid_purchase();
    let sl = prog.add_var(0.0, INF);
    let (lin, quad) = loss_price(scenario, None, 0.0, purchase);
    prog.add_quadratic(sl, sl, quad).add_linear(sl, lin);
    gl[SLACK] = sl;
    for i in scenario.prosumer_ids() {
        let p = scenario.prosumer(i);
        let spare = (p.g_p_max - dispatch.g[i]).max(0.0);
        gl[i] = prog.add_var(0.0, spare);
        let (lin, quad) = loss_price(scenario, Some(i), dispatch.g[i], purchase);
        prog.add_quadratic(gl[i], gl[i], quad)
            .add_linear(gl[i], lin);
    }
    let nv = add_network(scenario, &mut prog, false);
    add_balances(scenario, &mut prog, &nv, |i| {
        if i == SLACK {
            (vec![(sl, 1.0)], -dispatch.p_grid.iter().sum::<f64>())
        } else {
            (vec![(gl[i], 1.0)], dispatch.g[i] - dispatch.d[i])
        }
    });
    let sol = convex::solve(&prog, ORACLE_TOL, None)?;
    check(&sol)?;
    let g_loss: Vec<f64> = gl.iter().map(|&k| sol.x[k].max(0.0)).collect();
    Ok(OracleSolution {
        social_welfare: -sol.objective,
        objective: sol.objective,
        d: dispatch.d.clone(),
        g: dispatch.g.clone(),
        p_grid: dispatch.p_grid.clone(),
        grid_purchase: purchase,
        grid_payment: agents::grid_payments(
            &dispatch.p_grid.iter().map(|p| -p).collect::<Vec<_>>(),
            &scenario.grid,
            scenario.grid.scheme,
        ),
        network: Some(network_point(scenario, &nv, &sol.x)),
        g_loss,
        status: sol.status,
    })
}

/// Column indices of the branch-flow variables, per bus (line = child bus).
pub(crate) struct NetVars {
    pub fp: Vec<usize>,
    pub fq: Vec<usize>,
    pub l: Vec<usize>,
    pub v: Vec<usize>,
    pub gq: Vec<usize>,
    pub q0: usize,
}

/// Branch-flow variables with bounds, voltage-drop rows and the SOC
/// relaxation. Nodal balances are added separately.
pub(crate) fn add_network(scenario: &Scenario, prog: &mut ConicProgram, capacity: bool) -> NetVars {
    let n = scenario.n_bus();
    let mut nv = NetVars {
        fp: vec![usize::MAX; n],
        fq: vec![usize::MAX; n],
        l: vec![usize::MAX; n],
        v: vec![usize::MAX; n],
        gq: vec![usize::MAX; n],
        q0: prog.add_var(-INF, INF),
    };
    nv.v[SLACK] = prog.add_var(1.0, 1.0);
    for i in scenario.prosumer_ids() {
        nv.v[i] = prog.add_var(scenario.voltage.v_min, scenario.voltage.v_max);
        nv.fp[i] = prog.add_var(-INF, INF);
        nv.fq[i] = prog.add_var(-INF, INF);
        nv.l[i] = prog.add_var(0.0, INF);
        nv.gq[i] = prog.add_var(0.0, scenario.prosumer(i).g_q_max);
    }
    for line in scenario.lines() {
        let i = line.id;
        let parent = scenario.parent(i).expect("line has a parent");
        prog.add_equality(
            vec![
                (nv.v[i], 1.0),
                (nv.fp[i], 2.0 * line.r),
                (nv.fq[i], 2.0 * line.x),
                (nv.l[i], line.r * line.r + line.x * line.x),
                (nv.v[parent], -1.0),
            ],
            0.0,
        );
        prog.add_soc(branch_cone(nv.fp[i], nv.fq[i], nv.v[i], nv.l[i]));
        if capacity {
            prog.add_soc(SocBlock::new(
                vec![AffineExpr::var(nv.fp[i]), AffineExpr::var(nv.fq[i])],
                AffineExpr::constant(line.s_max),
            ));
        }
    }
    nv
}

/// `f_p² + f_q² ≤ v·l` written as `‖(2f_p, 2f_q, v − l)‖ ≤ v + l`.
pub(crate) fn branch_cone(fp: usize, fq: usize, v: usize, l: usize) -> SocBlock {
    SocBlock::new(
        vec![
            AffineExpr::constant(0.0).plus(fp, 2.0),
            AffineExpr::constant(0.0).plus(fq, 2.0),
            AffineExpr::var(v).plus(l, -1.0),
        ],
        AffineExpr::var(v).plus(l, 1.0),
    )
}

/// Active and reactive nodal balances. `active(i)` gives the variable
/// terms and the constant of the net active injection at bus `i`.
pub(crate) fn add_balances(
    scenario: &Scenario,
    prog: &mut ConicProgram,
    nv: &NetVars,
    active: impl Fn(usize) -> (Vec<(usize, f64)>, f64),
) {
    for i in 0..scenario.n_bus() {
        let (mut row, constant) = active(i);
        let (mut qrow, qconst) = if i == SLACK {
            (vec![(nv.q0, 1.0)], 0.0)
        } else {
            row.push((nv.fp[i], 1.0));
            (
                vec![(nv.fq[i], 1.0), (nv.gq[i], 1.0)],
                scenario.prosumer(i).d_q,
            )
        };
        for &k in scenario.children(i) {
            let line = scenario.line(k).expect("child line");
            row.extend([(nv.fp[k], -1.0), (nv.l[k], -line.r)]);
            qrow.extend([(nv.fq[k], -1.0), (nv.l[k], -line.x)]);
        }
        prog.add_equality(row, -constant);
        prog.add_equality(qrow, qconst);
    }
}

pub(crate) fn network_point(scenario: &Scenario, nv: &NetVars, x: &[f64]) -> NetworkPoint {
    let pick = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .map(|&k| if k == usize::MAX { 0.0 } else { x[k] })
            .collect()
    };
    let mut point = NetworkPoint {
        v: pick(&nv.v),
        fp: pick(&nv.fp),
        fq: pick(&nv.fq),
        l: pick(&nv.l),
        gq: pick(&nv.gq),
        q0: x[nv.q0],
    };
    point.v[SLACK] = 1.0;
    let _ = scenario;
    point
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_market_has_zero_welfare() {
        let mut s = Scenario::ieee15();
        for i in s.prosumer_ids() {
            let p = s.prosumer_mut(i);
            p.d_p_max = 0.0;
            p.g_p_max = 0.0;
        }
        let sol = solve_centralized_p2(&s, Scheme::Ups, false).unwrap();
        assert!(sol.social_welfare.abs() < 1e-8);
        let sol = solve_centralized_p2(&s, Scheme::Dps, false).unwrap();
        assert!(sol.social_welfare.abs() < 1e-8);
    }

    #[test]
    fn baseline_price_above_all_valuations_buys_nothing() {
        let s = Scenario::ieee15_case2();
        let sol = solve_fixed_price_baseline(&s, 100.0).unwrap();
        assert!(sol.grid_purchase < 1e-8);
    }

    #[test]
    fn zero_dispatch_has_zero_loss_cost() {
        let mut s = Scenario::ieee15();
        for i in s.prosumer_ids() {
            s.prosumer_mut(i).d_q = 0.0;
        }
        let sol = solve_centralized_opf(&s, &Dispatch::zero(s.n_bus())).unwrap();
        assert!(sol.objective.abs() < 1e-8, "{}", sol.objective);
        assert!(sol.total_losses(&s) < 1e-8);
    }

    #[test]
    fn frozen_market_optima() {
        let s = Scenario::ieee15();
        let sol = solve_centralized_p2(&s, Scheme::Ups, false).unwrap();
        assert!(
            (sol.social_welfare - 22.182647).abs() < 1e-5,
            "{}",
            sol.social_welfare
        );
        assert!((sol.p2p_energy() - 1.2529).abs() < 1e-6);
        assert!(sol.grid_purchase < 1e-8);

        let mut s = Scenario::ieee15_case2();
        let ups = solve_centralized_p2(&s, Scheme::Ups, false).unwrap();
        assert!(
            (ups.social_welfare - 6.762839).abs() < 1e-5,
            "{}",
            ups.social_welfare
        );
        s.grid.scheme = Scheme::Dps;
        let dps = solve_centralized_p2(&s, Scheme::Dps, false).unwrap();
        assert!(
            (dps.social_welfare - 6.824713).abs() < 1e-5,
            "{}",
            dps.social_welfare
        );
        assert!(dps.grid_purchase > ups.grid_purchase);
    }

    #[test]
    fn frozen_fixed_price_baseline() {
        let s = Scenario::ieee15_case2();
        let sol = solve_fixed_price_baseline(&s, 25.0).unwrap();
        assert!(
            (sol.grid_purchase - 0.51025).abs() < 1e-5,
            "{}",
            sol.grid_purchase
        );
        assert!(
            (sol.social_welfare - 6.87474).abs() < 1e-5,
            "{}",
            sol.social_welfare
        );
        // At a flat price the payment is price times quantity.
        assert!((sol.grid_payment - 25.0 * sol.grid_purchase).abs() < 1e-9);
    }
}

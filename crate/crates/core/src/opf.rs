//! Consensus-ADMM optimal power flow on the relaxed branch-flow model.
//!
//! Each bus is a zone that owns its upstream line (flows, squared current,
//! its own squared voltage, reactive output and loss compensation). Zones
//! keep a full-length copy of the shared vector
//!
//! ```text
//!     ϑ = (v_0 … v_{n-1},  P_0 … P_{n-1},  Q_0 … Q_{n-1})
//! ```
//!
//! where `P_k = f_k + r_k·l_k` and `Q_k = fq_k + x_k·l_k` are the
//! sending-end flows of line `k`. A zone's constraints touch its own
//! voltage, its parent's voltage, its own sending-end flows and those of
//! its children; every other entry simply tracks the consensus.

use log::debug;
use rayon::prelude::*;
use thiserror::Error;

use crate::agents;
use crate::convex::{self, ConicProgram, KernelError, SolveStatus};
use crate::matching::balance_rho;
use crate::scenario::{Scenario, SLACK};

const INF: f64 = f64::INFINITY;
/// Zone programs have flat directions; a tight tolerance pins them down.
const ZONE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("dispatch is not balanced: community surplus {0:.3e}")]
    Unbalanced(f64),
    #[error("zone {node}: {source}")]
    Kernel { node: usize, source: KernelError },
    #[error("zone {node}: local problem is infeasible")]
    Infeasible { node: usize },
    #[error("loss compensation {g_loss} at bus {node} exceeds spare capacity")]
    Capacity { node: usize, g_loss: f64 },
}

/// Energy quantities handed from the virtual layer, per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub d: Vec<f64>,
    pub g: Vec<f64>,
    /// Signed grid exchange `p_i0` (positive = selling to the grid).
    pub p_grid: Vec<f64>,
}

impl Dispatch {
    pub fn zero(n: usize) -> Self {
        Self {
            d: vec![0.0; n],
            g: vec![0.0; n],
            p_grid: vec![0.0; n],
        }
    }

    /// `Σ max(p_0i, 0)`.
    pub fn grid_purchase(&self) -> f64 {
        self.p_grid.iter().map(|p| (-p).max(0.0)).sum()
    }

    /// Net energy the slack bus must deliver before losses.
    pub fn slack_import(&self) -> f64 {
        -self.p_grid.iter().sum::<f64>()
    }

    /// Σ (g − d) − Σ p_i0; zero when all bilateral trades net out.
    pub fn imbalance(&self) -> f64 {
        (0..self.d.len())
            .map(|i| self.g[i] - self.d[i] - self.p_grid[i])
            .sum()
    }
}

/// Branch-flow quantities per bus; line quantities sit at the child bus.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPoint {
    pub v: Vec<f64>,
    pub fp: Vec<f64>,
    pub fq: Vec<f64>,
    pub l: Vec<f64>,
    pub gq: Vec<f64>,
    pub q0: f64,
}

impl NetworkPoint {
    pub fn losses(&self, scenario: &Scenario) -> f64 {
        scenario.lines().map(|line| line.r * self.l[line.id]).sum()
    }

    pub fn apparent(&self, line: usize) -> f64 {
        self.fp[line].hypot(self.fq[line])
    }

    /// Largest `|l − (f_p² + f_q²)/v|` over all lines.
    pub fn cone_gap(&self, scenario: &Scenario) -> f64 {
        scenario
            .lines()
            .map(|line| {
                let i = line.id;
                (self.l[i] - (self.fp[i].powi(2) + self.fq[i].powi(2)) / self.v[i]).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct PhysicalSolution {
    pub network: NetworkPoint,
    /// Loss compensation per bus; index 0 is the slack.
    pub g_loss: Vec<f64>,
    pub total_losses: f64,
    pub loss_cost: f64,
    /// Apparent flow per line (index = child bus; 0 unused).
    pub s: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gap: f64,
    /// Cone gap of the zones' own line variables before the final sweep.
    pub relaxation_gap: f64,
    pub state: OpfState,
}

impl PhysicalSolution {
    pub fn voltage_magnitudes(&self) -> Vec<f64> {
        self.network.v.iter().map(|v| v.sqrt()).collect()
    }

    /// Largest active or reactive nodal mismatch.
    pub fn max_nodal_mismatch(&self, scenario: &Scenario, dispatch: &Dispatch) -> f64 {
        nodal_mismatch(scenario, dispatch, &self.network, &self.g_loss)
    }
}

/// Linear and quadratic coefficients of the loss-compensation cost at a
/// bus (`None` = slack), given its dispatched generation.
pub fn loss_price(scenario: &Scenario, node: Option<usize>, g: f64, purchase: f64) -> (f64, f64) {
    match node {
        None => (
            scenario.grid.b0 + 2.0 * scenario.grid.a0 * purchase,
            scenario.grid.a0,
        ),
        Some(i) => {
            let p = scenario.prosumer(i);
            (p.b + 2.0 * p.a * g, p.a)
        }
    }
}

/// `C(g + g_loss) − C(g)`.
pub fn loss_cost(
    g_loss: f64,
    g: f64,
    params: &crate::scenario::ProsumerParams,
) -> Result<f64, agents::AgentError> {
    Ok(agents::producer_cost(g + g_loss, params)? - agents::cost_curve(g, params))
}

/// Index helpers into the shared vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
}

impl Layout {
    fn v(&self, i: usize) -> usize {
        i
    }
    fn p(&self, i: usize) -> usize {
        self.n + i
    }
    fn q(&self, i: usize) -> usize {
        2 * self.n + i
    }
    fn len(&self) -> usize {
        3 * self.n
    }
}

#[derive(Debug, Clone)]
pub struct ZoneState {
    pub node: usize,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub g_loss: f64,
    pub l: f64,
    pub f_p: f64,
    pub f_q: f64,
    pub g_q: f64,
    pub v: f64,
}

impl ZoneState {
    fn new(node: usize, theta: &[f64]) -> Self {
        Self {
            node,
            theta: theta.to_vec(),
            mu: vec![0.0; theta.len()],
            g_loss: 0.0,
            l: 0.0,
            f_p: 0.0,
            f_q: 0.0,
            g_q: 0.0,
            v: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusState {
    pub theta_bar: Vec<f64>,
    pub gap: f64,
}

/// Adds `weight·(Σ c_k x_k + c0 − target)²` to `prog`.
fn add_square(prog: &mut ConicProgram, terms: &[(usize, f64)], c0: f64, target: f64, weight: f64) {
    for (a, &(i, ci)) in terms.iter().enumerate() {
        prog.add_quadratic(i, i, weight * ci * ci);
        for &(j, cj) in &terms[a + 1..] {
            prog.add_quadratic(i, j, 2.0 * weight * ci * cj);
        }
        prog.add_linear(i, 2.0 * weight * (c0 - target) * ci);
    }
    prog.add_constant(weight * (c0 - target).powi(2));
}

/// One zone's local problem.
pub fn zone_step(
    scenario: &Scenario,
    dispatch: &Dispatch,
    zone: &ZoneState,
    consensus: &ConsensusState,
    rho: f64,
) -> Result<ZoneState, OpfError> {
    let n = scenario.n_bus();
    let lay = Layout { n };
    let i = zone.node;
    let bar = &consensus.theta_bar;
    let purchase = dispatch.grid_purchase();

    let mut prog = ConicProgram::new(0);
    // (entry of ϑ, terms, constant) for every bound entry
    let mut bound: Vec<(usize, Vec<(usize, f64)>, f64)> = Vec::new();

    let mut child_p = Vec::new();
    let mut child_q = Vec::new();
    for &k in scenario.children(i) {
        let pk = prog.add_var(-INF, INF);
        let qk = prog.add_var(-INF, INF);
        bound.push((lay.p(k), vec![(pk, 1.0)], 0.0));
        bound.push((lay.q(k), vec![(qk, 1.0)], 0.0));
        child_p.push((pk, -1.0));
        child_q.push((qk, -1.0));
    }

    let local = if i == SLACK {
        let sl = prog.add_var(0.0, INF);
        let q0 = prog.add_var(-INF, INF);
        let (lin, quad) = loss_price(scenario, None, 0.0, purchase);
        prog.add_quadratic(sl, sl, quad).add_linear(sl, lin);
        let mut row = vec![(sl, 1.0)];
        row.extend_from_slice(&child_p);
        prog.add_equality(row, -dispatch.slack_import());
        let mut row = vec![(q0, 1.0)];
        row.extend_from_slice(&child_q);
        prog.add_equality(row, 0.0);
        bound.push((lay.v(SLACK), Vec::new(), 1.0));
        ZoneVars::Slack { sl, q0 }
    } else {
        let p = scenario.prosumer(i);
        let line = scenario.line(i).expect("non-root bus has a line");
        let parent = scenario.parent(i).expect("non-root bus has a parent");
        let (vmin, vmax) = (scenario.voltage.v_min, scenario.voltage.v_max);
        let v = prog.add_var(vmin, vmax);
        let vp = if parent == SLACK {
            prog.add_var(1.0, 1.0)
        } else {
            prog.add_var(vmin, vmax)
        };
        let fp = prog.add_var(-INF, INF);
        let fq = prog.add_var(-INF, INF);
        let l = prog.add_var(0.0, INF);
        let gl = prog.add_var(0.0, (p.g_p_max - dispatch.g[i]).max(0.0));
        let gq = prog.add_var(0.0, p.g_q_max);
        let (lin, quad) = loss_price(scenario, Some(i), dispatch.g[i], purchase);
        prog.add_quadratic(gl, gl, quad).add_linear(gl, lin);
        prog.add_equality(
            vec![
                (v, 1.0),
                (fp, 2.0 * line.r),
                (fq, 2.0 * line.x),
                (l, line.r * line.r + line.x * line.x),
                (vp, -1.0),
            ],
            0.0,
        );
        prog.add_soc(crate::oracle::branch_cone(fp, fq, v, l));
        let mut row = vec![(fp, 1.0), (gl, 1.0)];
        row.extend_from_slice(&child_p);
        prog.add_equality(row, dispatch.d[i] - dispatch.g[i]);
        let mut row = vec![(fq, 1.0), (gq, 1.0)];
        row.extend_from_slice(&child_q);
        prog.add_equality(row, p.d_q);
        bound.push((lay.v(i), vec![(v, 1.0)], 0.0));
        bound.push((lay.v(parent), vec![(vp, 1.0)], 0.0));
        bound.push((lay.p(i), vec![(fp, 1.0), (l, line.r)], 0.0));
        bound.push((lay.q(i), vec![(fq, 1.0), (l, line.x)], 0.0));
        ZoneVars::Bus {
            v,
            fp,
            fq,
            l,
            gl,
            gq,
        }
    };

    // ρ/2 (ϑ_e − ϑ̄_e − μ_e/ρ)² for every bound entry
    for (e, terms, c0) in &bound {
        if !terms.is_empty() {
            add_square(
                &mut prog,
                terms,
                *c0,
                bar[*e] + zone.mu[*e] / rho,
                0.5 * rho,
            );
        }
    }

    let sol = convex::solve(&prog, ZONE_TOL, None)
        .map_err(|source| OpfError::Kernel { node: i, source })?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(OpfError::Infeasible { node: i }),
        SolveStatus::IterLimit => {
            debug!("zone {i}: kernel stopped at kkt {:.2e}", sol.kkt_residual);
        }
    }
    let x = &sol.x;

    let mut next = zone.clone();
    for e in 0..lay.len() {
        next.theta[e] = bar[e] + zone.mu[e] / rho;
    }
    for (e, terms, c0) in &bound {
        next.theta[*e] = terms.iter().fold(*c0, |acc, &(k, c)| acc + c * x[k]);
    }
    match local {
        ZoneVars::Slack { sl, q0 } => {
            next.g_loss = x[sl];
            next.g_q = x[q0];
            next.v = 1.0;
        }
        ZoneVars::Bus {
            v,
            fp,
            fq,
            l,
            gl,
            gq,
        } => {
            next.v = x[v];
            next.f_p = x[fp];
            next.f_q = x[fq];
            next.l = x[l];
            next.g_loss = x[gl];
            next.g_q = x[gq];
        }
    }
    Ok(next)
}

enum ZoneVars {
    Slack {
        sl: usize,
        q0: usize,
    },
    Bus {
        v: usize,
        fp: usize,
        fq: usize,
        l: usize,
        gl: usize,
        gq: usize,
    },
}

/// `ϑ̄ = mean_i(ϑ_i − μ_i/ρ)`, the minimizer of the augmented Lagrangian
/// in `ϑ̄`, with the slack voltage pinned to 1.
pub fn consensus_step(zones: &[ZoneState], rho: f64) -> ConsensusState {
    let len = zones[0].theta.len();
    let m = zones.len() as f64;
    let mut bar = vec![0.0; len];
    for z in zones {
        for e in 0..len {
            bar[e] += (z.theta[e] - z.mu[e] / rho) / m;
        }
    }
    bar[SLACK] = 1.0;
    let gap = consensus_gap(zones, &bar);
    ConsensusState {
        theta_bar: bar,
        gap,
    }
}

fn consensus_gap(zones: &[ZoneState], bar: &[f64]) -> f64 {
    zones
        .iter()
        .map(|z| {
            z.theta
                .iter()
                .zip(bar)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// `μ_i ← μ_i + ρ(ϑ̄ − ϑ_i)`.
pub fn dual_step(zone: &ZoneState, consensus: &ConsensusState, rho: f64) -> ZoneState {
    let mut next = zone.clone();
    for (e, mu) in next.mu.iter_mut().enumerate() {
        *mu += rho * (consensus.theta_bar[e] - zone.theta[e]);
    }
    next
}

#[derive(Debug, Clone, Copy)]
pub struct OpfOptions {
    pub rho_init: f64,
    pub rho_bounds: [f64; 2],
    pub eps: f64,
    pub max_iters: usize,
}

impl OpfOptions {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self {
            rho_init: scenario.algo.rho_init,
            rho_bounds: scenario.algo.rho_bounds,
            eps: scenario.algo.eps_opf,
            max_iters: scenario.algo.max_inner_iters,
        }
    }
}

/// One row of the optional per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpfTraceRow {
    pub iter: usize,
    pub node: usize,
    pub gap: f64,
    pub g_loss: f64,
}

/// Iterate kept for warm-starting a later run on a nearby dispatch.
#[derive(Debug, Clone)]
pub struct OpfState {
    pub zones: Vec<ZoneState>,
    pub consensus: ConsensusState,
    pub rho: f64,
}

pub fn run_opf(scenario: &Scenario, dispatch: &Dispatch) -> Result<PhysicalSolution, OpfError> {
    run_opf_with(
        scenario,
        dispatch,
        &OpfOptions::from_scenario(scenario),
        None,
        None,
    )
}

pub fn run_opf_with(
    scenario: &Scenario,
    dispatch: &Dispatch,
    opts: &OpfOptions,
    start: Option<&OpfState>,
    mut trace: Option<&mut Vec<OpfTraceRow>>,
) -> Result<PhysicalSolution, OpfError> {
    let imbalance = dispatch.imbalance();
    if imbalance.abs() > 1e-6 {
        return Err(OpfError::Unbalanced(imbalance));
    }
    let n = scenario.n_bus();
    let lay = Layout { n };
    let (mut zones, mut consensus, mut rho) = match start {
        Some(st) => (st.zones.clone(), st.consensus.clone(), st.rho),
        None => {
            // Flat start: unit voltages, no flow.
            let mut flat = vec![0.0; lay.len()];
            flat[..n].fill(1.0);
            let zones = (0..n).map(|i| ZoneState::new(i, &flat)).collect();
            let consensus = ConsensusState {
                theta_bar: flat,
                gap: INF,
            };
            (zones, consensus, opts.rho_init)
        }
    };
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=opts.max_iters {
        iterations = t;
        let next: Result<Vec<ZoneState>, OpfError> = zones
            .par_iter()
            .map(|z| zone_step(scenario, dispatch, z, &consensus, rho))
            .collect();
        let next = next?;
        let s: f64 = next
            .iter()
            .zip(&zones)
            .map(|(a, b)| {
                a.theta
                    .iter()
                    .zip(&b.theta)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        consensus = consensus_step(&next, rho);
        zones = next.iter().map(|z| dual_step(z, &consensus, rho)).collect();
        if let Some(rows) = trace.as_deref_mut() {
            for z in &zones {
                let gap = z
                    .theta
                    .iter()
                    .zip(&consensus.theta_bar)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                rows.push(OpfTraceRow {
                    iter: t,
                    node: z.node,
                    gap,
                    g_loss: z.g_loss,
                });
            }
        }
        if consensus.gap <= opts.eps && t > 1 {
            converged = true;
            break;
        }
        // Dual residual scaled by ρ so the two norms are comparable.
        let new_rho = balance_rho(consensus.gap, rho * s, rho, opts.rho_bounds);
        if t % 50 == 0 {
            debug!(
                "opf iter {t}: gap {:.3e} s {s:.3e} rho {rho:.3e}",
                consensus.gap
            );
        }
        if new_rho != rho {
            debug!("opf iter {t}: rho {rho:.3e} -> {new_rho:.3e}");
            rho = new_rho;
        }
    }
    debug!(
        "opf finished after {iterations} iterations, gap {:.3e}",
        consensus.gap
    );

    let relaxation_gap = zones
        .iter()
        .filter(|z| z.node != SLACK)
        .map(|z| (z.l - (z.f_p.powi(2) + z.f_q.powi(2)) / z.v).abs())
        .fold(0.0, f64::max);

    let mut g_loss: Vec<f64> = zones.iter().map(|z| z.g_loss).collect();
    let gq: Vec<f64> = zones
        .iter()
        .map(|z| if z.node == SLACK { 0.0 } else { z.g_q })
        .collect();
    for i in scenario.prosumer_ids() {
        let spare = (scenario.prosumer(i).g_p_max - dispatch.g[i]).max(0.0);
        if g_loss[i] > spare + 1e-6 {
            return Err(OpfError::Capacity {
                node: i,
                g_loss: g_loss[i],
            });
        }
        g_loss[i] = g_loss[i].clamp(0.0, spare);
    }
    let purchase = dispatch.grid_purchase();
    let spare: Vec<f64> = (0..n)
        .map(|i| {
            if i == SLACK {
                INF
            } else {
                (scenario.prosumer(i).g_p_max - dispatch.g[i]).max(0.0)
            }
        })
        .collect();
    let marginal = |i: usize, gl: f64| {
        let node = (i != SLACK).then_some(i);
        let g = if i == SLACK { 0.0 } else { dispatch.g[i] };
        let (lin, quad) = loss_price(scenario, node, g, purchase);
        lin + 2.0 * quad * gl
    };
    // The exact sweep needs slightly different losses than the zones
    // provided; the cheapest compensator with room covers the difference.
    g_loss[SLACK] = g_loss[SLACK].max(0.0);
    let mut network = sweep(scenario, dispatch, &g_loss, &gq, &zones);
    for _ in 0..50 {
        let mut delivered = 0.0;
        for &k in scenario.children(SLACK) {
            let line = scenario.line(k).expect("child line");
            delivered += network.fp[k] + line.r * network.l[k];
        }
        let extra = delivered - dispatch.slack_import() - g_loss[SLACK];
        if extra.abs() <= 1e-14 {
            break;
        }
        let pick = if extra > 0.0 {
            (0..n)
                .filter(|&i| g_loss[i] < spare[i])
                .min_by(|&a, &b| marginal(a, g_loss[a]).total_cmp(&marginal(b, g_loss[b])))
        } else {
            (0..n)
                .filter(|&i| g_loss[i] > 0.0)
                .max_by(|&a, &b| marginal(a, g_loss[a]).total_cmp(&marginal(b, g_loss[b])))
        };
        match pick {
            Some(k) if k != SLACK => {
                g_loss[k] = (g_loss[k] + extra).clamp(0.0, spare[k]);
                network = sweep(scenario, dispatch, &g_loss, &gq, &zones);
            }
            _ => {
                g_loss[SLACK] += extra;
                break;
            }
        }
    }

    let mut cost = 0.0;
    for i in 0..n {
        let node = (i != SLACK).then_some(i);
        let g = if i == SLACK { 0.0 } else { dispatch.g[i] };
        let (lin, quad) = loss_price(scenario, node, g, purchase);
        cost += lin * g_loss[i] + quad * g_loss[i] * g_loss[i];
    }
    let total_losses = network.losses(scenario);
    let s = (0..n)
        .map(|i| if i == SLACK { 0.0 } else { network.apparent(i) })
        .collect();
    Ok(PhysicalSolution {
        network,
        g_loss,
        total_losses,
        loss_cost: cost,
        s,
        converged,
        iterations,
        gap: consensus.gap,
        relaxation_gap,
        state: OpfState {
            zones,
            consensus,
            rho,
        },
    })
}

/// Exact branch-flow solution for fixed injections: backward sweep for
/// flows with `l = (f_p² + f_q²)/v`, forward sweep for voltages.
fn sweep(
    scenario: &Scenario,
    dispatch: &Dispatch,
    g_loss: &[f64],
    gq: &[f64],
    zones: &[ZoneState],
) -> NetworkPoint {
    let n = scenario.n_bus();
    let order = scenario.bfs_order();
    let mut v: Vec<f64> = zones.iter().map(|z| z.v).collect();
    v[SLACK] = 1.0;
    let mut fp = vec![0.0; n];
    let mut fq = vec![0.0; n];
    let mut l = vec![0.0; n];
    for _ in 0..200 {
        let before = fp.clone();
        for &i in order.iter().rev().filter(|&&i| i != SLACK) {
            let p = scenario.prosumer(i);
            let mut out_p = 0.0;
            let mut out_q = 0.0;
            for &k in scenario.children(i) {
                let line = scenario.line(k).expect("child line");
                out_p += fp[k] + line.r * l[k];
                out_q += fq[k] + line.x * l[k];
            }
            fp[i] = out_p - (dispatch.g[i] + g_loss[i] - dispatch.d[i]);
            fq[i] = out_q - (gq[i] - p.d_q);
            l[i] = (fp[i] * fp[i] + fq[i] * fq[i]) / v[i];
        }
        for &i in order.iter().filter(|&&i| i != SLACK) {
            let line = scenario.line(i).expect("line");
            let parent = scenario.parent(i).expect("parent");
            v[i] = v[parent]
                - 2.0 * (line.r * fp[i] + line.x * fq[i])
                - (line.r * line.r + line.x * line.x) * l[i];
        }
        let change = fp
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < 1e-15 {
            break;
        }
    }
    let mut q0 = 0.0;
    for &k in scenario.children(SLACK) {
        let line = scenario.line(k).expect("child line");
        q0 += fq[k] + line.x * l[k];
    }
    NetworkPoint {
        v,
        fp,
        fq,
        l,
        gq: gq.to_vec(),
        q0,
    }
}

/// Largest violation of the nodal active/reactive balances.
pub fn nodal_mismatch(
    scenario: &Scenario,
    dispatch: &Dispatch,
    net: &NetworkPoint,
    g_loss: &[f64],
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..scenario.n_bus() {
        let (mut p, mut q) = if i == SLACK {
            (dispatch.slack_import() + g_loss[SLACK], net.q0)
        } else {
            let pr = scenario.prosumer(i);
            (
                net.fp[i] + dispatch.g[i] + g_loss[i] - dispatch.d[i],
                net.fq[i] + net.gq[i] - pr.d_q,
            )
        };
        for &k in scenario.children(i) {
            let line = scenario.line(k).expect("child line");
            p -= net.fp[k] + line.r * net.l[k];
            q -= net.fq[k] + line.x * net.l[k];
        }
        worst = worst.max(p.abs()).max(q.abs());
    }
    for line in scenario.lines() {
        let i = line.id;
        let parent = scenario.parent(i).expect("parent");
        let drop = net.v[parent]
            - 2.0 * (line.r * net.fp[i] + line.x * net.fq[i])
            - (line.r * line.r + line.x * line.x) * net.l[i];
        worst = worst.max((net.v[i] - drop).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consensus_examples() {
        let mk = |theta: Vec<f64>, mu: Vec<f64>| ZoneState {
            mu,
            ..ZoneState::new(1, &theta)
        };
        let c = consensus_step(
            &[
                mk(vec![1.0, 0.9], vec![0.0; 2]),
                mk(vec![1.0, 1.1], vec![0.0; 2]),
            ],
            1.0,
        );
        assert!((c.theta_bar[1] - 1.0).abs() < 1e-15);
        let c = consensus_step(
            &[
                mk(vec![1.0, 0.95], vec![0.0, 0.02]),
                mk(vec![1.0, 0.95], vec![0.0, -0.02]),
            ],
            2.0,
        );
        assert!((c.theta_bar[1] - 0.95).abs() < 1e-15);
        assert_eq!(c.gap, 0.0);
    }

    #[test]
    fn dual_examples() {
        let z = ZoneState::new(1, &[1.0, 0.99]);
        let c = ConsensusState {
            theta_bar: vec![1.0, 1.0],
            gap: 0.0,
        };
        let once = dual_step(&z, &c, 2.0);
        assert!((once.mu[1] - 0.02).abs() < 1e-15);
        assert_eq!(once.mu[0], 0.0);
        let twice = dual_step(&once, &c, 2.0);
        assert!((twice.mu[1] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn loss_cost_examples() {
        let s = Scenario::ieee15();
        assert_eq!(loss_cost(0.0, 0.2, s.prosumer(1)).unwrap(), 0.0);
        // C(0.21) − C(0.2) = 9.34·0.01 + 0.57·(0.21² − 0.2²)
        let c = loss_cost(0.01, 0.2, s.prosumer(1)).unwrap();
        assert!((c - 0.095737).abs() < 1e-9, "{c}");
        assert!(loss_cost(0.3, 0.2, s.prosumer(1)).is_err());
        let (lin, quad) = loss_price(&s, None, 0.0, 0.3);
        assert!((lin - 25.6).abs() < 1e-12 && quad == 1.0);
    }

    #[test]
    fn leaf_zone_without_injection_stays_flat() {
        let mut s = Scenario::ieee15();
        s.prosumer_mut(14).d_q = 0.0;
        let n = s.n_bus();
        let lay = Layout { n };
        let mut bar = vec![0.0; lay.len()];
        bar[..n].fill(1.0);
        let c = ConsensusState {
            theta_bar: bar.clone(),
            gap: 0.0,
        };
        let z = zone_step(&s, &Dispatch::zero(n), &ZoneState::new(14, &bar), &c, 1.0).unwrap();
        // l and the reactive split are free here; only the active side is pinned.
        assert!(z.g_loss.abs() < 1e-7 && z.f_p.abs() < 1e-7, "{z:?}");
        assert!((z.v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_unbalanced_dispatch() {
        let s = Scenario::ieee15();
        let mut d = Dispatch::zero(s.n_bus());
        d.d[3] = 0.1;
        assert!(matches!(run_opf(&s, &d), Err(OpfError::Unbalanced(_))));
    }
}

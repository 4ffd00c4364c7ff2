//! CSV artifacts, the summary table and optional SVG plots for one run.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::agents;
use crate::congestion::{MarketOutcome, MarketTrace, Settlement, Termination, PAIR_THRESHOLD};
use crate::oracle::OracleSolution;
use crate::scenario::Scenario;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub value: f64,
    pub oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub scheme: String,
    pub rows: Vec<SummaryRow>,
    pub termination: Termination,
}

impl Summary {
    pub fn build(
        scenario: &Scenario,
        outcome: &MarketOutcome,
        settlement: &Settlement,
        oracle: Option<&OracleSolution>,
    ) -> Self {
        let t = &outcome.trades;
        let grid_cost = agents::grid_generation_cost(t.grid_purchase(), &scenario.grid);
        let payment = agents::grid_payments(&t.grid_loads(), &scenario.grid, scenario.grid.scheme);
        let rows = vec![
            SummaryRow {
                metric: "social_welfare",
                value: settlement.social_welfare,
                oracle: oracle.map(|o| o.social_welfare),
            },
            SummaryRow {
                metric: "grid_purchase",
                value: t.grid_purchase(),
                oracle: oracle.map(|o| o.grid_purchase),
            },
            SummaryRow {
                metric: "grid_generation_cost",
                value: grid_cost,
                oracle: oracle
                    .map(|o| agents::grid_generation_cost(o.grid_purchase, &scenario.grid)),
            },
            SummaryRow {
                metric: "grid_payment",
                value: payment,
                oracle: oracle.map(|o| o.grid_payment),
            },
            SummaryRow {
                metric: "p2p_energy",
                value: t.p2p_energy(),
                oracle: oracle.map(|o| o.p2p_energy()),
            },
            SummaryRow {
                metric: "losses",
                value: outcome.physical.total_losses,
                oracle: oracle.and_then(|o| o.network.as_ref().map(|n| n.losses(scenario))),
            },
            SummaryRow {
                metric: "rounds",
                value: outcome.rounds.len() as f64,
                oracle: None,
            },
            SummaryRow {
                metric: "jfi",
                value: settlement.jfi,
                oracle: None,
            },
        ];
        Self {
            scenario: scenario.name.clone(),
            scheme: scenario.grid.scheme.to_string(),
            rows,
            termination: outcome.termination,
        }
    }

    pub fn get(&self, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let with_oracle = self.rows.iter().any(|r| r.oracle.is_some());
        writeln!(f, "scenario {} ({})", self.scenario, self.scheme)?;
        if with_oracle {
            writeln!(f, "{:<22}{:>14}{:>14}", "metric", "market", "oracle")?;
        } else {
            writeln!(f, "{:<22}{:>14}", "metric", "market")?;
        }
        for r in &self.rows {
            write!(f, "{:<22}{:>14.6}", r.metric, r.value)?;
            match (with_oracle, r.oracle) {
                (true, Some(o)) => writeln!(f, "{o:>14.6}")?,
                (true, None) => writeln!(f, "{:>14}", "-")?,
                _ => writeln!(f)?,
            }
        }
        match self.termination {
            Termination::Resolved => {}
            Termination::Stalled => {
                writeln!(f, "congestion left on lines no matched pair crosses")?
            }
            Termination::RoundCap => writeln!(f, "congestion not resolved within the round cap")?,
        }
        Ok(())
    }
}

fn writer(dir: &Path, name: &str) -> io::Result<(csv::Writer<fs::File>, PathBuf)> {
    let path = dir.join(name);
    Ok((csv::Writer::from_path(&path)?, path))
}

fn row<const N: usize>(w: &mut csv::Writer<fs::File>, fields: [String; N]) -> io::Result<()> {
    w.write_record(&fields).map_err(io::Error::from)
}

/// Writes rounds, trades, physical and price tables; returns the paths.
pub fn write_csvs(
    dir: &Path,
    scenario: &Scenario,
    outcome: &MarketOutcome,
    settlement: &Settlement,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();

    let (mut w, p) = writer(dir, "rounds.csv")?;
    let line_ids: Vec<usize> = scenario.lines().map(|l| l.id).collect();
    let mut header = vec![
        "round",
        "welfare",
        "max_overload",
        "eta_sum",
        "inner_iters",
        "opf_iters",
        "losses",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend(line_ids.iter().map(|l| format!("s_{l}")));
    w.write_record(&header)?;
    for r in &outcome.rounds {
        let mut rec = vec![
            r.round.to_string(),
            r.welfare.to_string(),
            r.max_overload.to_string(),
            r.eta_sum.to_string(),
            r.inner_iters.to_string(),
            r.opf_iters.to_string(),
            r.losses.to_string(),
        ];
        rec.extend(line_ids.iter().map(|&l| r.s[l].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    paths.push(p);

    let (mut w, p) = writer(dir, "trades.csv")?;
    row(
        &mut w,
        ["seller", "buyer", "quantity", "price", "congestion_charge"].map(String::from),
    )?;
    let weights = outcome.ledger.pair_weights(scenario);
    for s in &settlement.pairs {
        row(
            &mut w,
            [
                s.seller.to_string(),
                s.buyer.to_string(),
                s.quantity.to_string(),
                s.price.to_string(),
                weights[s.seller][s.buyer].to_string(),
            ],
        )?;
    }
    w.flush()?;
    paths.push(p);

    let (mut w, p) = writer(dir, "physical.csv")?;
    let net = &outcome.physical.network;
    let vm = outcome.physical.voltage_magnitudes();
    row(
        &mut w,
        [
            "bus", "d", "g", "p_grid", "g_loss", "v", "v_mag", "fp", "fq", "l", "s", "s_max",
        ]
        .map(String::from),
    )?;
    for i in 0..scenario.n_bus() {
        let (d, g, pg) = if i == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (
                outcome.trades.d[i],
                outcome.trades.g[i],
                outcome.trades.p_grid[i],
            )
        };
        let s_max = scenario.line(i).map(|l| l.s_max).unwrap_or(0.0);
        row(
            &mut w,
            [
                i.to_string(),
                d.to_string(),
                g.to_string(),
                pg.to_string(),
                outcome.physical.g_loss[i].to_string(),
                net.v[i].to_string(),
                vm[i].to_string(),
                net.fp[i].to_string(),
                net.fq[i].to_string(),
                net.l[i].to_string(),
                outcome.physical.s[i].to_string(),
                s_max.to_string(),
            ],
        )?;
    }
    w.flush()?;
    paths.push(p);

    let (mut w, p) = writer(dir, "prices.csv")?;
    row(
        &mut w,
        ["scope", "weighted", "unweighted", "pairs"].map(String::from),
    )?;
    row(
        &mut w,
        [
            "all".into(),
            settlement.average.weighted.to_string(),
            settlement.average.unweighted.to_string(),
            settlement.pairs.len().to_string(),
        ],
    )?;
    for (line, avg) in &settlement.by_line {
        let n = scenario
            .pairs_using_line(*line, &outcome.trades.p, PAIR_THRESHOLD)
            .map(|v| v.len())
            .unwrap_or(0);
        row(
            &mut w,
            [
                format!("line_{line}"),
                avg.weighted.to_string(),
                avg.unweighted.to_string(),
                n.to_string(),
            ],
        )?;
    }
    w.flush()?;
    paths.push(p);
    Ok(paths)
}

/// Per-iteration residual traces of both inner loops.
pub fn write_traces(dir: &Path, trace: &MarketTrace) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (mut w, p1) = writer(dir, "trace_matching.csv")?;
    row(
        &mut w,
        ["round", "iter", "prosumer", "p_grid", "r", "s", "rho"].map(String::from),
    )?;
    for (round, r) in &trace.matching {
        row(
            &mut w,
            [
                round.to_string(),
                r.iter.to_string(),
                r.prosumer.to_string(),
                r.p_grid.to_string(),
                r.r.to_string(),
                r.s.to_string(),
                r.rho.to_string(),
            ],
        )?;
    }
    w.flush()?;
    let (mut w, p2) = writer(dir, "trace_opf.csv")?;
    row(
        &mut w,
        ["round", "iter", "node", "gap", "g_loss"].map(String::from),
    )?;
    for (round, r) in &trace.opf {
        row(
            &mut w,
            [
                round.to_string(),
                r.iter.to_string(),
                r.node.to_string(),
                r.gap.to_string(),
                r.g_loss.to_string(),
            ],
        )?;
    }
    w.flush()?;
    Ok(vec![p1, p2])
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

fn frame(title: &str, body: &str, lo: f64, hi: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"4\" y=\"{PAD}\" font-family=\"sans-serif\" font-size=\"10\">{hi:.3}</text>\n\
         <text x=\"4\" y=\"{b}\" font-family=\"sans-serif\" font-size=\"10\">{lo:.3}</text>\n\
         {body}</svg>\n",
        b = H - PAD,
        r = W - PAD,
    )
}

fn scale(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn to_px(i: usize, n: usize, y: f64, lo: f64, hi: f64) -> (f64, f64) {
    let x = PAD + (W - 2.0 * PAD) * i as f64 / (n.max(2) - 1) as f64;
    (x, H - PAD - (H - 2.0 * PAD) * (y - lo) / (hi - lo))
}

/// Welfare per outer round.
pub fn welfare_svg(outcome: &MarketOutcome) -> String {
    let w = outcome.welfare_trajectory();
    let (lo, hi) = scale(&w);
    let pts: Vec<(f64, f64)> = w
        .iter()
        .enumerate()
        .map(|(i, &y)| to_px(i, w.len(), y, lo, hi))
        .collect();
    frame(
        "social welfare per round",
        &polyline(&pts, "steelblue"),
        lo,
        hi,
    )
}

/// Loading `S/S_max` of every line in the first and the last round.
pub fn line_flow_svg(scenario: &Scenario, outcome: &MarketOutcome) -> String {
    let ids: Vec<usize> = scenario.lines().map(|l| l.id).collect();
    let load = |s: &[f64]| -> Vec<f64> {
        ids.iter()
            .map(|&l| s[l] / scenario.line(l).map(|x| x.s_max).unwrap_or(1.0))
            .collect()
    };
    let first = load(&outcome.first_physical.s);
    let last = load(&outcome.physical.s);
    let mut all = first.clone();
    all.extend(&last);
    all.push(1.0);
    let (lo, hi) = scale(&all);
    let pts = |v: &[f64]| -> Vec<(f64, f64)> {
        v.iter()
            .enumerate()
            .map(|(i, &y)| to_px(i, v.len(), y, lo, hi))
            .collect()
    };
    let limit = pts(&vec![1.0; ids.len()]);
    let body = polyline(&pts(&first), "darkorange")
        + &polyline(&pts(&last), "seagreen")
        + &polyline(&limit, "gray");
    frame(
        "line loading, first (orange) and last (green) round",
        &body,
        lo,
        hi,
    )
}

pub fn write_plots(
    dir: &Path,
    scenario: &Scenario,
    outcome: &MarketOutcome,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let a = dir.join("welfare.svg");
    fs::write(&a, welfare_svg(outcome))?;
    let b = dir.join("line_flows.svg");
    fs::write(&b, line_flow_svg(scenario, outcome))?;
    Ok(vec![a, b])
}

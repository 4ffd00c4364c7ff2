//! Radial network model, prosumer and grid parameters, and tree queries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SLACK: usize = 0;

const IEEE15: &str = include_str!("../scenarios/ieee15.toml");
const IEEE15_CASE2: &str = include_str!("../scenarios/ieee15_case2.toml");

/// Scenario files shipped with the crate, by file name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "ieee15.toml" | "ieee15" => Some(IEEE15),
        "ieee15_case2.toml" | "ieee15_case2" => Some(IEEE15_CASE2),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("not radial: bus {bus} {reason}")]
    NotRadial { bus: usize, reason: String },
    #[error("bus {0} is not connected to the slack bus")]
    Disconnected(usize),
    #[error("unknown bus {0}")]
    UnknownBus(usize),
    #[error("unknown line {0}")]
    UnknownLine(usize),
    #[error("{entity}: {reason}")]
    Invalid { entity: String, reason: String },
}

fn invalid(entity: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        entity: entity.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One community-wide buying price.
    #[default]
    Ups,
    /// A buying price per prosumer, driven by its own grid load.
    Dps,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Ups => "ups",
            Scheme::Dps => "dps",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ups" => Ok(Scheme::Ups),
            "dps" => Ok(Scheme::Dps),
            other => Err(format!(
                "unknown pricing scheme `{other}` (expected ups or dps)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// A line is identified by its child bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: usize,
    pub r: f64,
    pub x: f64,
    pub s_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsumerParams {
    pub d_p_max: f64,
    pub d_p_min: f64,
    pub d_q: f64,
    pub g_p_max: f64,
    pub g_p_min: f64,
    pub g_q_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
}

impl ProsumerParams {
    fn validate(&self, bus: usize) -> Result<(), ScenarioError> {
        let who = format!("bus {bus}");
        let all = [
            self.d_p_max,
            self.d_p_min,
            self.d_q,
            self.g_p_max,
            self.g_p_min,
            self.g_q_max,
            self.alpha,
            self.beta,
            self.a,
            self.b,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid(who, "non-finite parameter"));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(invalid(who, "alpha and beta must be positive"));
        }
        if self.a < 0.0 || self.b <= 0.0 {
            return Err(invalid(who, "need a >= 0 and b > 0"));
        }
        if self.d_p_min < 0.0 || self.d_p_min > self.d_p_max {
            return Err(invalid(who, "need 0 <= d_p_min <= d_p_max"));
        }
        if self.g_p_min < 0.0 || self.g_p_min > self.g_p_max {
            return Err(invalid(who, "need 0 <= g_p_min <= g_p_max"));
        }
        if self.g_q_max < 0.0 {
            return Err(invalid(who, "g_q_max must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub a0: f64,
    pub b0: f64,
    pub lambda_sell: f64,
    pub scheme: Scheme,
}

/// Bounds on squared voltage magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageBounds {
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoParams {
    pub rho_init: f64,
    pub rho_bounds: [f64; 2],
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub eps_opf: f64,
    pub gamma: f64,
    pub max_inner_iters: usize,
    pub max_outer_rounds: usize,
}

impl Default for AlgoParams {
    fn default() -> Self {
        Self {
            rho_init: 1.0,
            rho_bounds: [1e-4, 1e5],
            eps_pri: 1e-6,
            eps_dual: 1e-6,
            eps_opf: 1e-4,
            gamma: 0.5,
            max_inner_iters: 20_000,
            max_outer_rounds: 200,
        }
    }
}

impl AlgoParams {
    fn validate(&self) -> Result<(), ScenarioError> {
        let [lo, hi] = self.rho_bounds;
        let positive = [
            self.rho_init,
            lo,
            hi,
            self.eps_pri,
            self.eps_dual,
            self.eps_opf,
            self.gamma,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("algo", "all parameters must be strictly positive"));
        }
        if self.max_inner_iters == 0 || self.max_outer_rounds == 0 {
            return Err(invalid("algo", "iteration caps must be positive"));
        }
        if !(lo <= self.rho_init && self.rho_init <= hi) {
            return Err(invalid("algo", "rho_init outside rho_bounds"));
        }
        Ok(())
    }
}

/// A validated radial network with all market parameters.
///
/// Per-bus vectors are indexed by bus id; `prosumers[0]` is `None` for the
/// slack bus and `lines[0]` does not exist (use [`Scenario::line`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub base_mva: f64,
    pub grid: GridParams,
    pub voltage: VoltageBounds,
    pub algo: AlgoParams,
    pub buses: Vec<Bus>,
    lines: Vec<Option<Line>>,
    pub prosumers: Vec<Option<ProsumerParams>>,
    depth: Vec<usize>,
}

// ---- file format ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRecord {
    a0: f64,
    b0: f64,
    lambda_sell: f64,
    #[serde(default)]
    scheme: Scheme,
    v_min: f64,
    v_max: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_p_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_p_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    d_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g_p_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g_p_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    g_q_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
}

impl BusRecord {
    fn from_params(id: usize, p: Option<ProsumerParams>) -> Self {
        match p {
            None => Self {
                id,
                ..Default::default()
            },
            Some(p) => Self {
                id,
                d_p_max: Some(p.d_p_max),
                d_p_min: Some(p.d_p_min),
                d_q: Some(p.d_q),
                g_p_max: Some(p.g_p_max),
                g_p_min: Some(p.g_p_min),
                g_q_max: Some(p.g_q_max),
                alpha: Some(p.alpha),
                beta: Some(p.beta),
                a: Some(p.a),
                b: Some(p.b),
            },
        }
    }

    fn is_empty(&self) -> bool {
        [
            self.d_p_max,
            self.d_p_min,
            self.d_q,
            self.g_p_max,
            self.g_p_min,
            self.g_q_max,
            self.alpha,
            self.beta,
            self.a,
            self.b,
        ]
        .iter()
        .all(Option::is_none)
    }

    fn params(&self) -> Result<ProsumerParams, ScenarioError> {
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| {
                invalid(
                    format!("bus {}", self.id),
                    format!("missing field `{field}`"),
                )
            })
        };
        Ok(ProsumerParams {
            d_p_max: need(self.d_p_max, "d_p_max")?,
            d_p_min: self.d_p_min.unwrap_or(0.0),
            d_q: need(self.d_q, "d_q")?,
            g_p_max: need(self.g_p_max, "g_p_max")?,
            g_p_min: self.g_p_min.unwrap_or(0.0),
            g_q_max: need(self.g_q_max, "g_q_max")?,
            alpha: need(self.alpha, "alpha")?,
            beta: need(self.beta, "beta")?,
            a: need(self.a, "a")?,
            b: need(self.b, "b")?,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    from: usize,
    to: usize,
    r: f64,
    x: f64,
    s_max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    #[serde(default)]
    name: String,
    #[serde(default = "one")]
    base_mva: f64,
    grid: GridRecord,
    #[serde(default)]
    algo: AlgoParams,
    bus: Vec<BusRecord>,
    line: Vec<LineRecord>,
}

fn one() -> f64 {
    1.0
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Loads `path`, falling back to a bundled scenario of the same file name.
    pub fn load_or_bundled(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        if !path.exists() {
            if let Some(text) = path.file_name().and_then(|n| n.to_str()).and_then(bundled) {
                return Self::from_toml_str(text);
            }
        }
        Self::load(path)
    }

    pub fn ieee15() -> Self {
        Self::from_toml_str(IEEE15).expect("bundled scenario is valid")
    }

    pub fn ieee15_case2() -> Self {
        Self::from_toml_str(IEEE15_CASE2).expect("bundled scenario is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        let g = &file.grid;
        if !(g.a0 >= 0.0 && g.a0.is_finite()) || !(g.b0 > 0.0 && g.b0.is_finite()) {
            return Err(invalid("grid", "need a0 >= 0 and b0 > 0"));
        }
        if !(0.0 <= g.lambda_sell && g.lambda_sell < g.b0) {
            return Err(invalid("grid", "need 0 <= lambda_sell < b0"));
        }
        if !(0.0 < g.v_min && g.v_min < g.v_max && g.v_max.is_finite()) {
            return Err(invalid("grid", "need 0 < v_min < v_max"));
        }
        if !(file.base_mva > 0.0 && file.base_mva.is_finite()) {
            return Err(invalid("scenario", "base_mva must be positive"));
        }
        file.algo.validate()?;

        let n = file.bus.len();
        if n == 0 {
            return Err(invalid("scenario", "no buses"));
        }
        let mut prosumers: Vec<Option<ProsumerParams>> = vec![None; n];
        let mut seen = vec![false; n];
        for rec in &file.bus {
            if rec.id >= n {
                return Err(invalid(
                    format!("bus {}", rec.id),
                    format!("ids must be 0..{}", n - 1),
                ));
            }
            if std::mem::replace(&mut seen[rec.id], true) {
                return Err(invalid(format!("bus {}", rec.id), "duplicate id"));
            }
            if rec.id == SLACK {
                if !rec.is_empty() {
                    return Err(invalid(
                        "bus 0",
                        "the slack bus takes no prosumer parameters",
                    ));
                }
                continue;
            }
            let params = rec.params()?;
            params.validate(rec.id)?;
            prosumers[rec.id] = Some(params);
        }

        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut lines: Vec<Option<Line>> = vec![None; n];
        for rec in &file.line {
            for end in [rec.from, rec.to] {
                if end >= n {
                    return Err(ScenarioError::UnknownBus(end));
                }
            }
            if rec.from == rec.to {
                return Err(ScenarioError::NotRadial {
                    bus: rec.to,
                    reason: "has a self-loop".into(),
                });
            }
            if rec.to == SLACK {
                return Err(ScenarioError::NotRadial {
                    bus: SLACK,
                    reason: "the slack bus cannot have a parent".into(),
                });
            }
            if parent[rec.to].is_some() {
                return Err(ScenarioError::NotRadial {
                    bus: rec.to,
                    reason: "has more than one upstream line".into(),
                });
            }
            if !(rec.r >= 0.0 && rec.x >= 0.0 && rec.s_max > 0.0)
                || !(rec.r.is_finite() && rec.x.is_finite() && rec.s_max.is_finite())
            {
                return Err(invalid(
                    format!("line {}", rec.to),
                    "need r >= 0, x >= 0, s_max > 0",
                ));
            }
            parent[rec.to] = Some(rec.from);
            lines[rec.to] = Some(Line {
                id: rec.to,
                r: rec.r,
                x: rec.x,
                s_max: rec.s_max,
            });
        }

        // Every bus must reach the slack without revisiting a bus.
        let mut depth = vec![usize::MAX; n];
        depth[SLACK] = 0;
        for start in 1..n {
            let mut chain = Vec::new();
            let mut at = start;
            while depth[at] == usize::MAX {
                if chain.contains(&at) {
                    return Err(ScenarioError::NotRadial {
                        bus: at,
                        reason: "lies on a cycle".into(),
                    });
                }
                chain.push(at);
                at = parent[at].ok_or(ScenarioError::Disconnected(at))?;
            }
            let mut d = depth[at];
            for &b in chain.iter().rev() {
                d += 1;
                depth[b] = d;
            }
        }

        let mut buses: Vec<Bus> = (0..n)
            .map(|id| Bus {
                id,
                parent: parent[id],
                children: Vec::new(),
            })
            .collect();
        for id in 1..n {
            let p = parent[id].expect("connected");
            buses[p].children.push(id);
        }

        Ok(Scenario {
            name: file.name,
            base_mva: file.base_mva,
            grid: GridParams {
                a0: g.a0,
                b0: g.b0,
                lambda_sell: g.lambda_sell,
                scheme: g.scheme,
            },
            voltage: VoltageBounds {
                v_min: g.v_min,
                v_max: g.v_max,
            },
            algo: file.algo,
            buses,
            lines,
            prosumers,
            depth,
        })
    }

    /// Serializes back to the scenario file format.
    pub fn to_toml_string(&self) -> String {
        let file = ScenarioFile {
            name: self.name.clone(),
            base_mva: self.base_mva,
            grid: GridRecord {
                a0: self.grid.a0,
                b0: self.grid.b0,
                lambda_sell: self.grid.lambda_sell,
                scheme: self.grid.scheme,
                v_min: self.voltage.v_min,
                v_max: self.voltage.v_max,
            },
            algo: self.algo,
            bus: (0..self.n_bus())
                .map(|id| BusRecord::from_params(id, self.prosumers[id]))
                .collect(),
            line: self
                .lines()
                .map(|l| LineRecord {
                    from: self.buses[l.id].parent.expect("non-root"),
                    to: l.id,
                    r: l.r,
                    x: l.x,
                    s_max: l.s_max,
                })
                .collect(),
        };
        toml::to_string(&file).expect("scenario serializes")
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    /// Non-slack bus ids in ascending order.
    pub fn prosumer_ids(&self) -> std::ops::Range<usize> {
        1..self.n_bus()
    }

    pub fn prosumer(&self, id: usize) -> &ProsumerParams {
        self.prosumers[id]
            .as_ref()
            .unwrap_or_else(|| panic!("bus {id} has no prosumer"))
    }

    pub fn prosumer_mut(&mut self, id: usize) -> &mut ProsumerParams {
        self.prosumers[id]
            .as_mut()
            .unwrap_or_else(|| panic!("bus {id} has no prosumer"))
    }

    pub fn line(&self, id: usize) -> Result<&Line, ScenarioError> {
        self.lines
            .get(id)
            .and_then(Option::as_ref)
            .ok_or(ScenarioError::UnknownLine(id))
    }

    pub fn line_mut(&mut self, id: usize) -> Result<&mut Line, ScenarioError> {
        self.lines
            .get_mut(id)
            .and_then(Option::as_mut)
            .ok_or(ScenarioError::UnknownLine(id))
    }

    pub fn lines(&self) -> impl Iterator<Item = &Line> {
        self.lines.iter().flatten()
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.buses[id].parent
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.buses[id].children
    }

    fn check_bus(&self, id: usize) -> Result<(), ScenarioError> {
        if id < self.n_bus() {
            Ok(())
        } else {
            Err(ScenarioError::UnknownBus(id))
        }
    }

    /// Lines on the unique path from `i` to `j`, ordered from `i` toward `j`.
    pub fn tree_path(&self, i: usize, j: usize) -> Result<Vec<usize>, ScenarioError> {
        self.check_bus(i)?;
        self.check_bus(j)?;
        let (mut a, mut b) = (i, j);
        let mut up = Vec::new();
        let mut down = Vec::new();
        while self.depth[a] > self.depth[b] {
            up.push(a);
            a = self.buses[a].parent.expect("non-root");
        }
        while self.depth[b] > self.depth[a] {
            down.push(b);
            b = self.buses[b].parent.expect("non-root");
        }
        while a != b {
            up.push(a);
            down.push(b);
            a = self.buses[a].parent.expect("non-root");
            b = self.buses[b].parent.expect("non-root");
        }
        up.extend(down.into_iter().rev());
        Ok(up)
    }

    /// True when bus `id` lies in the subtree hanging below line `line`.
    pub fn in_subtree(&self, line: usize, id: usize) -> bool {
        let mut at = id;
        loop {
            if at == line {
                return true;
            }
            match self.buses[at].parent {
                Some(p) => at = p,
                None => return false,
            }
        }
    }

    /// Buses in breadth-first order from the slack.
    pub fn bfs_order(&self) -> Vec<usize> {
        let mut order = vec![SLACK];
        let mut k = 0;
        while k < order.len() {
            order.extend_from_slice(&self.buses[order[k]].children);
            k += 1;
        }
        order
    }

    /// For every line, the trading pairs whose path crosses it.
    pub fn line_pair_index(&self) -> BTreeMap<usize, Vec<(usize, usize)>> {
        let mut index: BTreeMap<usize, Vec<(usize, usize)>> =
            self.lines().map(|l| (l.id, Vec::new())).collect();
        for i in self.prosumer_ids() {
            for j in self.prosumer_ids().filter(|&j| j > i) {
                for l in self.tree_path(i, j).expect("valid ids") {
                    index.get_mut(&l).expect("line exists").push((i, j));
                }
            }
        }
        index
    }

    /// Pairs `(seller, buyer)` with `|p_ij| > threshold` whose path uses `line`.
    ///
    /// `p` is indexed by bus id; each unordered pair is reported once.
    pub fn pairs_using_line(
        &self,
        line: usize,
        p: &[Vec<f64>],
        threshold: f64,
    ) -> Result<Vec<(usize, usize)>, ScenarioError> {
        self.line(line)?;
        let mut out = Vec::new();
        for i in self.prosumer_ids() {
            for j in self.prosumer_ids().filter(|&j| j > i) {
                // Average the two sides so a tiny consensus mismatch cannot flip orientation.
                let q = 0.5 * (p[i][j] - p[j][i]);
                if q.abs() <= threshold || (threshold == 0.0 && q == 0.0) {
                    continue;
                }
                if self.in_subtree(line, i) != self.in_subtree(line, j) {
                    out.push(if q > 0.0 { (i, j) } else { (j, i) });
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_ieee15_matches_tables() {
        let s = Scenario::ieee15();
        assert_eq!(s.n_bus(), 15);
        assert_eq!(s.lines().count(), 14);
        let l4 = s.line(4).unwrap();
        assert_eq!((l4.r, l4.x, l4.s_max), (0.0191, 0.0273, 0.256));
        let p6 = s.prosumer(6);
        assert_eq!((p6.alpha, p6.beta, p6.d_p_max), (0.76, 40.28, 0.219));
        assert_eq!((s.voltage.v_min, s.voltage.v_max), (0.81, 1.21));
        assert_eq!(s.children(8), &[7, 9]);
    }

    #[test]
    fn case2_generation_only_at_5_and_13() {
        let s = Scenario::ieee15_case2();
        for i in s.prosumer_ids() {
            let g = s.prosumer(i).g_p_max;
            match i {
                5 => assert_eq!(g, 0.1),
                13 => assert_eq!(g, 0.2),
                _ => assert_eq!(g, 0.0),
            }
        }
    }

    #[test]
    fn paths() {
        let s = Scenario::ieee15();
        assert_eq!(s.tree_path(4, 1).unwrap(), vec![4, 3, 2]);
        assert_eq!(s.tree_path(13, 4).unwrap(), vec![13, 12, 1, 2, 3, 4]);
        assert!(s.tree_path(7, 7).unwrap().is_empty());
        assert_eq!(s.tree_path(7, 9).unwrap(), vec![7, 9]);
        assert!(matches!(
            s.tree_path(3, 99),
            Err(ScenarioError::UnknownBus(99))
        ));
    }

    #[test]
    fn pairs_on_line() {
        let s = Scenario::ieee15();
        let n = s.n_bus();
        let mut p = vec![vec![0.0; n]; n];
        assert!(s.pairs_using_line(4, &p, 0.0).unwrap().is_empty());
        p[1][2] = 0.1;
        p[2][1] = -0.1;
        assert!(s.pairs_using_line(13, &p, 0.0).unwrap().is_empty());
        assert_eq!(s.pairs_using_line(2, &p, 0.0).unwrap(), vec![(1, 2)]);
        p[5][12] = -0.05;
        p[12][5] = 0.05;
        assert_eq!(s.pairs_using_line(4, &p, 1e-4).unwrap(), vec![(12, 5)]);
    }

    #[test]
    fn rejects_two_lines_between_same_pair() {
        let text = Scenario::ieee15()
            .to_toml_string()
            .replace("[[line]]\nfrom = 0\nto = 1\n", "[[line]]\nfrom = 0\nto = 1\nr = 0.1\nx = 0.1\ns_max = 1.0\n\n[[line]]\nfrom = 0\nto = 1\n");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("not radial"), "{err}");
    }

    #[test]
    fn rejects_disconnected_and_cycles() {
        let base = Scenario::ieee15().to_toml_string();
        let text = base.replace("from = 3\nto = 8\n", "from = 7\nto = 8\n");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::NotRadial { .. }), "{err}");
        let text = base.replace("from = 0\nto = 12\n", "from = 0\nto = 0\n");
        assert!(Scenario::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        let base = Scenario::ieee15().to_toml_string();
        let text = base.replacen("alpha = 0.99", "alpha = -0.99", 1);
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("bus 1"), "{err}");
        let text = base.replace("lambda_sell = 5.0", "lambda_sell = 30.0");
        assert!(Scenario::from_toml_str(&text).is_err());
        assert!(matches!(
            Scenario::from_toml_str("not = [valid"),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn round_trip() {
        for s in [Scenario::ieee15(), Scenario::ieee15_case2()] {
            let again = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
            assert_eq!(s, again);
        }
    }
}

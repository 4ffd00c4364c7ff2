//! A small dense conic solver for the agents' local subproblems.
//!
//! Programs have the canonical form
//!
//! ```text
//!     minimize    ½ zᵀQz + cᵀz + k + Σ w_k |z_{i_k}|
//!     subject to  lo ≤ z ≤ hi
//!                 E z = f
//!                 ‖A_j z + a_j‖₂ ≤ b_jᵀz + d_j      for every cone block j
//! ```
//!
//! and are solved by a primal-dual interior-point method with
//! Nesterov-Todd scaling and Mehrotra predictor-corrector steps. L1 terms
//! are rewritten as `z = u - v` with `u, v ≥ 0` before the solve. The
//! subproblems in this crate have at most a few hundred variables, so all
//! linear algebra is dense.

mod cone;
mod ipm;

use thiserror::Error;

pub use ipm::solve;

/// Default KKT tolerance used by the market layers.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("variable index {index} out of range for a program with {n} variables")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("L1 weight {weight} on variable {index} is negative")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("objective matrix is not positive semidefinite")]
    NotConvex,
    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("warm start has {got} entries, expected {expected}")]
    WarmStartLength { got: usize, expected: usize },
}

/// `Σ coef·z_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn constant(value: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: value,
        }
    }

    pub fn var(index: usize) -> Self {
        Self::constant(0.0).plus(index, 1.0)
    }

    pub fn plus(mut self, index: usize, coef: f64) -> Self {
        self.terms.push((index, coef));
        self
    }

    pub fn offset(mut self, value: f64) -> Self {
        self.constant += value;
        self
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(i, c)| acc + c * z[i])
    }
}

/// Second-order cone constraint `‖components‖₂ ≤ bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocBlock {
    pub components: Vec<AffineExpr>,
    pub bound: AffineExpr,
}

impl SocBlock {
    pub fn new(components: Vec<AffineExpr>, bound: AffineExpr) -> Self {
        Self { components, bound }
    }

    /// `‖components(z)‖ - bound(z)`; non-positive when the cone holds.
    pub fn violation(&self, z: &[f64]) -> f64 {
        let norm = self
            .components
            .iter()
            .map(|c| c.eval(z).powi(2))
            .sum::<f64>()
            .sqrt();
        norm - self.bound.eval(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEquality {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    n: usize,
    /// Entries of the full symmetric matrix `Q` in `½ zᵀQz`.
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    constant: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    equalities: Vec<LinearEquality>,
    cones: Vec<SocBlock>,
    l1: Vec<(usize, f64)>,
}

impl ConicProgram {
    /// A program over `n` free variables with a zero objective.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            quad: Vec::new(),
            linear: vec![0.0; n],
            constant: 0.0,
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            equalities: Vec::new(),
            cones: Vec::new(),
            l1: Vec::new(),
        }
    }

    /// Appends a variable with the given bounds and returns its index.
    pub fn add_var(&mut self, lo: f64, hi: f64) -> usize {
        self.n += 1;
        self.linear.push(0.0);
        self.lower.push(lo);
        self.upper.push(hi);
        self.n - 1
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn set_bounds(&mut self, i: usize, lo: f64, hi: f64) -> &mut Self {
        self.lower[i] = lo;
        self.upper[i] = hi;
        self
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    /// Adds `coef·z_i·z_j` to the objective (`coef·z_i²` when `i == j`).
    pub fn add_quadratic(&mut self, i: usize, j: usize, coef: f64) -> &mut Self {
        if i == j {
            self.quad.push((i, i, 2.0 * coef));
        } else {
            self.quad.push((i, j, coef));
            self.quad.push((j, i, coef));
        }
        self
    }

    pub fn add_linear(&mut self, i: usize, coef: f64) -> &mut Self {
        self.linear[i] += coef;
        self
    }

    pub fn add_constant(&mut self, value: f64) -> &mut Self {
        self.constant += value;
        self
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> &mut Self {
        self.equalities.push(LinearEquality { terms, rhs });
        self
    }

    pub fn add_soc(&mut self, block: SocBlock) -> &mut Self {
        self.cones.push(block);
        self
    }

    /// Adds `weight·|z_i|` to the objective.
    pub fn add_l1(&mut self, i: usize, weight: f64) -> &mut Self {
        self.l1.push((i, weight));
        self
    }

    pub fn equalities(&self) -> &[LinearEquality] {
        &self.equalities
    }

    pub fn cones(&self) -> &[SocBlock] {
        &self.cones
    }

    /// Full objective at `z`, L1 terms included.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let quad: f64 = self
            .quad
            .iter()
            .map(|&(i, j, q)| 0.5 * q * z[i] * z[j])
            .sum();
        let lin: f64 = self.linear.iter().zip(z).map(|(c, x)| c * x).sum();
        let l1: f64 = self.l1.iter().map(|&(i, w)| w * z[i].abs()).sum();
        quad + lin + l1 + self.constant
    }

    /// Largest violation of bounds, equalities and cones at `z`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            worst = worst.max(self.lower[i] - z[i]).max(z[i] - self.upper[i]);
        }
        for eq in &self.equalities {
            let lhs: f64 = eq.terms.iter().map(|&(i, c)| c * z[i]).sum();
            worst = worst.max((lhs - eq.rhs).abs());
        }
        for cone in &self.cones {
            worst = worst.max(cone.violation(z));
        }
        worst
    }

    fn check_index(&self, index: usize) -> Result<(), KernelError> {
        if index >= self.n {
            Err(KernelError::IndexOutOfRange { index, n: self.n })
        } else {
            Ok(())
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        for &(i, j, q) in &self.quad {
            self.check_index(i)?;
            self.check_index(j)?;
            if !q.is_finite() {
                return Err(KernelError::NonFinite("objective matrix"));
            }
        }
        if self.linear.iter().any(|c| !c.is_finite()) || !self.constant.is_finite() {
            return Err(KernelError::NonFinite("linear objective"));
        }
        if self.lower.iter().chain(&self.upper).any(|b| b.is_nan()) {
            return Err(KernelError::NonFinite("bounds"));
        }
        for eq in &self.equalities {
            for &(i, c) in &eq.terms {
                self.check_index(i)?;
                if !c.is_finite() {
                    return Err(KernelError::NonFinite("equality"));
                }
            }
            if !eq.rhs.is_finite() {
                return Err(KernelError::NonFinite("equality"));
            }
        }
        for cone in &self.cones {
            for expr in cone.components.iter().chain(std::iter::once(&cone.bound)) {
                for &(i, c) in &expr.terms {
                    self.check_index(i)?;
                    if !c.is_finite() {
                        return Err(KernelError::NonFinite("cone"));
                    }
                }
                if !expr.constant.is_finite() {
                    return Err(KernelError::NonFinite("cone"));
                }
            }
        }
        for &(i, w) in &self.l1 {
            self.check_index(i)?;
            if !(w >= 0.0) || !w.is_finite() {
                return Err(KernelError::NegativeWeight {
                    index: i,
                    weight: w,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterLimit,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    /// Primal point in the caller's variables (L1 splits removed).
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Multipliers of the lower and upper bounds, per variable.
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub equality_duals: Vec<f64>,
    /// Dual cone vector per SOC block, ordered `(bound, components...)`.
    pub cone_duals: Vec<Vec<f64>>,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

//! Cone algebra on `R^l_+ × Q^{m_1} × … × Q^{m_k}`.

/// Layout of the product cone: `lp` orthant entries followed by SOC blocks.
#[derive(Debug, Clone)]
pub(crate) struct ConeDims {
    pub lp: usize,
    pub soc: Vec<usize>,
}

impl ConeDims {
    pub fn total(&self) -> usize {
        self.lp + self.soc.iter().sum::<usize>()
    }

    /// Barrier degree: one per orthant entry and one per SOC block.
    pub fn degree(&self) -> usize {
        self.lp + self.soc.len()
    }

    /// Start offsets of the SOC blocks.
    pub fn soc_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.soc.len());
        let mut at = self.lp;
        for &m in &self.soc {
            out.push(at..at + m);
            at += m;
        }
        out
    }

    pub fn identity(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.total()];
        e[..self.lp].fill(1.0);
        for r in self.soc_ranges() {
            e[r.start] = 1.0;
        }
        e
    }

    /// Smallest `t` with `u + t·e` on the cone boundary (negative when `u` is interior).
    pub fn max_violation(&self, u: &[f64]) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for &v in &u[..self.lp] {
            worst = worst.max(-v);
        }
        for r in self.soc_ranges() {
            let b = &u[r];
            worst = worst.max(norm(&b[1..]) - b[0]);
        }
        worst
    }

    /// Largest `α ≤ cap` keeping `u + α·du` in the cone.
    pub fn max_step(&self, u: &[f64], du: &[f64], cap: f64) -> f64 {
        let mut alpha = cap;
        for k in 0..self.lp {
            if du[k] < 0.0 {
                alpha = alpha.min(-u[k] / du[k]);
            }
        }
        for r in self.soc_ranges() {
            alpha = alpha.min(soc_step(&u[r.clone()], &du[r]));
        }
        alpha.max(0.0)
    }

    /// Jordan product `u ∘ v`.
    pub fn product(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for k in 0..self.lp {
            out[k] = u[k] * v[k];
        }
        for r in self.soc_ranges() {
            let (a, b) = (&u[r.clone()], &v[r.clone()]);
            out[r.start] = dot(a, b);
            for k in 1..a.len() {
                out[r.start + k] = a[0] * b[k] + b[0] * a[k];
            }
        }
        out
    }

    /// Solves `u ∘ w = v` for `w`, where `u` is interior.
    pub fn divide(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for k in 0..self.lp {
            out[k] = v[k] / u[k];
        }
        for r in self.soc_ranges() {
            let (a, b) = (&u[r.clone()], &v[r.clone()]);
            let det = a[0] * a[0] - dot(&a[1..], &a[1..]);
            let w0 = (a[0] * b[0] - dot(&a[1..], &b[1..])) / det;
            out[r.start] = w0;
            for k in 1..a.len() {
                out[r.start + k] = (b[k] - w0 * a[k]) / a[0];
            }
        }
        out
    }
}

/// Nesterov-Todd scaling `W` with `W z = W⁻¹ s = λ`.
#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    /// Orthant part: `W = diag(d)`.
    pub d: Vec<f64>,
    /// SOC parts: `W = β·B(w̄)`, `W⁻¹ = β⁻¹·B(J w̄)`.
    pub blocks: Vec<(f64, Vec<f64>)>,
    pub lambda: Vec<f64>,
}

fn boost_apply(w: &[f64], x: &[f64], out: &mut [f64]) {
    // B(w) = [[w0, w1ᵀ], [w1, I + w1 w1ᵀ/(1 + w0)]]
    let w1x1 = dot(&w[1..], &x[1..]);
    out[0] = w[0] * x[0] + w1x1;
    let coef = x[0] + w1x1 / (1.0 + w[0]);
    for k in 1..w.len() {
        out[k] = x[k] + coef * w[k];
    }
}

impl Scaling {
    pub fn new(dims: &ConeDims, s: &[f64], z: &[f64]) -> Self {
        let mut d = Vec::with_capacity(dims.lp);
        let mut lambda = vec![0.0; s.len()];
        for k in 0..dims.lp {
            d.push((s[k] / z[k]).sqrt());
            lambda[k] = (s[k] * z[k]).sqrt();
        }
        let mut blocks = Vec::with_capacity(dims.soc.len());
        for r in dims.soc_ranges() {
            let (sb, zb) = (&s[r.clone()], &z[r.clone()]);
            let sdet = soc_det(sb).max(f64::MIN_POSITIVE).sqrt();
            let zdet = soc_det(zb).max(f64::MIN_POSITIVE).sqrt();
            let sn: Vec<f64> = sb.iter().map(|v| v / sdet).collect();
            let zn: Vec<f64> = zb.iter().map(|v| v / zdet).collect();
            let gamma = ((1.0 + dot(&sn, &zn)) / 2.0).sqrt();
            let mut w: Vec<f64> = Vec::with_capacity(sb.len());
            w.push((sn[0] + zn[0]) / (2.0 * gamma));
            for k in 1..sb.len() {
                w.push((sn[k] - zn[k]) / (2.0 * gamma));
            }
            let beta = (sdet / zdet).sqrt();
            // λ = W z
            let mut lam = vec![0.0; sb.len()];
            boost_apply(&w, zb, &mut lam);
            for (k, v) in lam.into_iter().enumerate() {
                lambda[r.start + k] = beta * v;
            }
            blocks.push((beta, w));
        }
        Self { d, blocks, lambda }
    }

    fn apply_inner(&self, dims: &ConeDims, x: &[f64], inverse: bool) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for k in 0..dims.lp {
            out[k] = if inverse {
                x[k] / self.d[k]
            } else {
                x[k] * self.d[k]
            };
        }
        for (r, (beta, w)) in dims.soc_ranges().into_iter().zip(&self.blocks) {
            let seg = &mut out[r.clone()];
            if inverse {
                let mut jw = w.clone();
                for v in jw.iter_mut().skip(1) {
                    *v = -*v;
                }
                boost_apply(&jw, &x[r.clone()], seg);
                seg.iter_mut().for_each(|v| *v /= beta);
            } else {
                boost_apply(w, &x[r.clone()], seg);
                seg.iter_mut().for_each(|v| *v *= beta);
            }
        }
        out
    }

    pub fn apply(&self, dims: &ConeDims, x: &[f64]) -> Vec<f64> {
        self.apply_inner(dims, x, false)
    }

    pub fn apply_inv(&self, dims: &ConeDims, x: &[f64]) -> Vec<f64> {
        self.apply_inner(dims, x, true)
    }

    /// Dense `W⁻²` for one SOC block.
    pub fn soc_inv_square(&self, block: usize) -> Vec<Vec<f64>> {
        let (beta, w) = &self.blocks[block];
        let m = w.len();
        let mut jw = w.clone();
        for v in jw.iter_mut().skip(1) {
            *v = -*v;
        }
        // B(Jw)² column by column.
        let mut cols = vec![vec![0.0; m]; m];
        let mut e = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        for c in 0..m {
            e.fill(0.0);
            e[c] = 1.0;
            boost_apply(&jw, &e, &mut tmp);
            boost_apply(&jw, &tmp, &mut cols[c]);
            cols[c].iter_mut().for_each(|v| *v /= beta * beta);
        }
        // symmetric, so columns equal rows
        cols
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn soc_det(u: &[f64]) -> f64 {
    u[0] * u[0] - dot(&u[1..], &u[1..])
}

/// Largest step keeping an interior SOC point `u + α du` in the cone.
fn soc_step(u: &[f64], du: &[f64]) -> f64 {
    // (u0 + α du0)² - ‖u1 + α du1‖² ≥ 0 and u0 + α du0 ≥ 0
    let a = soc_det(du);
    let b = 2.0 * (u[0] * du[0] - dot(&u[1..], &du[1..]));
    let c = soc_det(u).max(0.0);
    let mut alpha = f64::INFINITY;
    if du[0] < 0.0 {
        alpha = -u[0] / du[0];
    }
    let root = if a.abs() < 1e-300 {
        if b < 0.0 {
            -c / b
        } else {
            f64::INFINITY
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            // no real root: the determinant keeps the sign of a; with c > 0 it stays positive
            f64::INFINITY
        } else {
            let sq = disc.sqrt();
            let q = -0.5 * (b + b.signum() * sq);
            let r1 = q / a;
            let r2 = if q != 0.0 { c / q } else { f64::INFINITY };
            [r1, r2]
                .into_iter()
                .filter(|r| *r > 0.0)
                .fold(f64::INFINITY, f64::min)
        }
    };
    alpha.min(root)
}

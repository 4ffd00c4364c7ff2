//! Primal-dual interior-point method for
//! `min ½xᵀPx + qᵀx  s.t.  Ax = b,  Gx + s = h,  s ∈ K`.

use nalgebra::{DMatrix, DVector};

use super::cone::{dot, ConeDims, Scaling};
use super::{ConicProgram, ConicSolution, KernelError, SolveStatus};

const MAX_ITERS: usize = 100;
const STEP_FRACTION: f64 = 0.99;
const REFINE_STEPS: usize = 3;
const RUIZ_PASSES: usize = 8;

type SparseRow = Vec<(usize, f64)>;

/// Where each caller-level constraint ended up in the standard form.
#[derive(Default)]
struct RowMap {
    lower: Vec<Option<usize>>,
    upper: Vec<Option<usize>>,
    fixed: Vec<Option<usize>>,
    n_user_eq: usize,
    cone_starts: Vec<usize>,
}

struct Standard {
    n_user: usize,
    nx: usize,
    p: DMatrix<f64>,
    p_diagonal: bool,
    q: Vec<f64>,
    a: Vec<SparseRow>,
    b: Vec<f64>,
    g: Vec<SparseRow>,
    h: Vec<f64>,
    dims: ConeDims,
    map: RowMap,
}

enum Prepared {
    Ready(Standard),
    Crossed,
}

fn build(prog: &ConicProgram) -> Result<Prepared, KernelError> {
    let n = prog.n;
    let nl1 = prog.l1.len();
    let nx = n + 2 * nl1;

    let mut p = DMatrix::zeros(nx, nx);
    for &(i, j, v) in &prog.quad {
        p[(i, j)] += v;
    }
    let p_diagonal = prog.quad.iter().all(|&(i, j, v)| i == j || v == 0.0);
    check_psd(&p, p_diagonal)?;

    let mut q = vec![0.0; nx];
    q[..n].copy_from_slice(&prog.linear);

    let mut map = RowMap {
        lower: vec![None; n],
        upper: vec![None; n],
        fixed: vec![None; n],
        ..Default::default()
    };

    let mut a: Vec<SparseRow> = Vec::new();
    let mut b = Vec::new();
    for eq in &prog.equalities {
        a.push(eq.terms.clone());
        b.push(eq.rhs);
    }
    map.n_user_eq = a.len();
    for (k, &(i, w)) in prog.l1.iter().enumerate() {
        let (u, v) = (n + 2 * k, n + 2 * k + 1);
        q[u] += w;
        q[v] += w;
        a.push(vec![(i, 1.0), (u, -1.0), (v, 1.0)]);
        b.push(0.0);
    }

    let mut g: Vec<SparseRow> = Vec::new();
    let mut h = Vec::new();
    for i in 0..n {
        let (lo, hi) = (prog.lower[i], prog.upper[i]);
        let scale = 1.0 + lo.abs().max(hi.abs()).min(1e12);
        if lo > hi + 1e-12 * scale {
            return Ok(Prepared::Crossed);
        }
        if lo.is_finite() && hi.is_finite() && hi - lo <= 1e-12 * scale {
            map.fixed[i] = Some(a.len());
            a.push(vec![(i, 1.0)]);
            b.push(0.5 * (lo + hi));
            continue;
        }
        if lo.is_finite() {
            map.lower[i] = Some(g.len());
            g.push(vec![(i, -1.0)]);
            h.push(-lo);
        }
        if hi.is_finite() {
            map.upper[i] = Some(g.len());
            g.push(vec![(i, 1.0)]);
            h.push(hi);
        }
    }
    for k in 0..nl1 {
        for v in [n + 2 * k, n + 2 * k + 1] {
            g.push(vec![(v, -1.0)]);
            h.push(0.0);
        }
    }
    let lp = g.len();
    let mut soc = Vec::with_capacity(prog.cones.len());
    for cone in &prog.cones {
        map.cone_starts.push(g.len());
        soc.push(1 + cone.components.len());
        for expr in std::iter::once(&cone.bound).chain(&cone.components) {
            g.push(expr.terms.iter().map(|&(i, c)| (i, -c)).collect());
            h.push(expr.constant);
        }
    }

    Ok(Prepared::Ready(Standard {
        n_user: n,
        nx,
        p,
        p_diagonal,
        q,
        a,
        b,
        g,
        h,
        dims: ConeDims { lp, soc },
        map,
    }))
}

fn check_psd(p: &DMatrix<f64>, diagonal: bool) -> Result<(), KernelError> {
    let scale = p.amax().max(1.0);
    if diagonal {
        if p.diagonal().iter().any(|&v| v < -1e-12 * scale) {
            return Err(KernelError::NotConvex);
        }
        return Ok(());
    }
    if (p - p.transpose()).amax() > 1e-9 * scale {
        return Err(KernelError::NotConvex);
    }
    let mut shifted = p.clone();
    for k in 0..p.nrows() {
        shifted[(k, k)] += 1e-9 * scale;
    }
    if shifted.cholesky().is_none() {
        return Err(KernelError::NotConvex);
    }
    Ok(())
}

fn spmv(rows: &[SparseRow], x: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|r| r.iter().map(|&(j, c)| c * x[j]).sum())
        .collect()
}

fn spmv_t(rows: &[SparseRow], y: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (r, &yv) in rows.iter().zip(y) {
        if yv != 0.0 {
            for &(j, c) in r {
                out[j] += c * yv;
            }
        }
    }
    out
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Factorized reduced KKT system `[H Aᵀ; A 0]`.
enum Kkt {
    Diagonal {
        hinv: Vec<f64>,
        schur: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    },
    Dense {
        matrix: DMatrix<f64>,
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        /// Equilibration: the factor is of `D·K·D`.
        d: Vec<f64>,
    },
}

impl Standard {
    fn diagonal_structure(&self) -> bool {
        self.p_diagonal && self.dims.soc.is_empty() && self.g.iter().all(|r| r.len() <= 1)
    }

    /// `GᵀW⁻²G + P`, dense.
    fn hessian(&self, scaling: Option<&Scaling>) -> DMatrix<f64> {
        let mut hm = self.p.clone();
        for (k, row) in self.g[..self.dims.lp].iter().enumerate() {
            let w2 = scaling.map_or(1.0, |s| s.d[k] * s.d[k]);
            for &(i, ci) in row {
                for &(j, cj) in row {
                    hm[(i, j)] += ci * cj / w2;
                }
            }
        }
        for (blk, range) in self.dims.soc_ranges().into_iter().enumerate() {
            let winv2 = match scaling {
                Some(s) => s.soc_inv_square(blk),
                None => {
                    let m = range.len();
                    (0..m)
                        .map(|c| (0..m).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
                        .collect()
                }
            };
            let rows = &self.g[range.clone()];
            for (ra, row_a) in rows.iter().enumerate() {
                for (rb, row_b) in rows.iter().enumerate() {
                    let m = winv2[ra][rb];
                    if m == 0.0 {
                        continue;
                    }
                    for &(i, ci) in row_a {
                        for &(j, cj) in row_b {
                            hm[(i, j)] += ci * m * cj;
                        }
                    }
                }
            }
        }
        hm
    }

    fn factor(&self, scaling: Option<&Scaling>) -> Option<Kkt> {
        let nx = self.nx;
        let neq = self.a.len();
        if self.diagonal_structure() {
            let mut hd: Vec<f64> = (0..nx).map(|i| self.p[(i, i)]).collect();
            for (k, row) in self.g.iter().enumerate() {
                let w2 = scaling.map_or(1.0, |s| s.d[k] * s.d[k]);
                for &(i, c) in row {
                    hd[i] += c * c / w2;
                }
            }
            let scale = hd.iter().fold(0.0f64, |m, v| m.max(*v)).max(1.0);
            if hd.iter().all(|&v| v > 1e-14 * scale) {
                let hinv: Vec<f64> = hd.iter().map(|v| 1.0 / v).collect();
                let schur = if neq == 0 {
                    None
                } else {
                    let mut s = DMatrix::zeros(neq, neq);
                    for (r1, row1) in self.a.iter().enumerate() {
                        for (r2, row2) in self.a.iter().enumerate().skip(r1) {
                            let mut acc = 0.0;
                            for &(i, c1) in row1 {
                                for &(j, c2) in row2 {
                                    if i == j {
                                        acc += c1 * c2 * hinv[i];
                                    }
                                }
                            }
                            s[(r1, r2)] = acc;
                            s[(r2, r1)] = acc;
                        }
                    }
                    let lu = s.lu();
                    if !lu.is_invertible() {
                        return self.factor_dense(scaling);
                    }
                    Some(lu)
                };
                return Some(Kkt::Diagonal { hinv, schur });
            }
        }
        self.factor_dense(scaling)
    }

    fn factor_dense(&self, scaling: Option<&Scaling>) -> Option<Kkt> {
        let nx = self.nx;
        let neq = self.a.len();
        let hm = self.hessian(scaling);
        let dim = nx + neq;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (nx, nx)).copy_from(&hm);
        for (r, row) in self.a.iter().enumerate() {
            for &(j, c) in row {
                k[(nx + r, j)] += c;
                k[(j, nx + r)] += c;
            }
        }
        // Late iterates spread the Hessian over many orders of magnitude;
        // symmetric Ruiz scaling keeps the factorization usable.
        let mut d = vec![1.0; dim];
        let mut scaled = k.clone();
        for _ in 0..RUIZ_PASSES {
            let f: Vec<f64> = (0..dim)
                .map(|i| {
                    let m = scaled.row(i).amax();
                    if m > 0.0 {
                        1.0 / m.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            for i in 0..dim {
                for j in 0..dim {
                    scaled[(i, j)] *= f[i] * f[j];
                }
                d[i] *= f[i];
            }
        }
        let lu = scaled.clone().lu();
        if lu.is_invertible() {
            return Some(Kkt::Dense { matrix: k, lu, d });
        }
        // Rank-deficient equalities or a singular Hessian: regularize and
        // let iterative refinement against the exact matrix clean up.
        for i in 0..dim {
            scaled[(i, i)] += if i < nx { 1e-12 } else { -1e-12 };
        }
        let lu = scaled.lu();
        if lu.is_invertible() {
            Some(Kkt::Dense { matrix: k, lu, d })
        } else {
            None
        }
    }

    fn kkt_solve(&self, kkt: &Kkt, r1: &[f64], r2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nx = self.nx;
        match kkt {
            Kkt::Diagonal { hinv, schur } => {
                let hr: Vec<f64> = r1.iter().zip(hinv).map(|(a, b)| a * b).collect();
                let dy = match schur {
                    None => Vec::new(),
                    Some(lu) => {
                        let ahr = spmv(&self.a, &hr);
                        let rhs = DVector::from_iterator(
                            r2.len(),
                            ahr.iter().zip(r2).map(|(a, b)| a - b),
                        );
                        lu.solve(&rhs)
                            .map(|v| v.as_slice().to_vec())
                            .unwrap_or(vec![0.0; r2.len()])
                    }
                };
                let aty = spmv_t(&self.a, &dy, nx);
                let dx = (0..nx).map(|i| (r1[i] - aty[i]) * hinv[i]).collect();
                (dx, dy)
            }
            Kkt::Dense { matrix, lu, d } => {
                let rhs = DVector::from_iterator(nx + r2.len(), r1.iter().chain(r2).copied());
                let solve = |r: &DVector<f64>| -> DVector<f64> {
                    let scaled =
                        DVector::from_iterator(r.len(), r.iter().zip(d).map(|(a, b)| a * b));
                    match lu.solve(&scaled) {
                        Some(y) => {
                            DVector::from_iterator(y.len(), y.iter().zip(d).map(|(a, b)| a * b))
                        }
                        None => DVector::zeros(r.len()),
                    }
                };
                let mut sol = solve(&rhs);
                for _ in 0..2 {
                    let res = &rhs - matrix * &sol;
                    if res.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                        break;
                    }
                    sol += solve(&res);
                }
                let s = sol.as_slice();
                (s[..nx].to_vec(), s[nx..].to_vec())
            }
        }
    }

    /// Solves the linearized system
    ///
    /// ```text
    ///     P·dx + Aᵀdy + Gᵀdz = bx
    ///     A·dx               = by
    ///     G·dx + ds          = bz
    ///     W⁻¹ds + W·dz       = bs
    /// ```
    ///
    /// through the reduced factorization.
    fn solve_full(
        &self,
        kkt: &Kkt,
        scaling: &Scaling,
        rhs: [&[f64]; 4],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let dims = &self.dims;
        let [bx, by, bz, bs] = rhs;
        // dz = W⁻¹(W⁻¹(G·dx − bz) + bs)
        let mut inner = scaling.apply_inv(dims, bz);
        inner.iter_mut().for_each(|v| *v = -*v);
        axpy(1.0, bs, &mut inner);
        let u = scaling.apply_inv(dims, &inner);
        let gtu = spmv_t(&self.g, &u, self.nx);
        let r1: Vec<f64> = bx.iter().zip(&gtu).map(|(a, b)| a - b).collect();
        let (dx, dy) = self.kkt_solve(kkt, &r1, by);
        let gdx = spmv(&self.g, &dx);
        let mut inner: Vec<f64> = gdx.iter().zip(bz).map(|(a, b)| a - b).collect();
        inner = scaling.apply_inv(dims, &inner);
        axpy(1.0, bs, &mut inner);
        let dz = scaling.apply_inv(dims, &inner);
        let ds: Vec<f64> = bz.iter().zip(&gdx).map(|(a, b)| a - b).collect();
        (dx, dy, dz, ds)
    }

    /// Newton direction with `λ∘(W⁻¹Δs + WΔz) = λ∘t`, refined against the
    /// full linear system.
    fn direction(
        &self,
        kkt: &Kkt,
        scaling: &Scaling,
        rx: &[f64],
        ry: &[f64],
        rz: &[f64],
        t: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let dims = &self.dims;
        let bx: Vec<f64> = rx.iter().map(|v| -v).collect();
        let by: Vec<f64> = ry.iter().map(|v| -v).collect();
        let bz: Vec<f64> = rz.iter().map(|v| -v).collect();
        let scale = 1.0
            + inf_norm(&bx)
                .max(inf_norm(&by))
                .max(inf_norm(&bz))
                .max(inf_norm(t));
        let residual = |d: &(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)| {
            let (dx, dy, dz, ds) = d;
            let px = &self.p * DVector::from_column_slice(dx);
            let aty = spmv_t(&self.a, dy, self.nx);
            let gtz = spmv_t(&self.g, dz, self.nx);
            let ex: Vec<f64> = (0..self.nx)
                .map(|i| bx[i] - px[i] - aty[i] - gtz[i])
                .collect();
            let adx = spmv(&self.a, dx);
            let ey: Vec<f64> = by.iter().zip(&adx).map(|(b, a)| b - a).collect();
            let gdx = spmv(&self.g, dx);
            let ez: Vec<f64> = (0..bz.len()).map(|k| bz[k] - gdx[k] - ds[k]).collect();
            let wis = scaling.apply_inv(dims, ds);
            let wz = scaling.apply(dims, dz);
            let es: Vec<f64> = (0..t.len()).map(|k| t[k] - wis[k] - wz[k]).collect();
            let err = inf_norm(&ex)
                .max(inf_norm(&ey))
                .max(inf_norm(&ez))
                .max(inf_norm(&es));
            (err, [ex, ey, ez, es])
        };
        let mut sol = self.solve_full(kkt, scaling, [&bx, &by, &bz, t]);
        let (mut err, mut res) = residual(&sol);
        for _ in 0..REFINE_STEPS {
            if err <= 1e-14 * scale {
                break;
            }
            let corr = self.solve_full(kkt, scaling, [&res[0], &res[1], &res[2], &res[3]]);
            let mut next = sol.clone();
            axpy(1.0, &corr.0, &mut next.0);
            axpy(1.0, &corr.1, &mut next.1);
            axpy(1.0, &corr.2, &mut next.2);
            axpy(1.0, &corr.3, &mut next.3);
            let (next_err, next_res) = residual(&next);
            if next_err >= err {
                break;
            }
            (sol, err, res) = (next, next_err, next_res);
        }
        let (dx, dy, dz, ds) = sol;
        (dx, dy, dz, ds)
    }
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
}

struct Measures {
    pres: f64,
    gap: f64,
    kkt: f64,
}

fn measures(st: &Standard, it: &Iterate, rx: &[f64], ry: &[f64], rz: &[f64]) -> Measures {
    let px = &st.p * DVector::from_column_slice(&it.x);
    let pobj = 0.5 * dot(px.as_slice(), &it.x) + dot(&st.q, &it.x);
    let gap = dot(&it.s, &it.z);
    let bnorm = 1.0 + inf_norm(&st.b).max(inf_norm(&st.h));
    let qnorm = 1.0 + inf_norm(&st.q);
    let pres = inf_norm(ry).max(inf_norm(rz)) / bnorm;
    let dres = inf_norm(rx) / qnorm;
    let relgap = gap.max(0.0) / (1.0 + pobj.abs());
    Measures {
        pres,
        gap,
        kkt: pres.max(dres).max(relgap),
    }
}

fn residuals(st: &Standard, it: &Iterate) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let px = &st.p * DVector::from_column_slice(&it.x);
    let mut rx: Vec<f64> = px.as_slice().to_vec();
    axpy(1.0, &st.q, &mut rx);
    axpy(1.0, &spmv_t(&st.a, &it.y, st.nx), &mut rx);
    axpy(1.0, &spmv_t(&st.g, &it.z, st.nx), &mut rx);
    let mut ry = spmv(&st.a, &it.x);
    axpy(-1.0, &st.b, &mut ry);
    let mut rz = spmv(&st.g, &it.x);
    axpy(1.0, &it.s, &mut rz);
    axpy(-1.0, &st.h, &mut rz);
    (rx, ry, rz)
}

/// A normalized Farkas-type certificate `Aᵀy + Gᵀz ≈ 0`, `bᵀy + hᵀz < 0`.
fn infeasibility_certificate(st: &Standard, it: &Iterate) -> bool {
    let scale = inf_norm(&it.y).max(inf_norm(&it.z));
    if scale < 1e6 {
        return false;
    }
    let y: Vec<f64> = it.y.iter().map(|v| v / scale).collect();
    let z: Vec<f64> = it.z.iter().map(|v| v / scale).collect();
    let mut r = spmv_t(&st.a, &y, st.nx);
    axpy(1.0, &spmv_t(&st.g, &z, st.nx), &mut r);
    let value = dot(&st.b, &y) + dot(&st.h, &z);
    value < -1e-9 && inf_norm(&r) <= 1e-6 * value.abs()
}

fn shift_into_cone(dims: &ConeDims, u: &mut [f64]) {
    let viol = dims.max_violation(u);
    let scale = inf_norm(u).max(1.0);
    if viol >= -1e-8 * scale {
        let e = dims.identity();
        axpy(1.0 + viol.max(0.0), &e, u);
    }
}

fn initial_point(st: &Standard, warm: Option<&[f64]>) -> Option<Iterate> {
    let dims = &st.dims;
    let nx = st.nx;
    let neq = st.a.len();
    let m = dims.total();
    let (x, y) = match warm {
        Some(w) => {
            let mut x = vec![0.0; nx];
            x[..st.n_user].copy_from_slice(w);
            for k in 0..(nx - st.n_user) / 2 {
                // L1 link rows are `z_i − u + v = 0`.
                let i = st.a[st.map.n_user_eq + k][0].0;
                x[st.n_user + 2 * k] = w[i].max(0.0);
                x[st.n_user + 2 * k + 1] = (-w[i]).max(0.0);
            }
            (x, vec![0.0; neq])
        }
        None => {
            let kkt = st.factor(None)?;
            let gth = spmv_t(&st.g, &st.h, nx);
            let r1: Vec<f64> = st.q.iter().zip(&gth).map(|(q, g)| -q + g).collect();
            st.kkt_solve(&kkt, &r1, &st.b)
        }
    };
    let gx = spmv(&st.g, &x);
    let mut s: Vec<f64> = st.h.iter().zip(&gx).map(|(h, g)| h - g).collect();
    let mut z: Vec<f64> = match warm {
        Some(_) => dims.identity(),
        None => s.iter().map(|v| -v).collect(),
    };
    if m > 0 {
        shift_into_cone(dims, &mut s);
        shift_into_cone(dims, &mut z);
    }
    Some(Iterate { x, y, z, s })
}

/// Solves `prog` to KKT tolerance `tol`, optionally starting from a primal point.
pub fn solve(
    prog: &ConicProgram,
    tol: f64,
    warm_start: Option<&[f64]>,
) -> Result<ConicSolution, KernelError> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(KernelError::BadTolerance(tol));
    }
    prog.validate()?;
    if let Some(w) = warm_start {
        if w.len() != prog.n {
            return Err(KernelError::WarmStartLength {
                got: w.len(),
                expected: prog.n,
            });
        }
    }
    let st = match build(prog)? {
        Prepared::Crossed => return Ok(infeasible(prog, 0)),
        Prepared::Ready(st) => st,
    };
    let dims = &st.dims;

    let Some(mut it) = initial_point(&st, warm_start.filter(|w| w.iter().all(|v| v.is_finite())))
    else {
        return Ok(infeasible(prog, 0));
    };

    if dims.total() == 0 {
        // Equality-constrained QP: the initial solve is exact.
        let (rx, ry, rz) = residuals(&st, &it);
        let m = measures(&st, &it, &rx, &ry, &rz);
        let status = if m.kkt <= tol {
            SolveStatus::Optimal
        } else if m.pres > tol.sqrt() {
            SolveStatus::Infeasible
        } else {
            SolveStatus::IterLimit
        };
        return Ok(finish(prog, &st, &it, status, m.kkt, 1));
    }

    let degree = dims.degree() as f64;
    let mut best: Option<(f64, Iterate)> = None;
    let mut iterations = 0;
    let mut status = SolveStatus::IterLimit;
    let mut stalled = 0;

    for iter in 0..=MAX_ITERS {
        iterations = iter;
        let (rx, ry, rz) = residuals(&st, &it);
        let m = measures(&st, &it, &rx, &ry, &rz);
        if best.as_ref().is_none_or(|(k, _)| m.kkt < *k) {
            best = Some((
                m.kkt,
                Iterate {
                    x: it.x.clone(),
                    y: it.y.clone(),
                    z: it.z.clone(),
                    s: it.s.clone(),
                },
            ));
        }
        if m.kkt <= tol {
            status = SolveStatus::Optimal;
            break;
        }
        if infeasibility_certificate(&st, &it) {
            status = SolveStatus::Infeasible;
            break;
        }
        if iter == MAX_ITERS || stalled >= 3 {
            break;
        }

        let scaling = Scaling::new(dims, &it.s, &it.z);
        let Some(kkt) = st.factor(Some(&scaling)) else {
            break;
        };
        let lambda = &scaling.lambda;
        let mu = m.gap.max(0.0) / degree;

        // Predictor: λ∘t = −λ∘λ, so t = −λ.
        let t_aff: Vec<f64> = lambda.iter().map(|v| -v).collect();
        let (_, _, dz_a, ds_a) = st.direction(&kkt, &scaling, &rx, &ry, &rz, &t_aff);
        let alpha_a = dims
            .max_step(&it.s, &ds_a, 1.0)
            .min(dims.max_step(&it.z, &dz_a, 1.0));
        let mut s_a = it.s.clone();
        axpy(alpha_a, &ds_a, &mut s_a);
        let mut z_a = it.z.clone();
        axpy(alpha_a, &dz_a, &mut z_a);
        let sigma = if m.gap > 0.0 {
            (dot(&s_a, &z_a) / m.gap).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };

        // Corrector with the second-order term.
        let ws = scaling.apply_inv(dims, &ds_a);
        let wz = scaling.apply(dims, &dz_a);
        let cross = dims.product(&ws, &wz);
        let ll = dims.product(lambda, lambda);
        let e = dims.identity();
        let dsv: Vec<f64> = (0..ll.len())
            .map(|k| -ll[k] - cross[k] + sigma * mu * e[k])
            .collect();
        let t = dims.divide(lambda, &dsv);
        let (dx, dy, dz, ds) = st.direction(&kkt, &scaling, &rx, &ry, &rz, &t);
        let alpha_max =
            dims.max_step(&it.s, &ds, f64::INFINITY)
                .min(dims.max_step(&it.z, &dz, f64::INFINITY));
        let alpha = (STEP_FRACTION * alpha_max).min(1.0);
        if !alpha.is_finite() || alpha < 1e-12 {
            stalled += 1;
        }
        if [&dx, &dy, &dz, &ds]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            break;
        }
        axpy(alpha, &dx, &mut it.x);
        axpy(alpha, &dy, &mut it.y);
        axpy(alpha, &dz, &mut it.z);
        axpy(alpha, &ds, &mut it.s);
    }

    let (kkt, chosen) = match status {
        SolveStatus::Optimal | SolveStatus::Infeasible => {
            let (rx, ry, rz) = residuals(&st, &it);
            (measures(&st, &it, &rx, &ry, &rz).kkt, it)
        }
        SolveStatus::IterLimit => {
            let (k, b) = best.expect("at least one iterate recorded");
            // A large primal residual at the end usually means no feasible point.
            let (_, ry, rz) = residuals(&st, &b);
            let bnorm = 1.0 + inf_norm(&st.b).max(inf_norm(&st.h));
            if inf_norm(&ry).max(inf_norm(&rz)) / bnorm > 1e-6 && infeasibility_certificate(&st, &b)
            {
                status = SolveStatus::Infeasible;
            }
            (k, b)
        }
    };
    Ok(finish(prog, &st, &chosen, status, kkt, iterations))
}

fn infeasible(prog: &ConicProgram, iterations: usize) -> ConicSolution {
    let x: Vec<f64> = (0..prog.n)
        .map(|i| {
            let (lo, hi) = (prog.lower[i], prog.upper[i]);
            if lo.is_finite() {
                lo
            } else if hi.is_finite() {
                hi
            } else {
                0.0
            }
        })
        .collect();
    ConicSolution {
        objective: prog.objective(&x),
        x,
        status: SolveStatus::Infeasible,
        kkt_residual: f64::INFINITY,
        iterations,
        lower_duals: vec![0.0; prog.n],
        upper_duals: vec![0.0; prog.n],
        equality_duals: vec![0.0; prog.equalities.len()],
        cone_duals: prog
            .cones
            .iter()
            .map(|c| vec![0.0; c.components.len() + 1])
            .collect(),
    }
}

fn finish(
    prog: &ConicProgram,
    st: &Standard,
    it: &Iterate,
    status: SolveStatus,
    kkt: f64,
    iterations: usize,
) -> ConicSolution {
    let n = st.n_user;
    let x = it.x[..n].to_vec();
    let mut lower_duals = vec![0.0; n];
    let mut upper_duals = vec![0.0; n];
    for i in 0..n {
        if let Some(r) = st.map.lower[i] {
            lower_duals[i] = it.z[r];
        }
        if let Some(r) = st.map.upper[i] {
            upper_duals[i] = it.z[r];
        }
        if let Some(r) = st.map.fixed[i] {
            lower_duals[i] = (-it.y[r]).max(0.0);
            upper_duals[i] = it.y[r].max(0.0);
        }
    }
    let cone_duals = st
        .map
        .cone_starts
        .iter()
        .zip(&st.dims.soc)
        .map(|(&start, &len)| it.z[start..start + len].to_vec())
        .collect();
    ConicSolution {
        objective: prog.objective(&x),
        x,
        status,
        kkt_residual: kkt,
        iterations,
        lower_duals,
        upper_duals,
        equality_duals: it.y[..st.map.n_user_eq].to_vec(),
        cone_duals,
    }
}

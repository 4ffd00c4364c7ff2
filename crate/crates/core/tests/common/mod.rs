#![allow(dead_code)]

use gridmarket::convex::{AffineExpr, ConicProgram, SocBlock};

/// Random small program over two variables in a box, optionally with a
/// disc constraint and L1 terms. Returned with its box for grid search.
#[derive(Debug, Clone)]
pub struct SmallProgram {
    pub prog: ConicProgram,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub disc: Option<f64>,
}

pub fn small_program(
    q: [f64; 3],
    c: [f64; 2],
    l1: [f64; 2],
    disc: Option<f64>,
    lo: [f64; 2],
    hi: [f64; 2],
) -> SmallProgram {
    let mut prog = ConicProgram::new(2);
    // Diagonal dominance keeps the quadratic convex.
    let off = q[2].clamp(-0.9, 0.9) * (q[0] * q[1]).sqrt();
    prog.add_quadratic(0, 0, q[0])
        .add_quadratic(1, 1, q[1])
        .add_quadratic(0, 1, off);
    prog.add_linear(0, c[0]).add_linear(1, c[1]);
    for (i, w) in l1.iter().enumerate() {
        if *w > 0.0 {
            prog.add_l1(i, *w);
        }
    }
    if let Some(r) = disc {
        prog.add_soc(SocBlock::new(
            vec![AffineExpr::var(0), AffineExpr::var(1)],
            AffineExpr::constant(r),
        ));
    }
    prog.set_bounds(0, lo[0], hi[0]).set_bounds(1, lo[1], hi[1]);
    SmallProgram { prog, lo, hi, disc }
}

/// Minimum over a refined grid of the box, and over a refined scan of the
/// disc boundary when there is one (box refinement stalls on a curved
/// active constraint).
pub fn brute_force(p: &SmallProgram) -> Option<(f64, [f64; 2])> {
    let inner = box_search(p);
    let edge = p.disc.and_then(|r| circle_search(p, r));
    match (inner, edge) {
        (Some(a), Some(b)) => Some(if b.0 < a.0 { b } else { a }),
        (a, b) => a.or(b),
    }
}

fn circle_search(p: &SmallProgram, r: f64) -> Option<(f64, [f64; 2])> {
    const N: usize = 3600;
    let (mut lo, mut hi) = (0.0, std::f64::consts::TAU);
    let mut best: Option<(f64, f64)> = None;
    loop {
        let h = (hi - lo) / N as f64;
        for k in 0..=N {
            let t = lo + h * k as f64;
            let z = [r * t.cos(), r * t.sin()];
            // Rounding can put the point a hair outside the disc.
            if p.prog.max_violation(&z) > 1e-12 {
                continue;
            }
            let f = p.prog.objective(&z);
            if best.is_none_or(|(g, _)| f < g) {
                best = Some((f, t));
            }
        }
        let (f, t) = best?;
        if h < 1e-10 {
            return Some((f, [r * t.cos(), r * t.sin()]));
        }
        lo = t - 3.0 * h;
        hi = t + 3.0 * h;
    }
}

fn box_search(p: &SmallProgram) -> Option<(f64, [f64; 2])> {
    const N: usize = 40;
    let (mut lo, mut hi) = (p.lo, p.hi);
    let mut best: Option<(f64, [f64; 2])> = None;
    loop {
        let h = [(hi[0] - lo[0]) / N as f64, (hi[1] - lo[1]) / N as f64];
        for a in 0..=N {
            for b in 0..=N {
                let z = [lo[0] + h[0] * a as f64, lo[1] + h[1] * b as f64];
                if p.prog.max_violation(&z) > 0.0 {
                    continue;
                }
                let f = p.prog.objective(&z);
                if best.is_none_or(|(g, _)| f < g) {
                    best = Some((f, z));
                }
            }
        }
        let (_, z) = best?;
        if h[0].max(h[1]) < 1e-9 {
            return best;
        }
        for k in 0..2 {
            lo[k] = (z[k] - 3.0 * h[k]).max(p.lo[k]);
            hi[k] = (z[k] + 3.0 * h[k]).min(p.hi[k]);
        }
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

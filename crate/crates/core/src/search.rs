//! One-dimensional minimization: coarse grid followed by golden-section
//! refinement around the best grid point.

use alloc::vec::Vec;

use crate::math::{abs, exp, ln, sqrt};

/// Evaluated point and value; `None` marks a failed evaluation.
pub type TracePoint = (f64, Option<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub trace: Vec<TracePoint>,
    /// Set when the grid values are not unimodal, so the refinement may have
    /// missed a separate basin.
    pub non_convex: bool,
}

/// `n` log-spaced points from `lo` to `hi`, inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1);
    if n == 1 {
        return alloc::vec![lo];
    }
    let (a, b) = (ln(lo), ln(hi));
    (0..n)
        .map(|i| match i {
            0 => lo,
            _ if i == n - 1 => hi,
            _ => exp(a + (b - a) * i as f64 / (n - 1) as f64),
        })
        .collect()
}

/// `n` evenly spaced points from `lo` to `hi`, inclusive.
pub fn lin_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a minimum of `f` on `[a, b]`. Failed
/// evaluations count as `+inf`. Returns the best point seen.
pub fn golden_section(
    mut f: impl FnMut(f64) -> Option<f64>,
    mut a: f64,
    mut b: f64,
    tol: f64,
    max_iter: usize,
    trace: &mut Vec<TracePoint>,
) -> (f64, f64) {
    let mut eval = |x: f64, trace: &mut Vec<TracePoint>| {
        let v = f(x);
        trace.push((x, v));
        v.unwrap_or(f64::INFINITY)
    };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, trace);
    let mut fd = eval(d, trace);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for _ in 0..max_iter {
        if abs(b - a) <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, trace);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, trace);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

/// Scale on which the refinement runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

/// Evaluate `f` on an ascending `grid`, then refine with golden section
/// between the neighbours of the best grid point. The returned minimum is
/// never worse than the best grid value; ties among grid values resolve to
/// the largest.
pub fn grid_then_golden(
    f: impl FnMut(f64) -> Option<f64>,
    grid: &[f64],
    scale: Scale,
    rel_tol: f64,
    max_iter: usize,
) -> Option<Minimum> {
    scan_then_golden(f, grid, scale, rel_tol, max_iter, None)
}

/// Like [`grid_then_golden`], but with `patience = Some(p)` the grid is
/// scanned from the top down and the scan stops once `p` consecutive values
/// exceed the best so far. Useful when small grid values are expensive, as
/// for Lasso fits near interpolation.
pub fn scan_then_golden(
    mut f: impl FnMut(f64) -> Option<f64>,
    grid: &[f64],
    scale: Scale,
    rel_tol: f64,
    max_iter: usize,
    patience: Option<usize>,
) -> Option<Minimum> {
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut values = alloc::vec![f64::INFINITY; grid.len()];
    let mut best_seen = f64::INFINITY;
    let mut worse = 0usize;
    let mut lowest = grid.len();
    let order: Vec<usize> = match patience {
        Some(_) => (0..grid.len()).rev().collect(),
        None => (0..grid.len()).collect(),
    };
    for i in order {
        let v = f(grid[i]);
        trace.push((grid[i], v));
        let v = v.unwrap_or(f64::INFINITY);
        values[i] = v;
        lowest = lowest.min(i);
        if let Some(p) = patience {
            // Plateaus do not count against the scan.
            if v <= best_seen {
                best_seen = v;
                worse = 0;
            } else if best_seen.is_finite() {
                worse += 1;
                if worse >= p {
                    break;
                }
            }
        }
    }
    let scanned = &values[lowest..];
    // Exact ties go to the largest grid value: on a flat stretch of a
    // penalty path that is the sparsest fit.
    let (ib, &vbest) = scanned
        .iter()
        .enumerate()
        .rev()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let ibest = lowest + ib;
    if !vbest.is_finite() {
        return None;
    }
    let non_convex = local_minima(scanned) > 1;
    let mut best = (grid[ibest], vbest);
    if grid.len() >= 2 {
        let lo = grid[ibest.saturating_sub(1)];
        let hi = grid[(ibest + 1).min(grid.len() - 1)];
        let (a, b, to_x): (f64, f64, fn(f64) -> f64) = match scale {
            Scale::Linear => (lo, hi, |u| u),
            Scale::Log => (ln(lo), ln(hi), exp),
        };
        let tol = match scale {
            Scale::Linear => rel_tol * (abs(hi) + abs(lo)).max(rel_tol),
            Scale::Log => rel_tol,
        };
        let mut refine = Vec::new();
        let (u, v) = golden_section(|u| f(to_x(u)), a, b, tol, max_iter, &mut refine);
        trace.extend(refine.into_iter().map(|(u, v)| (to_x(u), v)));
        if v < best.1 {
            best = (to_x(u), v);
        }
    }
    Some(Minimum {
        x: best.0,
        value: best.1,
        trace,
        non_convex,
    })
}

// Count strict local minima in a sequence, treating plateaus as one.
fn local_minima(v: &[f64]) -> usize {
    let w: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    let mut dedup: Vec<f64> = Vec::with_capacity(w.len());
    for x in w {
        if dedup.last().is_none_or(|&l| l != x) {
            dedup.push(x);
        }
    }
    let n = dedup.len();
    (0..n)
        .filter(|&i| {
            let left = i == 0 || dedup[i - 1] > dedup[i];
            let right = i + 1 == n || dedup[i + 1] > dedup[i];
            left && right
        })
        .count()
}

/// Geometric mean of two positive values.
pub fn geometric_mid(a: f64, b: f64) -> f64 {
    sqrt(a * b)
}

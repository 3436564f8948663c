//! Weighted-L1 coordinate descent and the two stages built on it.
//!
//! Every problem is
//!
//! ```text
//! minimize  ½‖(y − offset) − A x‖² + Σᵢ pᵢ |xᵢ|
//! ```
//!
//! with per-coordinate penalties `pᵢ ∈ [0, ∞]`. The solver exits only after a
//! full pass over all coordinates certifies the KKT conditions to the
//! requested tolerance.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math::{abs, signum};
use crate::matrix::{Design, Matrix, Stacked};
use crate::model::{Estimate, GroundTruth, Hyperparams, ProblemGeometry, Stage};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LassoError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("penalty {index} is {value}; penalties must be non-negative")]
    InvalidPenalty { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no convergence after {sweeps} sweeps, KKT residual {kkt_violation:e}")]
    NotConverged { kkt_violation: f64, sweeps: usize },
    #[error("ground truth has {truth} classes but the geometry has {geometry}")]
    MissingGroundTruth { truth: usize, geometry: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Largest KKT violation accepted at exit.
    pub tolerance: f64,
    /// Budget of coordinate sweeps, active-set and full sweeps combined.
    pub max_iters: usize,
    /// Restrict inner sweeps to the active set plus KKT violators.
    pub screening: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iters: 100_000,
            screening: true,
        }
    }
}

/// Minimizer of `½x² − hx + threshold·|x|`. Sub-threshold inputs give an exact
/// zero.
#[inline]
pub fn soft_threshold(h: f64, threshold: f64) -> f64 {
    if h > threshold {
        h - threshold
    } else if h < -threshold {
        h + threshold
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct WeightedLassoProblem<'a, D: Design + ?Sized> {
    pub design: &'a D,
    pub response: &'a [f64],
    /// Subtracted from the response before fitting.
    pub offset: Option<Vec<f64>>,
    pub penalties: Vec<f64>,
}

impl<'a, D: Design + ?Sized> WeightedLassoProblem<'a, D> {
    pub fn new(design: &'a D, response: &'a [f64], penalties: Vec<f64>) -> Self {
        Self {
            design,
            response,
            offset: None,
            penalties,
        }
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        self.offset = Some(offset);
        self
    }

    pub fn validate(&self) -> Result<(), LassoError> {
        if self.response.len() != self.design.nrows() {
            return Err(LassoError::DimensionMismatch(
                "response length != design rows",
            ));
        }
        if self.penalties.len() != self.design.ncols() {
            return Err(LassoError::DimensionMismatch(
                "penalty length != design columns",
            ));
        }
        if let Some(off) = &self.offset {
            if off.len() != self.response.len() {
                return Err(LassoError::DimensionMismatch(
                    "offset length != response length",
                ));
            }
            if off.iter().any(|v| !v.is_finite()) {
                return Err(LassoError::NonFinite("offset"));
            }
        }
        if self.response.iter().any(|v| !v.is_finite()) {
            return Err(LassoError::NonFinite("response"));
        }
        for (index, &value) in self.penalties.iter().enumerate() {
            if value.is_nan() || value < 0.0 {
                return Err(LassoError::InvalidPenalty { index, value });
            }
        }
        Ok(())
    }

    /// Effective response `y − offset`.
    pub fn target(&self) -> Vec<f64> {
        match &self.offset {
            Some(off) => self.response.iter().zip(off).map(|(y, o)| y - o).collect(),
            None => self.response.to_vec(),
        }
    }

    /// Objective value at `x`; `+inf` if a hard-constrained coordinate is
    /// non-zero.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut r = self.target();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                self.design.col_axpy(j, -xj, &mut r);
            }
        }
        let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        let mut pen = 0.0;
        for (&p, &xj) in self.penalties.iter().zip(x) {
            if xj != 0.0 {
                pen += p * abs(xj);
            }
        }
        loss + pen
    }

    /// Largest KKT violation at `x`.
    pub fn kkt_violation(&self, x: &[f64]) -> f64 {
        let mut r = self.target();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                self.design.col_axpy(j, -xj, &mut r);
            }
        }
        (0..x.len())
            .map(|j| coordinate_violation(self.design.col_dot(j, &r), x[j], self.penalties[j]))
            .fold(0.0, f64::max)
    }
}

// KKT violation of one coordinate given its negative loss gradient `g`.
#[inline]
fn coordinate_violation(g: f64, x: f64, p: f64) -> f64 {
    if x != 0.0 {
        abs(g - p * signum(x))
    } else if p == f64::INFINITY {
        0.0
    } else {
        (abs(g) - p).max(0.0)
    }
}

struct Solver<'p, 'a, D: Design + ?Sized> {
    problem: &'p WeightedLassoProblem<'a, D>,
    target: Vec<f64>,
    x: Vec<f64>,
    r: Vec<f64>,
    norms: Vec<f64>,
}

impl<'p, 'a, D: Design + ?Sized> Solver<'p, 'a, D> {
    fn new(problem: &'p WeightedLassoProblem<'a, D>, start: Option<&[f64]>) -> Self {
        let n = problem.design.ncols();
        let mut x = match start {
            Some(s) => s.to_vec(),
            None => alloc::vec![0.0; n],
        };
        for (xj, &p) in x.iter_mut().zip(&problem.penalties) {
            if p == f64::INFINITY {
                *xj = 0.0;
            }
        }
        let norms = (0..n).map(|j| problem.design.col_sq_norm(j)).collect();
        let target = problem.target();
        let mut s = Self {
            problem,
            r: target.clone(),
            target,
            x,
            norms,
        };
        s.refresh_residual();
        s
    }

    fn refresh_residual(&mut self) {
        self.r.copy_from_slice(&self.target);
        for (j, &xj) in self.x.iter().enumerate() {
            if xj != 0.0 {
                self.problem.design.col_axpy(j, -xj, &mut self.r);
            }
        }
    }

    // One exact coordinate minimization; returns the pre-update violation.
    #[inline]
    fn update(&mut self, j: usize) -> f64 {
        let p = self.problem.penalties[j];
        let nj = self.norms[j];
        if p == f64::INFINITY || nj == 0.0 {
            return 0.0;
        }
        let old = self.x[j];
        let g = self.problem.design.col_dot(j, &self.r);
        let viol = coordinate_violation(g, old, p);
        let new = soft_threshold(g + nj * old, p) / nj;
        if new != old {
            self.problem.design.col_axpy(j, old - new, &mut self.r);
            self.x[j] = new;
        }
        viol
    }

    fn sweep(&mut self, set: &[usize]) -> f64 {
        let mut worst = 0.0f64;
        for &j in set {
            worst = worst.max(self.update(j));
        }
        worst
    }

    // Violations of every coordinate at the current iterate, no updates.
    fn certify(&mut self) -> Vec<f64> {
        self.refresh_residual();
        (0..self.x.len())
            .map(|j| {
                coordinate_violation(
                    self.problem.design.col_dot(j, &self.r),
                    self.x[j],
                    self.problem.penalties[j],
                )
            })
            .collect()
    }
}

/// Solve a weighted Lasso problem by cyclic coordinate descent.
pub fn fit_weighted_lasso<D: Design + ?Sized>(
    problem: &WeightedLassoProblem<'_, D>,
    options: &SolverOptions,
    warm_start: Option<&Estimate>,
    stage: Stage,
) -> Result<Estimate, LassoError> {
    problem.validate()?;
    if !(options.tolerance > 0.0) {
        return Err(LassoError::NonFinite("tolerance"));
    }
    let n = problem.design.ncols();
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(LassoError::DimensionMismatch(
                "warm start length != design columns",
            ));
        }
    }
    let mut s = Solver::new(problem, warm_start.map(|w| w.coefficients.as_slice()));
    let tol = options.tolerance;
    let all: Vec<usize> = (0..n).collect();
    let mut sweeps = 0usize;
    loop {
        let viol = s.certify();
        sweeps += 1;
        let worst = viol.iter().copied().fold(0.0, f64::max);
        if worst <= tol {
            return Ok(Estimate {
                coefficients: s.x,
                stage,
                kkt_violation: worst,
                sweeps,
            });
        }
        if sweeps >= options.max_iters {
            return Err(LassoError::NotConverged {
                kkt_violation: worst,
                sweeps,
            });
        }
        let set: Vec<usize> = if options.screening {
            (0..n).filter(|&j| s.x[j] != 0.0 || viol[j] > tol).collect()
        } else {
            all.clone()
        };
        // Inner sweeps until the working set looks converged; the next full
        // pass decides whether that was enough.
        loop {
            let w = s.sweep(&set);
            sweeps += 1;
            if w <= 0.25 * tol {
                break;
            }
            if sweeps >= options.max_iters {
                let viol = s.certify();
                return Err(LassoError::NotConverged {
                    kkt_violation: viol.iter().copied().fold(0.0, f64::max),
                    sweeps,
                });
            }
        }
    }
}

/// Objective value after each of `sweeps` plain cyclic sweeps from zero.
pub fn objective_trace<D: Design + ?Sized>(
    problem: &WeightedLassoProblem<'_, D>,
    sweeps: usize,
) -> Result<Vec<f64>, LassoError> {
    problem.validate()?;
    let n = problem.design.ncols();
    let mut s = Solver::new(problem, None);
    let all: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(sweeps + 1);
    trace.push(problem.objective(&s.x));
    for _ in 0..sweeps {
        s.sweep(&all);
        trace.push(problem.objective(&s.x));
    }
    Ok(trace)
}

/// Pooled first stage: ordinary Lasso on the row-stack of all datasets.
pub fn fit_pretraining(
    datasets: &[(&Matrix, &[f64])],
    lambda1: f64,
    options: &SolverOptions,
    warm_start: Option<&Estimate>,
) -> Result<Estimate, LassoError> {
    let stacked = Stacked::new(datasets.iter().map(|(a, _)| *a).collect()).ok_or(
        LassoError::DimensionMismatch("datasets must share a column count"),
    )?;
    for (a, y) in datasets {
        if a.rows() != y.len() {
            return Err(LassoError::DimensionMismatch(
                "response length != design rows",
            ));
        }
    }
    let response: Vec<f64> = datasets
        .iter()
        .flat_map(|(_, y)| y.iter().copied())
        .collect();
    let problem =
        WeightedLassoProblem::new(&stacked, &response, alloc::vec![lambda1; stacked.ncols()]);
    fit_weighted_lasso(&problem, options, warm_start, Stage::First)
}

/// Per-coordinate fine-tuning penalties: `lambda2` on the first-stage support,
/// `lambda2 + dlambda` off it.
pub fn finetune_penalties(first_stage: &Estimate, hyper: &Hyperparams) -> Vec<f64> {
    let off = hyper.dlambda.off_support_penalty(hyper.lambda2);
    first_stage
        .coefficients
        .iter()
        .map(|&x| if x != 0.0 { hyper.lambda2 } else { off })
        .collect()
}

/// Second stage on the target data: offset by `kappa · A x̂₁`, support-weighted
/// penalty.
pub fn fit_finetune(
    target: (&Matrix, &[f64]),
    first_stage: &Estimate,
    hyper: &Hyperparams,
    options: &SolverOptions,
    warm_start: Option<&Estimate>,
) -> Result<Estimate, LassoError> {
    let (a, y) = target;
    if first_stage.len() != a.cols() {
        return Err(LassoError::DimensionMismatch(
            "first-stage length != design columns",
        ));
    }
    let mut problem = WeightedLassoProblem::new(a, y, finetune_penalties(first_stage, hyper));
    if hyper.kappa != 0.0 {
        let mut off = a.matvec(&first_stage.coefficients);
        off.iter_mut().for_each(|v| *v *= hyper.kappa);
        problem = problem.with_offset(off);
    }
    fit_weighted_lasso(&problem, options, warm_start, Stage::Second)
}

fn sq_dist_over_n(x: &[f64], r: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
    s / x.len() as f64
}

/// Exact expected test errors of both stages over fresh Gaussian test
/// designs and noise, conditional on the fitted estimates.
///
/// Returns `(eps1, eps2)`; `eps2` is `None` without a second-stage estimate.
pub fn conditional_gen_error(
    first_stage: &Estimate,
    second_stage: Option<&Estimate>,
    truth: &GroundTruth,
    geometry: &ProblemGeometry,
    hyper: &Hyperparams,
) -> Result<(f64, Option<f64>), LassoError> {
    let k = geometry.num_classes();
    if truth.num_classes() != k {
        return Err(LassoError::MissingGroundTruth {
            truth: truth.num_classes(),
            geometry: k,
        });
    }
    if first_stage.len() != truth.n_features {
        return Err(LassoError::DimensionMismatch(
            "estimate length != feature count",
        ));
    }
    let mut eps1 = 0.0;
    let mut r1 = Vec::new();
    for c in 1..=k {
        let r = truth
            .regression_vector(c)
            .map_err(|_| LassoError::DimensionMismatch("class index"))?;
        let sigma = geometry.sigmas()[c - 1];
        eps1 += geometry.alphas()[c - 1]
            * (sq_dist_over_n(&first_stage.coefficients, &r) + sigma * sigma);
        if c == 1 {
            r1 = r;
        }
    }
    let eps2 = match second_stage {
        None => None,
        Some(x2) => {
            if x2.len() != truth.n_features {
                return Err(LassoError::DimensionMismatch(
                    "estimate length != feature count",
                ));
            }
            let pred: Vec<f64> = first_stage
                .coefficients
                .iter()
                .zip(&x2.coefficients)
                .map(|(a, b)| hyper.kappa * a + b)
                .collect();
            let sigma = geometry.sigmas()[0];
            Some(geometry.target_alpha() * (sq_dist_over_n(&pred, &r1) + sigma * sigma))
        }
    };
    Ok((eps1, eps2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeltaLambda;
    use alloc::vec;

    fn small_design() -> (Matrix, Vec<f64>) {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.5, -0.2],
            vec![0.3, -1.0, 0.8],
            vec![-0.4, 0.2, 1.1],
            vec![0.9, 0.7, 0.1],
        ])
        .unwrap();
        (a, vec![1.0, -0.5, 2.0, 0.3])
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
        assert_eq!(soft_threshold(0.3, 0.5), 0.0);
        assert!((soft_threshold(-1.2, 0.2) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn infinite_penalties_give_zero() {
        let (a, y) = small_design();
        let p = WeightedLassoProblem::new(&a, &y, vec![f64::INFINITY; 3]);
        let est = fit_weighted_lasso(&p, &SolverOptions::default(), None, Stage::First).unwrap();
        assert!(est.coefficients.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_penalty_square_design_is_least_squares() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let y = [3.0, 5.0];
        let p = WeightedLassoProblem::new(&a, &y, vec![0.0, 0.0]);
        let est = fit_weighted_lasso(&p, &SolverOptions::default(), None, Stage::First).unwrap();
        assert!((est.coefficients[0] - 0.8).abs() < 1e-8);
        assert!((est.coefficients[1] - 1.4).abs() < 1e-8);
    }

    #[test]
    fn kkt_certificate_holds_at_exit() {
        let (a, y) = small_design();
        let p = WeightedLassoProblem::new(&a, &y, vec![0.3, 0.1, 0.6])
            .with_offset(vec![0.1, 0.0, -0.2, 0.4]);
        let est = fit_weighted_lasso(&p, &SolverOptions::default(), None, Stage::First).unwrap();
        assert!(p.kkt_violation(&est.coefficients) <= 1e-8);
    }

    #[test]
    fn rejects_bad_penalties_and_shapes() {
        let (a, y) = small_design();
        let p = WeightedLassoProblem::new(&a, &y, vec![0.3, -0.1, 0.6]);
        assert!(matches!(
            fit_weighted_lasso(&p, &SolverOptions::default(), None, Stage::First),
            Err(LassoError::InvalidPenalty { index: 1, .. })
        ));
        let p = WeightedLassoProblem::new(&a, &y[..3], vec![0.3; 3]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn not_converged_reports_residual() {
        let (a, y) = small_design();
        let p = WeightedLassoProblem::new(&a, &y, vec![0.0; 3]);
        let opts = SolverOptions {
            tolerance: 1e-14,
            max_iters: 2,
            screening: true,
        };
        match fit_weighted_lasso(&p, &opts, None, Stage::First) {
            Err(LassoError::NotConverged { kkt_violation, .. }) => assert!(kkt_violation > 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn finetune_penalties_follow_support() {
        let first = Estimate {
            coefficients: vec![0.0, 1.0, -2.0],
            stage: Stage::First,
            kkt_violation: 0.0,
            sweeps: 0,
        };
        let h = Hyperparams::new(0.1, 0.2, 1.0, DeltaLambda::new(0.5).unwrap()).unwrap();
        assert_eq!(finetune_penalties(&first, &h), vec![0.7, 0.2, 0.2]);
        let h = Hyperparams::new(0.1, 0.2, 1.0, DeltaLambda::INFINITE).unwrap();
        assert_eq!(finetune_penalties(&first, &h)[0], f64::INFINITY);
    }

    #[test]
    fn constrained_finetune_stays_on_support() {
        let (a, y) = small_design();
        let first = Estimate {
            coefficients: vec![0.0, 0.4, 0.0],
            stage: Stage::First,
            kkt_violation: 0.0,
            sweeps: 0,
        };
        let h = Hyperparams::new(0.1, 0.01, 0.0, DeltaLambda::INFINITE).unwrap();
        let est = fit_finetune((&a, &y), &first, &h, &SolverOptions::default(), None).unwrap();
        assert_eq!(est.coefficients[0], 0.0);
        assert_eq!(est.coefficients[2], 0.0);
        assert_ne!(est.coefficients[1], 0.0);
    }
}

//! K-fold cross-validated tuning on finite data.
//!
//! Every dataset is split into the same number of folds (dataset 0 is the
//! target). The first stage for fold `f` is fitted on all rows outside fold
//! `f`, and `λ1` minimizes the pooled held-out error, the finite-data
//! counterpart of the first-stage generalization error. The second stage for
//! fold `f` starts from that fit and is scored on the target rows of fold
//! `f`, so no first-stage fit ever sees the rows it is validated on.
//!
//! Leave-one-out is `folds = M` (target rows); sources with fewer rows than
//! folds simply leave some folds without source test rows. It costs `M`
//! pooled Lasso fits per `λ1` and `M` fine-tuning fits per hyperparameter
//! point.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::lasso::{fit_finetune, fit_pretraining, LassoError, SolverOptions};
use crate::matrix::{Design, Matrix};
use crate::model::{Estimate, Hyperparams};
use crate::rng::{stream, StreamKind};
use crate::search::{scan_then_golden, Minimum, Scale};
use crate::strategies::{
    search_strategies, Grids, Objective, StrategyKind, StrategySet, TraceEntry, TuningResult,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Early stop for penalty scans when the grids leave it unset; small
    /// penalties make near-interpolating fits that are slow to certify.
    pub patience: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            solver: SolverOptions::default(),
            patience: Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CvError {
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("{folds} folds leave an empty fold with {rows} target rows")]
    FoldTooSmall { folds: usize, rows: usize },
    #[error("no datasets")]
    NoData,
    #[error("datasets disagree on the number of features")]
    DimensionMismatch,
    #[error("first stage failed at every lambda1")]
    FirstStage,
    #[error("search failed: {0}")]
    Search(&'static str),
    #[error(transparent)]
    Lasso(#[from] LassoError),
}

/// Fold index of every target row: a seeded shuffle dealt round-robin, so
/// fold sizes differ by at most one.
pub fn fold_assignment(rows: usize, folds: usize, seed: u64) -> Result<Vec<usize>, CvError> {
    if folds < 2 {
        return Err(CvError::TooFewFolds(folds));
    }
    if folds > rows {
        return Err(CvError::FoldTooSmall { folds, rows });
    }
    Ok(deal(rows, folds, seed, 0))
}

fn deal(rows: usize, folds: usize, seed: u64, dataset: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut stream(seed, StreamKind::Folds, dataset));
    let mut assign = alloc::vec![0; rows];
    for (pos, &row) in order.iter().enumerate() {
        assign[row] = pos % folds;
    }
    assign
}

#[derive(Debug, Clone)]
struct Part {
    train: Matrix,
    y_train: Vec<f64>,
    test: Matrix,
    y_test: Vec<f64>,
}

impl Part {
    fn new(a: &Matrix, y: &[f64], assign: &[usize], fold: usize) -> Self {
        let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
            (0..a.rows()).partition(|&i| assign[i] == fold);
        Self {
            train: a.select_rows(&train_idx),
            y_train: train_idx.iter().map(|&i| y[i]).collect(),
            test: a.select_rows(&test_idx),
            y_test: test_idx.iter().map(|&i| y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage1Fit {
    fits: Vec<Estimate>,
    error: f64,
}

/// Cached cross-validation objective.
#[derive(Debug, Clone)]
pub struct CvEvaluator<'a> {
    datasets: Vec<(&'a Matrix, &'a [f64])>,
    assign: Vec<Vec<usize>>,
    target: Vec<Part>,
    total_rows: usize,
    solver: SolverOptions,
    stage1: BTreeMap<u64, Option<Stage1Fit>>,
    warm1: Vec<Option<Estimate>>,
    warm2: Vec<Option<Estimate>>,
    cache: BTreeMap<[u64; 4], Option<f64>>,
    trace: Vec<TraceEntry>,
}

impl<'a> CvEvaluator<'a> {
    /// `datasets[0]` is the target; the rest are sources.
    pub fn new(datasets: &[(&'a Matrix, &'a [f64])], options: &CvOptions) -> Result<Self, CvError> {
        let &(a, y) = datasets.first().ok_or(CvError::NoData)?;
        if datasets
            .iter()
            .any(|(m, r)| m.cols() != a.cols() || m.rows() != r.len())
        {
            return Err(CvError::DimensionMismatch);
        }
        let folds = options.folds;
        let mut assign = alloc::vec![fold_assignment(a.rows(), folds, options.seed)?];
        for (k, (m, _)) in datasets.iter().enumerate().skip(1) {
            assign.push(deal(m.rows(), folds, options.seed, k as u32));
        }
        let target = (0..folds).map(|f| Part::new(a, y, &assign[0], f)).collect();
        Ok(Self {
            datasets: datasets.to_vec(),
            assign,
            target,
            total_rows: datasets.iter().map(|(m, _)| m.rows()).sum(),
            solver: options.solver,
            stage1: BTreeMap::new(),
            warm1: alloc::vec![None; folds],
            warm2: alloc::vec![None; folds],
            cache: BTreeMap::new(),
            trace: Vec::new(),
        })
    }

    pub fn folds(&self) -> usize {
        self.target.len()
    }

    fn stage1(&mut self, lambda1: f64) -> Option<&Stage1Fit> {
        let k = lambda1.to_bits();
        if !self.stage1.contains_key(&k) {
            let fit = self.fit_stage1(lambda1);
            self.stage1.insert(k, fit);
        }
        self.stage1[&k].as_ref()
    }

    fn fit_stage1(&mut self, lambda1: f64) -> Option<Stage1Fit> {
        let mut fits = Vec::with_capacity(self.folds());
        let mut sse_total = 0.0;
        for f in 0..self.folds() {
            // Source folds are built on demand; only the target split is kept.
            let sources: Vec<Part> = self.datasets[1..]
                .iter()
                .zip(&self.assign[1..])
                .map(|((a, y), asg)| Part::new(a, y, asg, f))
                .collect();
            let mut data: Vec<(&Matrix, &[f64])> =
                alloc::vec![(&self.target[f].train, &self.target[f].y_train[..])];
            data.extend(sources.iter().map(|p| (&p.train, &p.y_train[..])));
            let e = fit_pretraining(&data, lambda1, &self.solver, self.warm1[f].as_ref()).ok()?;
            sse_total += sse(
                &self.target[f].test,
                &self.target[f].y_test,
                &e.coefficients,
            );
            sse_total += sources
                .iter()
                .map(|p| sse(&p.test, &p.y_test, &e.coefficients))
                .sum::<f64>();
            self.warm1[f] = Some(e.clone());
            fits.push(e);
        }
        Some(Stage1Fit {
            fits,
            error: sse_total / self.total_rows as f64,
        })
    }

    /// Mean held-out squared error of the first stage over all datasets.
    pub fn stage1_error(&mut self, lambda1: f64) -> Option<f64> {
        self.stage1(lambda1).map(|s| s.error)
    }

    fn stage2_error(&mut self, hyper: &Hyperparams) -> Option<f64> {
        let fits = self.stage1(hyper.lambda1)?.fits.clone();
        let mut total = 0.0;
        for (f, x1) in fits.iter().enumerate() {
            let part = &self.target[f];
            let x2 = fit_finetune(
                (&part.train, &part.y_train),
                x1,
                hyper,
                &self.solver,
                self.warm2[f].as_ref(),
            )
            .ok()?;
            let coef: Vec<f64> = x1
                .coefficients
                .iter()
                .zip(&x2.coefficients)
                .map(|(a, b)| hyper.kappa * a + b)
                .collect();
            total += sse(&part.test, &part.y_test, &coef);
            self.warm2[f] = Some(x2);
        }
        Some(total / self.datasets[0].0.rows() as f64)
    }
}

fn sse(a: &Matrix, y: &[f64], x: &[f64]) -> f64 {
    a.matvec(x)
        .iter()
        .zip(y)
        .map(|(p, t)| (t - p) * (t - p))
        .sum()
}

impl Objective for CvEvaluator<'_> {
    fn value(&mut self, hyper: &Hyperparams) -> Option<f64> {
        let k = [
            hyper.lambda1.to_bits(),
            hyper.lambda2.to_bits(),
            hyper.kappa.to_bits(),
            hyper.dlambda.value().to_bits(),
        ];
        let v = match self.cache.get(&k) {
            Some(v) => *v,
            None => {
                let v = self.stage2_error(hyper).filter(|v| v.is_finite());
                self.cache.insert(k, v);
                v
            }
        };
        self.trace.push(TraceEntry {
            hyper: *hyper,
            value: v,
        });
        v
    }

    fn take_trace(&mut self) -> Vec<TraceEntry> {
        core::mem::take(&mut self.trace)
    }
}

/// `λ1` minimizing the cross-validated first-stage error. The grid is
/// scanned from sparse to dense so every fit starts warm.
pub fn cv_lambda1(
    ev: &mut CvEvaluator<'_>,
    grid: &[f64],
    patience: Option<usize>,
) -> Result<Minimum, CvError> {
    let patience = patience.or(Some(usize::MAX));
    scan_then_golden(|l| ev.stage1_error(l), grid, Scale::Log, 3e-3, 60, patience)
        .ok_or(CvError::FirstStage)
}

/// Cross-validated tuning of several strategies on the same folds.
pub fn cv_tune_all(
    datasets: &[(&Matrix, &[f64])],
    strategies: &[StrategyKind],
    grids: &Grids,
    options: &CvOptions,
) -> Result<StrategySet, CvError> {
    let grids = Grids {
        patience: grids.patience.or(options.patience),
        ..grids.clone()
    };
    grids.validate().map_err(CvError::Search)?;
    let mut ev = CvEvaluator::new(datasets, options)?;
    let lambda1 = cv_lambda1(&mut ev, &grids.lambda1, grids.patience)?.x;
    search_strategies(&mut ev, lambda1, strategies, &grids).map_err(CvError::Search)
}

/// Cross-validated tuning of one strategy.
pub fn cv_tune(
    datasets: &[(&Matrix, &[f64])],
    strategy: StrategyKind,
    grids: &Grids,
    options: &CvOptions,
) -> Result<TuningResult, CvError> {
    let mut set = cv_tune_all(datasets, &[strategy], grids, options)?;
    set.results
        .remove(&strategy)
        .ok_or(CvError::Search("strategy produced no result"))
}

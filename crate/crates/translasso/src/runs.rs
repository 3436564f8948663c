//! The experiments behind each command, returning records rather than
//! writing files so they can be driven from tests as well.
//!
//! Independent units of work (panels, grid points, realizations) run on a
//! worker pool. Each draws its randomness from a seed derived from the root
//! seed and its own index, and results are collected in input order, so the
//! output does not depend on the number of workers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use translasso_core::cv::CvOptions;
use translasso_core::replica::{solve_point, Solution, SolveOptions, Theta1, Theta2};
use translasso_core::rng::derive_seed;
use translasso_core::strategies::{compare_point, tune_lambda1, tune_lambda2, ReplicaEvaluator};
use translasso_core::synthetic::{
    empirical_order_params, empirical_test_error, sample_sizes, support_sizes, MeanSe,
};
use translasso_core::{
    conditional_gen_error, fit_finetune, fit_pretraining, generate_instance, DeltaLambda, Estimate,
    Hyperparams, ProblemGeometry, SolverOptions, StrategyKind,
};

use crate::config::{ClassSpec, Config, HyperConfig, SweepKind};
use crate::error::{Error, Result};
use crate::real_data::{
    hold_out, load_classes, run_pipeline, standardize, LoadOptions, PipelineOptions,
    PipelineReport, TestReport,
};
use crate::records::{
    CoefficientRecord, EmpiricalSummary, Provenance, RatioRecord, RecordMode, StrategyRecord,
    SweepRecord, CODE_VERSION,
};

/// A validated configuration with its provenance and worker pool size.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: Config,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    pub provenance: Provenance,
}

impl RunContext {
    pub fn new(config: Config, workers: usize) -> Result<Self> {
        config.validate()?;
        let provenance = Provenance {
            config_hash: config.hash(),
            seed: config.seed,
        };
        Ok(Self {
            config,
            workers,
            provenance,
        })
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }

    fn solve_options(&self) -> SolveOptions {
        self.config.replica.build(self.config.seed)
    }

    fn solver(&self) -> SolverOptions {
        self.config.lasso.build()
    }
}

/// Replica results for one geometry over a (κ, Δλ) grid. Unset penalties
/// are tuned: λ₁ once on the first-stage error, λ₂ per point on the
/// second-stage error.
#[derive(Debug, Clone)]
pub struct PanelSolution {
    pub geometry: ProblemGeometry,
    pub lambda1: Option<f64>,
    pub stage1: Option<Solution<Theta1>>,
    pub points: Vec<PointSolution>,
}

#[derive(Debug, Clone)]
pub struct PointSolution {
    /// `None` when λ₂ tuning failed at every grid value.
    pub hyper: Option<Hyperparams>,
    pub stage2: std::result::Result<(Solution<Theta2>, f64), String>,
}

pub fn solve_panel(
    geometry: &ProblemGeometry,
    points: &[(f64, DeltaLambda)],
    hyper: &HyperConfig,
    ctx: &RunContext,
) -> PanelSolution {
    let opts = ctx.solve_options();
    let grids = &ctx.config.grids;
    let mut ev = ReplicaEvaluator::new(geometry.clone(), opts);
    let lambda1 = match hyper.lambda1 {
        Some(l) => Some(l),
        None => tune_lambda1(&mut ev, &grids.lambda1, 1e-6).map(|(l, _, _)| l),
    };
    let stage1 = lambda1.and_then(|l| ev.stage1(l).ok().cloned());
    let mut warm: Option<Theta2> = None;
    let points = points
        .iter()
        .map(|&(kappa, dlambda)| {
            let (Some(l1), Some(s1)) = (lambda1, stage1.as_ref()) else {
                return PointSolution {
                    hyper: None,
                    stage2: Err("first stage did not converge".into()),
                };
            };
            let h = match hyper.lambda2 {
                Some(lambda2) => Some(Hyperparams {
                    lambda1: l1,
                    lambda2,
                    kappa,
                    dlambda,
                }),
                None => {
                    tune_lambda2(&mut ev, l1, kappa, dlambda, &grids.lambda2, 1e-6).map(|(h, _)| h)
                }
            };
            let Some(h) = h else {
                return PointSolution {
                    hyper: None,
                    stage2: Err("second stage failed at every lambda2".into()),
                };
            };
            let stage2 = solve_point(geometry, &h, &opts, Some(s1), warm.as_ref())
                .map(|p| (p.theta2, p.eps2))
                .map_err(|e| e.to_string());
            if let Ok((s, _)) = &stage2 {
                warm = Some(s.theta.clone());
            }
            PointSolution {
                hyper: Some(h),
                stage2,
            }
        })
        .collect();
    PanelSolution {
        geometry: geometry.clone(),
        lambda1,
        stage1,
        points,
    }
}

fn panel_records(
    panel: &PanelSolution,
    index: usize,
    prov: &Provenance,
    grid: &[(f64, DeltaLambda)],
) -> Vec<SweepRecord> {
    panel
        .points
        .iter()
        .zip(grid)
        .enumerate()
        .map(|(i, (p, &(kappa, dlambda)))| {
            let h = p.hyper.unwrap_or(Hyperparams {
                lambda1: panel.lambda1.unwrap_or(f64::NAN),
                lambda2: f64::NAN,
                kappa,
                dlambda,
            });
            let mut r = SweepRecord::new(&panel.geometry, &h, index, i, prov);
            if let Some(s1) = &panel.stage1 {
                r.set_stage1(
                    s1,
                    translasso_core::replica::eps1(&s1.theta, &panel.geometry),
                );
            }
            match &p.stage2 {
                Ok((s2, e2)) => r.set_stage2(s2, *e2),
                Err(msg) => r.skip(msg.clone()),
            }
            r
        })
        .collect()
}

/// Single-point replica solve at `[geometry]` and `[hyper]`.
pub fn replica_solve(ctx: &RunContext) -> Result<Vec<SweepRecord>> {
    let g = ctx.config.geometry.build()?;
    let h = &ctx.config.hyper;
    let grid = [(h.kappa, h.dlambda)];
    let panel = solve_panel(&g, &grid, h, ctx);
    if let Err(msg) = &panel.points[0].stage2 {
        return Err(Error::Numerical(msg.clone()));
    }
    Ok(panel_records(&panel, 0, &ctx.provenance, &grid))
}

/// The (κ, Δλ) grid of the sweep, κ outermost.
pub fn sweep_grid(cfg: &Config) -> Result<Vec<(f64, DeltaLambda)>> {
    let s = &cfg.sweep;
    if s.kappa.is_empty() {
        return Err(Error::Config("sweep.kappa is empty".into()));
    }
    if s.dlambda.is_empty() {
        return Err(Error::Config("sweep.dlambda is empty".into()));
    }
    if let Some(k) = s.kappa.iter().find(|k| !(k.is_finite() && **k >= 0.0)) {
        return Err(Error::Config(format!(
            "sweep.kappa: {k} is not a non-negative number"
        )));
    }
    Ok(s.kappa
        .iter()
        .flat_map(|&k| s.dlambda.iter().map(move |&d| (k, d)))
        .collect())
}

/// Output of the `sweep` command; which table is filled depends on the
/// configured kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutput {
    Curves(Vec<SweepRecord>),
    RatioMap(Vec<RatioRecord>),
}

pub fn sweep(ctx: &RunContext) -> Result<SweepOutput> {
    match ctx.config.sweep.kind {
        SweepKind::DlambdaCurves => sweep_curves(ctx).map(SweepOutput::Curves),
        SweepKind::RatioMap => ratio_map(ctx).map(SweepOutput::RatioMap),
    }
}

pub fn sweep_curves(ctx: &RunContext) -> Result<Vec<SweepRecord>> {
    let grid = sweep_grid(&ctx.config)?;
    let panels = ctx.config.sweep.panel_geometries(&ctx.config.geometry)?;
    let solved: Vec<PanelSolution> = ctx.install(|| {
        panels
            .par_iter()
            .map(|g| solve_panel(g, &grid, &ctx.config.hyper, ctx))
            .collect()
    })?;
    Ok(solved
        .iter()
        .enumerate()
        .flat_map(|(i, p)| panel_records(p, i, &ctx.provenance, &grid))
        .collect())
}

/// Strategy ratios over the `(alpha1, alpha2)` grid at the configured
/// sparsity and noise.
pub fn ratio_map(ctx: &RunContext) -> Result<Vec<RatioRecord>> {
    let s = &ctx.config.sweep;
    if s.alpha1.is_empty() || s.alpha2.is_empty() {
        return Err(Error::Config(
            "sweep.alpha1 and sweep.alpha2 must be non-empty".into(),
        ));
    }
    let base = ctx.config.geometry.build()?;
    if base.num_classes() != 2 {
        return Err(Error::Config(
            "the ratio map needs exactly two classes".into(),
        ));
    }
    let mut points = Vec::new();
    for &a1 in &s.alpha1 {
        for &a2 in &s.alpha2 {
            let g = base
                .with_alphas(vec![a1, a2])
                .map_err(|e| Error::Config(format!("sweep alphas ({a1}, {a2}): {e}")))?;
            points.push((a1, a2, g));
        }
    }
    let wanted = [
        StrategyKind::LocallyOptimal,
        StrategyKind::KappaZero,
        StrategyKind::DLambdaZero,
        StrategyKind::TransLasso,
        StrategyKind::PretrainingLassoPath,
    ];
    let opts = ctx.solve_options();
    let sets = ctx.install(|| {
        points
            .par_iter()
            .map(|(_, _, g)| compare_point(g, &wanted, &ctx.config.grids, &opts))
            .collect::<Vec<_>>()
    })?;
    let sigma = base.sigmas()[0];
    points
        .iter()
        .zip(sets)
        .map(|((a1, a2, _), set)| {
            let set = set.map_err(|e| Error::Numerical(format!("alphas ({a1}, {a2}): {e}")))?;
            Ok(RatioRecord::new(sigma, *a1, *a2, &set, &ctx.provenance))
        })
        .collect()
}

/// Per-realization values of one point.
#[derive(Debug, Clone, PartialEq)]
struct Sample {
    eps1: f64,
    eps2: f64,
    q1: f64,
    q2: f64,
    qr: f64,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

fn check_feasible(g: &ProblemGeometry, n: usize, panel: usize) -> Result<()> {
    let needed: usize = support_sizes(g, n).iter().sum();
    if needed > n {
        return Err(Error::Config(format!(
            "panel {panel}: supports need {needed} features but simulate.n is {n}"
        )));
    }
    if let Some(k) = sample_sizes(g, n).iter().position(|&m| m == 0) {
        return Err(Error::Config(format!(
            "panel {panel}: class {} has no samples at n = {n}",
            k + 1
        )));
    }
    Ok(())
}

// All points of one realization: one first-stage fit, then the second stage
// along the grid with warm starts.
fn simulate_realization(
    geometry: &ProblemGeometry,
    hypers: &[Option<Hyperparams>],
    n: usize,
    seed: u64,
    test_sets: usize,
    solver: &SolverOptions,
) -> Vec<Option<Sample>> {
    let Ok(inst) = generate_instance(geometry, n, seed) else {
        return vec![None; hypers.len()];
    };
    let Some(l1) = hypers.iter().flatten().next().map(|h| h.lambda1) else {
        return vec![None; hypers.len()];
    };
    let Ok(x1) = fit_pretraining(&inst.datasets(), l1, solver, None) else {
        return vec![None; hypers.len()];
    };
    let mut warm: Option<Estimate> = None;
    hypers
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let h = h.as_ref()?;
            let x2 = fit_finetune(inst.target(), &x1, h, solver, warm.as_ref()).ok()?;
            let (eps1, eps2) = if test_sets >= 2 {
                let e = empirical_test_error(
                    &inst,
                    &x1,
                    &x2,
                    h,
                    test_sets,
                    derive_seed(seed, i as u64),
                )
                .ok()?;
                (e.first.mean, e.second.mean)
            } else {
                let (a, b) =
                    conditional_gen_error(&x1, Some(&x2), &inst.truth, geometry, h).ok()?;
                (a, b?)
            };
            let p = empirical_order_params(&inst, &x1, Some(&x2)).ok()?;
            warm = Some(x2);
            Some(Sample {
                eps1,
                eps2,
                q1: p.q1,
                q2: p.q2?,
                qr: p.qr?,
                m1: p.m1,
                m2: p.m2?,
            })
        })
        .collect()
}

fn summarize(samples: &[&Sample], failed: usize) -> Option<EmpiricalSummary> {
    let col = |f: &dyn Fn(&Sample) -> f64| {
        MeanSe::from_samples(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
    };
    let blocks = samples.first()?.m1.len();
    Some(EmpiricalSummary {
        eps1: col(&|s| s.eps1)?,
        eps2: col(&|s| s.eps2)?,
        q1: col(&|s| s.q1)?,
        q2: col(&|s| s.q2)?,
        qr: col(&|s| s.qr)?,
        m1: (0..blocks)
            .map(|b| col(&|s| s.m1[b]))
            .collect::<Option<_>>()?,
        m2: (0..blocks)
            .map(|b| col(&|s| s.m2[b]))
            .collect::<Option<_>>()?,
        realizations: samples.len(),
        failed,
    })
}

/// Finite-size simulation over the sweep grid at the replica-chosen (or
/// configured) penalties, optionally joined with the replica prediction.
pub fn simulate(ctx: &RunContext) -> Result<Vec<SweepRecord>> {
    let sim = &ctx.config.simulate;
    if sim.realizations < 2 {
        return Err(Error::Config(
            "simulate.realizations must be at least 2".into(),
        ));
    }
    if sim.test_sets == 1 {
        return Err(Error::Config(
            "simulate.test_sets must be 0 (exact expectation) or at least 2".into(),
        ));
    }
    let grid = sweep_grid(&ctx.config)?;
    let panels = ctx.config.sweep.panel_geometries(&ctx.config.geometry)?;
    for (i, g) in panels.iter().enumerate() {
        check_feasible(g, sim.n, i)?;
    }
    let solver = ctx.solver();
    let solved: Vec<PanelSolution> = ctx.install(|| {
        panels
            .par_iter()
            .map(|g| solve_panel(g, &grid, &ctx.config.hyper, ctx))
            .collect()
    })?;
    let tasks: Vec<(usize, usize)> = (0..panels.len())
        .flat_map(|p| (0..sim.realizations).map(move |r| (p, r)))
        .collect();
    let root = ctx.config.seed;
    let results: Vec<Vec<Option<Sample>>> = ctx.install(|| {
        tasks
            .par_iter()
            .map(|&(p, r)| {
                let hypers: Vec<Option<Hyperparams>> =
                    solved[p].points.iter().map(|pt| pt.hyper).collect();
                let seed = derive_seed(derive_seed(root, p as u64), r as u64);
                simulate_realization(&panels[p], &hypers, sim.n, seed, sim.test_sets, &solver)
            })
            .collect()
    })?;

    let mut out = Vec::new();
    for (p, panel) in solved.iter().enumerate() {
        let mut records = panel_records(panel, p, &ctx.provenance, &grid);
        for (i, rec) in records.iter_mut().enumerate() {
            let per: Vec<&Option<Sample>> = results
                .iter()
                .zip(&tasks)
                .filter(|(_, t)| t.0 == p)
                .map(|(v, _)| &v[i])
                .collect();
            let ok: Vec<&Sample> = per.iter().filter_map(|s| s.as_ref()).collect();
            let failed = per.len() - ok.len();
            if !sim.join_replica {
                let h = Hyperparams {
                    lambda1: rec.lambda1,
                    lambda2: rec.lambda2,
                    kappa: rec.kappa,
                    dlambda: DeltaLambda::new(rec.dlambda).unwrap_or(DeltaLambda::INFINITE),
                };
                let (skipped, note) = (rec.skipped, rec.note.clone());
                *rec = SweepRecord::new(&panel.geometry, &h, p, i, &ctx.provenance);
                rec.mode = RecordMode::Empirical;
                rec.skipped = skipped;
                rec.note = note;
            }
            match summarize(&ok, failed) {
                Some(s) => rec.set_empirical(&s),
                None => {
                    rec.mode = if sim.join_replica {
                        RecordMode::Replica
                    } else {
                        RecordMode::Empirical
                    };
                    if !rec.skipped {
                        rec.skip(format!("{failed} of {} realizations failed", per.len()));
                    }
                }
            }
        }
        out.extend(records);
    }
    Ok(out)
}

/// Strategy comparison over the noise grid: one row per requested strategy
/// and noise level, plus the ratio table.
pub fn strategies(ctx: &RunContext) -> Result<(Vec<StrategyRecord>, Vec<RatioRecord>)> {
    let s = &ctx.config.strategies;
    if s.strategies.is_empty() {
        return Err(Error::Config("strategies.strategies is empty".into()));
    }
    if s.sigma.is_empty() {
        return Err(Error::Config("strategies.sigma is empty".into()));
    }
    let base = ctx.config.geometry.build()?;
    let geoms = s
        .sigma
        .iter()
        .map(|&sg| {
            base.with_sigma(sg)
                .map_err(|e| Error::Config(format!("strategies.sigma {sg}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = ctx.solve_options();
    let sets = ctx.install(|| {
        geoms
            .par_iter()
            .map(|g| compare_point(g, &s.strategies, &ctx.config.grids, &opts))
            .collect::<Vec<_>>()
    })?;
    let (a1, a2) = (
        base.alphas()[0],
        base.alphas().get(1).copied().unwrap_or(f64::NAN),
    );
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for (&sigma, set) in s.sigma.iter().zip(sets) {
        let set = set.map_err(|e| Error::Numerical(format!("sigma {sigma}: {e}")))?;
        for r in translasso_core::strategies::compare_rows(sigma, &set) {
            if s.strategies.contains(&r.strategy) {
                rows.push(StrategyRecord::from_row(&r, &ctx.provenance));
            }
        }
        ratios.push(RatioRecord::new(sigma, a1, a2, &set, &ctx.provenance));
    }
    Ok((rows, ratios))
}

/// Summary written next to the coefficient table of a real-data fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealDataReport {
    pub target: String,
    pub strategy: StrategyKind,
    pub hyper: Hyperparams,
    pub cv_error: f64,
    pub folds: usize,
    pub train_rows: usize,
    pub train_mse: f64,
    /// Test MSE with its jackknife standard error over test rows.
    pub test: Option<TestReport>,
    pub stage1_nonzero: usize,
    pub stage2_nonzero: usize,
    pub standardized: bool,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealDataOutput {
    pub report: RealDataReport,
    /// On the original feature scale; a standardized fit adds an
    /// `(offset)` row.
    pub coefficients: Vec<CoefficientRecord>,
    pub pipeline: PipelineReport,
}

pub fn realdata(ctx: &RunContext) -> Result<RealDataOutput> {
    let rd = &ctx.config.realdata;
    if rd.classes.is_empty() {
        return Err(Error::Config("realdata.classes is empty".into()));
    }
    let delimiter = match rd.delimiter {
        None => None,
        Some(c) if c.is_ascii() => Some(c as u8),
        Some(c) => {
            return Err(Error::Config(format!(
                "realdata.delimiter `{c}` is not ASCII"
            )))
        }
    };
    let load = LoadOptions {
        response: rd.response.clone(),
        delimiter,
        standardize: false,
    };
    let (mut classes, _) = load_classes(&rd.classes, &load)?;
    let target = rd
        .target
        .clone()
        .unwrap_or_else(|| rd.classes[0].id.clone());
    let t = classes
        .iter()
        .position(|c| c.id == target)
        .ok_or_else(|| Error::Config(format!("realdata.target `{target}` is not a class id")))?;
    if rd.test_fraction > 0.0 {
        hold_out(&mut classes[t], rd.test_fraction, ctx.config.seed)?;
    }
    let std = rd.standardize.then(|| standardize(&mut classes));
    let opts = PipelineOptions {
        strategy: rd.strategy,
        grids: ctx.config.grids.clone(),
        cv: CvOptions {
            folds: rd.folds,
            seed: ctx.config.seed,
            solver: ctx.solver(),
            ..CvOptions::default()
        },
        solver: ctx.solver(),
        relative_lambdas: rd.relative_lambdas,
    };
    let pipeline = run_pipeline(&classes, &target, &opts)?;
    let features = &classes[t].features;
    let coefficients: Vec<CoefficientRecord> = match &std {
        Some(s) => {
            let (raw, off) = s.to_original(&pipeline.coefficients);
            let mut v: Vec<CoefficientRecord> = features
                .iter()
                .zip(raw)
                .map(|(f, value)| CoefficientRecord {
                    feature: f.clone(),
                    value,
                })
                .collect();
            v.push(CoefficientRecord {
                feature: "(offset)".into(),
                value: off,
            });
            v
        }
        None => features
            .iter()
            .zip(&pipeline.coefficients)
            .map(|(f, &value)| CoefficientRecord {
                feature: f.clone(),
                value,
            })
            .collect(),
    };
    let nonzero = |e: &Estimate| e.coefficients.iter().filter(|v| **v != 0.0).count();
    let report = RealDataReport {
        target,
        strategy: rd.strategy,
        hyper: pipeline.hyper,
        cv_error: pipeline.cv_error,
        folds: rd.folds,
        train_rows: classes[t].design.rows(),
        train_mse: pipeline.train_mse,
        test: pipeline.test,
        stage1_nonzero: nonzero(&pipeline.stage1),
        stage2_nonzero: nonzero(&pipeline.stage2),
        standardized: rd.standardize,
        seed: ctx.config.seed,
        code_version: CODE_VERSION.into(),
        config_hash: ctx.provenance.config_hash.clone(),
    };
    Ok(RealDataOutput {
        report,
        coefficients,
        pipeline,
    })
}

/// Class specs for tables written by [`crate::io::export_instance_csv`].
pub fn class_specs(paths: &[std::path::PathBuf]) -> Vec<ClassSpec> {
    paths
        .iter()
        .enumerate()
        .map(|(k, p)| ClassSpec {
            id: format!("class{}", k + 1),
            path: p.clone(),
            test_path: None,
        })
        .collect()
}

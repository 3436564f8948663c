//! Hyperparameter selection over replica predictions.
//!
//! Every strategy minimizes the predicted second-stage error over its own
//! subset of `(λ1, λ2, κ, Δλ)`. The extra penalty is searched through
//! `u ∈ [0, 1]` with `Δλ = λ2 · u / (1 − u)`, so `u = 1` is the hard support
//! constraint and the whole half-line is covered by a bounded coordinate.
//!
//! Larger strategies are seeded with the optima of the smaller ones they
//! contain, which makes the nesting of their optimal errors hold by
//! construction rather than depending on the luck of a local search.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{abs, exp, ln};
use crate::model::{pretraining_path, DeltaLambda, Hyperparams, ProblemGeometry};
use crate::replica::{
    eps1, solve_stage1_from, solve_stage2, solve_stage2_from, ReplicaError, Solution, SolveOptions,
    Theta1, Theta2,
};
use crate::search::{
    golden_section, grid_then_golden, lin_grid, log_grid, scan_then_golden, Minimum, Scale,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    KappaZero,
    #[serde(rename = "dlambda_zero")]
    DLambdaZero,
    LocallyOptimal,
    GloballyOptimal,
    TransLasso,
    PretrainingLassoPath,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::KappaZero,
        StrategyKind::DLambdaZero,
        StrategyKind::LocallyOptimal,
        StrategyKind::GloballyOptimal,
        StrategyKind::TransLasso,
        StrategyKind::PretrainingLassoPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::KappaZero => "kappa_zero",
            StrategyKind::DLambdaZero => "dlambda_zero",
            StrategyKind::LocallyOptimal => "locally_optimal",
            StrategyKind::GloballyOptimal => "globally_optimal",
            StrategyKind::TransLasso => "trans_lasso",
            StrategyKind::PretrainingLassoPath => "pretraining_lasso_path",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Search grids. `dlambda_u` lives on `[0, 1]`, see the module docs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grids {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub kappa: Vec<f64>,
    pub dlambda_u: Vec<f64>,
    pub s: Vec<f64>,
    /// Golden-section refinement after the coarse grids.
    pub refine: bool,
    /// Stop cyclic refinement once a full cycle gains less than this
    /// (relative to the objective).
    pub tolerance: f64,
    pub max_cycles: usize,
    /// Scan penalty grids from the top and stop after this many consecutive
    /// values above the best; `None` scans the whole grid.
    pub patience: Option<usize>,
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            lambda1: log_grid(1e-3, 10.0, 17),
            lambda2: log_grid(1e-3, 10.0, 17),
            kappa: lin_grid(0.0, 1.5, 16),
            dlambda_u: lin_grid(0.0, 1.0, 11),
            s: lin_grid(0.0, 1.0, 11),
            refine: true,
            tolerance: 1e-7,
            max_cycles: 4,
            patience: None,
        }
    }
}

impl Grids {
    pub fn validate(&self) -> Result<(), &'static str> {
        let checks: [(&[f64], &'static str); 5] = [
            (&self.lambda1, "lambda1 grid is empty"),
            (&self.lambda2, "lambda2 grid is empty"),
            (&self.kappa, "kappa grid is empty"),
            (&self.dlambda_u, "dlambda_u grid is empty"),
            (&self.s, "s grid is empty"),
        ];
        for (g, msg) in checks {
            if g.is_empty() {
                return Err(msg);
            }
            if g.windows(2).any(|w| !(w[0] < w[1])) {
                return Err("grids must be strictly increasing");
            }
        }
        if self.patience == Some(0) {
            return Err("patience must be at least 1");
        }
        if self.lambda1[0] <= 0.0 || self.lambda2[0] <= 0.0 {
            return Err("lambda grids must be positive");
        }
        if self.kappa[0] < 0.0 {
            return Err("kappa grid must be non-negative");
        }
        if self.dlambda_u[0] < 0.0 || *self.dlambda_u.last().unwrap() > 1.0 {
            return Err("dlambda_u grid must lie in [0, 1]");
        }
        if self.s[0] < 0.0 || *self.s.last().unwrap() > 1.0 {
            return Err("s grid must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `Δλ = λ2 · u / (1 − u)`; `u = 1` is the infinite sentinel.
pub fn dlambda_from_u(u: f64, lambda2: f64) -> DeltaLambda {
    if u >= 1.0 {
        DeltaLambda::INFINITE
    } else {
        DeltaLambda::new((lambda2 * u / (1.0 - u)).max(0.0)).unwrap_or(DeltaLambda::ZERO)
    }
}

/// Inverse of [`dlambda_from_u`].
pub fn u_from_dlambda(dlambda: DeltaLambda, lambda2: f64) -> f64 {
    if dlambda.is_infinite() {
        1.0
    } else {
        let r = dlambda.value() / lambda2;
        r / (1.0 + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub hyper: Hyperparams,
    /// `None` when the replica solve failed and the point was skipped.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub strategy: StrategyKind,
    pub hyper: Hyperparams,
    pub objective: f64,
    pub trace: Vec<TraceEntry>,
    pub theta1: Option<Theta1>,
    pub theta2: Option<Theta2>,
    /// Number of evaluations that failed and were skipped.
    pub skipped: usize,
}

// Lexicographic tie-break key.
fn tie_key(h: &Hyperparams) -> [f64; 4] {
    [h.kappa, h.dlambda.value(), h.lambda2, h.lambda1]
}

fn better(a: (f64, &Hyperparams), b: (f64, &Hyperparams)) -> bool {
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    let (ka, kb) = (tie_key(a.1), tie_key(b.1));
    for i in 0..4 {
        if ka[i] != kb[i] {
            return ka[i] < kb[i];
        }
    }
    false
}

/// Trace minimum under the lexicographic tie-break.
pub fn trace_minimum(trace: &[TraceEntry]) -> Option<&TraceEntry> {
    let mut best: Option<&TraceEntry> = None;
    for e in trace {
        let Some(v) = e.value else { continue };
        match best {
            Some(b) if !better((v, &e.hyper), (b.value.unwrap(), &b.hyper)) => {}
            _ => best = Some(e),
        }
    }
    best
}

// Refinement tolerances: on the log scale for penalties, absolute for κ and u.
// The objective is flat to second order at a minimum, so these give values
// well inside 1e-6 of the refined optimum.
const LOG_TOL: f64 = 3e-3;
const LIN_TOL: f64 = 1e-3;

type Key = [u64; 4];

fn key(h: &Hyperparams) -> Key {
    [
        h.lambda1.to_bits(),
        h.lambda2.to_bits(),
        h.kappa.to_bits(),
        h.dlambda.value().to_bits(),
    ]
}

/// Cached replica evaluations for one geometry, with warm-started
/// continuation between neighbouring points.
#[derive(Debug, Clone)]
pub struct ReplicaEvaluator {
    geometry: ProblemGeometry,
    options: SolveOptions,
    stage1: BTreeMap<u64, Result<Solution<Theta1>, ReplicaError>>,
    cache: BTreeMap<Key, Option<(f64, Theta2)>>,
    warm: Option<Theta2>,
    trace: Vec<TraceEntry>,
}

impl ReplicaEvaluator {
    pub fn new(geometry: ProblemGeometry, options: SolveOptions) -> Self {
        Self {
            geometry,
            options,
            stage1: BTreeMap::new(),
            cache: BTreeMap::new(),
            warm: None,
            trace: Vec::new(),
        }
    }

    pub fn geometry(&self) -> &ProblemGeometry {
        &self.geometry
    }

    /// Stage-1 fixed point at `lambda1`, solved once and cached.
    pub fn stage1(&mut self, lambda1: f64) -> Result<&Solution<Theta1>, ReplicaError> {
        let k = lambda1.to_bits();
        if !self.stage1.contains_key(&k) {
            // Continue from the nearest solved lambda1 when there is one.
            let init = self
                .stage1
                .iter()
                .filter_map(|(kk, v)| v.as_ref().ok().map(|s| (f64::from_bits(*kk), s)))
                .min_by(|a, b| abs(ln(a.0 / lambda1)).total_cmp(&abs(ln(b.0 / lambda1))))
                .map(|(_, s)| s.theta.clone())
                .unwrap_or_else(|| Theta1::zero_estimator(&self.geometry));
            let sol =
                solve_stage1_from(&self.geometry, lambda1, &self.options, init).or_else(|_| {
                    solve_stage1_from(
                        &self.geometry,
                        lambda1,
                        &self.options,
                        Theta1::zero_estimator(&self.geometry),
                    )
                });
            self.stage1.insert(k, sol);
        }
        self.stage1[&k].as_ref().map_err(Clone::clone)
    }

    pub fn eps1(&mut self, lambda1: f64) -> Option<f64> {
        let g = self.geometry.clone();
        self.stage1(lambda1).ok().map(|s| eps1(&s.theta, &g))
    }

    /// Predicted second-stage error; `None` if either stage fails to converge.
    pub fn eps2(&mut self, hyper: &Hyperparams) -> Option<f64> {
        let k = key(hyper);
        if let Some(v) = self.cache.get(&k) {
            let value = v.as_ref().map(|x| x.0);
            self.trace.push(TraceEntry {
                hyper: *hyper,
                value,
            });
            return value;
        }
        let result = self.solve(hyper);
        let value = result.as_ref().map(|x| x.0);
        if let Some((_, t2)) = &result {
            self.warm = Some(t2.clone());
        }
        self.cache.insert(k, result);
        self.trace.push(TraceEntry {
            hyper: *hyper,
            value,
        });
        value
    }

    fn solve(&mut self, hyper: &Hyperparams) -> Option<(f64, Theta2)> {
        let options = self.options;
        let geometry = self.geometry.clone();
        let warm = self.warm.clone();
        let t1 = self.stage1(hyper.lambda1).ok()?.theta.clone();
        let sol = match warm {
            Some(w) => solve_stage2_from(&t1, &geometry, hyper, &options, w)
                .or_else(|_| solve_stage2(&t1, &geometry, hyper, &options)),
            None => solve_stage2(&t1, &geometry, hyper, &options),
        }
        .ok()?;
        let e = crate::replica::eps2(&t1, &sol.theta, &geometry, hyper.kappa);
        e.is_finite().then_some((e, sol.theta))
    }

    /// Converged order parameters at an already evaluated point.
    pub fn thetas(&mut self, hyper: &Hyperparams) -> Option<(Theta1, Theta2)> {
        let t2 = self.cache.get(&key(hyper))?.as_ref()?.1.clone();
        let t1 = self.stage1(hyper.lambda1).ok()?.theta.clone();
        Some((t1, t2))
    }

    /// Take the evaluation trace accumulated since the last call.
    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        core::mem::take(&mut self.trace)
    }
}

/// Minimize the first-stage error over `lambda1`.
pub fn tune_lambda1(
    evaluator: &mut ReplicaEvaluator,
    grid: &[f64],
    rel_tol: f64,
) -> Option<(f64, Theta1, Minimum)> {
    let m = grid_then_golden(|l| evaluator.eps1(l), grid, Scale::Log, rel_tol, 200)?;
    let t1 = evaluator.stage1(m.x).ok()?.theta.clone();
    Some((m.x, t1, m))
}

/// Minimize the second-stage error over `lambda2` with `(lambda1, kappa,
/// dlambda)` held fixed; `dlambda` is absolute, not tied to `lambda2`.
pub fn tune_lambda2(
    evaluator: &mut ReplicaEvaluator,
    lambda1: f64,
    kappa: f64,
    dlambda: DeltaLambda,
    grid: &[f64],
    rel_tol: f64,
) -> Option<(Hyperparams, f64)> {
    let at = |l2: f64| Hyperparams {
        lambda1,
        lambda2: l2,
        kappa,
        dlambda,
    };
    let m = grid_then_golden(|l2| evaluator.eps2(&at(l2)), grid, Scale::Log, rel_tol, 200)?;
    Some((at(m.x), m.value))
}

// Coordinates of the stage-2 search.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Point {
    lambda1: f64,
    lambda2: f64,
    kappa: f64,
    u: f64,
}

impl Point {
    fn hyper(&self) -> Hyperparams {
        Hyperparams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            kappa: self.kappa,
            dlambda: dlambda_from_u(self.u, self.lambda2),
        }
    }

    fn from_hyper(h: &Hyperparams) -> Self {
        Self {
            lambda1: h.lambda1,
            lambda2: h.lambda2,
            kappa: h.kappa,
            u: u_from_dlambda(h.dlambda, h.lambda2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coord {
    Lambda1,
    Lambda2,
    Kappa,
    U,
    /// Moves along the pretraining path: `kappa = u = 1 − s`.
    S,
}

/// Scalar objective minimized by the strategy search.
pub trait Objective {
    /// Objective at `hyper`, `None` when the evaluation fails. Every call is
    /// recorded in the trace.
    fn value(&mut self, hyper: &Hyperparams) -> Option<f64>;
    fn take_trace(&mut self) -> Vec<TraceEntry>;
}

impl Objective for ReplicaEvaluator {
    fn value(&mut self, hyper: &Hyperparams) -> Option<f64> {
        self.eps2(hyper)
    }

    fn take_trace(&mut self) -> Vec<TraceEntry> {
        ReplicaEvaluator::take_trace(self)
    }
}

struct Search<'a, O: Objective> {
    ev: &'a mut O,
    grids: &'a Grids,
}

impl<O: Objective> Search<'_, O> {
    fn value(&mut self, p: &Point) -> f64 {
        self.ev.value(&p.hyper()).unwrap_or(f64::INFINITY)
    }

    fn get(p: &Point, c: Coord) -> f64 {
        match c {
            Coord::Lambda1 => p.lambda1,
            Coord::Lambda2 => p.lambda2,
            Coord::Kappa => p.kappa,
            Coord::U => p.u,
            Coord::S => 1.0 - p.kappa,
        }
    }

    fn set(p: &Point, c: Coord, x: f64) -> Point {
        let mut q = *p;
        match c {
            Coord::Lambda1 => q.lambda1 = x,
            Coord::Lambda2 => q.lambda2 = x,
            Coord::Kappa => q.kappa = x,
            Coord::U => q.u = x,
            Coord::S => {
                q.kappa = 1.0 - x;
                q.u = 1.0 - x;
            }
        }
        q
    }

    fn lambda2_local(&mut self, p: Point) -> (Point, f64) {
        self.local(p, Coord::Lambda2)
    }

    // Optimize one coordinate from its current value: step outwards until
    // the value rises, then golden section inside the bracket. Penalties move
    // on the log scale and may leave their grid range by two decades.
    fn local(&mut self, p: Point, c: Coord) -> (Point, f64) {
        let (grid, scale) = self.grid_for(c);
        let (first, last) = (grid[0], *grid.last().unwrap());
        let (lo, hi, step, tol) = match scale {
            Scale::Log => (
                ln(first * 1e-2),
                ln(last * 1e2),
                core::f64::consts::LN_2,
                LOG_TOL,
            ),
            Scale::Linear => (first, last, 0.1 * (last - first).max(1e-9), LIN_TOL),
        };
        let to_x = |t: f64| if scale == Scale::Log { exp(t) } else { t };
        let t0 = match scale {
            Scale::Log => ln(Self::get(&p, c)),
            Scale::Linear => Self::get(&p, c),
        }
        .clamp(lo, hi);
        let p0 = Self::set(&p, c, to_x(t0));
        let f0 = self.value(&p0);
        let at = |s: &mut Self, t: f64| {
            if t == t0 {
                f0
            } else {
                s.value(&Self::set(&p, c, to_x(t)))
            }
        };
        let tu = (t0 + step).min(hi);
        let td = (t0 - step).max(lo);
        let fu = at(self, tu);
        let fd = at(self, td);
        let (dir, mut prev, mut cur, mut f_cur) = if fu < f0 && fu <= fd {
            (1.0, t0, tu, fu)
        } else if fd < f0 {
            (-1.0, t0, td, fd)
        } else {
            return self.bracketed(p0, f0, c, td, tu, to_x, tol);
        };
        loop {
            let next = (cur + dir * step).clamp(lo, hi);
            if next == cur {
                return (Self::set(&p, c, to_x(cur)), f_cur);
            }
            let f_next = at(self, next);
            if f_next >= f_cur {
                let (a, b) = if prev < next {
                    (prev, next)
                } else {
                    (next, prev)
                };
                return self.bracketed(Self::set(&p, c, to_x(cur)), f_cur, c, a, b, to_x, tol);
            }
            prev = cur;
            cur = next;
            f_cur = f_next;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bracketed(
        &mut self,
        p: Point,
        f_p: f64,
        c: Coord,
        a: f64,
        b: f64,
        to_x: impl Fn(f64) -> f64,
        tol: f64,
    ) -> (Point, f64) {
        if !self.grids.refine || !(a < b) {
            return (p, f_p);
        }
        let mut best = (p, f_p);
        let mut scratch = Vec::new();
        golden_section(
            |t| {
                let q = Self::set(&p, c, to_x(t));
                let f = self.value(&q);
                if f < best.1 {
                    best = (q, f);
                }
                Some(f)
            },
            a,
            b,
            tol,
            60,
            &mut scratch,
        );
        best
    }

    // Grid over lambda2 with golden refinement, no starting value needed.
    fn lambda2_global(&mut self, p: Point) -> (Point, f64) {
        let grid = self.grids.lambda2.clone();
        let (tol, iters) = if self.grids.refine {
            (LOG_TOL, 60)
        } else {
            (f64::INFINITY, 0)
        };
        let patience = self.grids.patience;
        let m = scan_then_golden(
            |x| Some(self.value(&Self::set(&p, Coord::Lambda2, x))),
            &grid,
            Scale::Log,
            tol,
            iters,
            patience,
        );
        match m {
            Some(m) => (Self::set(&p, Coord::Lambda2, m.x), m.value),
            None => (p, f64::INFINITY),
        }
    }

    fn grid_for(&self, c: Coord) -> (Vec<f64>, Scale) {
        match c {
            Coord::Lambda1 => (self.grids.lambda1.clone(), Scale::Log),
            Coord::Lambda2 => (self.grids.lambda2.clone(), Scale::Log),
            Coord::Kappa => (self.grids.kappa.clone(), Scale::Linear),
            Coord::U => (self.grids.dlambda_u.clone(), Scale::Linear),
            Coord::S => (self.grids.s.clone(), Scale::Linear),
        }
    }

    // Coarse grid over `outer`, lambda2 optimized at every grid value
    // (continuing from the previous one), then golden refinement of `outer`.
    fn profile(&mut self, start: Point, outer: Coord) -> (Point, f64) {
        let (grid, scale) = self.grid_for(outer);
        let mut best = (start, f64::INFINITY);
        let mut l2: Option<f64> = None;
        let mut profile = Vec::with_capacity(grid.len());
        for &x in &grid {
            let mut p = Self::set(&start, outer, x);
            let r = match l2 {
                Some(l) => {
                    p.lambda2 = l;
                    self.lambda2_local(p)
                }
                None => self.lambda2_global(p),
            };
            if r.1.is_finite() {
                l2 = Some(r.0.lambda2);
            }
            profile.push(r);
            if r.1 < best.1 {
                best = r;
            }
        }
        if self.grids.refine && grid.len() >= 2 {
            let i = profile
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let lo = grid[i.saturating_sub(1)];
            let hi = grid[(i + 1).min(grid.len() - 1)];
            let seed = best.0;
            let mut last = seed.lambda2;
            let mut scratch = Vec::new();
            let to_x = |v: f64| if scale == Scale::Log { exp(v) } else { v };
            let (a, b) = if scale == Scale::Log {
                (ln(lo), ln(hi))
            } else {
                (lo, hi)
            };
            let tol = if scale == Scale::Log {
                LOG_TOL
            } else {
                LIN_TOL
            };
            let mut found = best;
            golden_section(
                |v| {
                    let mut p = Self::set(&seed, outer, to_x(v));
                    p.lambda2 = last;
                    let r = self.lambda2_local(p);
                    if r.1.is_finite() {
                        last = r.0.lambda2;
                    }
                    if r.1 < found.1 {
                        found = r;
                    }
                    Some(r.1)
                },
                a,
                b,
                tol,
                40,
                &mut scratch,
            );
            best = found;
        }
        best
    }

    // One coordinate at a time, everything else fixed. Never returns a
    // worse point.
    fn line(&mut self, p: Point, f_p: f64, c: Coord) -> (Point, f64) {
        let r = self.local(p, c);
        if r.1 < f_p {
            r
        } else {
            (p, f_p)
        }
    }

    fn cyclic(&mut self, start: Point, coords: &[Coord]) -> (Point, f64) {
        let mut cur = (start, self.value(&start));
        for _ in 0..self.grids.max_cycles {
            let before = cur.1;
            for &c in coords {
                cur = self.line(cur.0, cur.1, c);
            }
            if !(before - cur.1 > self.grids.tolerance * abs(before)) {
                break;
            }
        }
        cur
    }
}

fn finish<O: Objective>(strategy: StrategyKind, ev: &mut O) -> Option<TuningResult> {
    let trace = ev.take_trace();
    let skipped = trace.iter().filter(|e| e.value.is_none()).count();
    let best = trace_minimum(&trace)?.clone();
    Some(TuningResult {
        strategy,
        hyper: best.hyper,
        objective: best.value?,
        theta1: None,
        theta2: None,
        trace,
        skipped,
    })
}

/// Results of every strategy on one geometry. The restricted strategies are
/// solved first and seed the larger ones.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StrategySet {
    pub results: BTreeMap<StrategyKind, TuningResult>,
    pub lambda1: f64,
}

impl StrategySet {
    pub fn get(&self, s: StrategyKind) -> Option<&TuningResult> {
        self.results.get(&s)
    }

    pub fn eps(&self, s: StrategyKind) -> Option<f64> {
        self.get(s).map(|r| r.objective)
    }
}

/// Tune the requested strategies on one geometry. Dependencies are solved
/// as needed: Trans-Lasso seeds Δλ = 0; κ = 0 and Δλ = 0 seed LO; LO seeds GO.
pub fn tune_strategies(
    geometry: &ProblemGeometry,
    strategies: &[StrategyKind],
    grids: &Grids,
    options: &SolveOptions,
) -> Result<StrategySet, &'static str> {
    grids.validate()?;
    let mut ev = ReplicaEvaluator::new(geometry.clone(), *options);
    let (lambda1, _, _) =
        tune_lambda1(&mut ev, &grids.lambda1, 1e-6).ok_or("first stage failed at every lambda1")?;
    ev.take_trace();
    let mut set = search_strategies(&mut ev, lambda1, strategies, grids)?;
    for r in set.results.values_mut() {
        if let Some((t1, t2)) = ev.thetas(&r.hyper) {
            r.theta1 = Some(t1);
            r.theta2 = Some(t2);
        }
    }
    Ok(set)
}

/// Strategy search over any objective, with `lambda1` fixed for all but GO.
pub fn search_strategies<O: Objective>(
    ev: &mut O,
    lambda1: f64,
    strategies: &[StrategyKind],
    grids: &Grids,
) -> Result<StrategySet, &'static str> {
    grids.validate()?;
    let mut set = StrategySet {
        results: BTreeMap::new(),
        lambda1,
    };
    let want = |s: StrategyKind| strategies.contains(&s);
    let need_lo = want(StrategyKind::LocallyOptimal) || want(StrategyKind::GloballyOptimal);
    let need_dl0 = want(StrategyKind::DLambdaZero) || need_lo;
    let need_tl = want(StrategyKind::TransLasso) || need_dl0;
    let need_k0 = want(StrategyKind::KappaZero) || need_lo;

    let base = Point {
        lambda1,
        lambda2: grids.lambda2[grids.lambda2.len() / 2],
        kappa: 0.0,
        u: 0.0,
    };
    let run = |kind: StrategyKind, set: &mut StrategySet, ev: &mut O| -> Result<(), &'static str> {
        let seeds: Vec<Point> = match kind {
            StrategyKind::DLambdaZero => [StrategyKind::TransLasso]
                .iter()
                .filter_map(|s| set.get(*s))
                .map(|r| Point::from_hyper(&r.hyper))
                .collect(),
            StrategyKind::LocallyOptimal => [StrategyKind::KappaZero, StrategyKind::DLambdaZero]
                .iter()
                .filter_map(|s| set.get(*s))
                .map(|r| Point::from_hyper(&r.hyper))
                .collect(),
            StrategyKind::GloballyOptimal => set
                .get(StrategyKind::LocallyOptimal)
                .map(|r| Point::from_hyper(&r.hyper))
                .into_iter()
                .collect(),
            _ => Vec::new(),
        };
        let mut s = Search { ev, grids };
        for p in &seeds {
            s.value(p);
        }
        match kind {
            StrategyKind::TransLasso => {
                s.lambda2_global(Point { kappa: 1.0, ..base });
            }
            StrategyKind::KappaZero => {
                let (p, _) = s.profile(base, Coord::U);
                s.cyclic(p, &[Coord::U, Coord::Lambda2]);
            }
            StrategyKind::DLambdaZero => {
                let (p, _) = s.profile(base, Coord::Kappa);
                s.cyclic(p, &[Coord::Kappa, Coord::Lambda2]);
            }
            StrategyKind::PretrainingLassoPath => {
                let (p, _) = s.profile(
                    Point {
                        kappa: 1.0,
                        u: 1.0,
                        ..base
                    },
                    Coord::S,
                );
                s.cyclic(p, &[Coord::S, Coord::Lambda2]);
            }
            StrategyKind::LocallyOptimal => {
                let start = seeds
                    .iter()
                    .copied()
                    .min_by(|a, b| s.value(a).total_cmp(&s.value(b)))
                    .unwrap_or(base);
                s.cyclic(start, &[Coord::Kappa, Coord::U, Coord::Lambda2]);
            }
            StrategyKind::GloballyOptimal => {
                let start = seeds.first().copied().unwrap_or(base);
                s.cyclic(
                    start,
                    &[Coord::Lambda1, Coord::Kappa, Coord::U, Coord::Lambda2],
                );
            }
        }
        let r = finish(kind, s.ev).ok_or("every evaluation of a strategy failed")?;
        set.results.insert(kind, r);
        Ok(())
    };

    let order = [
        (StrategyKind::TransLasso, need_tl),
        (StrategyKind::KappaZero, need_k0),
        (StrategyKind::DLambdaZero, need_dl0),
        (
            StrategyKind::PretrainingLassoPath,
            want(StrategyKind::PretrainingLassoPath),
        ),
        (StrategyKind::LocallyOptimal, need_lo),
        (
            StrategyKind::GloballyOptimal,
            want(StrategyKind::GloballyOptimal),
        ),
    ];
    for (kind, needed) in order {
        if needed {
            run(kind, &mut set, ev)?;
        }
    }
    set.results.retain(|k, _| strategies.contains(k));
    Ok(set)
}

/// Tune a single strategy (its seeding dependencies are solved too).
pub fn tune_stage2(
    geometry: &ProblemGeometry,
    strategy: StrategyKind,
    grids: &Grids,
    options: &SolveOptions,
) -> Result<TuningResult, &'static str> {
    let mut set = tune_strategies(geometry, &[strategy], grids, options)?;
    set.results
        .remove(&strategy)
        .ok_or("strategy produced no result")
}

/// One row of a strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub sigma: f64,
    pub strategy: StrategyKind,
    pub eps2: f64,
    pub hyper: Hyperparams,
    pub skipped: usize,
}

/// Error ratios against the locally optimal strategy at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub sigma: f64,
    /// `min(ε_{Δλ=0}, ε_{κ=0}) / ε_LO`
    pub simple_over_lo: Option<f64>,
    pub pretrain_over_lo: Option<f64>,
    pub trans_over_lo: Option<f64>,
}

impl RatioRow {
    pub fn from_set(sigma: f64, set: &StrategySet) -> Self {
        let lo = set.eps(StrategyKind::LocallyOptimal);
        let ratio = |x: Option<f64>| Some(x? / lo?);
        let simple = match (
            set.eps(StrategyKind::DLambdaZero),
            set.eps(StrategyKind::KappaZero),
        ) {
            (Some(a), Some(b)) => Some(a.min(b)),
            _ => None,
        };
        Self {
            sigma,
            simple_over_lo: ratio(simple),
            pretrain_over_lo: ratio(set.eps(StrategyKind::PretrainingLassoPath)),
            trans_over_lo: ratio(set.eps(StrategyKind::TransLasso)),
        }
    }
}

/// Tune `strategies` at every noise level (all classes share `sigma`).
pub fn strategy_compare(
    geometry: &ProblemGeometry,
    sigma_grid: &[f64],
    strategies: &[StrategyKind],
    grids: &Grids,
    options: &SolveOptions,
) -> Result<(Vec<CompareRow>, Vec<RatioRow>), &'static str> {
    if sigma_grid.is_empty() {
        return Err("sigma grid is empty");
    }
    if strategies.is_empty() {
        return Err("no strategies requested");
    }
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for &sigma in sigma_grid {
        let g = geometry.with_sigma(sigma).map_err(|_| "invalid sigma")?;
        let set = compare_point(&g, strategies, grids, options)?;
        rows.extend(compare_rows(sigma, &set));
        ratios.push(RatioRow::from_set(sigma, &set));
    }
    Ok((rows, ratios))
}

/// Tune everything needed for the comparison table at one geometry: the
/// requested strategies plus those the ratio columns refer to.
pub fn compare_point(
    geometry: &ProblemGeometry,
    strategies: &[StrategyKind],
    grids: &Grids,
    options: &SolveOptions,
) -> Result<StrategySet, &'static str> {
    let mut all: Vec<StrategyKind> = strategies.to_vec();
    for s in [
        StrategyKind::LocallyOptimal,
        StrategyKind::KappaZero,
        StrategyKind::DLambdaZero,
    ] {
        if !all.contains(&s) {
            all.push(s);
        }
    }
    let mut set = tune_strategies(geometry, &all, grids, options)?;
    // Keep the extra strategies for the ratios; rows only list requested ones.
    set.results.retain(|k, _| all.contains(k));
    Ok(set)
}

pub fn compare_rows(sigma: f64, set: &StrategySet) -> Vec<CompareRow> {
    set.results
        .values()
        .map(|r| CompareRow {
            sigma,
            strategy: r.strategy,
            eps2: r.objective,
            hyper: r.hyper,
            skipped: r.skipped,
        })
        .collect()
}

/// Pretraining-path hyperparameters at interpolation `s`.
pub fn pretraining_point(lambda1: f64, lambda2: f64, s: f64) -> Option<Hyperparams> {
    let (kappa, dlambda) = pretraining_path(s, lambda2).ok()?;
    Hyperparams::new(lambda1, lambda2, kappa, dlambda).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn u_parametrization_round_trips() {
        for &u in &[0.0, 0.1, 0.5, 0.9] {
            let d = dlambda_from_u(u, 0.3);
            assert!((u_from_dlambda(d, 0.3) - u).abs() < 1e-12);
        }
        assert!(dlambda_from_u(1.0, 0.3).is_infinite());
        assert_eq!(u_from_dlambda(DeltaLambda::INFINITE, 0.3), 1.0);
    }

    #[test]
    fn pretraining_path_is_the_diagonal_of_u_and_kappa() {
        for &s in &[0.2, 0.5, 0.8] {
            let h = pretraining_point(0.1, 0.2, s).unwrap();
            let u = u_from_dlambda(h.dlambda, h.lambda2);
            assert!((u - h.kappa).abs() < 1e-12);
        }
    }

    #[test]
    fn tie_break_prefers_smaller_kappa() {
        let a = Hyperparams::new(0.1, 0.1, 0.5, DeltaLambda::ZERO).unwrap();
        let b = Hyperparams::new(0.1, 0.1, 0.2, DeltaLambda::ZERO).unwrap();
        let trace = vec![
            TraceEntry {
                hyper: a,
                value: Some(1.0),
            },
            TraceEntry {
                hyper: b,
                value: Some(1.0),
            },
            TraceEntry {
                hyper: a,
                value: None,
            },
        ];
        assert_eq!(trace_minimum(&trace).unwrap().hyper, b);
    }

    #[test]
    fn grid_validation() {
        let mut g = Grids::default();
        assert!(g.validate().is_ok());
        g.kappa.clear();
        assert!(g.validate().is_err());
        let g = Grids {
            dlambda_u: vec![0.0, 1.5],
            ..Grids::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in StrategyKind::ALL {
            assert_eq!(StrategyKind::from_name(s.name()), Some(s));
        }
    }
}

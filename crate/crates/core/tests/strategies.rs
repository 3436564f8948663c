use std::sync::OnceLock;

use translasso_core::cv::{cv_tune, cv_tune_all, fold_assignment, CvOptions};
use translasso_core::search::log_grid;
use translasso_core::strategies::{
    strategy_compare, trace_minimum, tune_lambda1, tune_strategies, Grids, ReplicaEvaluator,
    StrategySet,
};
use translasso_core::{
    conditional_gen_error, fit_finetune, fit_pretraining, generate_instance, DeltaLambda,
    Hyperparams, ProblemGeometry, SolveOptions, SolverOptions, StrategyKind,
};

use StrategyKind::*;

fn base(sigma: f64) -> ProblemGeometry {
    ProblemGeometry::new(0.10, vec![0.09, 0.09], vec![0.2, 0.8], vec![sigma, sigma]).unwrap()
}

fn all_strategies() -> &'static StrategySet {
    static SET: OnceLock<StrategySet> = OnceLock::new();
    SET.get_or_init(|| {
        tune_strategies(
            &base(0.1),
            &StrategyKind::ALL,
            &Grids::default(),
            &SolveOptions::default(),
        )
        .unwrap()
    })
}

fn eps(s: StrategyKind) -> f64 {
    all_strategies().eps(s).unwrap()
}

#[test]
fn search_spaces_nest() {
    assert!(eps(GloballyOptimal) <= eps(LocallyOptimal));
    assert!(eps(LocallyOptimal) <= eps(KappaZero).min(eps(DLambdaZero)));
    assert!(eps(DLambdaZero) <= eps(TransLasso));
    // Transfer helps here, and not only through the pinned baseline.
    assert!(eps(LocallyOptimal) < 0.95 * eps(TransLasso));
}

#[test]
fn chosen_points_respect_each_strategy() {
    let set = all_strategies();
    for r in set.results.values() {
        let h = r.hyper;
        let min = trace_minimum(&r.trace).unwrap();
        assert_eq!(min.hyper, h, "{:?}", r.strategy);
        assert_eq!(min.value, Some(r.objective));
        assert!(r.theta1.is_some() && r.theta2.is_some());
        match r.strategy {
            TransLasso => {
                assert_eq!(h.kappa, 1.0);
                assert_eq!(h.dlambda, DeltaLambda::ZERO);
            }
            KappaZero => assert_eq!(h.kappa, 0.0),
            DLambdaZero => assert_eq!(h.dlambda, DeltaLambda::ZERO),
            PretrainingLassoPath => {
                let s = 1.0 - h.kappa;
                let expect = if s == 0.0 {
                    f64::INFINITY
                } else {
                    h.lambda2 * (1.0 - s) / s
                };
                let got = h.dlambda.value();
                assert!(
                    got == expect || (got - expect).abs() <= 1e-12 * expect,
                    "{got} vs {expect}"
                );
            }
            _ => {}
        }
        if r.strategy != GloballyOptimal {
            assert_eq!(h.lambda1, set.lambda1);
        }
    }
}

#[test]
fn optimal_lambda1_grows_with_noise() {
    let grid = Grids::default().lambda1;
    let mut prev = 0.0;
    for sigma in [0.1, 0.5, 1.0] {
        let mut ev = ReplicaEvaluator::new(base(sigma), SolveOptions::default());
        let (l, _, _) = tune_lambda1(&mut ev, &grid, 1e-6).unwrap();
        assert!(l > prev, "sigma {sigma}: {l} after {prev}");
        prev = l;
    }
}

#[test]
fn optimal_first_stage_error_falls_with_more_data() {
    let grid = Grids::default().lambda1;
    let mut prev = f64::INFINITY;
    for scale in [0.5, 1.0, 2.0] {
        let g = base(0.1)
            .with_alphas(vec![0.2 * scale, 0.8 * scale])
            .unwrap();
        let mut ev = ReplicaEvaluator::new(g.clone(), SolveOptions::default());
        let (l, _, _) = tune_lambda1(&mut ev, &grid, 1e-6).unwrap();
        // Per-sample error, so the comparison is not driven by α_tot itself.
        let e = ev.eps1(l).unwrap() / g.alpha_total();
        assert!(e < prev, "scale {scale}: {e} after {prev}");
        prev = e;
    }
}

#[test]
fn signal_free_geometry_shrinks_to_zero() {
    let g = ProblemGeometry::new(0.0, vec![0.0], vec![0.5], vec![0.3]).unwrap();
    let grid = log_grid(1e-3, 10.0, 9);
    let mut ev = ReplicaEvaluator::new(g.clone(), SolveOptions::default());
    let (l, t1, m) = tune_lambda1(&mut ev, &grid, 1e-6).unwrap();
    assert_eq!(l, 10.0);
    assert_eq!(m.x, 10.0);
    assert!(t1.q1 < 1e-12);
    let e = ev.eps1(l).unwrap();
    assert!((e - 0.5 * 0.09).abs() < 1e-10, "{e}");
}

#[test]
fn tuning_is_deterministic() {
    let g = base(0.3);
    let grids = Grids {
        lambda2: log_grid(1e-2, 1.0, 7),
        ..Grids::default()
    };
    let run = || {
        tune_strategies(
            &g,
            &[KappaZero, DLambdaZero],
            &grids,
            &SolveOptions::default(),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn compare_emits_one_row_per_strategy_and_ratios() {
    let grids = Grids {
        lambda2: log_grid(1e-2, 1.0, 7),
        ..Grids::default()
    };
    let (rows, ratios) = strategy_compare(
        &base(0.1),
        &[0.5],
        &[TransLasso, KappaZero],
        &grids,
        &SolveOptions::default(),
    )
    .unwrap();
    // The ratio columns need LO and Δλ = 0 as well.
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.sigma == 0.5 && r.eps2.is_finite()));
    let r = ratios[0];
    assert!(r.simple_over_lo.unwrap() >= 1.0);
    assert!(r.trans_over_lo.unwrap() >= r.simple_over_lo.unwrap() - 1e-12);
    assert!(r.pretrain_over_lo.is_none());

    assert!(strategy_compare(
        &base(0.1),
        &[],
        &[TransLasso],
        &grids,
        &SolveOptions::default()
    )
    .is_err());
    assert!(strategy_compare(&base(0.1), &[0.1], &[], &grids, &SolveOptions::default()).is_err());
}

#[test]
fn empty_grids_are_rejected() {
    let grids = Grids {
        kappa: vec![],
        ..Grids::default()
    };
    assert!(tune_strategies(&base(0.1), &[DLambdaZero], &grids, &SolveOptions::default()).is_err());
}

fn small_grids() -> Grids {
    Grids {
        lambda1: log_grid(1e-2, 1.0, 7),
        lambda2: log_grid(1e-2, 1.0, 7),
        kappa: vec![0.0, 0.5, 1.0],
        dlambda_u: vec![0.0, 0.5, 1.0],
        ..Grids::default()
    }
}

#[test]
fn cross_validation_is_deterministic_given_seed() {
    let inst = generate_instance(&base(0.1), 120, 3).unwrap();
    let opts = CvOptions {
        folds: 4,
        seed: 11,
        ..CvOptions::default()
    };
    let a = cv_tune(&inst.datasets(), DLambdaZero, &small_grids(), &opts).unwrap();
    let b = cv_tune(&inst.datasets(), DLambdaZero, &small_grids(), &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fold_assignment(24, 4, 11).unwrap(),
        fold_assignment(24, 4, 11).unwrap()
    );
}

#[test]
fn leave_one_out_runs() {
    let inst = generate_instance(&base(0.1), 60, 5).unwrap();
    let m = inst.target().0.rows();
    let opts = CvOptions {
        folds: m,
        ..CvOptions::default()
    };
    let r = cv_tune(&inst.datasets(), TransLasso, &small_grids(), &opts).unwrap();
    assert!(r.objective.is_finite() && r.objective > 0.0);
    let too_many = CvOptions {
        folds: m + 1,
        ..opts
    };
    assert!(cv_tune(&inst.datasets(), TransLasso, &small_grids(), &too_many).is_err());
}

#[test]
fn cross_validated_strategies_nest() {
    let inst = generate_instance(&base(0.1), 150, 9).unwrap();
    let set = cv_tune_all(
        &inst.datasets(),
        &StrategyKind::ALL,
        &small_grids(),
        &CvOptions::default(),
    )
    .unwrap();
    let e = |s| set.eps(s).unwrap();
    assert!(e(GloballyOptimal) <= e(LocallyOptimal));
    assert!(e(LocallyOptimal) <= e(KappaZero).min(e(DLambdaZero)));
    assert!(e(DLambdaZero) <= e(TransLasso));
}

#[test]
fn cross_validated_trans_lasso_matches_replica_choice() {
    let g = base(0.1);
    let replica = all_strategies().get(TransLasso).unwrap().hyper;
    let solver = SolverOptions::default();
    for seed in 0..3 {
        let inst = generate_instance(&g, 400, seed).unwrap();
        let opts = CvOptions {
            seed,
            ..CvOptions::default()
        };
        let cv = cv_tune(&inst.datasets(), TransLasso, &Grids::default(), &opts)
            .unwrap()
            .hyper;
        let err = |h: &Hyperparams| {
            let x1 = fit_pretraining(&inst.datasets(), h.lambda1, &solver, None).unwrap();
            let x2 = fit_finetune(inst.target(), &x1, h, &solver, None).unwrap();
            conditional_gen_error(&x1, Some(&x2), &inst.truth, &g, h)
                .unwrap()
                .1
                .unwrap()
        };
        let (a, b) = (err(&cv), err(&replica));
        assert!(
            a <= 1.10 * b,
            "seed {seed}: CV choice {a} vs replica choice {b}"
        );
        assert!(
            (cv.lambda2 / replica.lambda2).ln().abs() < 1.0,
            "{} vs {}",
            cv.lambda2,
            replica.lambda2
        );
    }
}

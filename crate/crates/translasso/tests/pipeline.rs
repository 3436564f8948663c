use translasso::config::ClassSpec;
use translasso::io::export_instance_csv;
use translasso::real_data::{
    hold_out, jackknife_mean_se, load_classes, run_pipeline, ClassDataset, LoadOptions,
    PipelineOptions,
};
use translasso::Error;
use translasso_core::cv::{fold_assignment, CvOptions};
use translasso_core::search::log_grid;
use translasso_core::strategies::Grids;
use translasso_core::{generate_instance, Instance, Matrix, ProblemGeometry, StrategyKind};

fn classes_of(inst: &Instance) -> Vec<ClassDataset> {
    inst.datasets()
        .into_iter()
        .enumerate()
        .map(|(k, (a, y))| ClassDataset {
            id: format!("class{}", k + 1),
            features: (0..a.cols()).map(|j| format!("x{j}")).collect(),
            design: a.clone(),
            response: y.to_vec(),
            test: None,
        })
        .collect()
}

fn quick_options(strategy: StrategyKind) -> PipelineOptions {
    PipelineOptions {
        strategy,
        grids: Grids {
            lambda1: log_grid(0.01, 1.0, 7),
            lambda2: log_grid(0.01, 1.0, 7),
            kappa: vec![0.0, 0.5, 1.0],
            dlambda_u: vec![0.0, 0.5, 1.0],
            s: vec![0.0, 0.5, 1.0],
            refine: false,
            max_cycles: 2,
            ..Grids::default()
        },
        cv: CvOptions {
            folds: 5,
            seed: 11,
            ..CvOptions::default()
        },
        ..PipelineOptions::default()
    }
}

fn geometry(sigma: f64) -> ProblemGeometry {
    ProblemGeometry::new(0.1, vec![0.09, 0.09], vec![0.5, 1.0], vec![sigma, sigma]).unwrap()
}

#[test]
fn csv_export_reloads_to_the_same_fit() {
    let inst = generate_instance(&geometry(0.1), 60, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_instance_csv(dir.path(), &inst).unwrap();
    let specs: Vec<ClassSpec> = translasso::runs::class_specs(&paths);
    let opts = LoadOptions {
        response: "y".into(),
        delimiter: None,
        standardize: false,
    };
    let (loaded, std) = load_classes(&specs, &opts).unwrap();
    assert!(std.is_none());
    let memory = classes_of(&inst);
    assert_eq!(loaded, memory);

    let p = quick_options(StrategyKind::TransLasso);
    let a = run_pipeline(&loaded, "class1", &p).unwrap();
    let b = run_pipeline(&memory, "class1", &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_headers_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "x0,x1,y\n1,2,3\n4,5,6\n").unwrap();
    std::fs::write(&b, "x0,w,y\n1,2,3\n").unwrap();
    let specs = vec![
        ClassSpec {
            id: "a".into(),
            path: a,
            test_path: None,
        },
        ClassSpec {
            id: "b".into(),
            path: b,
            test_path: None,
        },
    ];
    let opts = LoadOptions {
        response: "y".into(),
        delimiter: None,
        standardize: false,
    };
    let e = load_classes(&specs, &opts).unwrap_err();
    assert!(matches!(e, Error::Data(_)), "{e}");
    assert!(e.to_string().contains("`w`"), "{e}");
}

#[test]
fn missing_response_column_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    std::fs::write(&a, "x0\tx1\tz\n1\t2\t3\n").unwrap();
    let specs = vec![ClassSpec {
        id: "a".into(),
        path: a,
        test_path: None,
    }];
    let opts = LoadOptions {
        response: "y".into(),
        delimiter: None,
        standardize: false,
    };
    let e = load_classes(&specs, &opts).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 1);
}

// Plain cyclic coordinate descent for ½‖y − Ax‖² + λ‖x‖₁.
fn lasso_cd(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let p = rows[0].len();
    let mut x = vec![0.0; p];
    let mut r = y.to_vec();
    let norms: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|row| row[j] * row[j]).sum())
        .collect();
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        for j in 0..p {
            let rho: f64 = rows
                .iter()
                .zip(&r)
                .map(|(row, ri)| row[j] * ri)
                .sum::<f64>()
                + norms[j] * x[j];
            let new = rho.signum() * (rho.abs() - lambda).max(0.0) / norms[j];
            let d = new - x[j];
            if d != 0.0 {
                rows.iter()
                    .zip(r.iter_mut())
                    .for_each(|(row, ri)| *ri -= row[j] * d);
                x[j] = new;
            }
            delta = delta.max(d.abs());
        }
        if delta < 1e-13 {
            break;
        }
    }
    x
}

fn to_rows(a: &Matrix) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| (0..a.cols()).map(|j| a.get(i, j)).collect())
        .collect()
}

#[test]
fn single_class_without_transfer_is_plain_lasso_cross_validation() {
    let g = ProblemGeometry::new(0.1, vec![0.05], vec![1.0], vec![0.3]).unwrap();
    let inst = generate_instance(&g, 40, 9).unwrap();
    let classes = classes_of(&inst);
    let grid = log_grid(0.05, 5.0, 9);
    let mut opts = quick_options(StrategyKind::KappaZero);
    opts.grids.lambda1 = vec![1.0];
    opts.grids.lambda2 = grid.clone();
    opts.grids.dlambda_u = vec![0.0];
    opts.relative_lambdas = false;
    opts.cv.patience = None;
    let report = run_pipeline(&classes, "class1", &opts).unwrap();

    let rows = to_rows(&classes[0].design);
    let y = &classes[0].response;
    let assign = fold_assignment(rows.len(), opts.cv.folds, opts.cv.seed).unwrap();
    let cv = |lambda: f64| -> f64 {
        let mut sse = 0.0;
        for f in 0..opts.cv.folds {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| assign[i] != f);
            let x = lasso_cd(
                &tr.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(),
                &tr.iter().map(|&i| y[i]).collect::<Vec<_>>(),
                lambda,
            );
            for i in te {
                let pred: f64 = rows[i].iter().zip(&x).map(|(a, b)| a * b).sum();
                sse += (y[i] - pred).powi(2);
            }
        }
        sse / rows.len() as f64
    };
    let errors: Vec<f64> = grid.iter().map(|&l| cv(l)).collect();
    let best = (0..grid.len())
        .rev()
        .min_by(|&a, &b| errors[a].total_cmp(&errors[b]))
        .unwrap();

    assert_eq!(report.hyper.kappa, 0.0);
    assert_eq!(report.hyper.dlambda.value(), 0.0);
    assert_eq!(report.hyper.lambda2, grid[best]);
    assert!((report.cv_error - errors[best]).abs() < 1e-6 * errors[best]);
    let x = lasso_cd(&rows, y, grid[best]);
    for (a, b) in report.coefficients.iter().zip(&x) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn test_rows_never_influence_the_fit() {
    let inst = generate_instance(&geometry(0.2), 60, 21).unwrap();
    let mut classes = classes_of(&inst);
    hold_out(&mut classes[0], 0.25, 3).unwrap();
    let opts = quick_options(StrategyKind::TransLasso);
    let a = run_pipeline(&classes, "class1", &opts).unwrap();
    let test = classes[0].test.as_mut().unwrap();
    test.response.iter_mut().for_each(|v| *v = 100.0 - *v);
    for i in 0..test.design.rows() {
        test.design.set(i, 0, 7.0);
    }
    let b = run_pipeline(&classes, "class1", &opts).unwrap();
    assert_eq!(a.hyper, b.hyper);
    assert_eq!(a.coefficients, b.coefficients);
    assert_eq!(a.cv_error, b.cv_error);
    assert_ne!(a.test.unwrap().mse, b.test.unwrap().mse);
}

#[test]
fn support_restricted_fine_tuning_is_no_worse_at_low_noise() {
    let inst = generate_instance(&geometry(0.01), 120, 5).unwrap();
    let mut classes = classes_of(&inst);
    hold_out(&mut classes[0], 0.3, 8).unwrap();
    let dl0 = run_pipeline(
        &classes,
        "class1",
        &quick_options(StrategyKind::DLambdaZero),
    )
    .unwrap();
    let tl = run_pipeline(&classes, "class1", &quick_options(StrategyKind::TransLasso)).unwrap();
    let (d, t) = (dl0.test.unwrap(), tl.test.unwrap());
    assert!(
        d.mse <= t.mse + 2.0 * d.jackknife_se.max(t.jackknife_se),
        "{d:?} vs {t:?}"
    );
}

#[test]
fn jackknife_matches_closed_form_on_three_rows() {
    let v = [0.5, 2.0, 6.5];
    let mean = 3.0;
    let s2 = v.iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / 2.0;
    let se = jackknife_mean_se(&v).unwrap();
    assert!((se - (s2 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn unknown_target_is_a_config_error() {
    let inst = generate_instance(&geometry(0.1), 40, 1).unwrap();
    let e = run_pipeline(
        &classes_of(&inst),
        "nope",
        &quick_options(StrategyKind::TransLasso),
    )
    .unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

#[test]
fn readme_configuration_examples_parse() {
    let text =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let blocks: Vec<&str> = text
        .split("```toml")
        .skip(1)
        .map(|b| b.split("```").next().unwrap())
        .collect();
    assert!(blocks.len() >= 2);
    for b in blocks {
        let cfg = translasso::Config::from_toml(b).unwrap_or_else(|e| panic!("{e}\n{b}"));
        cfg.validate().unwrap();
    }
}

//! Two-stage fits on user data: one delimited table per class, a shared
//! feature header, K-fold CV tuning and a held-out test report.

use std::path::Path;

use serde::{Deserialize, Serialize};
use translasso_core::cv::{cv_tune_all, CvOptions};
use translasso_core::matrix::Design;
use translasso_core::rng::derive_seed;
use translasso_core::strategies::Grids;
use translasso_core::{
    fit_finetune, fit_pretraining, Estimate, Hyperparams, Matrix, SolverOptions, StrategyKind,
};

use crate::config::ClassSpec;
use crate::error::{Error, Result};
use crate::io::csv_error;

#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub design: Matrix,
    pub response: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDataset {
    pub id: String,
    pub features: Vec<String>,
    pub design: Matrix,
    pub response: Vec<f64>,
    pub test: Option<TestSplit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub response: String,
    /// `None` picks tab for `.tsv` files and comma otherwise.
    pub delimiter: Option<u8>,
    pub standardize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            response: "y".into(),
            delimiter: None,
            standardize: false,
        }
    }
}

/// Per-feature centering and scaling, fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Statistics of the pooled training rows of every class. Constant
    /// columns keep scale 1.
    pub fn fit(classes: &[ClassDataset]) -> Self {
        let p = classes.first().map_or(0, |c| c.design.cols());
        let rows: usize = classes.iter().map(|c| c.design.rows()).sum();
        let mut mean = vec![0.0; p];
        let mut scale = vec![1.0; p];
        if rows == 0 {
            return Self { mean, scale };
        }
        for j in 0..p {
            let col = || {
                classes
                    .iter()
                    .flat_map(|c| c.design.column(j).iter().copied())
            };
            let m = col().sum::<f64>() / rows as f64;
            let var = col().map(|v| (v - m) * (v - m)).sum::<f64>() / rows as f64;
            mean[j] = m;
            if var > 0.0 {
                scale[j] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, m: &mut Matrix) {
        for j in 0..m.cols() {
            let (mu, s) = (self.mean[j], self.scale[j]);
            m.column_mut(j).iter_mut().for_each(|v| *v = (*v - mu) / s);
        }
    }

    /// Coefficients on the raw features and the constant they imply:
    /// `Σ ((x − μ)/s)·β = Σ x·(β/s) − Σ μ·β/s`.
    pub fn to_original(&self, coef: &[f64]) -> (Vec<f64>, f64) {
        let raw: Vec<f64> = coef.iter().zip(&self.scale).map(|(b, s)| b / s).collect();
        let offset = -raw.iter().zip(&self.mean).map(|(b, m)| b * m).sum::<f64>();
        (raw, offset)
    }
}

fn delimiter_for(path: &Path, opt: Option<u8>) -> u8 {
    opt.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    })
}

/// Header and numeric body of one table.
fn read_table(path: &Path, delimiter: u8) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let mut row = Vec::with_capacity(header.len());
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {}, column `{}`: `{cell}` is not a number",
                    path.display(),
                    i + 1,
                    header[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {}, column `{}`: non-finite value",
                    path.display(),
                    i + 1,
                    header[j]
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok((header, rows))
}

// Split a numeric table into (features, design, response).
fn split_response(
    path: &Path,
    header: &[String],
    rows: &[Vec<f64>],
    response: &str,
) -> Result<(Vec<String>, Matrix, Vec<f64>)> {
    let yc = header.iter().position(|h| h == response).ok_or_else(|| {
        Error::Config(format!(
            "{}: no response column `{response}`",
            path.display()
        ))
    })?;
    let features: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != yc)
        .map(|(_, h)| h.clone())
        .collect();
    let mut data = Vec::with_capacity(rows.len() * features.len());
    let mut y = Vec::with_capacity(rows.len());
    for row in rows {
        for (j, &v) in row.iter().enumerate() {
            if j != yc {
                data.push(v);
            }
        }
        y.push(row[yc]);
    }
    let a =
        Matrix::from_row_major(rows.len(), features.len(), &data).expect("rows have header length");
    Ok((features, a, y))
}

fn check_header(id: &str, expected: &[String], got: &[String]) -> Result<()> {
    let n = expected.len().max(got.len());
    for j in 0..n {
        match (expected.get(j), got.get(j)) {
            (Some(a), Some(b)) if a == b => {}
            (Some(a), Some(b)) => {
                return Err(Error::Data(format!(
                    "class `{id}`: column {} is `{b}`, expected `{a}`",
                    j + 1
                )))
            }
            (Some(a), None) => {
                return Err(Error::Data(format!("class `{id}`: missing column `{a}`")))
            }
            (None, Some(b)) => {
                return Err(Error::Data(format!(
                    "class `{id}`: unexpected column `{b}`"
                )))
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}

/// Read and align every class. With `standardize`, features are centered
/// and scaled with statistics of the pooled training rows, and the fitted
/// transform is returned for mapping coefficients back.
pub fn load_classes(
    specs: &[ClassSpec],
    opts: &LoadOptions,
) -> Result<(Vec<ClassDataset>, Option<Standardization>)> {
    if specs.is_empty() {
        return Err(Error::Config("no classes given".into()));
    }
    let mut header0: Option<Vec<String>> = None;
    let mut classes = Vec::with_capacity(specs.len());
    for spec in specs {
        let (header, rows) = read_table(&spec.path, delimiter_for(&spec.path, opts.delimiter))?;
        match &header0 {
            None => header0 = Some(header.clone()),
            Some(h) => check_header(&spec.id, h, &header)?,
        }
        let (features, design, response) =
            split_response(&spec.path, &header, &rows, &opts.response)?;
        let test = match &spec.test_path {
            None => None,
            Some(tp) => {
                let (th, trows) = read_table(tp, delimiter_for(tp, opts.delimiter))?;
                check_header(&format!("{} (test)", spec.id), &header, &th)?;
                let (_, design, response) = split_response(tp, &th, &trows, &opts.response)?;
                Some(TestSplit { design, response })
            }
        };
        classes.push(ClassDataset {
            id: spec.id.clone(),
            features,
            design,
            response,
            test,
        });
    }
    let mut ids: Vec<&str> = classes.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("class ids must be unique".into()));
    }
    let std = opts.standardize.then(|| standardize(&mut classes));
    Ok((classes, std))
}

/// Fit a standardization on the training rows and apply it everywhere.
pub fn standardize(classes: &mut [ClassDataset]) -> Standardization {
    let s = Standardization::fit(classes);
    for c in classes.iter_mut() {
        s.apply(&mut c.design);
        if let Some(t) = &mut c.test {
            s.apply(&mut t.design);
        }
    }
    s
}

/// Move a seeded random `fraction` of a class's rows into its test split.
pub fn hold_out(class: &mut ClassDataset, fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "test_fraction {fraction} must lie in [0, 1)"
        )));
    }
    if class.test.is_some() {
        return Err(Error::Config(format!(
            "class `{}` already has a test split",
            class.id
        )));
    }
    let m = class.design.rows();
    let k = (fraction * m as f64).round() as usize;
    if k == 0 {
        return Ok(());
    }
    if k >= m {
        return Err(Error::Config(format!(
            "test_fraction leaves no training rows in `{}`",
            class.id
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&i| derive_seed(seed, i as u64));
    let (mut test_idx, mut train_idx) = (order[..k].to_vec(), order[k..].to_vec());
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    class.test = Some(TestSplit {
        design: class.design.select_rows(&test_idx),
        response: test_idx.iter().map(|&i| class.response[i]).collect(),
    });
    class.design = class.design.select_rows(&train_idx);
    class.response = train_idx.iter().map(|&i| class.response[i]).collect();
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub strategy: StrategyKind,
    pub grids: Grids,
    pub cv: CvOptions,
    pub solver: SolverOptions,
    /// Scale the λ₁ grid by the pooled `max |Aᵀy|` and the λ₂ grid by the
    /// target's, so grid values are fractions of the all-zero threshold.
    pub relative_lambdas: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::LocallyOptimal,
            grids: Grids::default(),
            cv: CvOptions::default(),
            solver: SolverOptions::default(),
            relative_lambdas: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub rows: usize,
    pub mse: f64,
    pub jackknife_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub target: String,
    pub strategy: StrategyKind,
    pub hyper: Hyperparams,
    pub cv_error: f64,
    pub stage1: Estimate,
    pub stage2: Estimate,
    /// `κ x̂₁ + x̂₂`, the coefficients applied to target features.
    pub coefficients: Vec<f64>,
    pub train_mse: f64,
    pub test: Option<TestReport>,
}

/// Jackknife standard error of a mean from its leave-one-out replicates.
pub fn jackknife_mean_se(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let total: f64 = values.iter().sum();
    let loo: Vec<f64> = values
        .iter()
        .map(|v| (total - v) / (n - 1) as f64)
        .collect();
    let bar = loo.iter().sum::<f64>() / n as f64;
    let ss: f64 = loo.iter().map(|t| (t - bar) * (t - bar)).sum();
    Some(((n - 1) as f64 / n as f64 * ss).sqrt())
}

fn max_abs_correlation(datasets: &[(&Matrix, &[f64])]) -> f64 {
    let p = datasets.first().map_or(0, |(a, _)| a.cols());
    let mut g = vec![0.0; p];
    for (a, y) in datasets {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += a.col_dot(j, y);
        }
    }
    g.into_iter().map(f64::abs).fold(0.0, f64::max)
}

fn squared_errors(a: &Matrix, y: &[f64], coef: &[f64]) -> Vec<f64> {
    a.matvec(coef)
        .iter()
        .zip(y)
        .map(|(p, t)| (t - p) * (t - p))
        .collect()
}

/// Tune by cross-validation, refit both stages on all training rows and
/// score the target's test split. Only training rows enter tuning and
/// fitting.
pub fn run_pipeline(
    classes: &[ClassDataset],
    target: &str,
    opts: &PipelineOptions,
) -> Result<PipelineReport> {
    let t = classes
        .iter()
        .position(|c| c.id == target)
        .ok_or_else(|| Error::Config(format!("target class `{target}` not found")))?;
    let p = classes[t].design.cols();
    if classes.iter().any(|c| c.design.cols() != p) {
        return Err(Error::Data(
            "classes disagree on the number of features".into(),
        ));
    }
    // Target first, sources in input order.
    let mut datasets: Vec<(&Matrix, &[f64])> = vec![(&classes[t].design, &classes[t].response[..])];
    datasets.extend(
        classes
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, c)| (&c.design, &c.response[..])),
    );

    let mut grids = opts.grids.clone();
    if opts.relative_lambdas {
        let unit = |x: f64| if x > 0.0 { x } else { 1.0 };
        let s1 = unit(max_abs_correlation(&datasets));
        let s2 = unit(max_abs_correlation(&datasets[..1]));
        grids.lambda1.iter_mut().for_each(|l| *l *= s1);
        grids.lambda2.iter_mut().for_each(|l| *l *= s2);
    }
    let set = cv_tune_all(&datasets, &[opts.strategy], &grids, &opts.cv).map_err(|e| match e {
        translasso_core::cv::CvError::Lasso(l) => Error::Numerical(l.to_string()),
        translasso_core::cv::CvError::FirstStage => Error::Numerical(e.to_string()),
        other => Error::Config(other.to_string()),
    })?;
    let tuned = set.get(opts.strategy).expect("requested strategy is tuned");
    let hyper = tuned.hyper;

    let x1 = fit_pretraining(&datasets, hyper.lambda1, &opts.solver, None)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let x2 = fit_finetune(datasets[0], &x1, &hyper, &opts.solver, None)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let coefficients: Vec<f64> = x1
        .coefficients
        .iter()
        .zip(&x2.coefficients)
        .map(|(a, b)| hyper.kappa * a + b)
        .collect();
    let train = squared_errors(datasets[0].0, datasets[0].1, &coefficients);
    let train_mse = train.iter().sum::<f64>() / train.len() as f64;
    let test = classes[t]
        .test
        .as_ref()
        .filter(|s| !s.response.is_empty())
        .map(|s| {
            let e = squared_errors(&s.design, &s.response, &coefficients);
            TestReport {
                rows: e.len(),
                mse: e.iter().sum::<f64>() / e.len() as f64,
                jackknife_se: jackknife_mean_se(&e).unwrap_or(0.0),
            }
        });
    Ok(PipelineReport {
        target: target.to_string(),
        strategy: opts.strategy,
        hyper,
        cv_error: tuned.objective,
        stage1: x1,
        stage2: x2,
        coefficients,
        train_mse,
        test,
    })
}

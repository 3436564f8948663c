//! Finite-N instances of the common-and-individual support model, and the
//! Monte Carlo test-set oracle.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::math::{round, sqrt};
use crate::matrix::Matrix;
use crate::model::{Estimate, GroundTruth, Hyperparams, ProblemGeometry};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyntheticError {
    #[error("supports need {needed} features but N = {n}")]
    Infeasible { needed: usize, n: usize },
    #[error("class {class} gets no samples at N = {n} (alpha = {alpha})")]
    EmptyClass { class: usize, n: usize, alpha: f64 },
    #[error("N must be positive")]
    ZeroDimension,
    #[error("estimate has {got} coefficients, instance has {expected} features")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("at least two test sets are needed for a standard error")]
    TooFewTestSets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub geometry: ProblemGeometry,
    pub n_features: usize,
    pub seed: u64,
    pub designs: Vec<Matrix>,
    pub responses: Vec<Vec<f64>>,
    pub truth: GroundTruth,
}

impl Instance {
    pub fn num_classes(&self) -> usize {
        self.designs.len()
    }

    /// `(design, response)` pairs in class order.
    pub fn datasets(&self) -> Vec<(&Matrix, &[f64])> {
        self.designs
            .iter()
            .zip(&self.responses)
            .map(|(a, y)| (a, y.as_slice()))
            .collect()
    }

    pub fn target(&self) -> (&Matrix, &[f64]) {
        (&self.designs[0], &self.responses[0])
    }
}

/// Support sizes `round(pi N)` for the common block and each class.
pub fn support_sizes(geometry: &ProblemGeometry, n: usize) -> Vec<usize> {
    let nf = n as f64;
    core::iter::once(geometry.pi0())
        .chain(geometry.pis().iter().copied())
        .map(|p| round(p * nf) as usize)
        .collect()
}

/// Sample counts `round(alpha N)` per class.
pub fn sample_sizes(geometry: &ProblemGeometry, n: usize) -> Vec<usize> {
    geometry
        .alphas()
        .iter()
        .map(|a| round(a * n as f64) as usize)
        .collect()
}

pub fn generate_instance(
    geometry: &ProblemGeometry,
    n: usize,
    seed: u64,
) -> Result<Instance, SyntheticError> {
    if n == 0 {
        return Err(SyntheticError::ZeroDimension);
    }
    let sizes = support_sizes(geometry, n);
    let needed: usize = sizes.iter().sum();
    if needed > n {
        return Err(SyntheticError::Infeasible { needed, n });
    }
    let samples = sample_sizes(geometry, n);
    for (k, &m) in samples.iter().enumerate() {
        if m == 0 {
            return Err(SyntheticError::EmptyClass {
                class: k + 1,
                n,
                alpha: geometry.alphas()[k],
            });
        }
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, StreamKind::Supports, 0));
    let mut supports = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in &sizes {
        let mut block = perm[start..start + s].to_vec();
        block.sort_unstable();
        supports.push(block);
        start += s;
    }

    let mut truth_rng = stream(seed, StreamKind::Truth, 0);
    let coefficients: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&s| (0..s).map(|_| truth_rng.sample(StandardNormal)).collect())
        .collect();
    let truth = GroundTruth {
        n_features: n,
        supports,
        coefficients,
    };

    let scale = 1.0 / sqrt(n as f64);
    let mut designs = Vec::with_capacity(samples.len());
    let mut responses = Vec::with_capacity(samples.len());
    for (k, &m) in samples.iter().enumerate() {
        let mut rng = stream(seed, StreamKind::Design, k as u32);
        let data: Vec<f64> = (0..m * n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = Matrix::from_col_major(m, n, data).expect("sized above");
        let r = truth.regression_vector(k + 1).expect("class in range");
        let mut y = crate::matrix::Design::matvec(&a, &r);
        let sigma = geometry.sigmas()[k];
        if sigma > 0.0 {
            let mut noise = stream(seed, StreamKind::Noise, k as u32);
            for v in y.iter_mut() {
                *v += sigma * noise.sample::<f64, _>(StandardNormal);
            }
        }
        designs.push(a);
        responses.push(y);
    }
    Ok(Instance {
        geometry: geometry.clone(),
        n_features: n,
        seed,
        designs,
        responses,
        truth,
    })
}

/// Sample mean and standard error of a test-set error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    /// `None` for fewer than two samples.
    pub fn from_samples(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n < 2 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Some(Self {
            mean,
            se: sqrt(var / n as f64),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestErrors {
    pub first: MeanSe,
    pub second: MeanSe,
}

fn check_len(e: &Estimate, n: usize) -> Result<(), SyntheticError> {
    if e.len() != n {
        Err(SyntheticError::DimensionMismatch {
            got: e.len(),
            expected: n,
        })
    } else {
        Ok(())
    }
}

/// Average test errors over `n_test_sets` freshly drawn Gaussian test
/// designs and noise vectors, with the same row counts as the training data.
pub fn empirical_test_error(
    instance: &Instance,
    first_stage: &Estimate,
    second_stage: &Estimate,
    hyper: &Hyperparams,
    n_test_sets: usize,
    seed: u64,
) -> Result<TestErrors, SyntheticError> {
    let n = instance.n_features;
    check_len(first_stage, n)?;
    check_len(second_stage, n)?;
    if n_test_sets < 2 {
        return Err(SyntheticError::TooFewTestSets);
    }
    let k = instance.num_classes();
    // Residual directions: r_k - x1 for stage 1, r_1 - (kappa x1 + x2) for stage 2.
    let mut d1 = Vec::with_capacity(k);
    for c in 1..=k {
        let r = instance.truth.regression_vector(c).expect("class in range");
        d1.push(
            r.iter()
                .zip(&first_stage.coefficients)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        );
    }
    let r1 = instance.truth.regression_vector(1).expect("class in range");
    let d2: Vec<f64> = (0..n)
        .map(|i| r1[i] - hyper.kappa * first_stage.coefficients[i] - second_stage.coefficients[i])
        .collect();

    let scale = 1.0 / sqrt(n as f64);
    let nf = n as f64;
    let mut e1 = Vec::with_capacity(n_test_sets);
    let mut e2 = Vec::with_capacity(n_test_sets);
    let mut row = alloc::vec![0.0; n];
    for t in 0..n_test_sets {
        let mut rng = stream(seed, StreamKind::TestSet, t as u32);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for c in 0..k {
            let m = instance.designs[c].rows();
            let sigma = instance.geometry.sigmas()[c];
            for _ in 0..m {
                for v in row.iter_mut() {
                    *v = scale * rng.sample::<f64, _>(StandardNormal);
                }
                let noise: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                let a1: f64 = row.iter().zip(&d1[c]).map(|(a, b)| a * b).sum::<f64>() + noise;
                s1 += a1 * a1;
                if c == 0 {
                    let a2: f64 = row.iter().zip(&d2).map(|(a, b)| a * b).sum::<f64>() + noise;
                    s2 += a2 * a2;
                }
            }
        }
        e1.push(s1 / nf);
        e2.push(s2 / nf);
    }
    Ok(TestErrors {
        first: MeanSe::from_samples(&e1).expect("n_test_sets >= 2"),
        second: MeanSe::from_samples(&e2).expect("n_test_sets >= 2"),
    })
}

/// Finite-N overlaps of the fitted estimates with the ground truth.
///
/// `m*[b]` is the overlap on support block `b` (0 = common), normalized by N.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalOrderParams {
    pub q1: f64,
    pub m1: Vec<f64>,
    pub q2: Option<f64>,
    pub qr: Option<f64>,
    pub m2: Option<Vec<f64>>,
}

fn block_overlaps(x: &[f64], truth: &GroundTruth) -> Vec<f64> {
    let nf = truth.n_features as f64;
    truth
        .supports
        .iter()
        .zip(&truth.coefficients)
        .map(|(idx, val)| idx.iter().zip(val).map(|(&i, &v)| x[i] * v).sum::<f64>() / nf)
        .collect()
}

pub fn empirical_order_params(
    instance: &Instance,
    first_stage: &Estimate,
    second_stage: Option<&Estimate>,
) -> Result<EmpiricalOrderParams, SyntheticError> {
    let n = instance.n_features;
    check_len(first_stage, n)?;
    let nf = n as f64;
    let x1 = &first_stage.coefficients;
    let q1 = x1.iter().map(|v| v * v).sum::<f64>() / nf;
    let m1 = block_overlaps(x1, &instance.truth);
    let (q2, qr, m2) = match second_stage {
        None => (None, None, None),
        Some(e) => {
            check_len(e, n)?;
            let x2 = &e.coefficients;
            (
                Some(x2.iter().map(|v| v * v).sum::<f64>() / nf),
                Some(x1.iter().zip(x2).map(|(a, b)| a * b).sum::<f64>() / nf),
                Some(block_overlaps(x2, &instance.truth)),
            )
        }
    };
    Ok(EmpiricalOrderParams { q1, m1, q2, qr, m2 })
}

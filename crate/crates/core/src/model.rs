//! Shared vocabulary: problem geometry, hyperparameters and fitted estimates.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("geometry needs at least one class")]
    NoClasses,
    #[error(
        "per-class lists disagree in length: pi has {pi}, alpha has {alpha}, sigma has {sigma}"
    )]
    LengthMismatch {
        pi: usize,
        alpha: usize,
        sigma: usize,
    },
    #[error("{name} = {value} is out of range ({expected})")]
    OutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("support fractions sum to {0}, which exceeds 1")]
    FractionsExceedOne(f64),
    #[error("class index {index} is outside 1..={classes}")]
    ClassIndex { index: usize, classes: usize },
}

/// Asymptotic description of the data: support fractions, sample ratios and
/// noise levels. Class indices are 1-based in the public API; class 1 is the
/// fine-tuning target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct ProblemGeometry {
    pi0: f64,
    pi: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    pi0: f64,
    pi: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl TryFrom<RawGeometry> for ProblemGeometry {
    type Error = ModelError;

    fn try_from(raw: RawGeometry) -> Result<Self, Self::Error> {
        ProblemGeometry::new(raw.pi0, raw.pi, raw.alpha, raw.sigma)
    }
}

impl From<ProblemGeometry> for RawGeometry {
    fn from(g: ProblemGeometry) -> Self {
        RawGeometry {
            pi0: g.pi0,
            pi: g.pi,
            alpha: g.alpha,
            sigma: g.sigma,
        }
    }
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::OutOfRange {
            name,
            value,
            expected: "a fraction in [0, 1]",
        })
    }
}

impl ProblemGeometry {
    pub fn new(
        pi0: f64,
        pi: Vec<f64>,
        alpha: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if pi.is_empty() {
            return Err(ModelError::NoClasses);
        }
        if pi.len() != alpha.len() || pi.len() != sigma.len() {
            return Err(ModelError::LengthMismatch {
                pi: pi.len(),
                alpha: alpha.len(),
                sigma: sigma.len(),
            });
        }
        check_fraction("pi0", pi0)?;
        for &p in &pi {
            check_fraction("pi", p)?;
        }
        for &a in &alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(ModelError::OutOfRange {
                    name: "alpha",
                    value: a,
                    expected: "a positive finite ratio",
                });
            }
        }
        for &s in &sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(ModelError::OutOfRange {
                    name: "sigma",
                    value: s,
                    expected: "a non-negative finite noise level",
                });
            }
        }
        let total = pi0 + pi.iter().sum::<f64>();
        if total > 1.0 + 1e-12 {
            return Err(ModelError::FractionsExceedOne(total));
        }
        Ok(Self {
            pi0,
            pi,
            alpha,
            sigma,
        })
    }

    /// Convenience constructor for the common case of one noise level shared
    /// by every class.
    pub fn with_shared_sigma(
        pi0: f64,
        pi: Vec<f64>,
        alpha: Vec<f64>,
        sigma: f64,
    ) -> Result<Self, ModelError> {
        let k = pi.len();
        Self::new(pi0, pi, alpha, alpha_like(k, sigma))
    }

    pub fn num_classes(&self) -> usize {
        self.pi.len()
    }

    pub fn pi0(&self) -> f64 {
        self.pi0
    }

    pub fn pis(&self) -> &[f64] {
        &self.pi
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn check_class(&self, k: usize) -> Result<usize, ModelError> {
        if k == 0 || k > self.num_classes() {
            Err(ModelError::ClassIndex {
                index: k,
                classes: self.num_classes(),
            })
        } else {
            Ok(k - 1)
        }
    }

    pub fn pi(&self, k: usize) -> Result<f64, ModelError> {
        Ok(self.pi[self.check_class(k)?])
    }

    pub fn alpha(&self, k: usize) -> Result<f64, ModelError> {
        Ok(self.alpha[self.check_class(k)?])
    }

    pub fn sigma(&self, k: usize) -> Result<f64, ModelError> {
        Ok(self.sigma[self.check_class(k)?])
    }

    /// Sample ratio of the target class.
    pub fn target_alpha(&self) -> f64 {
        self.alpha[0]
    }

    pub fn alpha_total(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Fraction of features outside every true support.
    pub fn negative_fraction(&self) -> f64 {
        (1.0 - self.pi0 - self.pi.iter().sum::<f64>()).max(0.0)
    }

    /// Per-row variance of the response of class `k`: signal power on the
    /// common and unique supports plus the noise variance.
    pub fn rho(&self, k: usize) -> Result<f64, ModelError> {
        let i = self.check_class(k)?;
        Ok(self.pi[i] + self.pi0 + self.sigma[i] * self.sigma[i])
    }

    pub(crate) fn rho_unchecked(&self, i: usize) -> f64 {
        self.pi[i] + self.pi0 + self.sigma[i] * self.sigma[i]
    }

    /// Copy of this geometry with every class noise level replaced.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self, ModelError> {
        Self::new(
            self.pi0,
            self.pi.clone(),
            self.alpha.clone(),
            alpha_like(self.num_classes(), sigma),
        )
    }

    /// Copy of this geometry with new sample ratios.
    pub fn with_alphas(&self, alpha: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(self.pi0, self.pi.clone(), alpha, self.sigma.clone())
    }
}

fn alpha_like(k: usize, value: f64) -> Vec<f64> {
    alloc::vec![value; k]
}

/// Extra L1 weight on features the first stage left at zero. `+inf` turns the
/// fine-tuning stage into a regression constrained to the pretrained support.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct DeltaLambda(f64);

impl DeltaLambda {
    pub const ZERO: DeltaLambda = DeltaLambda(0.0);
    pub const INFINITE: DeltaLambda = DeltaLambda(f64::INFINITY);

    pub fn new(value: f64) -> Result<Self, ModelError> {
        if value.is_nan() || value < 0.0 {
            return Err(ModelError::OutOfRange {
                name: "dlambda",
                value,
                expected: "a non-negative value or +inf",
            });
        }
        Ok(DeltaLambda(value))
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Penalty on a coordinate the first stage left at zero.
    pub fn off_support_penalty(self, lambda2: f64) -> f64 {
        if self.is_infinite() {
            f64::INFINITY
        } else {
            lambda2 + self.0
        }
    }
}

impl fmt::Display for DeltaLambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for DeltaLambda {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_infinite() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for DeltaLambda {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DlVisitor;

        impl Visitor<'_> for DlVisitor {
            type Value = DeltaLambda;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<DeltaLambda, E> {
                DeltaLambda::new(v).map_err(E::custom)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<DeltaLambda, E> {
                self.visit_f64(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<DeltaLambda, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<DeltaLambda, E> {
                match v {
                    "inf" | "+inf" | "infinity" | "Infinity" => Ok(DeltaLambda::INFINITE),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }

        deserializer.deserialize_any(DlVisitor)
    }
}

/// The four tunables of the two-stage estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa: f64,
    pub dlambda: DeltaLambda,
}

impl Hyperparams {
    pub fn new(
        lambda1: f64,
        lambda2: f64,
        kappa: f64,
        dlambda: DeltaLambda,
    ) -> Result<Self, ModelError> {
        for (name, value) in [("lambda1", lambda1), ("lambda2", lambda2), ("kappa", kappa)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ModelError::OutOfRange {
                    name,
                    value,
                    expected: "a non-negative finite value",
                });
            }
        }
        Ok(Self {
            lambda1,
            lambda2,
            kappa,
            dlambda,
        })
    }

    /// Trans-Lasso second step: full offset transfer, no support information.
    pub fn trans_lasso(lambda1: f64, lambda2: f64) -> Result<Self, ModelError> {
        Self::new(lambda1, lambda2, 1.0, DeltaLambda::ZERO)
    }
}

/// Map the Pretraining-Lasso interpolation parameter `s` onto `(kappa, dlambda)`.
///
/// `s = 1` is plain Lasso on the target, `s = 0` constrains the fine-tuning
/// stage to the pretrained support.
pub fn pretraining_path(s: f64, lambda2: f64) -> Result<(f64, DeltaLambda), ModelError> {
    if !(s.is_finite() && (0.0..=1.0).contains(&s)) {
        return Err(ModelError::OutOfRange {
            name: "s",
            value: s,
            expected: "a value in [0, 1]",
        });
    }
    if s == 0.0 {
        return Ok((1.0, DeltaLambda::INFINITE));
    }
    let dl = lambda2 * (1.0 - s) / s;
    Ok((1.0 - s, DeltaLambda(dl.max(0.0))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    First,
    Second,
}

/// A fitted coefficient vector. Zeros are exact: every update passes through
/// the soft-threshold operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub coefficients: Vec<f64>,
    pub stage: Stage,
    /// Largest KKT violation measured at exit.
    pub kkt_violation: f64,
    /// Coordinate sweeps spent (active-set and full sweeps).
    pub sweeps: usize,
}

impl Estimate {
    pub fn zeros(n: usize, stage: Stage) -> Self {
        Self {
            coefficients: alloc::vec![0.0; n],
            stage,
            kkt_violation: 0.0,
            sweeps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Indices of the non-zero coefficients.
    pub fn support(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_zero(&self, i: usize) -> bool {
        self.coefficients[i] == 0.0
    }
}

/// Ground truth of a common-and-individual support instance.
///
/// `supports[0]`/`coefficients[0]` hold the common block, entry `k` the block
/// unique to class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub n_features: usize,
    pub supports: Vec<Vec<usize>>,
    pub coefficients: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn num_classes(&self) -> usize {
        self.supports.len().saturating_sub(1)
    }

    /// Full-length regression vector of class `k` (1-based): the common block
    /// plus the block unique to `k`.
    pub fn regression_vector(&self, k: usize) -> Result<Vec<f64>, ModelError> {
        if k == 0 || k > self.num_classes() {
            return Err(ModelError::ClassIndex {
                index: k,
                classes: self.num_classes(),
            });
        }
        let mut r = alloc::vec![0.0; self.n_features];
        for block in [0, k] {
            for (&i, &v) in self.supports[block].iter().zip(&self.coefficients[block]) {
                r[i] = v;
            }
        }
        Ok(r)
    }

    /// Class label of every feature: `Some(b)` for support block `b`, `None`
    /// for features outside all supports.
    pub fn labels(&self) -> Vec<Option<usize>> {
        let mut labels = alloc::vec![None; self.n_features];
        for (b, support) in self.supports.iter().enumerate() {
            for &i in support {
                labels[i] = Some(b);
            }
        }
        labels
    }
}

/// Human-readable list formatting used in table outputs.
pub fn join_list(values: &[f64], sep: &str) -> String {
    use core::fmt::Write;
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(sep);
        }
        let _ = write!(out, "{v}");
    }
    out
}

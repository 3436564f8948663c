//! Equations of state for the large-N limit of the two-stage estimator.
//!
//! Each stage reduces to a scalar problem: a soft-threshold of a Gaussian
//! field. The fixed point couples the field statistics (hatted variables) to
//! the moments of the scalar estimator (plain variables).
//!
//! Class layout of the `m` lists: slot 0 is the common support, slot `k` the
//! support unique to class `k`. Features outside every support enter the
//! norms and susceptibilities but have no overlap slot.
//!
//! Stage-1 expectations are closed form. Stage-2 expectations are reduced to
//! a one-dimensional integral over the stage-1 field: conditional on it, the
//! second-stage field is Gaussian and the soft-threshold moments are again
//! closed form. The outer integral runs over composite Gauss–Legendre panels
//! with breakpoints at every kink of the integrand. A Monte Carlo engine
//! evaluates the same quantities independently.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{cdf, pdf_var, soft_moments};
use crate::lasso::soft_threshold;
use crate::math::{abs, ceil, sqrt};
use crate::model::{DeltaLambda, Hyperparams, ProblemGeometry};
use crate::quadrature::GaussLegendre;
use crate::rng::{stream, StreamKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplicaError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("non-finite order parameter at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("no convergence after {iterations} iterations, residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("iteration oscillates (damping reduced to {damping:e}, residual {residual:e}); try stronger damping")]
    Oscillation { damping: f64, residual: f64 },
}

/// Derivative convention for the cross susceptibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChiRConvention {
    /// Derivative in the first-stage field with the second-stage field held
    /// fixed.
    #[default]
    Partial,
    /// Derivative with the innovation of the second-stage field held fixed,
    /// so the correlated part moves along.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expectation {
    /// Closed form for stage 1; panel Gauss–Legendre over the first-stage
    /// field for stage 2. Panels are at most `panel_sd` standard deviations
    /// wide and cover `±cutoff_sd`.
    Quadrature {
        nodes: usize,
        panel_sd: f64,
        cutoff_sd: f64,
    },
    /// Plain Monte Carlo with common random numbers across calls.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for Expectation {
    fn default() -> Self {
        Expectation::Quadrature {
            nodes: 12,
            panel_sd: 1.5,
            cutoff_sd: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Initial weight of the new iterate, in (0, 1].
    pub damping: f64,
    /// Exit when every component moves by at most this much.
    pub tolerance: f64,
    pub max_iters: usize,
    pub expectation: Expectation,
    pub chir: ChiRConvention,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tolerance: 1e-10,
            max_iters: 20_000,
            expectation: Expectation::default(),
            chir: ChiRConvention::default(),
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<(), ReplicaError> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(ReplicaError::InvalidInput("damping must lie in (0, 1]"));
        }
        if !(self.tolerance > 0.0) {
            return Err(ReplicaError::InvalidInput("tolerance must be positive"));
        }
        match self.expectation {
            Expectation::Quadrature {
                nodes,
                panel_sd,
                cutoff_sd,
            } => {
                if nodes == 0 || !(panel_sd > 0.0) || !(cutoff_sd > 0.0) {
                    return Err(ReplicaError::InvalidInput("bad quadrature settings"));
                }
            }
            Expectation::MonteCarlo { samples, .. } => {
                if samples < 2 {
                    return Err(ReplicaError::InvalidInput("Monte Carlo needs samples"));
                }
            }
        }
        Ok(())
    }
}

/// First-stage order parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta1 {
    pub m1: Vec<f64>,
    pub m1_hat: Vec<f64>,
    pub q1: f64,
    pub q1_hat: f64,
    pub chi1: f64,
    pub chi1_hat: f64,
}

impl Theta1 {
    /// The all-zero estimator: the fixed point as `lambda1 → ∞`.
    pub fn zero_estimator(geometry: &ProblemGeometry) -> Self {
        let mut t = Self {
            m1: alloc::vec![0.0; geometry.num_classes() + 1],
            m1_hat: Vec::new(),
            q1: 0.0,
            q1_hat: 0.0,
            chi1: 0.0,
            chi1_hat: 0.0,
        };
        t.set_hats(geometry);
        t
    }

    fn set_hats(&mut self, g: &ProblemGeometry) {
        let d = 1.0 + self.chi1;
        let at = g.alpha_total();
        self.q1_hat = at / d;
        self.m1_hat = core::iter::once(at / d)
            .chain(g.alphas().iter().map(|a| a / d))
            .collect();
        self.chi1_hat = (0..g.num_classes())
            .map(|k| {
                g.alphas()[k] * (self.q1 - 2.0 * (self.m1[0] + self.m1[k + 1]) + g.rho_unchecked(k))
            })
            .sum::<f64>()
            / (d * d);
    }

    /// Every scalar, hats included, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = alloc::vec![self.q1, self.q1_hat, self.chi1, self.chi1_hat];
        v.extend_from_slice(&self.m1);
        v.extend_from_slice(&self.m1_hat);
        v
    }

    fn blend(&mut self, new: &Theta1, gamma: f64) {
        let mix = |a: f64, b: f64| (1.0 - gamma) * a + gamma * b;
        self.q1 = mix(self.q1, new.q1);
        self.chi1 = mix(self.chi1, new.chi1);
        for (a, b) in self.m1.iter_mut().zip(&new.m1) {
            *a = mix(*a, *b);
        }
        self.q1_hat = new.q1_hat;
        self.chi1_hat = new.chi1_hat;
        self.m1_hat.clone_from(&new.m1_hat);
    }
}

/// Second-stage order parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta2 {
    pub m2: Vec<f64>,
    pub m2_hat: Vec<f64>,
    pub q2: f64,
    pub q2_hat: f64,
    pub qr: f64,
    pub qr_hat: f64,
    pub chi2: f64,
    pub chi2_hat: f64,
    pub chir: f64,
    pub chir_hat: f64,
    /// Set when the cross field covariance had to be clipped to keep the
    /// joint field covariance positive semi-definite.
    pub chir_hat_clipped: bool,
}

impl Theta2 {
    /// All second-stage moments zero, hats consistent with that.
    pub fn zero_estimator(theta1: &Theta1, geometry: &ProblemGeometry, kappa: f64) -> Self {
        let mut t = Self {
            m2: alloc::vec![0.0; geometry.num_classes() + 1],
            m2_hat: Vec::new(),
            q2: 0.0,
            q2_hat: 0.0,
            qr: 0.0,
            qr_hat: 0.0,
            chi2: 0.0,
            chi2_hat: 0.0,
            chir: 0.0,
            chir_hat: 0.0,
            chir_hat_clipped: false,
        };
        t.set_hats(theta1, geometry, kappa);
        t
    }

    /// Coefficient of the first-stage prediction in the effective residual.
    pub fn a_coef(&self, theta1: &Theta1, kappa: f64) -> f64 {
        (kappa - self.chir) / (1.0 + theta1.chi1)
    }

    /// Coefficient of the target signal in the effective residual.
    pub fn b_coef(&self, theta1: &Theta1, kappa: f64) -> f64 {
        1.0 - (self.chir + kappa * theta1.chi1) / (1.0 + theta1.chi1)
    }

    fn set_hats(&mut self, t1: &Theta1, g: &ProblemGeometry, kappa: f64) {
        let a = self.a_coef(t1, kappa);
        let b = self.b_coef(t1, kappa);
        let alpha1 = g.target_alpha();
        let rho1 = g.rho_unchecked(0);
        let d2 = 1.0 + self.chi2;
        let m1 = t1.m1[0] + t1.m1[1];
        let m2 = self.m2[0] + self.m2[1];
        self.q2_hat = alpha1 / d2;
        self.qr_hat = -alpha1 * a / d2;
        let mh = alpha1 * b / d2;
        self.m2_hat = alloc::vec![0.0; g.num_classes() + 1];
        self.m2_hat[0] = mh;
        self.m2_hat[1] = mh;
        let r2 = self.q2 + a * a * t1.q1 + 2.0 * a * self.qr + b * b * rho1
            - 2.0 * b * m2
            - 2.0 * a * b * m1;
        self.chi2_hat = alpha1 * r2 / (d2 * d2);
        let cross = b * rho1 + a * t1.q1 - (a + b) * m1 - m2 + self.qr;
        let chir_hat = alpha1 * cross / ((1.0 + t1.chi1) * d2);
        let bound = sqrt((t1.chi1_hat * self.chi2_hat).max(0.0));
        self.chir_hat_clipped = abs(chir_hat) > bound;
        self.chir_hat = chir_hat.clamp(-bound, bound);
    }

    /// Every scalar, hats included, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = alloc::vec![
            self.q2,
            self.q2_hat,
            self.qr,
            self.qr_hat,
            self.chi2,
            self.chi2_hat,
            self.chir,
            self.chir_hat
        ];
        v.extend_from_slice(&self.m2);
        v.extend_from_slice(&self.m2_hat);
        v
    }

    fn blend(&mut self, new: &Theta2, gamma: f64) {
        let mix = |a: f64, b: f64| (1.0 - gamma) * a + gamma * b;
        self.q2 = mix(self.q2, new.q2);
        self.qr = mix(self.qr, new.qr);
        self.chi2 = mix(self.chi2, new.chi2);
        self.chir = mix(self.chir, new.chir);
        for (a, b) in self.m2.iter_mut().zip(&new.m2) {
            *a = mix(*a, *b);
        }
        self.q2_hat = new.q2_hat;
        self.qr_hat = new.qr_hat;
        self.chi2_hat = new.chi2_hat;
        self.chir_hat = new.chir_hat;
        self.chir_hat_clipped = new.chir_hat_clipped;
        self.m2_hat.clone_from(&new.m2_hat);
    }
}

/// A converged fixed point with its iteration count and final residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub theta: T,
    pub iterations: usize,
    pub residual: f64,
}

/// Minimizer of the first-stage scalar energy.
pub fn stage1_scalar(
    q1_hat: f64,
    chi1_hat: f64,
    m1_hat_k: f64,
    lambda1: f64,
    z1: f64,
    xstar: f64,
) -> Result<f64, ReplicaError> {
    if !(q1_hat > 0.0) {
        return Err(ReplicaError::InvalidInput("q1_hat must be positive"));
    }
    Ok(soft_threshold(sqrt(chi1_hat.max(0.0)) * z1 + m1_hat_k * xstar, lambda1) / q1_hat)
}

/// Minimizer of the second-stage scalar energy given the first-stage value.
#[allow(clippy::too_many_arguments)]
pub fn stage2_scalar(
    q2_hat: f64,
    chi2_hat: f64,
    m2_hat_k: f64,
    qr_hat: f64,
    lambda2: f64,
    dlambda: DeltaLambda,
    z2: f64,
    xstar: f64,
    x1: f64,
) -> Result<f64, ReplicaError> {
    if !(q2_hat > 0.0) {
        return Err(ReplicaError::InvalidInput("q2_hat must be positive"));
    }
    let threshold = if x1 != 0.0 {
        lambda2
    } else {
        dlambda.off_support_penalty(lambda2)
    };
    if threshold == f64::INFINITY {
        return Ok(0.0);
    }
    let h = sqrt(chi2_hat.max(0.0)) * z2 + m2_hat_k * xstar + qr_hat * x1;
    Ok(soft_threshold(h, threshold) / q2_hat)
}

// One feature class: population weight, signal hats, and overlap slot.
#[derive(Debug, Clone, Copy)]
struct ClassSpec {
    weight: f64,
    m1_hat: f64,
    m2_hat: f64,
    slot: Option<usize>,
}

fn classes(g: &ProblemGeometry, m1_hat: &[f64], m2_hat: Option<&[f64]>) -> Vec<ClassSpec> {
    let mut out = Vec::with_capacity(g.num_classes() + 2);
    let m2 = |i: usize| m2_hat.map_or(0.0, |m| m[i]);
    out.push(ClassSpec {
        weight: g.pi0(),
        m1_hat: m1_hat[0],
        m2_hat: m2(0),
        slot: Some(0),
    });
    for k in 0..g.num_classes() {
        out.push(ClassSpec {
            weight: g.pis()[k],
            m1_hat: m1_hat[k + 1],
            m2_hat: m2(k + 1),
            slot: Some(k + 1),
        });
    }
    out.push(ClassSpec {
        weight: g.negative_fraction(),
        m1_hat: 0.0,
        m2_hat: 0.0,
        slot: None,
    });
    out
}

/// Unweighted first-stage moments of one class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage1Moments {
    /// `E[x1²]`
    pub x1_sq: f64,
    /// `E[x1 x⋆]`
    pub x1_xs: f64,
    /// `E[∂x1/∂g1]`, the mean response to the Gaussian field.
    pub dx1_dg1: f64,
}

/// Closed-form first-stage moments for the field `g1 + m1_hat x⋆ + shift`.
pub fn stage1_moments(
    q1_hat: f64,
    chi1_hat: f64,
    m1_hat: f64,
    lambda1: f64,
    shift: f64,
) -> Stage1Moments {
    let v = chi1_hat.max(0.0) + m1_hat * m1_hat;
    let sm = soft_moments(shift, sqrt(v), lambda1);
    Stage1Moments {
        x1_sq: sm.second / (q1_hat * q1_hat),
        x1_xs: m1_hat * sm.active / q1_hat,
        dx1_dg1: sm.active / q1_hat,
    }
}

/// Mean of `x1` for the shifted field; its derivative in `shift` is the
/// response `dx1_dg1`.
pub fn stage1_mean(q1_hat: f64, chi1_hat: f64, m1_hat: f64, lambda1: f64, shift: f64) -> f64 {
    let v = chi1_hat.max(0.0) + m1_hat * m1_hat;
    soft_moments(shift, sqrt(v), lambda1).mean / q1_hat
}

/// Monte Carlo first-stage moments with standard errors; the response is
/// estimated by Stein's identity `E[x1 g1]/χ̂1`.
pub fn stage1_moments_mc(
    q1_hat: f64,
    chi1_hat: f64,
    m1_hat: f64,
    lambda1: f64,
    samples: usize,
    seed: u64,
    class_index: u32,
) -> (Stage1Moments, Stage1Moments) {
    let mut rng = stream(seed, StreamKind::MonteCarlo, class_index);
    let sc = sqrt(chi1_hat.max(0.0));
    let mut acc = [Welford::default(); 3];
    for _ in 0..samples {
        let xs: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let x1 = soft_threshold(sc * z + m1_hat * xs, lambda1) / q1_hat;
        acc[0].push(x1 * x1);
        acc[1].push(x1 * xs);
        acc[2].push(if sc > 0.0 { x1 * z / sc } else { 0.0 });
    }
    (
        Stage1Moments {
            x1_sq: acc[0].mean,
            x1_xs: acc[1].mean,
            dx1_dg1: acc[2].mean,
        },
        Stage1Moments {
            x1_sq: acc[0].se(),
            x1_xs: acc[1].se(),
            dx1_dg1: acc[2].se(),
        },
    )
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn se(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        sqrt(self.m2 / (self.n - 1.0) / self.n)
    }
}

/// Apply the first-stage update map once: hats from the plain variables of
/// `theta`, then plain variables from those hats.
pub fn stage1_rhs(
    theta: &Theta1,
    geometry: &ProblemGeometry,
    lambda1: f64,
    options: &SolveOptions,
) -> Result<Theta1, ReplicaError> {
    if theta.m1.len() != geometry.num_classes() + 1 {
        return Err(ReplicaError::InvalidInput("m1 length must be K + 1"));
    }
    let mut out = theta.clone();
    out.set_hats(geometry);
    if !(out.chi1_hat >= 0.0) {
        return Err(ReplicaError::InvalidInput("chi1_hat must be non-negative"));
    }
    let mut q1 = 0.0;
    let mut chi1 = 0.0;
    let mut m1 = alloc::vec![0.0; geometry.num_classes() + 1];
    for (ci, c) in classes(geometry, &out.m1_hat, None).into_iter().enumerate() {
        if c.weight == 0.0 {
            continue;
        }
        let mom = match options.expectation {
            Expectation::Quadrature { .. } => {
                stage1_moments(out.q1_hat, out.chi1_hat, c.m1_hat, lambda1, 0.0)
            }
            Expectation::MonteCarlo { samples, seed } => {
                let mut m = stage1_moments_mc(
                    out.q1_hat,
                    out.chi1_hat,
                    c.m1_hat,
                    lambda1,
                    samples,
                    seed,
                    ci as u32,
                )
                .0;
                // The pointwise derivative is exact; only the Gaussian average is sampled.
                m.dx1_dg1 = mc_activity(
                    out.q1_hat,
                    out.chi1_hat,
                    c.m1_hat,
                    lambda1,
                    samples,
                    seed,
                    ci as u32,
                );
                m
            }
        };
        q1 += c.weight * mom.x1_sq;
        chi1 += c.weight * mom.dx1_dg1;
        if let Some(s) = c.slot {
            m1[s] = c.weight * mom.x1_xs;
        }
    }
    out.q1 = q1;
    out.chi1 = chi1;
    out.m1 = m1;
    Ok(out)
}

fn mc_activity(
    q1_hat: f64,
    chi1_hat: f64,
    m1_hat: f64,
    lambda1: f64,
    samples: usize,
    seed: u64,
    ci: u32,
) -> f64 {
    let mut rng = stream(seed, StreamKind::MonteCarlo, ci);
    let sc = sqrt(chi1_hat.max(0.0));
    let mut hits = 0usize;
    for _ in 0..samples {
        let xs: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if abs(sc * z + m1_hat * xs) > lambda1 {
            hits += 1;
        }
    }
    hits as f64 / samples as f64 / q1_hat
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| abs(x - y)).fold(0.0, f64::max)
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

// Damped iteration shared by both stages.
fn iterate<T: Clone>(
    init: T,
    options: &SolveOptions,
    rhs: impl Fn(&T) -> Result<T, ReplicaError>,
    flatten: impl Fn(&T) -> Vec<f64>,
    blend: impl Fn(&mut T, &T, f64),
) -> Result<Solution<T>, ReplicaError> {
    options.validate()?;
    let mut theta = rhs(&init)?;
    let mut gamma = options.damping;
    let mut prev = f64::INFINITY;
    let mut prev_step: Vec<f64> = Vec::new();
    let mut flips = 0usize;
    let mut residual = f64::INFINITY;
    for it in 0..options.max_iters {
        let new = rhs(&theta)?;
        let (a, b) = (flatten(&theta), flatten(&new));
        if !all_finite(&b) {
            return Err(ReplicaError::NonFinite { iteration: it });
        }
        residual = max_abs_diff(&a, &b);
        if residual <= options.tolerance {
            return Ok(Solution {
                theta,
                iterations: it + 1,
                residual,
            });
        }
        // Oscillation: the update reverses direction without contracting
        // (a plain two-cycle keeps the residual constant). Slow monotone
        // drift is left alone.
        let step: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let reversed = prev_step.len() == step.len()
            && step.iter().zip(&prev_step).map(|(x, y)| x * y).sum::<f64>() < 0.0;
        if reversed && residual > 0.95 * prev {
            flips += 1;
            if flips >= 8 {
                gamma *= 0.5;
                flips = 0;
                if gamma < 1e-4 {
                    return Err(ReplicaError::Oscillation {
                        damping: gamma,
                        residual,
                    });
                }
            }
        } else if residual <= 0.95 * prev {
            flips = 0;
        }
        prev = residual;
        prev_step = step;
        blend(&mut theta, &new, gamma);
    }
    Err(ReplicaError::NotConverged {
        iterations: options.max_iters,
        residual,
    })
}

fn check_lambda(name: &'static str, v: f64) -> Result<(), ReplicaError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ReplicaError::InvalidInput(name))
    }
}

/// Solve the first-stage equations of state from the zero-estimator start.
pub fn solve_stage1(
    geometry: &ProblemGeometry,
    lambda1: f64,
    options: &SolveOptions,
) -> Result<Solution<Theta1>, ReplicaError> {
    solve_stage1_from(geometry, lambda1, options, Theta1::zero_estimator(geometry))
}

/// Solve the first-stage equations starting from `init` (continuation).
pub fn solve_stage1_from(
    geometry: &ProblemGeometry,
    lambda1: f64,
    options: &SolveOptions,
    init: Theta1,
) -> Result<Solution<Theta1>, ReplicaError> {
    check_lambda("lambda1 must be positive and finite", lambda1)?;
    iterate(
        init,
        options,
        |t| stage1_rhs(t, geometry, lambda1, options),
        Theta1::flatten,
        Theta1::blend,
    )
}

/// Field statistics shared by every class in one second-stage evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Fields {
    pub q1_hat: f64,
    pub chi1_hat: f64,
    pub lambda1: f64,
    pub q2_hat: f64,
    pub chi2_hat: f64,
    pub qr_hat: f64,
    pub chir_hat: f64,
    pub lambda2: f64,
    pub dlambda: DeltaLambda,
}

impl Stage2Fields {
    pub fn new(t1: &Theta1, t2: &Theta2, lambda1: f64, lambda2: f64, dlambda: DeltaLambda) -> Self {
        Self {
            q1_hat: t1.q1_hat,
            chi1_hat: t1.chi1_hat,
            lambda1,
            q2_hat: t2.q2_hat,
            chi2_hat: t2.chi2_hat,
            qr_hat: t2.qr_hat,
            chir_hat: t2.chir_hat,
            lambda2,
            dlambda,
        }
    }

    fn off_penalty(&self) -> f64 {
        self.dlambda.off_support_penalty(self.lambda2)
    }
}

/// Unweighted second-stage moments of one class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage2Moments {
    /// `E[x2²]`
    pub x2_sq: f64,
    /// `E[x1 x2]`
    pub x1_x2: f64,
    /// `E[x2 x⋆]`
    pub x2_xs: f64,
    /// `E[∂x2/∂g2]`
    pub dx2_dg2: f64,
    /// `E[∂x2/∂g1]` at fixed `g2`, including the jumps where the first-stage
    /// support changes.
    pub dx2_dg1: f64,
    /// `E[x2]`
    pub x2_mean: f64,
}

impl Stage2Moments {
    fn as_array(&self) -> [f64; 6] {
        [
            self.x2_sq,
            self.x1_x2,
            self.x2_xs,
            self.dx2_dg2,
            self.dx2_dg1,
            self.x2_mean,
        ]
    }

    fn from_array(a: [f64; 6]) -> Self {
        Self {
            x2_sq: a[0],
            x1_x2: a[1],
            x2_xs: a[2],
            dx2_dg2: a[3],
            dx2_dg1: a[4],
            x2_mean: a[5],
        }
    }
}

// Panel boundaries on [lo, hi]: hard breakpoints, geometric grading around
// smooth-but-sharp features, and uniform filling up to `max_panel`.
fn build_mesh(lo: f64, hi: f64, max_panel: f64, hard: &[f64], features: &[(f64, f64)]) -> Vec<f64> {
    let mut pts = alloc::vec![lo, hi];
    let inside = |x: f64| x > lo && x < hi;
    pts.extend(hard.iter().copied().filter(|&x| inside(x)));
    let floor = 1e-9 * max_panel;
    for &(c, w) in features {
        if !inside(c) {
            continue;
        }
        pts.push(c);
        if w <= 0.0 {
            continue;
        }
        let mut k = w.max(floor);
        while k < max_panel {
            for x in [c - k, c + k] {
                if inside(x) {
                    pts.push(x);
                }
            }
            k *= 2.0;
        }
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| abs(*a - *b) <= 1e-14 * max_panel);
    let mut out = Vec::with_capacity(pts.len() * 2);
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let pieces = ceil((b - a) / max_panel).max(1.0) as usize;
        for p in 0..pieces {
            out.push(a + (b - a) * p as f64 / pieces as f64);
        }
    }
    out.push(hi);
    out
}

/// Second-stage moments of one class by one-dimensional quadrature over the
/// first-stage local field `h1 = g1 + m1_hat x⋆`. `shift1`/`shift2` perturb
/// the two fields for finite-difference checks of the responses.
#[allow(clippy::too_many_arguments)]
pub fn stage2_moments(
    f: &Stage2Fields,
    m1_hat: f64,
    m2_hat: f64,
    shift1: f64,
    shift2: f64,
    rule: &GaussLegendre,
    panel_sd: f64,
    cutoff_sd: f64,
) -> Stage2Moments {
    let v1 = f.chi1_hat.max(0.0) + m1_hat * m1_hat;
    let v2 = f.chi2_hat.max(0.0) + m2_hat * m2_hat;
    let c = f.chir_hat + m1_hat * m2_hat;
    let (beta, s, cov_u_xs) = if v1 > 0.0 {
        // Cancellation noise below this level would otherwise leave a
        // spurious, vanishingly small conditional spread.
        let cond = v2 - c * c / v1;
        let cond = if cond <= 1e-13 * v2 { 0.0 } else { cond };
        (c / v1, sqrt(cond), m2_hat - m1_hat * c / v1)
    } else {
        (0.0, sqrt(v2), m2_hat)
    };
    let off = f.off_penalty();
    let (q1h, q2h, qrh, l1, l2) = (f.q1_hat, f.q2_hat, f.qr_hat, f.lambda1, f.lambda2);

    let integrand = |h1: f64| -> [f64; 6] {
        let x1 = soft_threshold(h1 + shift1, l1) / q1h;
        let lam = if x1 != 0.0 { l2 } else { off };
        let mu = beta * h1 + shift2 + qrh * x1;
        let sm = soft_moments(mu, s, lam);
        let e_xs = if v1 > 0.0 { m1_hat * h1 / v1 } else { 0.0 };
        let smooth_g1 = if x1 != 0.0 {
            qrh / q1h * sm.active
        } else {
            0.0
        };
        [
            sm.second / (q2h * q2h),
            x1 * sm.mean / q2h,
            (e_xs * sm.mean + cov_u_xs * sm.active) / q2h,
            sm.active / q2h,
            smooth_g1 / q2h,
            sm.mean / q2h,
        ]
    };

    if v1 <= 0.0 {
        return Stage2Moments::from_array(integrand(0.0));
    }
    let sd = sqrt(v1);

    let mut hard = alloc::vec![l1 - shift1, -l1 - shift1];
    let mut features = Vec::new();
    let mut crossing = |slope: f64, intercept: f64, level: f64, lo: f64, hi: f64| {
        if slope == 0.0 || !level.is_finite() {
            return;
        }
        for target in [level, -level] {
            let x = (target - intercept) / slope;
            if x > lo && x < hi {
                if s == 0.0 {
                    hard.push(x);
                } else {
                    features.push((x, s / abs(slope)));
                }
            }
        }
    };
    // Inside the first-stage dead zone x1 = 0 and the threshold is `off`.
    crossing(beta, shift2, off, -l1 - shift1, l1 - shift1);
    // Outside it x1 is affine in h1 and the threshold is lambda2.
    let slope = beta + qrh / q1h;
    crossing(
        slope,
        shift2 + qrh * (shift1 - l1) / q1h,
        l2,
        l1 - shift1,
        f64::INFINITY,
    );
    crossing(
        slope,
        shift2 + qrh * (shift1 + l1) / q1h,
        l2,
        f64::NEG_INFINITY,
        -l1 - shift1,
    );

    let mesh = build_mesh(
        -cutoff_sd * sd,
        cutoff_sd * sd,
        panel_sd * sd,
        &hard,
        &features,
    );
    let mut acc = [0.0; 6];
    for w in mesh.windows(2) {
        rule.integrate_into(w[0], w[1], &mut acc, |h1| {
            let dens = pdf_var(h1, v1);
            let mut v = integrand(h1);
            v.iter_mut().for_each(|x| *x *= dens);
            v
        });
    }

    // Where the first-stage support switches, the threshold jumps between
    // lambda2 and `off` and x2 jumps with it.
    if off != l2 {
        let jump = |h: f64| -> f64 {
            let mu = beta * h + shift2;
            (soft_moments(mu, s, l2).mean - soft_moments(mu, s, off).mean) / q2h
        };
        let a = l1 - shift1;
        let b = -l1 - shift1;
        acc[4] += pdf_var(a, v1) * jump(a) - pdf_var(b, v1) * jump(b);
    }
    Stage2Moments::from_array(acc)
}

/// Monte Carlo second-stage moments and standard errors. The response to
/// the first-stage field uses Stein's identity for the correlated pair
/// `(g1, g2)`, so it includes the jump contributions without special-casing.
pub fn stage2_moments_mc(
    f: &Stage2Fields,
    m1_hat: f64,
    m2_hat: f64,
    samples: usize,
    seed: u64,
    class_index: u32,
) -> (Stage2Moments, Stage2Moments) {
    let mut rng = stream(seed, StreamKind::MonteCarlo, 1000 + class_index);
    let c1 = f.chi1_hat.max(0.0);
    let c2 = f.chi2_hat.max(0.0);
    let det = c1 * c2 - f.chir_hat * f.chir_hat;
    let rho = if c1 * c2 > 0.0 {
        (f.chir_hat / sqrt(c1 * c2)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let (s1, s2) = (sqrt(c1), sqrt(c2));
    let innov = sqrt((1.0 - rho * rho).max(0.0));
    let mut acc = [Welford::default(); 6];
    for _ in 0..samples {
        let xs: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let zeta: f64 = rng.sample(StandardNormal);
        let z2 = rho * z1 + innov * zeta;
        let g1 = s1 * z1;
        let g2 = s2 * z2;
        let x1 = soft_threshold(g1 + m1_hat * xs, f.lambda1) / f.q1_hat;
        let lam = if x1 != 0.0 {
            f.lambda2
        } else {
            f.off_penalty()
        };
        let x2 = if lam == f64::INFINITY {
            0.0
        } else {
            soft_threshold(g2 + m2_hat * xs + f.qr_hat * x1, lam) / f.q2_hat
        };
        acc[0].push(x2 * x2);
        acc[1].push(x1 * x2);
        acc[2].push(x2 * xs);
        acc[3].push(if x2 != 0.0 { 1.0 / f.q2_hat } else { 0.0 });
        acc[4].push(if det > 0.0 {
            x2 * (c2 * g1 - f.chir_hat * g2) / det
        } else {
            0.0
        });
        acc[5].push(x2);
    }
    let mean = core::array::from_fn(|i| acc[i].mean);
    let se = core::array::from_fn(|i| acc[i].se());
    (
        Stage2Moments::from_array(mean),
        Stage2Moments::from_array(se),
    )
}

fn validate_hyper(hyper: &Hyperparams) -> Result<(), ReplicaError> {
    check_lambda("lambda1 must be positive and finite", hyper.lambda1)?;
    check_lambda("lambda2 must be positive and finite", hyper.lambda2)?;
    if !(hyper.kappa.is_finite() && hyper.kappa >= 0.0) {
        return Err(ReplicaError::InvalidInput(
            "kappa must be non-negative and finite",
        ));
    }
    Ok(())
}

/// Apply the second-stage update map once with the first stage held fixed.
pub fn stage2_rhs(
    theta2: &Theta2,
    theta1: &Theta1,
    geometry: &ProblemGeometry,
    hyper: &Hyperparams,
    options: &SolveOptions,
) -> Result<Theta2, ReplicaError> {
    if theta2.m2.len() != geometry.num_classes() + 1
        || theta1.m1.len() != geometry.num_classes() + 1
    {
        return Err(ReplicaError::InvalidInput(
            "overlap lists must have length K + 1",
        ));
    }
    let mut out = theta2.clone();
    out.set_hats(theta1, geometry, hyper.kappa);
    if !(out.chi2_hat >= 0.0) {
        return Err(ReplicaError::InvalidInput("chi2_hat must be non-negative"));
    }
    let fields = Stage2Fields::new(theta1, &out, hyper.lambda1, hyper.lambda2, hyper.dlambda);
    let rule = match options.expectation {
        Expectation::Quadrature { nodes, .. } => Some(GaussLegendre::new(nodes)),
        Expectation::MonteCarlo { .. } => None,
    };
    let mut acc = [0.0; 6];
    let mut m2 = alloc::vec![0.0; geometry.num_classes() + 1];
    for (ci, c) in classes(geometry, &theta1.m1_hat, Some(&out.m2_hat))
        .into_iter()
        .enumerate()
    {
        if c.weight == 0.0 {
            continue;
        }
        let mom = match options.expectation {
            Expectation::Quadrature {
                panel_sd,
                cutoff_sd,
                ..
            } => stage2_moments(
                &fields,
                c.m1_hat,
                c.m2_hat,
                0.0,
                0.0,
                rule.as_ref().expect("built above"),
                panel_sd,
                cutoff_sd,
            ),
            Expectation::MonteCarlo { samples, seed } => {
                stage2_moments_mc(&fields, c.m1_hat, c.m2_hat, samples, seed, ci as u32).0
            }
        };
        for (a, v) in acc.iter_mut().zip(mom.as_array()) {
            *a += c.weight * v;
        }
        if let Some(s) = c.slot {
            m2[s] = c.weight * mom.x2_xs;
        }
    }
    out.q2 = acc[0];
    out.qr = acc[1];
    out.chi2 = acc[3];
    out.chir = match options.chir {
        ChiRConvention::Partial => acc[4],
        ChiRConvention::Total => {
            let ratio = if theta1.chi1_hat > 0.0 {
                out.chir_hat / theta1.chi1_hat
            } else {
                0.0
            };
            acc[4] + ratio * acc[3]
        }
    };
    out.m2 = m2;
    Ok(out)
}

/// Solve the second-stage equations from the zero second-stage estimator.
pub fn solve_stage2(
    theta1: &Theta1,
    geometry: &ProblemGeometry,
    hyper: &Hyperparams,
    options: &SolveOptions,
) -> Result<Solution<Theta2>, ReplicaError> {
    let init = Theta2::zero_estimator(theta1, geometry, hyper.kappa);
    solve_stage2_from(theta1, geometry, hyper, options, init)
}

/// Solve the second-stage equations starting from `init` (continuation).
pub fn solve_stage2_from(
    theta1: &Theta1,
    geometry: &ProblemGeometry,
    hyper: &Hyperparams,
    options: &SolveOptions,
    init: Theta2,
) -> Result<Solution<Theta2>, ReplicaError> {
    validate_hyper(hyper)?;
    iterate(
        init,
        options,
        |t| stage2_rhs(t, theta1, geometry, hyper, options),
        Theta2::flatten,
        Theta2::blend,
    )
}

/// Predicted first-stage generalization error.
pub fn eps1(theta1: &Theta1, geometry: &ProblemGeometry) -> f64 {
    (0..geometry.num_classes())
        .map(|k| {
            geometry.alphas()[k]
                * (theta1.q1 - 2.0 * (theta1.m1[0] + theta1.m1[k + 1]) + geometry.rho_unchecked(k))
        })
        .sum()
}

/// Predicted second-stage generalization error on the target class.
pub fn eps2(theta1: &Theta1, theta2: &Theta2, geometry: &ProblemGeometry, kappa: f64) -> f64 {
    let m1 = theta1.m1[0] + theta1.m1[1];
    let m2 = theta2.m2[0] + theta2.m2[1];
    geometry.target_alpha()
        * (theta2.q2
            + kappa * kappa * theta1.q1
            + 2.0 * kappa * theta2.qr
            + geometry.rho_unchecked(0)
            - 2.0 * m2
            - 2.0 * kappa * m1)
}

/// Predicted large-N limits of the empirical overlaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParams {
    pub q1: f64,
    pub q2: f64,
    pub qr: f64,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
}

pub fn order_params(theta1: &Theta1, theta2: &Theta2) -> OrderParams {
    OrderParams {
        q1: theta1.q1,
        q2: theta2.q2,
        qr: theta2.qr,
        m1: theta1.m1.clone(),
        m2: theta2.m2.clone(),
    }
}

/// Both stages solved at one hyperparameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaPoint {
    pub theta1: Solution<Theta1>,
    pub theta2: Solution<Theta2>,
    pub eps1: f64,
    pub eps2: f64,
}

/// Solve both stages. `theta1` may be supplied when the first stage at this
/// `lambda1` is already known.
pub fn solve_point(
    geometry: &ProblemGeometry,
    hyper: &Hyperparams,
    options: &SolveOptions,
    theta1: Option<&Solution<Theta1>>,
    warm2: Option<&Theta2>,
) -> Result<ReplicaPoint, ReplicaError> {
    let t1 = match theta1 {
        Some(t) => t.clone(),
        None => solve_stage1(geometry, hyper.lambda1, options)?,
    };
    let t2 = match warm2 {
        Some(w) => solve_stage2_from(&t1.theta, geometry, hyper, options, w.clone())
            .or_else(|_| solve_stage2(&t1.theta, geometry, hyper, options))?,
        None => solve_stage2(&t1.theta, geometry, hyper, options)?,
    };
    let e1 = eps1(&t1.theta, geometry);
    let e2 = eps2(&t1.theta, &t2.theta, geometry, hyper.kappa);
    Ok(ReplicaPoint {
        theta1: t1,
        theta2: t2,
        eps1: e1,
        eps2: e2,
    })
}

/// `P(|N(0, v)| > lambda)`, the activity of a soft threshold on a centered field.
pub fn activity(v: f64, lambda: f64) -> f64 {
    if v <= 0.0 {
        return if lambda < 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * cdf(-lambda / sqrt(v))
}

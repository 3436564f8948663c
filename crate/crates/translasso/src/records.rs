//! Output rows. Column names and order are part of the file format and are
//! pinned by tests; bump [`SCHEMA_VERSION`] when they change.
//!
//! List-valued fields (per-class π, α, σ and block overlaps) are written as
//! `;`-separated numbers so every table stays flat.

use serde::{Deserialize, Serialize};
use translasso_core::replica::{Solution, Theta1, Theta2};
use translasso_core::strategies::{CompareRow, RatioRow, StrategySet};
use translasso_core::synthetic::MeanSe;
use translasso_core::{Hyperparams, ProblemGeometry, StrategyKind};

pub const SCHEMA_VERSION: u32 = 1;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which halves of a [`SweepRecord`] are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    Replica,
    Empirical,
    Both,
}

/// Stamped on every record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

fn join(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Parse a `;`-separated list back into numbers.
pub fn split_list(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(';').map(|t| t.parse().ok()).collect()
}

/// One hyperparameter point of a sweep or simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub schema_version: u32,
    pub mode: RecordMode,
    pub panel: usize,
    pub point: usize,
    pub pi0: f64,
    pub pi: String,
    pub alpha: String,
    pub sigma: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa: f64,
    pub dlambda: f64,
    pub q1: Option<f64>,
    pub chi1: Option<f64>,
    pub q1_hat: Option<f64>,
    pub chi1_hat: Option<f64>,
    pub m1: Option<String>,
    pub q2: Option<f64>,
    pub chi2: Option<f64>,
    pub qr: Option<f64>,
    pub chir: Option<f64>,
    pub q2_hat: Option<f64>,
    pub chi2_hat: Option<f64>,
    pub qr_hat: Option<f64>,
    pub chir_hat: Option<f64>,
    pub m2: Option<String>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    pub iterations1: Option<usize>,
    pub residual1: Option<f64>,
    pub iterations2: Option<usize>,
    pub residual2: Option<f64>,
    pub emp_eps1_mean: Option<f64>,
    pub emp_eps1_se: Option<f64>,
    pub emp_eps2_mean: Option<f64>,
    pub emp_eps2_se: Option<f64>,
    pub emp_q1_mean: Option<f64>,
    pub emp_q1_se: Option<f64>,
    pub emp_q2_mean: Option<f64>,
    pub emp_q2_se: Option<f64>,
    pub emp_qr_mean: Option<f64>,
    pub emp_qr_se: Option<f64>,
    pub emp_m1_mean: Option<String>,
    pub emp_m1_se: Option<String>,
    pub emp_m2_mean: Option<String>,
    pub emp_m2_se: Option<String>,
    pub realizations: Option<usize>,
    pub failed_realizations: Option<usize>,
    pub skipped: bool,
    pub note: String,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
}

/// Empirical summary of one point over realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSummary {
    pub eps1: MeanSe,
    pub eps2: MeanSe,
    pub q1: MeanSe,
    pub q2: MeanSe,
    pub qr: MeanSe,
    pub m1: Vec<MeanSe>,
    pub m2: Vec<MeanSe>,
    pub realizations: usize,
    pub failed: usize,
}

impl SweepRecord {
    /// Inputs only; every result column empty.
    pub fn new(
        geometry: &ProblemGeometry,
        hyper: &Hyperparams,
        panel: usize,
        point: usize,
        prov: &Provenance,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: RecordMode::Replica,
            panel,
            point,
            pi0: geometry.pi0(),
            pi: join(geometry.pis()),
            alpha: join(geometry.alphas()),
            sigma: join(geometry.sigmas()),
            lambda1: hyper.lambda1,
            lambda2: hyper.lambda2,
            kappa: hyper.kappa,
            dlambda: hyper.dlambda.value(),
            q1: None,
            chi1: None,
            q1_hat: None,
            chi1_hat: None,
            m1: None,
            q2: None,
            chi2: None,
            qr: None,
            chir: None,
            q2_hat: None,
            chi2_hat: None,
            qr_hat: None,
            chir_hat: None,
            m2: None,
            eps1: None,
            eps2: None,
            iterations1: None,
            residual1: None,
            iterations2: None,
            residual2: None,
            emp_eps1_mean: None,
            emp_eps1_se: None,
            emp_eps2_mean: None,
            emp_eps2_se: None,
            emp_q1_mean: None,
            emp_q1_se: None,
            emp_q2_mean: None,
            emp_q2_se: None,
            emp_qr_mean: None,
            emp_qr_se: None,
            emp_m1_mean: None,
            emp_m1_se: None,
            emp_m2_mean: None,
            emp_m2_se: None,
            realizations: None,
            failed_realizations: None,
            skipped: false,
            note: String::new(),
            seed: prov.seed,
            code_version: CODE_VERSION.into(),
            config_hash: prov.config_hash.clone(),
        }
    }

    pub fn set_stage1(&mut self, s: &Solution<Theta1>, eps1: f64) {
        let t = &s.theta;
        self.q1 = Some(t.q1);
        self.chi1 = Some(t.chi1);
        self.q1_hat = Some(t.q1_hat);
        self.chi1_hat = Some(t.chi1_hat);
        self.m1 = Some(join(&t.m1));
        self.iterations1 = Some(s.iterations);
        self.residual1 = Some(s.residual);
        self.eps1 = Some(eps1);
    }

    pub fn set_stage2(&mut self, s: &Solution<Theta2>, eps2: f64) {
        let t = &s.theta;
        self.q2 = Some(t.q2);
        self.chi2 = Some(t.chi2);
        self.qr = Some(t.qr);
        self.chir = Some(t.chir);
        self.q2_hat = Some(t.q2_hat);
        self.chi2_hat = Some(t.chi2_hat);
        self.qr_hat = Some(t.qr_hat);
        self.chir_hat = Some(t.chir_hat);
        self.m2 = Some(join(&t.m2));
        self.iterations2 = Some(s.iterations);
        self.residual2 = Some(s.residual);
        self.eps2 = Some(eps2);
    }

    pub fn set_empirical(&mut self, e: &EmpiricalSummary) {
        let means = |v: &[MeanSe]| join(&v.iter().map(|m| m.mean).collect::<Vec<_>>());
        let ses = |v: &[MeanSe]| join(&v.iter().map(|m| m.se).collect::<Vec<_>>());
        self.emp_eps1_mean = Some(e.eps1.mean);
        self.emp_eps1_se = Some(e.eps1.se);
        self.emp_eps2_mean = Some(e.eps2.mean);
        self.emp_eps2_se = Some(e.eps2.se);
        self.emp_q1_mean = Some(e.q1.mean);
        self.emp_q1_se = Some(e.q1.se);
        self.emp_q2_mean = Some(e.q2.mean);
        self.emp_q2_se = Some(e.q2.se);
        self.emp_qr_mean = Some(e.qr.mean);
        self.emp_qr_se = Some(e.qr.se);
        self.emp_m1_mean = Some(means(&e.m1));
        self.emp_m1_se = Some(ses(&e.m1));
        self.emp_m2_mean = Some(means(&e.m2));
        self.emp_m2_se = Some(ses(&e.m2));
        self.realizations = Some(e.realizations);
        self.failed_realizations = Some(e.failed);
        self.mode = if self.eps2.is_some() {
            RecordMode::Both
        } else {
            RecordMode::Empirical
        };
    }

    pub fn skip(&mut self, reason: impl Into<String>) {
        self.skipped = true;
        self.note = reason.into();
    }
}

/// One strategy at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRecord {
    pub schema_version: u32,
    pub sigma: f64,
    pub strategy: StrategyKind,
    pub eps2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa: f64,
    pub dlambda: f64,
    pub skipped_evaluations: usize,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
}

impl StrategyRecord {
    pub fn from_row(r: &CompareRow, prov: &Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sigma: r.sigma,
            strategy: r.strategy,
            eps2: r.eps2,
            lambda1: r.hyper.lambda1,
            lambda2: r.hyper.lambda2,
            kappa: r.hyper.kappa,
            dlambda: r.hyper.dlambda.value(),
            skipped_evaluations: r.skipped,
            seed: prov.seed,
            code_version: CODE_VERSION.into(),
            config_hash: prov.config_hash.clone(),
        }
    }
}

/// Error ratios against the locally optimal strategy at one geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub schema_version: u32,
    pub sigma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub eps_locally_optimal: Option<f64>,
    pub eps_kappa_zero: Option<f64>,
    pub eps_dlambda_zero: Option<f64>,
    pub simple_over_lo: Option<f64>,
    pub pretrain_over_lo: Option<f64>,
    pub trans_over_lo: Option<f64>,
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
}

impl RatioRecord {
    pub fn new(sigma: f64, alpha1: f64, alpha2: f64, set: &StrategySet, prov: &Provenance) -> Self {
        let r = RatioRow::from_set(sigma, set);
        Self {
            schema_version: SCHEMA_VERSION,
            sigma,
            alpha1,
            alpha2,
            eps_locally_optimal: set.eps(StrategyKind::LocallyOptimal),
            eps_kappa_zero: set.eps(StrategyKind::KappaZero),
            eps_dlambda_zero: set.eps(StrategyKind::DLambdaZero),
            simple_over_lo: r.simple_over_lo,
            pretrain_over_lo: r.pretrain_over_lo,
            trans_over_lo: r.trans_over_lo,
            seed: prov.seed,
            code_version: CODE_VERSION.into(),
            config_hash: prov.config_hash.clone(),
        }
    }
}

/// One fitted coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub feature: String,
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_round_trip() {
        let xs = [0.1, -2.5e-7, 3.0];
        assert_eq!(split_list(&join(&xs)).unwrap(), xs);
        assert_eq!(split_list("").unwrap(), Vec::<f64>::new());
        assert!(split_list("1;x").is_none());
    }
}

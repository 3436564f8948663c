//! Run configuration: one TOML document, every field defaulted.
//!
//! Unknown keys are rejected so typos surface as errors with the offending
//! field and line. The hash of the resolved configuration is stamped on
//! every output record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use translasso_core::cv::CvOptions;
use translasso_core::replica::{ChiRConvention, Expectation};
use translasso_core::search::lin_grid;
use translasso_core::strategies::Grids;
use translasso_core::{DeltaLambda, ProblemGeometry, SolveOptions, SolverOptions, StrategyKind};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub hyper: HyperConfig,
    pub replica: ReplicaConfig,
    pub lasso: LassoConfig,
    pub grids: Grids,
    pub sweep: SweepConfig,
    pub simulate: SimulateConfig,
    pub strategies: StrategiesConfig,
    pub realdata: RealDataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: GeometryConfig::default(),
            hyper: HyperConfig::default(),
            replica: ReplicaConfig::default(),
            lasso: LassoConfig::default(),
            grids: Grids::default(),
            sweep: SweepConfig::default(),
            simulate: SimulateConfig::default(),
            strategies: StrategiesConfig::default(),
            realdata: RealDataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub pi0: f64,
    pub pi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            pi0: 0.10,
            pi: vec![0.09, 0.09],
            alpha: vec![0.2, 0.8],
            sigma: vec![0.1, 0.1],
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ProblemGeometry> {
        ProblemGeometry::new(
            self.pi0,
            self.pi.clone(),
            self.alpha.clone(),
            self.sigma.clone(),
        )
        .map_err(|e| Error::Config(format!("geometry: {e}")))
    }
}

/// A fixed hyperparameter point. Unset penalties are tuned on the replica
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub kappa: f64,
    pub dlambda: DeltaLambda,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lambda1: None,
            lambda2: None,
            kappa: 1.0,
            dlambda: DeltaLambda::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicaConfig {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub quadrature_nodes: usize,
    pub panel_sd: f64,
    pub cutoff_sd: f64,
    /// Replace quadrature by Monte Carlo with this many samples.
    pub monte_carlo_samples: Option<usize>,
    pub chir: ChiRConvention,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        let d = SolveOptions::default();
        let Expectation::Quadrature {
            nodes,
            panel_sd,
            cutoff_sd,
        } = d.expectation
        else {
            unreachable!("quadrature is the default expectation")
        };
        Self {
            damping: d.damping,
            tolerance: d.tolerance,
            max_iters: d.max_iters,
            quadrature_nodes: nodes,
            panel_sd,
            cutoff_sd,
            monte_carlo_samples: None,
            chir: d.chir,
        }
    }
}

impl ReplicaConfig {
    pub fn build(&self, seed: u64) -> SolveOptions {
        let expectation = match self.monte_carlo_samples {
            Some(samples) => Expectation::MonteCarlo { samples, seed },
            None => Expectation::Quadrature {
                nodes: self.quadrature_nodes,
                panel_sd: self.panel_sd,
                cutoff_sd: self.cutoff_sd,
            },
        };
        SolveOptions {
            damping: self.damping,
            tolerance: self.tolerance,
            max_iters: self.max_iters,
            expectation,
            chir: self.chir,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    pub screening: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tolerance: d.tolerance,
            max_iters: d.max_iters,
            screening: d.screening,
        }
    }
}

impl LassoConfig {
    pub fn build(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.tolerance,
            max_iters: self.max_iters,
            screening: self.screening,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Error curves over the Δλ grid for each κ and panel.
    DlambdaCurves,
    /// Strategy error ratios over a grid of sample ratios.
    RatioMap,
}

/// One sparsity/sample-ratio setting; noise comes from `[geometry]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelConfig {
    pub pi0: f64,
    pub pi: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub kappa: Vec<f64>,
    pub dlambda: Vec<DeltaLambda>,
    pub panels: Vec<PanelConfig>,
    /// Target and source sample ratios of the ratio map.
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut panels = Vec::new();
        for (pi0, pi) in [(0.10, 0.09), (0.15, 0.04)] {
            for a1 in [0.2, 0.6] {
                panels.push(PanelConfig {
                    pi0,
                    pi: vec![pi, pi],
                    alpha: vec![a1, 0.8],
                });
            }
        }
        Self {
            kind: SweepKind::DlambdaCurves,
            kappa: vec![0.0, 0.2, 0.5, 1.0],
            dlambda: lin_grid(0.0, 0.1, 6)
                .into_iter()
                .map(|d| DeltaLambda::new(d).expect("non-negative"))
                .collect(),
            panels,
            alpha1: lin_grid(0.05, 0.45, 5),
            alpha2: lin_grid(0.1, 0.9, 5),
        }
    }
}

impl SweepConfig {
    /// Panel geometries with the noise levels of `base`.
    pub fn panel_geometries(&self, base: &GeometryConfig) -> Result<Vec<ProblemGeometry>> {
        if self.panels.is_empty() {
            return Ok(vec![base.build()?]);
        }
        self.panels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                ProblemGeometry::new(p.pi0, p.pi.clone(), p.alpha.clone(), base.sigma.clone())
                    .map_err(|e| Error::Config(format!("sweep.panels[{i}]: {e}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub realizations: usize,
    /// Fresh test sets per realization; 0 uses the exact expectation over
    /// test draws instead of sampling.
    pub test_sets: usize,
    /// Add the replica prediction to every record.
    pub join_replica: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            realizations: 32,
            test_sets: 256,
            join_replica: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategiesConfig {
    pub sigma: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
}

impl Default for StrategiesConfig {
    fn default() -> Self {
        Self {
            sigma: vec![0.01, 0.1, 0.5],
            strategies: StrategyKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: String,
    pub path: PathBuf,
    /// Held-out rows for this class, same header.
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealDataConfig {
    pub classes: Vec<ClassSpec>,
    /// Class id of the fine-tuning target; the first class when unset.
    pub target: Option<String>,
    /// Name of the response column.
    pub response: String,
    /// Field delimiter; tab for `.tsv` files and comma otherwise when unset.
    pub delimiter: Option<char>,
    pub standardize: bool,
    pub strategy: StrategyKind,
    pub folds: usize,
    /// Penalty grids are multiples of the smallest penalty giving an
    /// all-zero fit, rather than absolute values.
    pub relative_lambdas: bool,
    /// Fraction of target rows held out for testing when the target has no
    /// `test_path`.
    pub test_fraction: f64,
}

impl Default for RealDataConfig {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            target: None,
            response: "y".into(),
            delimiter: None,
            standardize: false,
            strategy: StrategyKind::LocallyOptimal,
            folds: CvOptions::default().folds,
            relative_lambdas: true,
            test_fraction: 0.0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file. Relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut cfg.realdata.classes {
            c.path = resolve(base, &c.path);
            c.test_path = c.test_path.as_deref().map(|p| resolve(base, p));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed.
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed {} exceeds {}",
                self.seed,
                i64::MAX
            )));
        }
        self.geometry.build()?;
        self.grids
            .validate()
            .map_err(|e| Error::Config(format!("grids: {e}")))?;
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

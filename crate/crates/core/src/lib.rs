//! Numerical core for the generalized Trans-Lasso.
//!
//! The crate has two halves that check each other:
//!
//! * [`lasso`] fits the two-stage estimator on finite data (pooled pretraining
//!   Lasso followed by an offset, support-weighted fine-tuning Lasso), and
//!   [`synthetic`] generates instances of the common-and-individual support
//!   model with known ground truth.
//! * [`replica`] solves the scalar equations of state that predict the
//!   large-N generalization error of the same estimator, and [`strategies`]
//!   uses those predictions (or cross-validation on finite data) to pick
//!   hyperparameters.
//!
//! The crate is `no_std` and only needs `alloc`; IO, configuration and
//! parallel orchestration live in the companion `translasso` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cv;
pub mod gaussian;
pub mod lasso;
pub mod matrix;
pub mod model;
pub mod quadrature;
pub mod replica;
pub mod rng;
pub mod search;
pub mod strategies;
pub mod synthetic;

mod math;

pub use lasso::{
    conditional_gen_error, fit_finetune, fit_pretraining, fit_weighted_lasso, soft_threshold,
    LassoError, SolverOptions, WeightedLassoProblem,
};
pub use matrix::Matrix;
pub use model::{
    pretraining_path, DeltaLambda, Estimate, GroundTruth, Hyperparams, ModelError, ProblemGeometry,
    Stage,
};
pub use replica::{ReplicaError, SolveOptions, Theta1, Theta2};
pub use strategies::{StrategyKind, TuningResult};
pub use synthetic::{generate_instance, Instance};

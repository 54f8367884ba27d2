//! Post-training quantization for a toy vision-language-action policy.
//!
//! The crate is generic over the floating scalar (`f32` or `f64`); the
//! aliases at the root fix it to `f64`, which is what the command-line tool
//! and the oracle tests use.

pub mod calibration;
pub mod drift;
pub mod duquant;
pub mod error;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod scalar;

pub use calibration::{
    calibrate_pipeline, capture_statistics, fold_scalars, CalibConfig, CalibScalars, Scope, StatTable,
};
pub use drift::{block_metrics, effective_temperature, DriftReport, ScaleTuple};
pub use duquant::{build_factorization, DuQuantFactorization, FactorizationConfig, FactorizationMode};
pub use error::{Error, Result};
pub use model::{apply_layout, CalibSample, Layout, LayoutConfig, ModelConfig, PolicyStack};
pub use numerics::{Matrix, Permutation};
pub use quantizer::{integer_linear, IntMatrix, QuantSpec, QuantizedLinear};
pub use scalar::Scalar;

pub type RealMatrix = Matrix<f64>;
pub type Stack = PolicyStack<f64>;
pub type Sample = CalibSample<f64>;
pub type Scalars = CalibScalars<f64>;
pub type Factorization = DuQuantFactorization<f64>;
pub type QuantLinear = QuantizedLinear<f64>;
pub type Drift = DriftReport;

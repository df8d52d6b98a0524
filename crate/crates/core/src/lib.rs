//! Interpolation-prediction networks over sparse, irregularly sampled
//! multivariate time series, fused with clinical-text features, plus the
//! synthetic data generator, training protocol, and evaluation harness.

pub mod cli;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod interp;
pub mod models;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

/// Scalar type used by everything above the numeric core.
pub type Real = f64;
pub type Tensor = tensor::TensorBase<Real>;
pub type Tape = graph::Tape<Real>;
pub type Op = graph::Op<Real>;
pub type ParameterStore = params::ParameterStore<Real>;

pub use cli::run_cli;
pub use graph::NodeId;
pub use interp::{InterpSpec, ReferenceGrid};
pub use params::Binding;
pub use tensor::NumericError;


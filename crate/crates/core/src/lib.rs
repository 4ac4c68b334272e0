//! Certified robustness verification for small encoder-only transformers.
//!
//! Affine bounds in the perturbed input are pushed through every layer. The
//! bilinear terms inside self-attention are relaxed with a pair of planar
//! bounds fused through a ReLU, interpolated by one α per relaxation site.
//! α can be fixed, chosen per site by a rule, or optimized by gradient
//! ascent on the certified margin.

pub mod autodiff;
pub mod bounds;
pub mod cli;
pub mod error;
pub mod matrix;
pub mod model;
pub mod propagation;
pub mod relaxations;
pub mod sampling;
pub mod scalar;
pub mod strategies;
pub mod verifier;

pub use autodiff::Var;
pub use bounds::{AffineBoundPair, Interval, PNorm, PerturbationSpec};
pub use error::{Error, Result, SearchError};
pub use matrix::Matrix;
pub use model::{Dense, LayerWeights, Model, ModelConfig, Pooling};
pub use scalar::Scalar;
pub use strategies::{AlphaAssignment, OptimizerConfig, SiteLayout};
pub use verifier::{Report, Strategy, Verdict, VerificationTask, VerifyOptions};

pub type ModelF64 = Model<f64>;
pub type ModelF32 = Model<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type BoundsF64 = AffineBoundPair<f64>;
pub type BoundsF32 = AffineBoundPair<f32>;
pub type IntervalF64 = Interval<f64>;
pub type IntervalF32 = Interval<f32>;

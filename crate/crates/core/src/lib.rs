//! Hard-label black-box attacks driven by the ray objective `g(θ)`, with
//! transfer priors from white-box surrogates, and a theory lab that checks
//! the estimators' expected cosine similarity against closed forms.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the bottom of this file fix it to `f64`, which is what the CLI uses.

// `!(x > 0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod bench;
pub mod error;
pub mod estimators;
pub mod modelzoo;
pub mod priors;
pub mod rayoracle;
pub mod scalar;
pub mod theory;
pub mod vecmath;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Vector = vecmath::Vector<f64>;
pub type Vector32 = vecmath::Vector<f32>;
pub type Frame = vecmath::OrthonormalFrame<f64>;
pub type Model = modelzoo::Model<f64>;
pub type LinearModel = modelzoo::SoftmaxLinearModel<f64>;
pub type Mlp = modelzoo::MlpModel<f64>;
pub type Voronoi = modelzoo::VoronoiModel<f64>;
pub type Goal = rayoracle::AttackGoal<f64>;
pub type State = rayoracle::RayState<f64>;
pub type EstimatorConfig = estimators::EstimatorConfig<f64>;
pub type Estimate = estimators::GradientEstimate<f64>;
pub type AttackConfig = attack::AttackConfig<f64>;
pub type Trace = attack::AttackTrace<f64>;

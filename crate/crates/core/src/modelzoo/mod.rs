//! Analytic classifiers used both as hard-label targets and white-box surrogates.
//!
//! Linear and Voronoi models have boundaries that are affine along any ray,
//! so [`exact_ray_radius`] gives the true `g(θ)` in closed form for tests.

mod linear;
mod mlp;
mod oracle;
mod voronoi;

pub use linear::SoftmaxLinearModel;
pub use mlp::MlpModel;
pub use oracle::{HardLabelOracle, QueryLedger};
pub use voronoi::VoronoiModel;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rayoracle::GoalMode;
use crate::scalar::Scalar;
use crate::vecmath::{sample_gaussian, Vector};

pub trait Classifier<S: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Top-1 label.
    fn predict(&self, x: &[S]) -> usize;
}

/// A classifier exposing logits and exact input gradients.
pub trait Differentiable<S: Scalar>: Classifier<S> {
    fn logits(&self, x: &[S]) -> Vec<S>;
    /// `∇_x Σ_j weights_j · logit_j(x)`.
    fn logits_vjp(&self, x: &[S], weights: &[S]) -> Vector<S>;
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Largest entry other than `skip`, lowest index on ties.
pub fn argmax_excluding<S: Scalar>(values: &[S], skip: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if i == skip {
            continue;
        }
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best.expect("at least two classes")
}

fn add_noise<S: Scalar, R: RngCore + ?Sized>(params: &mut [S], rho: S, rng: &mut R) {
    if rho == S::zero() {
        return;
    }
    let noise: Vector<S> = sample_gaussian(params.len(), rng);
    for (p, n) in params.iter_mut().zip(noise.iter()) {
        *p += rho * *n;
    }
}

/// Any zoo model, serialized as flat JSON tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "S: Scalar")]
pub enum Model<S> {
    Linear(SoftmaxLinearModel<S>),
    Mlp(MlpModel<S>),
    Voronoi(VoronoiModel<S>),
}

impl<S: Scalar> Model<S> {
    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Linear(m) => m.validate(),
            Model::Mlp(m) => m.validate(),
            Model::Voronoi(m) => m.validate(),
        }
    }

    pub fn as_classifier(&self) -> &dyn Classifier<S> {
        match self {
            Model::Linear(m) => m,
            Model::Mlp(m) => m,
            Model::Voronoi(m) => m,
        }
    }

    /// `None` for Voronoi models, which have no logits.
    pub fn as_differentiable(&self) -> Option<&dyn Differentiable<S>> {
        match self {
            Model::Linear(m) => Some(m),
            Model::Mlp(m) => Some(m),
            Model::Voronoi(_) => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Model<S> = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Copy of `model` with i.i.d. `N(0, rho²)` noise on every weight.
pub fn perturb_twin<S: Scalar, R: RngCore + ?Sized>(model: &Model<S>, rho: S, rng: &mut R) -> Model<S> {
    match model {
        Model::Linear(m) => Model::Linear(m.perturbed(rho, rng)),
        Model::Mlp(m) => Model::Mlp(m.perturbed(rho, rng)),
        Model::Voronoi(m) => Model::Voronoi(m.perturbed(rho, rng)),
    }
}

/// Negative C&W margin and its exact input gradient.
///
/// Untargeted: `f_y − max_{j≠y} f_j`. Targeted: `max_{j≠t} f_j − f_t`.
/// The maximizing index is held fixed when differentiating.
pub fn cw_loss_and_grad<S: Scalar>(model: &dyn Differentiable<S>, x: &[S], goal: &GoalMode) -> (S, Vector<S>) {
    let logits = model.logits(x);
    let mut weights = vec![S::zero(); logits.len()];
    let loss = match *goal {
        GoalMode::Untargeted { label } => {
            let j = argmax_excluding(&logits, label);
            weights[label] = S::one();
            weights[j] = -S::one();
            logits[label] - logits[j]
        }
        GoalMode::Targeted { target, .. } => {
            let j = argmax_excluding(&logits, target);
            weights[j] = S::one();
            weights[target] = -S::one();
            logits[j] - logits[target]
        }
    };
    (loss, model.logits_vjp(x, &weights))
}

/// Models whose per-item scores are affine in `λ` along `x + λθ`.
pub trait AffineAlongRay<S: Scalar> {
    /// `(a, b, label)` per scoring item, in tie-break order.
    fn ray_scores(&self, x: &[S], theta: &[S]) -> Vec<(S, S, usize)>;
}

impl<S: Scalar> AffineAlongRay<S> for SoftmaxLinearModel<S> {
    fn ray_scores(&self, x: &[S], theta: &[S]) -> Vec<(S, S, usize)> {
        SoftmaxLinearModel::ray_scores(self, x, theta)
    }
}

impl<S: Scalar> AffineAlongRay<S> for VoronoiModel<S> {
    fn ray_scores(&self, x: &[S], theta: &[S]) -> Vec<(S, S, usize)> {
        VoronoiModel::ray_scores(self, x, theta)
    }
}

/// Exact `g(θ)`: the smallest `λ > 0` where `x + λθ̄` succeeds, or `+∞`.
///
/// Each scoring item wins on an interval of `λ` (an intersection of
/// half-lines); the radius is the earliest start of a winning interval whose
/// label counts as success.
pub fn exact_ray_radius<S: Scalar, M: AffineAlongRay<S> + ?Sized>(
    model: &M,
    x: &[S],
    theta: &Vector<S>,
    goal: &GoalMode,
) -> S {
    let Ok(dir) = theta.normalized() else {
        return S::infinity();
    };
    let scores = model.ray_scores(x, &dir);
    let mut best = S::infinity();
    for (c, &(ac, bc, label)) in scores.iter().enumerate() {
        if !goal.is_success(label) {
            continue;
        }
        let mut lo = S::zero();
        let mut hi = S::infinity();
        for (e, &(ae, be, _)) in scores.iter().enumerate() {
            if e == c {
                continue;
            }
            let db = bc - be;
            let da = ae - ac;
            if db > S::zero() {
                lo = lo.max(da / db);
            } else if db < S::zero() {
                hi = hi.min(da / db);
            } else if da > S::zero() {
                hi = -S::one();
            }
        }
        if lo < hi {
            best = best.min(lo);
        }
    }
    best
}

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{argmax, Classifier, Differentiable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecmath::{dot, sample_gaussian, Vector};

/// `logits(x) = W x + b` with `W` stored row-major (`classes × dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SoftmaxLinearModel<S> {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> SoftmaxLinearModel<S> {
    pub fn new(classes: usize, dim: usize, weights: Vec<S>, bias: Vec<S>) -> Result<Self> {
        let m = SoftmaxLinearModel { classes, dim, weights, bias };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[&[f64]], bias: &[f64]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let weights = rows.iter().flat_map(|r| r.iter().map(|&x| S::lit(x))).collect();
        Self::new(rows.len(), dim, weights, bias.iter().map(|&x| S::lit(x)).collect())
    }

    /// Entries `W_ij ~ N(0, scale²)`, zero bias.
    pub fn random<R: RngCore + ?Sized>(classes: usize, dim: usize, scale: S, rng: &mut R) -> Self {
        let w: Vector<S> = sample_gaussian(classes * dim, rng);
        SoftmaxLinearModel { classes, dim, weights: w.scaled(scale).into_inner(), bias: vec![S::zero(); classes] }
    }

    /// Nearest-prototype classifier written as a linear model:
    /// `W_j = μ_j`, `b_j = −‖μ_j‖²/2`.
    pub fn from_prototypes(prototypes: &[Vector<S>]) -> Result<Self> {
        let dim = prototypes.first().map_or(0, |p| p.dim());
        let mut weights = Vec::with_capacity(prototypes.len() * dim);
        let mut bias = Vec::with_capacity(prototypes.len());
        for p in prototypes {
            weights.extend_from_slice(p.as_slice());
            bias.push(-p.norm_sq() / S::lit(2.0));
        }
        Self::new(prototypes.len(), dim, weights, bias)
    }

    pub fn row(&self, j: usize) -> &[S] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidModel("need at least two classes".into()));
        }
        if self.dim == 0 || self.weights.len() != self.classes * self.dim {
            return Err(Error::InvalidModel(format!(
                "weights have {} entries, expected {}x{}",
                self.weights.len(),
                self.classes,
                self.dim
            )));
        }
        if self.bias.len() != self.classes {
            return Err(Error::InvalidModel("bias length differs from class count".into()));
        }
        if !self.weights.iter().chain(&self.bias).all(|w| w.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    pub(crate) fn perturbed<R: RngCore + ?Sized>(&self, rho: S, rng: &mut R) -> Self {
        let mut out = self.clone();
        super::add_noise(&mut out.weights, rho, rng);
        super::add_noise(&mut out.bias, rho, rng);
        out
    }

    /// Per-class `(a_j, b_j)` with `logit_j(x + λθ) = a_j + λ b_j`.
    pub(crate) fn ray_scores(&self, x: &[S], theta: &[S]) -> Vec<(S, S, usize)> {
        (0..self.classes)
            .map(|j| {
                let w = self.row(j);
                (dot(w, x) + self.bias[j], dot(w, theta), j)
            })
            .collect()
    }
}

impl<S: Scalar> Classifier<S> for SoftmaxLinearModel<S> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn predict(&self, x: &[S]) -> usize {
        argmax(&self.logits(x))
    }
}

impl<S: Scalar> Differentiable<S> for SoftmaxLinearModel<S> {
    fn logits(&self, x: &[S]) -> Vec<S> {
        (0..self.classes).map(|j| dot(self.row(j), x) + self.bias[j]).collect()
    }

    fn logits_vjp(&self, _x: &[S], weights: &[S]) -> Vector<S> {
        let mut g = Vector::zeros(self.dim);
        for (j, &c) in weights.iter().enumerate() {
            if c != S::zero() {
                for (gi, &w) in g.as_mut_slice().iter_mut().zip(self.row(j)) {
                    *gi += c * w;
                }
            }
        }
        g
    }
}

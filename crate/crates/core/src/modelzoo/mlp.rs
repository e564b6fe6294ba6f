use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{argmax, Classifier, Differentiable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecmath::{dot, sample_gaussian, Vector};

/// One hidden `tanh` layer: `logits = W2 tanh(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MlpModel<S> {
    pub classes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
}

impl<S: Scalar> MlpModel<S> {
    /// Weights `W1 ~ N(0, 1/d)`, `W2 ~ N(0, 1/h)`, biases `N(0, 0.1²)`.
    pub fn random<R: RngCore + ?Sized>(classes: usize, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w1: Vector<S> = sample_gaussian(hidden * dim, rng);
        let b1: Vector<S> = sample_gaussian(hidden, rng);
        let w2: Vector<S> = sample_gaussian(classes * hidden, rng);
        let b2: Vector<S> = sample_gaussian(classes, rng);
        MlpModel {
            classes,
            dim,
            hidden,
            w1: w1.scaled(S::one() / S::lit(dim as f64).sqrt()).into_inner(),
            b1: b1.scaled(S::lit(0.1)).into_inner(),
            w2: w2.scaled(S::one() / S::lit(hidden as f64).sqrt()).into_inner(),
            b2: b2.scaled(S::lit(0.1)).into_inner(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, h) = (self.classes, self.dim, self.hidden);
        if k < 2 || d == 0 || h == 0 {
            return Err(Error::InvalidModel("mlp needs k >= 2, d >= 1, h >= 1".into()));
        }
        let shapes = [
            (self.w1.len(), h * d, "w1"),
            (self.b1.len(), h, "b1"),
            (self.w2.len(), k * h, "w2"),
            (self.b2.len(), k, "b2"),
        ];
        for (got, want, name) in shapes {
            if got != want {
                return Err(Error::InvalidModel(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let all = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if !all.into_iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    fn hidden_activations(&self, x: &[S]) -> Vec<S> {
        (0..self.hidden).map(|i| (dot(&self.w1[i * self.dim..(i + 1) * self.dim], x) + self.b1[i]).tanh()).collect()
    }

    pub(crate) fn perturbed<R: RngCore + ?Sized>(&self, rho: S, rng: &mut R) -> Self {
        let mut out = self.clone();
        for p in [&mut out.w1, &mut out.b1, &mut out.w2, &mut out.b2] {
            super::add_noise(p, rho, rng);
        }
        out
    }
}

impl<S: Scalar> Classifier<S> for MlpModel<S> {
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

impl<S: Scalar> Differentiable<S> for MlpModel<S> {
    fn logits(&self, x: &[S]) -> Vec<S> {
        let a = self.hidden_activations(x);
        (0..self.classes).map(|j| dot(&self.w2[j * self.hidden..(j + 1) * self.hidden], &a) + self.b2[j]).collect()
    }

    fn logits_vjp(&self, x: &[S], weights: &[S]) -> Vector<S> {
        let a = self.hidden_activations(x);
        // dL/da_i = Σ_j c_j W2_ji ; dL/dz_i = dL/da_i (1 − a_i²)
        let mut delta = vec![S::zero(); self.hidden];
        for (j, &c) in weights.iter().enumerate() {
            if c == S::zero() {
                continue;
            }
            let row = &self.w2[j * self.hidden..(j + 1) * self.hidden];
            for (di, &w) in delta.iter_mut().zip(row) {
                *di += c * w;
            }
        }
        let mut g = Vector::zeros(self.dim);
        for i in 0..self.hidden {
            let dz = delta[i] * (S::one() - a[i] * a[i]);
            if dz == S::zero() {
                continue;
            }
            let row = &self.w1[i * self.dim..(i + 1) * self.dim];
            for (gi, &w) in g.as_mut_slice().iter_mut().zip(row) {
                *gi += dz * w;
            }
        }
        g
    }
}

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecmath::{dot, Vector};

/// Nearest-center classifier; ties go to the lowest center index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct VoronoiModel<S> {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `centers × dim`.
    pub centers: Vec<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> VoronoiModel<S> {
    pub fn new(classes: usize, centers: &[Vector<S>], labels: Vec<usize>) -> Result<Self> {
        let dim = centers.first().map_or(0, |c| c.dim());
        let m =
            VoronoiModel { classes, dim, centers: centers.iter().flat_map(|c| c.iter().copied()).collect(), labels };
        m.validate()?;
        Ok(m)
    }

    pub fn num_centers(&self) -> usize {
        self.labels.len()
    }

    pub fn center(&self, i: usize) -> &[S] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.labels.is_empty() {
            return Err(Error::InvalidModel("voronoi needs k >= 2, d >= 1 and centers".into()));
        }
        if self.centers.len() != self.labels.len() * self.dim {
            return Err(Error::InvalidModel("center array does not match label count".into()));
        }
        if self.labels.iter().any(|&l| l >= self.classes) {
            return Err(Error::InvalidModel("center label out of range".into()));
        }
        if !self.centers.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidModel("non-finite center".into()));
        }
        Ok(())
    }

    fn sq_dist(&self, i: usize, x: &[S]) -> S {
        self.center(i).iter().zip(x).fold(S::zero(), |acc, (&c, &v)| acc + (v - c) * (v - c))
    }

    pub(crate) fn perturbed<R: RngCore + ?Sized>(&self, rho: S, rng: &mut R) -> Self {
        let mut out = self.clone();
        super::add_noise(&mut out.centers, rho, rng);
        out
    }

    /// Per-center affine scores along the ray: `−‖x + λθ − c‖² + λ²‖θ‖²`
    /// drops the common quadratic term, leaving `a_c + λ b_c`.
    pub(crate) fn ray_scores(&self, x: &[S], theta: &[S]) -> Vec<(S, S, usize)> {
        (0..self.num_centers())
            .map(|i| {
                let diff: Vec<S> = x.iter().zip(self.center(i)).map(|(&a, &c)| a - c).collect();
                (-dot(&diff, &diff), -S::lit(2.0) * dot(theta, &diff), self.labels[i])
            })
            .collect()
    }
}

impl<S: Scalar> Classifier<S> for VoronoiModel<S> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn predict(&self, x: &[S]) -> usize {
        let mut best = 0;
        let mut best_d = self.sq_dist(0, x);
        for i in 1..self.num_centers() {
            let d = self.sq_dist(i, x);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        self.labels[best]
    }
}

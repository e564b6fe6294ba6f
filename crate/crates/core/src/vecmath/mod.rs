//! Dense vectors, hypersphere sampling, orthonormal frames and log-gamma ratios.

mod frame;
mod gamma;
pub mod rng;

pub use frame::{
    embed_priors_with_cosines, gram_schmidt, sample_orthonormal_complement, GramSchmidt, OrthonormalFrame,
};
pub use gamma::{ln_beta, ln_gamma, log_gamma_ratio};
pub use rng::{mix, seeded, split, substream, Rng};

use std::ops::{Deref, Index, IndexMut};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense real vector in `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound = "S: Scalar")]
pub struct Vector<S>(Vec<S>);

impl<S: Scalar> Vector<S> {
    pub fn zeros(d: usize) -> Self {
        Vector(vec![S::zero(); d])
    }

    /// Standard basis vector `e_i` in `R^d`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = Self::zeros(d);
        v.0[i] = S::one();
        v
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Vector(values.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<S> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> S {
        dot(&self.0, &other.0)
    }

    pub fn norm_sq(&self) -> S {
        self.dot(self)
    }

    pub fn norm(&self) -> S {
        self.norm_sq().sqrt()
    }

    pub fn norm_inf(&self) -> S {
        self.0.iter().fold(S::zero(), |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, a: S) -> Self {
        Vector(self.0.iter().map(|&x| x * a).collect())
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: S, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        for (x, &y) in self.0.iter_mut().zip(other.0.iter()) {
            *x += a * y;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(S::one(), other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(-S::one(), other);
        out
    }

    pub fn cosine(&self, other: &Self) -> S {
        self.dot(other) / (self.norm() * other.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Vector(self.0.iter().map(|&x| f(x)).collect())
    }

    /// Returns `v / ‖v‖`.
    pub fn normalized(&self) -> Result<Self> {
        normalize(self)
    }

    pub fn cast<T: Scalar>(&self) -> Vector<T> {
        Vector(self.0.iter().map(|x| T::lit(x.as_f64())).collect())
    }
}

impl<S> From<Vec<S>> for Vector<S> {
    fn from(v: Vec<S>) -> Self {
        Vector(v)
    }
}

impl<S> Deref for Vector<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        &self.0
    }
}

impl<S> Index<usize> for Vector<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.0[i]
    }
}

impl<S> IndexMut<usize> for Vector<S> {
    fn index_mut(&mut self, i: usize) -> &mut S {
        &mut self.0[i]
    }
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `d` i.i.d. standard normal components.
///
/// Draws are made in `f64` and converted, so `f32` and `f64` runs see the
/// same underlying stream.
pub fn sample_gaussian<S: Scalar, R: RngCore + ?Sized>(d: usize, rng: &mut R) -> Vector<S> {
    Vector(
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z)
            })
            .collect(),
    )
}

/// Uniform draw from the unit sphere in `R^d`.
pub fn sample_unit_sphere<S: Scalar, R: RngCore + ?Sized>(d: usize, rng: &mut R) -> Vector<S> {
    loop {
        let g = sample_gaussian::<S, R>(d, rng);
        if let Ok(u) = normalize(&g) {
            return u;
        }
    }
}

pub fn normalize<S: Scalar>(v: &Vector<S>) -> Result<Vector<S>> {
    // scale by the max-abs entry first so tiny or huge vectors normalize cleanly
    let m = v.norm_inf();
    if m == S::zero() || !m.is_finite() {
        return Err(Error::ZeroVector);
    }
    let w = v.scaled(S::one() / m);
    let n = w.norm();
    Ok(w.scaled(S::one() / n))
}

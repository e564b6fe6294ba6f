use rand::RngCore;

use super::{dot, sample_gaussian, Vector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Orthonormal vectors in `R^d`, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthonormalFrame<S> {
    dim: usize,
    basis: Vec<Vector<S>>,
}

/// Output of [`gram_schmidt`]: the frame plus the input indices that were
/// discarded as linearly dependent.
#[derive(Clone, Debug)]
pub struct GramSchmidt<S> {
    pub frame: OrthonormalFrame<S>,
    pub dropped: Vec<usize>,
}

impl<S: Scalar> OrthonormalFrame<S> {
    pub fn empty(dim: usize) -> Self {
        OrthonormalFrame { dim, basis: Vec::new() }
    }

    /// Wraps vectors the caller guarantees to be orthonormal.
    pub fn from_orthonormal(dim: usize, basis: Vec<Vector<S>>) -> Self {
        debug_assert!(basis.iter().all(|b| b.dim() == dim));
        OrthonormalFrame { dim, basis }
    }

    /// `e_1..e_n` in `R^dim`.
    pub fn identity(dim: usize, n: usize) -> Self {
        OrthonormalFrame { dim, basis: (0..n.min(dim)).map(|i| Vector::basis(dim, i)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn vectors(&self) -> &[Vector<S>] {
        &self.basis
    }

    pub fn get(&self, i: usize) -> &Vector<S> {
        &self.basis[i]
    }

    pub fn into_vectors(self) -> Vec<Vector<S>> {
        self.basis
    }

    /// `v − Σ (v·f_i) f_i`, applied twice for numerical orthogonality.
    pub fn project_out(&self, v: &Vector<S>) -> Vector<S> {
        let mut r = v.clone();
        for _ in 0..2 {
            for f in &self.basis {
                let c = dot(&r, f);
                r.add_scaled(-c, f);
            }
        }
        r
    }

    /// Frame coordinates `(v·f_1, ..., v·f_m)`.
    pub fn coordinates(&self, v: &Vector<S>) -> Vec<S> {
        self.basis.iter().map(|f| f.dot(v)).collect()
    }

    /// `Σ c_i f_i`.
    pub fn combine(&self, coefficients: &[S]) -> Vector<S> {
        debug_assert_eq!(coefficients.len(), self.len());
        let mut out = Vector::zeros(self.dim);
        for (c, f) in coefficients.iter().zip(&self.basis) {
            out.add_scaled(*c, f);
        }
        out
    }

    /// Orthonormalizes `v` against the frame and appends it.
    /// Returns `false` when the residual is below the drop tolerance.
    pub fn push(&mut self, v: &Vector<S>) -> Result<bool> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.dim() });
        }
        let input_norm = v.norm();
        if input_norm == S::zero() || self.basis.len() == self.dim {
            return Ok(false);
        }
        let r = self.project_out(v);
        let rn = r.norm();
        if !(rn > S::drop_tolerance() * input_norm) {
            return Ok(false);
        }
        self.basis.push(r.scaled(S::one() / rn));
        Ok(true)
    }

    /// Appends each input in order; returns the indices that were dropped.
    pub fn extend(&mut self, vectors: &[Vector<S>]) -> Result<Vec<usize>> {
        let mut dropped = Vec::new();
        for (i, v) in vectors.iter().enumerate() {
            if !self.push(v)? {
                dropped.push(i);
            }
        }
        Ok(dropped)
    }

    /// First `n` vectors as their own frame.
    pub fn prefix(&self, n: usize) -> Self {
        OrthonormalFrame { dim: self.dim, basis: self.basis[..n].to_vec() }
    }

    /// Largest deviation from orthonormality, `max |f_i·f_j − δ_ij|`.
    pub fn orthonormality_error(&self) -> S {
        let mut worst = S::zero();
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate().skip(i) {
                let target = if i == j { S::one() } else { S::zero() };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
        worst
    }
}

/// Orthonormalizes `vectors` in order; output `i` depends only on inputs `..=i`.
pub fn gram_schmidt<S: Scalar>(dim: usize, vectors: &[Vector<S>]) -> Result<GramSchmidt<S>> {
    let mut frame = OrthonormalFrame::empty(dim);
    let dropped = frame.extend(vectors)?;
    Ok(GramSchmidt { frame, dropped })
}

/// `m` orthonormal vectors drawn uniformly (rotation-invariantly) from the
/// orthogonal complement of `frame`.
pub fn sample_orthonormal_complement<S: Scalar, R: RngCore + ?Sized>(
    frame: &OrthonormalFrame<S>,
    m: usize,
    rng: &mut R,
) -> Result<OrthonormalFrame<S>> {
    let d = frame.dim();
    if frame.len() + m > d {
        return Err(Error::DimensionExceeded { requested: frame.len() + m, available: d });
    }
    let mut work = frame.clone();
    while work.len() < frame.len() + m {
        let g: Vector<S> = sample_gaussian(d, rng);
        work.push(&g)?;
    }
    Ok(OrthonormalFrame { dim: d, basis: work.basis.split_off(frame.len()) })
}

/// Orthonormal `p_1..p_s` with `p_i·g_unit = alphas[i]`.
///
/// `p_i = α_i g + Σ_j B_ij w_j` where the `w_j` are fresh orthonormal directions
/// orthogonal to `g` and `B` is the symmetric square root of `I − ααᵀ`, which
/// has the closed form `I − c·α̂α̂ᵀ` with `c = 1 − √(1 − ‖α‖²)`.
pub fn embed_priors_with_cosines<S: Scalar, R: RngCore + ?Sized>(
    g_unit: &Vector<S>,
    alphas: &[S],
    rng: &mut R,
) -> Result<OrthonormalFrame<S>> {
    let d = g_unit.dim();
    let s = alphas.len();
    let sum_sq: S = alphas.iter().map(|&a| a * a).sum();
    if sum_sq > S::one() + S::lit(1e-12) {
        return Err(Error::InfeasibleCosines(sum_sq.as_f64()));
    }
    if s >= d {
        return Err(Error::DimensionExceeded { requested: s + 1, available: d });
    }
    if (g_unit.norm() - S::one()).abs() > S::lit(1e-6) {
        return Err(Error::InvalidSpec("gradient direction must be unit norm".into()));
    }
    let mut g_frame = OrthonormalFrame::empty(d);
    g_frame.push(g_unit)?;
    let w = sample_orthonormal_complement(&g_frame, s, rng)?;

    let norm_alpha = sum_sq.sqrt();
    let c = S::one() - (S::one() - sum_sq.min(S::one())).max(S::zero()).sqrt();
    let hat: Vec<S> =
        if norm_alpha > S::zero() { alphas.iter().map(|&a| a / norm_alpha).collect() } else { vec![S::zero(); s] };

    let mut basis = Vec::with_capacity(s);
    for i in 0..s {
        let mut p = g_unit.scaled(alphas[i]);
        for j in 0..s {
            let delta = if i == j { S::one() } else { S::zero() };
            let b_ij = delta - c * hat[i] * hat[j];
            if b_ij != S::zero() {
                p.add_scaled(b_ij, w.get(j));
            }
        }
        basis.push(p);
    }
    Ok(OrthonormalFrame { dim: d, basis })
}

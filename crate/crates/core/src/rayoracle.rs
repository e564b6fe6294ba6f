//! Evaluation of the ray objective `g(θ)` against a hard-label oracle.
//!
//! `g(θ)` is the distance from `x` along `θ̄` to the first adversarial point.
//! It is bracketed by geometric doubling ([`find_upper_radius`]) and then
//! refined by bisection ([`refine_radius`]). [`sign_query`] recovers the sign
//! of `g(θ + σu) − g(θ)` with a single query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::{Classifier, HardLabelOracle};
use crate::scalar::Scalar;
use crate::vecmath::Vector;

/// Smallest radius probed when no hint is given.
pub const LAMBDA_MIN: f64 = 1e-3;
/// Radii beyond this are treated as `g = +∞`.
pub const LAMBDA_MAX: f64 = 200.0;
/// Default absolute bisection tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GoalMode {
    Untargeted {
        label: usize,
    },
    /// `label` is the true class of the original point.
    Targeted {
        target: usize,
        label: usize,
    },
}

impl GoalMode {
    /// The success indicator applied to a predicted label.
    pub fn is_success(&self, predicted: usize) -> bool {
        match *self {
            GoalMode::Untargeted { label } => predicted != label,
            GoalMode::Targeted { target, .. } => predicted == target,
        }
    }

    pub fn true_label(&self) -> usize {
        match *self {
            GoalMode::Untargeted { label } | GoalMode::Targeted { label, .. } => label,
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, GoalMode::Targeted { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AttackGoal<S> {
    pub original: Vector<S>,
    pub mode: GoalMode,
}

impl<S: Scalar> AttackGoal<S> {
    pub fn untargeted(original: Vector<S>, label: usize) -> Self {
        AttackGoal { original, mode: GoalMode::Untargeted { label } }
    }

    pub fn targeted(original: Vector<S>, target: usize, label: usize) -> Result<Self> {
        if target == label {
            return Err(Error::Config("target class equals the true label".into()));
        }
        Ok(AttackGoal { original, mode: GoalMode::Targeted { target, label } })
    }

    /// Same point, different success rule (used for surrogate sub-goals).
    pub fn with_mode(&self, mode: GoalMode) -> Self {
        AttackGoal { original: self.original.clone(), mode }
    }

    pub fn dim(&self) -> usize {
        self.original.dim()
    }

    /// `x + λ θ` for a unit `θ`.
    pub fn point_along(&self, theta: &Vector<S>, lambda: S) -> Vector<S> {
        let mut p = self.original.clone();
        p.add_scaled(lambda, theta);
        p
    }

    /// Checks the construction invariant against a model directly (no ledger):
    /// untargeted requires `predict(x) = y`, targeted `predict(x) ≠ y_adv`.
    pub fn check(&self, model: &dyn Classifier<S>) -> bool {
        let p = model.predict(&self.original);
        match self.mode {
            GoalMode::Untargeted { label } => p == label,
            GoalMode::Targeted { target, .. } => p != target,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

/// Current direction, its radius `g(θ)` and the resulting distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct RayState<S> {
    pub theta: Vector<S>,
    pub radius: S,
    pub distortion: S,
}

impl<S: Scalar> RayState<S> {
    pub fn new(theta: Vector<S>, radius: S, norm: Norm) -> Self {
        let distortion = distortion(&theta, radius, norm);
        RayState { theta, radius, distortion }
    }

    pub fn adversarial_point(&self, goal: &AttackGoal<S>) -> Vector<S> {
        goal.point_along(&self.theta, self.radius)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", bound = "S: Scalar")]
pub enum Tolerance<S> {
    Absolute(S),
    /// Fraction of the initial upper end of the bracket.
    Relative(S),
}

impl<S: Scalar> Default for Tolerance<S> {
    fn default() -> Self {
        Tolerance::Absolute(S::lit(DEFAULT_TOL))
    }
}

impl<S: Scalar> Tolerance<S> {
    pub fn resolve(&self, hi: S) -> S {
        match *self {
            Tolerance::Absolute(t) => t,
            Tolerance::Relative(r) => r * hi,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Tolerance::Absolute(t) | Tolerance::Relative(t) => t > S::zero() && t.is_finite(),
        }
    }
}

/// `Φ(lo) = 0` (or `lo = 0`) and `Φ(hi) = 1`, both established by queries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket<S> {
    pub lo: S,
    pub hi: S,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchLimits<S> {
    pub lambda_min: S,
    pub lambda_max: S,
}

impl<S: Scalar> Default for SearchLimits<S> {
    fn default() -> Self {
        SearchLimits { lambda_min: S::lit(LAMBDA_MIN), lambda_max: S::lit(LAMBDA_MAX) }
    }
}

/// Success indicator `Φ`; one query.
pub fn phi<S: Scalar>(oracle: &HardLabelOracle<S>, point: &[S], goal: &AttackGoal<S>) -> Result<bool> {
    Ok(goal.mode.is_success(oracle.predict(point)?))
}

fn phi_along<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    lambda: S,
) -> Result<bool> {
    phi(oracle, &goal.point_along(theta, lambda), goal)
}

/// Geometric doubling from `max(hint, λ_min)` up to `λ_max`.
pub fn find_upper_radius<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    hint: Option<S>,
) -> Result<Bracket<S>> {
    find_upper_radius_within(oracle, goal, theta, hint, SearchLimits::default())
}

pub fn find_upper_radius_within<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    hint: Option<S>,
    limits: SearchLimits<S>,
) -> Result<Bracket<S>> {
    let start = match hint {
        Some(h) if h.is_finite() && h > limits.lambda_min => h,
        _ => limits.lambda_min,
    };
    let mut lambda = start.min(limits.lambda_max);
    let mut lo = S::zero();
    loop {
        if phi_along(oracle, goal, theta, lambda)? {
            return Ok(Bracket { lo, hi: lambda });
        }
        if lambda >= limits.lambda_max {
            return Err(Error::NoCrossing);
        }
        lo = lambda;
        lambda = (lambda * S::lit(2.0)).min(limits.lambda_max);
    }
}

/// First relative step of [`local_bracket`].
pub const LOCAL_STEP: f64 = 0.01;

/// Bracket around a radius expected near `hint`: steps of `1%`, `2%`, `4%`, …
/// of the current end outward from the hint, in whichever direction the
/// first query points. Cheap when the true radius is close to `hint`.
pub fn local_bracket<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    hint: S,
    limits: SearchLimits<S>,
) -> Result<Bracket<S>> {
    if !(hint.is_finite() && hint > limits.lambda_min) {
        return find_upper_radius_within(oracle, goal, theta, None, limits);
    }
    if phi_along(oracle, goal, theta, hint)? {
        return shrink_bracket(oracle, goal, theta, hint, limits);
    }
    let mut rel = S::lit(LOCAL_STEP);
    let mut lo = hint;
    loop {
        if lo >= limits.lambda_max {
            return Err(Error::NoCrossing);
        }
        let hi = (lo * (S::one() + rel)).min(limits.lambda_max);
        if phi_along(oracle, goal, theta, hi)? {
            return Ok(Bracket { lo, hi });
        }
        lo = hi;
        rel = rel + rel;
    }
}

/// Walks down from a verified adversarial `hi` in steps of `1%`, `2%`, …
/// until a non-adversarial radius is found (or `λ_min` is passed).
pub fn shrink_bracket<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    mut hi: S,
    limits: SearchLimits<S>,
) -> Result<Bracket<S>> {
    let mut rel = S::lit(LOCAL_STEP);
    loop {
        let lo = hi / (S::one() + rel);
        if lo < limits.lambda_min {
            return Ok(Bracket { lo: S::zero(), hi });
        }
        if !phi_along(oracle, goal, theta, lo)? {
            return Ok(Bracket { lo, hi });
        }
        hi = lo;
        rel = rel + rel;
    }
}

/// Bisection of a verified bracket down to width `tol`; returns the
/// adversarial end. Costs exactly `⌈log₂((hi − lo)/tol)⌉` queries.
pub fn refine_radius<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    bracket: Bracket<S>,
    tol: Tolerance<S>,
) -> Result<S> {
    if !tol.is_valid() {
        return Err(Error::InvalidConfig("binary-search tolerance must be positive".into()));
    }
    let eps = tol.resolve(bracket.hi);
    let Bracket { mut lo, mut hi } = bracket;
    let half = S::lit(0.5);
    while hi - lo > eps {
        let mid = lo + (hi - lo) * half;
        if phi_along(oracle, goal, theta, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Bisection over `(0, λ_hi]`, first confirming `Φ(λ_hi) = 1` with one query.
pub fn binary_search_radius<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    lambda_hi: S,
    tol: Tolerance<S>,
) -> Result<S> {
    if !phi_along(oracle, goal, theta, lambda_hi)? {
        return Err(Error::InvalidBracket);
    }
    refine_radius(oracle, goal, theta, Bracket { lo: S::zero(), hi: lambda_hi }, tol)
}

/// `g(θ)` along `θ/‖θ‖` by doubling then bisection; `Err(NoCrossing)` when `g = +∞`.
pub fn ray_radius<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    hint: Option<S>,
    tol: Tolerance<S>,
) -> Result<S> {
    let unit = theta.normalized()?;
    let bracket = find_upper_radius(oracle, goal, &unit, hint)?;
    refine_radius(oracle, goal, &unit, bracket, tol)
}

/// Sign of `g(θ + σu) − g(θ)` from one query at radius `g(θ)` along the
/// tilted ray: `+1` when the probe is not adversarial (the radius grew).
pub fn sign_query<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    radius: S,
    u: &Vector<S>,
    sigma: S,
) -> Result<S> {
    let mut tilted = theta.clone();
    tilted.add_scaled(sigma, u);
    let tilted = tilted.normalized()?;
    if phi_along(oracle, goal, &tilted, radius)? {
        Ok(-S::one())
    } else {
        Ok(S::one())
    }
}

/// `‖g(θ)·θ‖_p` for a unit `θ`.
pub fn distortion<S: Scalar>(theta: &Vector<S>, radius: S, norm: Norm) -> S {
    match norm {
        Norm::L2 => radius,
        Norm::Linf => radius * theta.norm_inf(),
    }
}

//! Transfer priors from white-box surrogates.
//!
//! For a surrogate `f̂` the surrogate loss `h(θ, λ)` is the negative C&W margin
//! at `x + λθ/‖θ‖`. Holding `λ = λ₀ = g_f̂(θ)` fixed, `∇_θ h` is parallel to
//! `∇g_f̂(θ)`, and by the implicit function theorem
//! `∇g_f̂(θ) = −∇_θ h / (∂h/∂λ)`.
//!
//! Nothing here touches the target model's ledger.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::{cw_loss_and_grad, Classifier, Differentiable, HardLabelOracle};
use crate::rayoracle::{ray_radius, refine_radius, AttackGoal, Bracket, GoalMode, Norm, Tolerance, LAMBDA_MAX};
use crate::scalar::Scalar;
use crate::vecmath::Vector;

/// Grid resolution of the surrogate scan over `(0, λ_max]` in targeted mode.
pub const TARGETED_SCAN_POINTS: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogatePrior<S> {
    /// Raw prior direction `∇_θ h(θ, λ₀)`.
    pub k: Vector<S>,
    pub lambda0: S,
    pub dh_dlambda: S,
    /// Surrogate-side target class chosen in targeted mode.
    pub new_target: Option<usize>,
    /// Index of the surrogate that produced it.
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayGradient<S> {
    pub k: Vector<S>,
    pub dh_dlambda: S,
}

impl<S: Scalar> RayGradient<S> {
    /// `∇g_f̂(θ) = −k / (∂h/∂λ)`.
    pub fn exact_gradient(&self) -> Result<Vector<S>> {
        if self.dh_dlambda.abs() < S::lit(1e-12) {
            return Err(Error::DegenerateBoundary(self.dh_dlambda.as_f64()));
        }
        Ok(self.k.scaled(-S::one() / self.dh_dlambda))
    }
}

/// `g_f̂(θ)` along `θ/‖θ‖` from the surrogate's own decisions.
pub fn surrogate_radius<S: Scalar>(
    surrogate: &dyn Classifier<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    tol: Tolerance<S>,
) -> Result<S> {
    let free = HardLabelOracle::unmetered(surrogate);
    ray_radius(&free, goal, theta, None, tol)
}

/// `k = ∇_θ h(θ, λ₀)` with `λ₀` held constant, plus `∂h/∂λ` at the same point.
///
/// With `z = x + λθ/‖θ‖`, `∂z/∂θ = λ (I − θ̄θ̄ᵀ)/‖θ‖`, so
/// `k = λ (∇_z h − (θ̄·∇_z h) θ̄)/‖θ‖` and `∂h/∂λ = θ̄·∇_z h`.
pub fn surrogate_ray_gradient<S: Scalar>(
    surrogate: &dyn Differentiable<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    lambda0: S,
) -> Result<RayGradient<S>> {
    let theta_norm = theta.norm();
    let unit = theta.normalized()?;
    let z = goal.point_along(&unit, lambda0);
    let (_, grad_z) = cw_loss_and_grad(surrogate, &z, &goal.mode);
    let dh_dlambda = unit.dot(&grad_z);
    let mut k = grad_z;
    k.add_scaled(-dh_dlambda, &unit);
    let k = k.scaled(lambda0 / theta_norm);
    Ok(RayGradient { k, dh_dlambda })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetedSetup<S> {
    pub new_target: usize,
    pub lambda0: S,
    /// `true` when the first-region scan was needed.
    pub fallback: bool,
}

/// Picks the surrogate-side target class and entry radius in targeted mode.
///
/// Primary rule: the surrogate's label at `λ_f + 1` along `θ`, if it differs
/// from the true label. Otherwise the first surrogate region with a label
/// other than the true one inside `(0, 200]`.
pub fn targeted_prior_setup<S: Scalar>(
    surrogate: &dyn Classifier<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    lambda_f: S,
    tol: Tolerance<S>,
) -> Result<TargetedSetup<S>> {
    let true_label = goal.mode.true_label();
    let unit = theta.normalized()?;
    let lambda_max = S::lit(LAMBDA_MAX);
    let step = lambda_max / S::lit(TARGETED_SCAN_POINTS as f64);
    let grid = |i: usize| step * S::lit(i as f64);
    let label_at = |lambda: S| surrogate.predict(&goal.point_along(&unit, lambda));

    let probe = lambda_f + S::one();
    let probe_label = label_at(probe);
    if probe_label != true_label {
        // earliest grid hit before the probe, else the probe itself
        let mut hi = probe;
        let mut lo = S::zero();
        for i in 1..=TARGETED_SCAN_POINTS {
            let lambda = grid(i);
            if lambda >= probe {
                break;
            }
            if label_at(lambda) == probe_label {
                hi = lambda;
                break;
            }
            lo = lambda;
        }
        let lambda0 = refine_entry(surrogate, goal, &unit, probe_label, lo, hi, tol)?;
        return Ok(TargetedSetup { new_target: probe_label, lambda0, fallback: false });
    }

    let mut lo = S::zero();
    for i in 1..=TARGETED_SCAN_POINTS {
        let lambda = grid(i);
        let label = label_at(lambda);
        if label != true_label {
            let lambda0 = refine_entry(surrogate, goal, &unit, label, lo, lambda, tol)?;
            return Ok(TargetedSetup { new_target: label, lambda0, fallback: true });
        }
        lo = lambda;
    }
    Err(Error::TargetedSetupFailed)
}

fn refine_entry<S: Scalar>(
    surrogate: &dyn Classifier<S>,
    goal: &AttackGoal<S>,
    unit: &Vector<S>,
    target: usize,
    lo: S,
    hi: S,
    tol: Tolerance<S>,
) -> Result<S> {
    let free = HardLabelOracle::unmetered(surrogate);
    let sub = goal.with_mode(GoalMode::Targeted { target, label: goal.mode.true_label() });
    refine_radius(&free, &sub, unit, Bracket { lo, hi }, tol)
}

/// One surrogate's prior at `θ`; `Ok(None)` when the surrogate contributes
/// nothing this iteration (no crossing, failed targeted setup, zero `k`).
pub fn extract_prior<S: Scalar>(
    surrogate: &dyn Differentiable<S>,
    source: usize,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    lambda_f: S,
    tol: Tolerance<S>,
) -> Result<Option<SurrogatePrior<S>>> {
    let (sub_goal, lambda0, new_target) = match goal.mode {
        GoalMode::Untargeted { .. } => match surrogate_radius(surrogate, goal, theta, tol) {
            Ok(l) => (goal.clone(), l, None),
            Err(Error::NoCrossing) => return Ok(None),
            Err(e) => return Err(e),
        },
        GoalMode::Targeted { label, .. } => match targeted_prior_setup(surrogate, goal, theta, lambda_f, tol) {
            Ok(setup) => (
                goal.with_mode(GoalMode::Targeted { target: setup.new_target, label }),
                setup.lambda0,
                Some(setup.new_target),
            ),
            Err(Error::TargetedSetupFailed) => return Ok(None),
            Err(e) => return Err(e),
        },
    };
    let rg = surrogate_ray_gradient(surrogate, &sub_goal, theta, lambda0)?;
    if rg.k.norm_inf() == S::zero() || !rg.k.is_finite() {
        return Ok(None);
    }
    Ok(Some(SurrogatePrior { k: rg.k, lambda0, dh_dlambda: rg.dh_dlambda, new_target, source }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", default)]
pub struct PgdConfig<S> {
    pub steps: usize,
    /// Per-coordinate step; ℓ2 steps have length `step_size·√d`.
    pub step_size: S,
    pub norm: Norm,
}

impl<S: Scalar> Default for PgdConfig<S> {
    fn default() -> Self {
        PgdConfig { steps: 40, step_size: S::lit(0.01), norm: Norm::L2 }
    }
}

/// Gradient ascent on the surrogate's C&W margin starting at `x`;
/// returns `normalize(x_pgd − x)`.
///
/// The caller must still confirm the direction on the target.
pub fn pgd_init<S: Scalar>(
    surrogate: &dyn Differentiable<S>,
    goal: &AttackGoal<S>,
    cfg: &PgdConfig<S>,
    unit_box: bool,
) -> Result<Vector<S>> {
    if goal.mode.is_targeted() {
        return Err(Error::InvalidConfig("PGD initialization supports untargeted goals only".into()));
    }
    let d = goal.dim();
    let l2_step = cfg.step_size * S::lit(d as f64).sqrt();
    let mut x = goal.original.clone();
    for _ in 0..cfg.steps {
        let (_, grad) = cw_loss_and_grad(surrogate, &x, &goal.mode);
        // h is the margin of the true class; step against its gradient
        match cfg.norm {
            Norm::Linf => {
                let step = grad.map(|g| {
                    if g > S::zero() {
                        S::one()
                    } else if g < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                x.add_scaled(-cfg.step_size, &step);
            }
            Norm::L2 => {
                let n = grad.norm();
                if n > S::zero() {
                    x.add_scaled(-l2_step / n, &grad);
                }
            }
        }
        if unit_box {
            x = x.map(|v| v.max(S::zero()).min(S::one()));
        }
    }
    x.sub(&goal.original).normalized()
}

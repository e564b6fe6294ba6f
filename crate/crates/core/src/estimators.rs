//! Gradient estimators over an orthonormal frame `p_1..p_s, u_1..u_{q−s}`.
//!
//! Every estimator is a linear combination of the frame vectors; the kinds
//! differ in how the coefficients are measured. Measurement goes through a
//! [`DirectionalProbe`], which is either the hard-label oracle or an exact
//! gradient for analytic validation.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::HardLabelOracle;
use crate::rayoracle::{local_bracket, refine_radius, sign_query, AttackGoal, RayState, SearchLimits, Tolerance};
use crate::scalar::Scalar;
use crate::vecmath::{sample_orthonormal_complement, OrthonormalFrame, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    SignOpt,
    PriorSignOpt,
    PriorOpt,
    PurePriorSign,
    PurePrior,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::SignOpt,
        EstimatorKind::PriorSignOpt,
        EstimatorKind::PriorOpt,
        EstimatorKind::PurePriorSign,
        EstimatorKind::PurePrior,
    ];

    pub fn uses_priors(self) -> bool {
        !matches!(self, EstimatorKind::SignOpt)
    }

    pub fn is_pure(self) -> bool {
        matches!(self, EstimatorKind::PurePriorSign | EstimatorKind::PurePrior)
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::SignOpt => "sign_opt",
            EstimatorKind::PriorSignOpt => "prior_sign_opt",
            EstimatorKind::PriorOpt => "prior_opt",
            EstimatorKind::PurePriorSign => "pure_prior_sign",
            EstimatorKind::PurePrior => "pure_prior",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PureMode {
    Sign,
    FiniteDiff,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", default)]
pub struct EstimatorConfig<S> {
    pub kind: EstimatorKind,
    /// Total vector count, priors included.
    pub q: usize,
    pub sigma: S,
    pub bs_tol: Tolerance<S>,
}

impl<S: Scalar> Default for EstimatorConfig<S> {
    fn default() -> Self {
        EstimatorConfig { kind: EstimatorKind::PriorOpt, q: 20, sigma: S::lit(1e-3), bs_tol: Tolerance::default() }
    }
}

impl<S: Scalar> EstimatorConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::InvalidConfig("q must be at least 1".into()));
        }
        if !(self.sigma > S::zero() && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if !self.bs_tol.is_valid() {
            return Err(Error::InvalidConfig("bs_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate<S> {
    pub v_star: Vector<S>,
    pub frame: OrthonormalFrame<S>,
    /// `v_star = Σ coefficients[i]·frame[i]`.
    pub coefficients: Vec<S>,
    /// Priors that survived orthonormalization; they lead the frame.
    pub priors_used: usize,
    pub queries_spent: u64,
    /// Queries spent by sign probes.
    pub sign_queries: u64,
    /// Queries spent by finite-difference radius searches.
    pub fd_queries: u64,
    /// Finite differences whose tilted radius was `+∞`.
    pub capped: usize,
}

/// Measures `sign(∇g·w)` and `∇g·w` along a unit direction `w`.
pub trait DirectionalProbe<S: Scalar> {
    fn sign(&mut self, w: &Vector<S>) -> Result<S>;
    fn slope(&mut self, w: &Vector<S>) -> Result<S>;
}

/// Analytic derivatives from a known gradient.
pub struct ExactProbe<'a, S> {
    pub gradient: &'a Vector<S>,
}

impl<S: Scalar> DirectionalProbe<S> for ExactProbe<'_, S> {
    fn sign(&mut self, w: &Vector<S>) -> Result<S> {
        Ok(if self.gradient.dot(w) < S::zero() { -S::one() } else { S::one() })
    }

    fn slope(&mut self, w: &Vector<S>) -> Result<S> {
        Ok(self.gradient.dot(w))
    }
}

/// Hard-label measurements: one query per sign, a radius search per slope.
pub struct RayProbe<'a, 'm, S> {
    pub oracle: &'a HardLabelOracle<'m, S>,
    pub goal: &'a AttackGoal<S>,
    pub state: &'a RayState<S>,
    pub sigma: S,
    pub tol: Tolerance<S>,
    pub sign_queries: u64,
    pub fd_queries: u64,
    pub capped: usize,
}

impl<'a, 'm, S: Scalar> RayProbe<'a, 'm, S> {
    pub fn new(
        oracle: &'a HardLabelOracle<'m, S>,
        goal: &'a AttackGoal<S>,
        state: &'a RayState<S>,
        sigma: S,
        tol: Tolerance<S>,
    ) -> Self {
        RayProbe { oracle, goal, state, sigma, tol, sign_queries: 0, fd_queries: 0, capped: 0 }
    }
}

impl<S: Scalar> DirectionalProbe<S> for RayProbe<'_, '_, S> {
    fn sign(&mut self, w: &Vector<S>) -> Result<S> {
        let r = sign_query(self.oracle, self.goal, &self.state.theta, self.state.radius, w, self.sigma);
        if !matches!(r, Err(Error::BudgetExhausted { .. })) {
            self.sign_queries += 1;
        }
        r
    }

    fn slope(&mut self, w: &Vector<S>) -> Result<S> {
        let before = self.oracle.queries();
        let mut tilted = self.state.theta.clone();
        tilted.add_scaled(self.sigma, w);
        let tilted = tilted.normalized()?;
        let radius = self.state.radius;
        let outcome = local_bracket(self.oracle, self.goal, &tilted, radius, SearchLimits::default())
            .and_then(|b| refine_radius(self.oracle, self.goal, &tilted, b, self.tol));
        self.fd_queries += self.oracle.queries() - before;
        match outcome {
            Ok(g) => Ok((g - radius) / self.sigma),
            Err(Error::NoCrossing) => {
                self.capped += 1;
                log::debug!("tilted radius is infinite; capping the slope");
                Ok(S::lit(10.0) * radius / self.sigma)
            }
            Err(e) => Err(e),
        }
    }
}

/// Priors first (degenerate ones dropped), then fresh random vectors up to
/// `q` in total. Pure kinds take no random vectors.
pub fn build_frame<S: Scalar, R: RngCore + ?Sized>(
    dim: usize,
    kind: EstimatorKind,
    q: usize,
    priors: &[Vector<S>],
    rng: &mut R,
) -> Result<(OrthonormalFrame<S>, usize)> {
    if q == 0 {
        return Err(Error::InvalidConfig("q must be at least 1".into()));
    }
    let mut frame = OrthonormalFrame::empty(dim);
    if kind.uses_priors() {
        for p in priors {
            if frame.len() == q {
                break;
            }
            frame.push(p)?;
        }
    }
    let s = frame.len();
    if kind.is_pure() {
        return Ok((frame, s));
    }
    let random = sample_orthonormal_complement(&frame, q - s, rng)?;
    frame.extend(random.vectors())?;
    Ok((frame, s))
}

/// Coefficients of `v*` over `frame`, whose first `s` vectors are priors.
///
/// Prior-OPT without random vectors falls back to finite differences along
/// the priors alone.
pub fn estimate_in_frame<S: Scalar, P: DirectionalProbe<S> + ?Sized>(
    kind: EstimatorKind,
    frame: &OrthonormalFrame<S>,
    s: usize,
    probe: &mut P,
) -> Result<Vec<S>> {
    let n = frame.len();
    let mut coefficients = Vec::with_capacity(n);
    match kind {
        EstimatorKind::SignOpt | EstimatorKind::PriorSignOpt | EstimatorKind::PurePriorSign => {
            for f in frame.vectors() {
                coefficients.push(probe.sign(f)?);
            }
        }
        EstimatorKind::PurePrior => {
            for f in &frame.vectors()[..s] {
                coefficients.push(probe.slope(f)?);
            }
        }
        EstimatorKind::PriorOpt => {
            if n == s {
                return estimate_in_frame(EstimatorKind::PurePrior, frame, s, probe);
            }
            let mut signs = Vec::with_capacity(n - s);
            let mut v_perp = Vector::zeros(frame.dim());
            for u in &frame.vectors()[s..] {
                let c = probe.sign(u)?;
                v_perp.add_scaled(c, u);
                signs.push(c);
            }
            let scale = S::one() / S::lit((n - s) as f64).sqrt();
            let v_perp = v_perp.scaled(scale);
            for p in &frame.vectors()[..s] {
                coefficients.push(probe.slope(p)?);
            }
            let c_perp = probe.slope(&v_perp)?;
            coefficients.extend(signs.into_iter().map(|c| c * c_perp * scale));
        }
    }
    Ok(coefficients)
}

fn require_priors<S>(kind: EstimatorKind, priors: &[Vector<S>]) -> Result<()> {
    if priors.is_empty() {
        return Err(Error::InvalidConfig(format!("{} needs at least one prior", kind.name())));
    }
    Ok(())
}

/// Any estimator kind against the hard-label oracle at `state`.
///
/// Prior kinds accept an empty prior list; the frame is then all random
/// (pure kinds get an empty frame and a zero estimate).
pub fn estimate<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    state: &RayState<S>,
    cfg: &EstimatorConfig<S>,
    priors: &[Vector<S>],
    rng: &mut R,
) -> Result<GradientEstimate<S>> {
    cfg.validate()?;
    let kind = cfg.kind;
    if kind.uses_priors() && !kind.is_pure() && cfg.q < priors.len() {
        return Err(Error::InvalidConfig("q must be at least the number of priors".into()));
    }
    let (frame, s) = build_frame(goal.dim(), kind, cfg.q, priors, rng)?;
    let before = oracle.queries();
    let mut probe = RayProbe::new(oracle, goal, state, cfg.sigma, cfg.bs_tol);
    let coefficients = estimate_in_frame(kind, &frame, s, &mut probe)?;
    let (sign_queries, fd_queries, capped) = (probe.sign_queries, probe.fd_queries, probe.capped);
    let v_star = frame.combine(&coefficients);
    Ok(GradientEstimate {
        v_star,
        frame,
        coefficients,
        priors_used: s,
        queries_spent: oracle.queries() - before,
        sign_queries,
        fd_queries,
        capped,
    })
}

pub fn estimate_sign_opt<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    state: &RayState<S>,
    cfg: &EstimatorConfig<S>,
    rng: &mut R,
) -> Result<GradientEstimate<S>> {
    estimate(oracle, goal, state, &EstimatorConfig { kind: EstimatorKind::SignOpt, ..*cfg }, &[], rng)
}

pub fn estimate_prior_sign_opt<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    state: &RayState<S>,
    cfg: &EstimatorConfig<S>,
    priors: &[Vector<S>],
    rng: &mut R,
) -> Result<GradientEstimate<S>> {
    require_priors(EstimatorKind::PriorSignOpt, priors)?;
    estimate(oracle, goal, state, &EstimatorConfig { kind: EstimatorKind::PriorSignOpt, ..*cfg }, priors, rng)
}

pub fn estimate_prior_opt<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    state: &RayState<S>,
    cfg: &EstimatorConfig<S>,
    priors: &[Vector<S>],
    rng: &mut R,
) -> Result<GradientEstimate<S>> {
    require_priors(EstimatorKind::PriorOpt, priors)?;
    estimate(oracle, goal, state, &EstimatorConfig { kind: EstimatorKind::PriorOpt, ..*cfg }, priors, rng)
}

/// Priors only; deterministic in `(state, priors)`.
pub fn estimate_pure_prior<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    state: &RayState<S>,
    cfg: &EstimatorConfig<S>,
    priors: &[Vector<S>],
    mode: PureMode,
) -> Result<GradientEstimate<S>> {
    let kind = match mode {
        PureMode::Sign => EstimatorKind::PurePriorSign,
        PureMode::FiniteDiff => EstimatorKind::PurePrior,
    };
    require_priors(kind, priors)?;
    // no random vectors are drawn, so the generator is never touched
    let mut unused = crate::vecmath::seeded(0);
    estimate(oracle, goal, state, &EstimatorConfig { kind, q: priors.len().max(1), ..*cfg }, priors, &mut unused)
}

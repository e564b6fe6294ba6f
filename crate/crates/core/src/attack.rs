//! The attack loop: initialize a ray, then repeatedly gather surrogate priors,
//! estimate `∇g`, clip it, and line-search along `−v*` on the unit sphere.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{build_frame, estimate_in_frame, EstimatorConfig, EstimatorKind, RayProbe};
use crate::modelzoo::{Classifier, Differentiable, HardLabelOracle};
use crate::priors::{extract_prior, pgd_init, PgdConfig};
use crate::rayoracle::{
    phi, ray_radius, refine_radius, shrink_bracket, AttackGoal, Bracket, Norm, RayState, SearchLimits, Tolerance,
};
use crate::scalar::Scalar;
use crate::vecmath::{sample_gaussian, seeded, Vector};

/// Query interval at which the best-so-far distortion is checkpointed.
pub const CHECKPOINT_INTERVAL: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", bound = "S: Scalar")]
pub enum InitStrategy<S> {
    Random {
        n: usize,
    },
    /// Direction of a PGD attack on the first surrogate (untargeted only).
    Pgd {
        #[serde(default)]
        pgd: PgdConfig<S>,
    },
    /// Direction toward a point already classified as the target class.
    TargetedExemplar {
        point: Vector<S>,
    },
}

impl<S> Default for InitStrategy<S> {
    fn default() -> Self {
        InitStrategy::Random { n: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", default)]
pub struct LineSearchConfig<S> {
    /// First step is `initial_step/‖v*‖` radians (to first order).
    pub initial_step: S,
    pub max_doublings: usize,
    pub max_halvings: usize,
}

impl<S: Scalar> Default for LineSearchConfig<S> {
    fn default() -> Self {
        LineSearchConfig { initial_step: S::lit(0.2), max_doublings: 8, max_halvings: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", default)]
pub struct AttackConfig<S> {
    pub method: EstimatorKind,
    pub init: InitStrategy<S>,
    pub iterations: usize,
    pub g_max: S,
    pub norm: Norm,
    pub budget: u64,
    /// `q`, `σ` and the bisection tolerance; its `kind` is replaced by `method`.
    pub estimator: EstimatorConfig<S>,
    pub line_search: LineSearchConfig<S>,
    /// Consecutive failed line searches before `σ` is halved (down to `sigma_floor`).
    pub stall_patience: usize,
    pub sigma_floor: S,
    pub unit_box: bool,
    pub seed: u64,
}

impl<S: Scalar> Default for AttackConfig<S> {
    fn default() -> Self {
        AttackConfig {
            method: EstimatorKind::PriorOpt,
            init: InitStrategy::default(),
            iterations: 10_000,
            g_max: S::lit(0.1),
            norm: Norm::L2,
            budget: 10_000,
            estimator: EstimatorConfig::default(),
            line_search: LineSearchConfig::default(),
            stall_patience: 3,
            sigma_floor: S::lit(1e-5),
            unit_box: false,
            seed: 0,
        }
    }
}

impl<S: Scalar> AttackConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.g_max > S::zero()) {
            return Err(Error::InvalidConfig("g_max must be positive".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidConfig("budget must be at least 1".into()));
        }
        if let InitStrategy::Random { n: 0 } = self.init {
            return Err(Error::InvalidConfig("random init needs n >= 1".into()));
        }
        if !(self.line_search.initial_step > S::zero()) {
            return Err(Error::InvalidConfig("line_search.initial_step must be positive".into()));
        }
        EstimatorConfig { kind: self.method, ..self.estimator }.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TracePoint<S> {
    pub query: u64,
    pub distortion: S,
}

/// Queries by the operation that spent them; sums to the ledger count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBook {
    pub init: u64,
    pub sign: u64,
    pub finite_diff: u64,
    pub line_search: u64,
}

impl CostBook {
    pub fn total(&self) -> u64 {
        self.init + self.sign + self.finite_diff + self.line_search
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Iterations,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AttackTrace<S> {
    /// Strictly increasing queries, non-increasing distortion.
    pub points: Vec<TracePoint<S>>,
    pub final_theta: Option<Vector<S>>,
    pub final_radius: S,
    pub final_distortion: S,
    pub success: bool,
    pub queries: u64,
    pub iterations: usize,
    pub costs: CostBook,
    pub stop: StopReason,
    /// Finite differences whose tilted radius was `+∞`.
    pub capped: usize,
}

impl<S: Scalar> AttackTrace<S> {
    /// Final adversarial point `x + g(θ)·θ`.
    pub fn adversarial_point(&self, goal: &AttackGoal<S>) -> Option<Vector<S>> {
        self.final_theta.as_ref().map(|t| goal.point_along(t, self.final_radius))
    }

    /// Best distortion reached within `budget` queries (`+∞` before the first point).
    pub fn distortion_at(&self, budget: u64) -> S {
        self.points.iter().take_while(|p| p.query <= budget).last().map_or(S::infinity(), |p| p.distortion)
    }
}

struct Recorder<S> {
    points: Vec<TracePoint<S>>,
    best: S,
    next_checkpoint: u64,
}

impl<S: Scalar> Recorder<S> {
    fn new() -> Self {
        Recorder { points: Vec::new(), best: S::infinity(), next_checkpoint: CHECKPOINT_INTERVAL }
    }

    fn push(&mut self, query: u64, distortion: S) {
        match self.points.last_mut() {
            Some(last) if last.query == query => last.distortion = last.distortion.min(distortion),
            Some(last) if last.query > query => {}
            _ => self.points.push(TracePoint { query, distortion }),
        }
    }

    /// Checkpoints up to `count` carrying the best value known before it.
    fn advance(&mut self, count: u64) {
        while self.next_checkpoint <= count {
            if self.best.is_finite() {
                self.push(self.next_checkpoint, self.best);
            }
            self.next_checkpoint += CHECKPOINT_INTERVAL;
        }
    }

    fn offer(&mut self, count: u64, distortion: S) -> bool {
        self.advance(count);
        if distortion < self.best {
            self.best = distortion;
            self.push(count, distortion);
            true
        } else {
            false
        }
    }

    fn finish(mut self, count: u64) -> Vec<TracePoint<S>> {
        self.advance(count);
        if self.points.last().is_none_or(|p| p.query < count) {
            self.points.push(TracePoint { query: count, distortion: self.best });
        }
        self.points
    }
}

/// `v` rescaled to norm `g_max` when longer.
pub fn clip_grad_norm<S: Scalar>(v: &Vector<S>, g_max: S) -> Vector<S> {
    let n = v.norm();
    if n > g_max {
        v.scaled(g_max / n)
    } else {
        v.clone()
    }
}

/// Radius along `theta` if strictly below `best`; one query when it is not.
fn radius_below<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    theta: &Vector<S>,
    best: S,
    tol: Tolerance<S>,
) -> Result<Option<S>> {
    if !phi(oracle, &goal.point_along(theta, best), goal)? {
        return Ok(None);
    }
    let bracket = shrink_bracket(oracle, goal, theta, best, SearchLimits::default())?;
    let r = refine_radius(oracle, goal, theta, bracket, tol)?;
    Ok((r < best).then_some(r))
}

fn random_init<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    n: usize,
    norm: Norm,
    tol: Tolerance<S>,
    rng: &mut R,
    rec: &mut Recorder<S>,
) -> Result<Option<RayState<S>>> {
    let mut best: Option<RayState<S>> = None;
    for _ in 0..n {
        let Ok(theta) = sample_gaussian::<S, _>(goal.dim(), rng).normalized() else {
            continue;
        };
        let outcome = match &best {
            None => match ray_radius(oracle, goal, &theta, None, tol) {
                Ok(r) => Ok(Some(r)),
                Err(Error::NoCrossing) => Ok(None),
                Err(e) => Err(e),
            },
            Some(b) => radius_below(oracle, goal, &theta, b.radius, tol),
        };
        match outcome {
            Ok(Some(r)) => {
                let state = RayState::new(theta, r, norm);
                rec.offer(oracle.queries(), state.distortion);
                best = Some(state);
            }
            Ok(None) => {}
            Err(Error::BudgetExhausted { .. }) if best.is_some() => break,
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

/// Best of `n` Gaussian directions; each candidate after the first hit is
/// screened with one query at the current best radius.
pub fn init_random_directions<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    n: usize,
    norm: Norm,
    tol: Tolerance<S>,
    rng: &mut R,
) -> Result<RayState<S>> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    random_init(oracle, goal, n, norm, tol, rng, &mut Recorder::new())?.ok_or(Error::InitFailed)
}

/// Ray toward an exemplar already in the target class; the exemplar bounds
/// the radius, so no doubling is needed.
pub fn init_targeted<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    exemplar: &Vector<S>,
    norm: Norm,
    tol: Tolerance<S>,
) -> Result<RayState<S>> {
    if !goal.mode.is_targeted() {
        return Err(Error::InvalidConfig("exemplar initialization needs a targeted goal".into()));
    }
    if exemplar.dim() != goal.dim() {
        return Err(Error::DimensionMismatch { expected: goal.dim(), got: exemplar.dim() });
    }
    if !phi(oracle, exemplar, goal)? {
        return Err(Error::BadExemplar);
    }
    let offset = exemplar.sub(&goal.original);
    let dist = offset.norm();
    let theta = offset.normalized().map_err(|_| Error::BadExemplar)?;
    let r = refine_radius(oracle, goal, &theta, Bracket { lo: S::zero(), hi: dist }, tol)?;
    Ok(RayState::new(theta, r, norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearchOutcome<S> {
    pub eta: S,
    pub state: RayState<S>,
    /// Radii of the improving candidates, in evaluation order.
    pub accepted_radii: Vec<S>,
    /// The budget ran out after an improvement had been found.
    pub exhausted: bool,
}

/// Geometric step search along `θ − η v*`.
///
/// Doubles while each candidate improves on the best so far, otherwise halves
/// until the first improvement. A candidate costs one query when it does not
/// improve and, when it does, a local bracket below the best radius plus a
/// bisection.
#[allow(clippy::too_many_arguments)]
pub fn line_search<S: Scalar>(
    oracle: &HardLabelOracle<S>,
    goal: &AttackGoal<S>,
    state: &RayState<S>,
    v_star: &Vector<S>,
    eta_init: S,
    cfg: &LineSearchConfig<S>,
    norm: Norm,
    tol: Tolerance<S>,
) -> Result<LineSearchOutcome<S>> {
    if !(v_star.norm() > S::zero()) || !state.radius.is_finite() {
        return Err(Error::NoImprovement);
    }
    let candidate = |eta: S, best: S| -> Result<Option<RayState<S>>> {
        let mut theta = state.theta.clone();
        theta.add_scaled(-eta, v_star);
        let Ok(theta) = theta.normalized() else {
            return Ok(None);
        };
        Ok(radius_below(oracle, goal, &theta, best, tol)?.map(|r| RayState::new(theta, r, norm)))
    };

    let mut found: Option<(S, RayState<S>)> = None;
    let mut accepted = Vec::new();
    let mut eta = eta_init;
    let step = (|| -> Result<()> {
        if let Some(s) = candidate(eta, state.radius)? {
            accepted.push(s.radius);
            found = Some((eta, s));
            for _ in 0..cfg.max_doublings {
                eta *= S::lit(2.0);
                let best = found.as_ref().map_or(state.radius, |f| f.1.radius);
                match candidate(eta, best)? {
                    Some(s) => {
                        accepted.push(s.radius);
                        found = Some((eta, s));
                    }
                    None => break,
                }
            }
        } else {
            for _ in 0..cfg.max_halvings {
                eta *= S::lit(0.5);
                if let Some(s) = candidate(eta, state.radius)? {
                    accepted.push(s.radius);
                    found = Some((eta, s));
                    break;
                }
            }
        }
        Ok(())
    })();
    match (step, found) {
        (Ok(()), Some((eta, state))) => {
            Ok(LineSearchOutcome { eta, state, accepted_radii: accepted, exhausted: false })
        }
        (Ok(()), None) => Err(Error::NoImprovement),
        (Err(Error::BudgetExhausted { .. }), Some((eta, state))) => {
            Ok(LineSearchOutcome { eta, state, accepted_radii: accepted, exhausted: true })
        }
        (Err(e), _) => Err(e),
    }
}

/// Runs the attack with a fresh ledger capped at `cfg.budget`.
pub fn run_attack<S: Scalar>(
    target: &dyn Classifier<S>,
    surrogates: &[&dyn Differentiable<S>],
    goal: &AttackGoal<S>,
    cfg: &AttackConfig<S>,
) -> Result<AttackTrace<S>> {
    let oracle = HardLabelOracle::new(target, Some(cfg.budget)).with_unit_box(cfg.unit_box);
    let mut rng = seeded(cfg.seed);
    run_attack_with(&oracle, surrogates, goal, cfg, &mut rng)
}

/// Runs the attack against a caller-supplied oracle.
pub fn run_attack_with<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    surrogates: &[&dyn Differentiable<S>],
    goal: &AttackGoal<S>,
    cfg: &AttackConfig<S>,
    rng: &mut R,
) -> Result<AttackTrace<S>> {
    cfg.validate()?;
    if cfg.method.uses_priors() && surrogates.is_empty() {
        return Err(Error::InvalidConfig(format!("{} needs at least one surrogate", cfg.method.name())));
    }
    let start = oracle.queries();
    let used = |o: &HardLabelOracle<S>| o.queries() - start;
    let tol = cfg.estimator.bs_tol;
    let mut rec = Recorder::new();
    let mut costs = CostBook::default();

    let init = match &cfg.init {
        InitStrategy::Random { n } => random_init(oracle, goal, *n, cfg.norm, tol, rng, &mut rec),
        InitStrategy::TargetedExemplar { point } => init_targeted(oracle, goal, point, cfg.norm, tol).map(Some),
        InitStrategy::Pgd { pgd } => pgd_start(oracle, surrogates, goal, pgd, cfg, rng, &mut rec),
    };
    costs.init = used(oracle);
    let mut state = match init {
        Ok(Some(s)) => s,
        Ok(None) => return Err(Error::InitFailed),
        Err(Error::BudgetExhausted { .. }) => {
            return Ok(finish(rec, used(oracle), None, costs, 0, StopReason::Budget, 0));
        }
        Err(e) => return Err(e),
    };
    rec.offer(used(oracle), state.distortion);
    let mut best = state.clone();

    let mut sigma = cfg.estimator.sigma;
    let mut eta: Option<S> = None;
    let mut stalls = 0usize;
    let mut capped = 0usize;
    let mut iterations = 0usize;
    let mut stop = StopReason::Iterations;

    'outer: for t in 0..cfg.iterations {
        iterations = t + 1;
        let mut priors = Vec::new();
        if cfg.method.uses_priors() {
            for (i, s) in surrogates.iter().enumerate() {
                if let Some(p) = extract_prior(*s, i, goal, &state.theta, state.radius, tol)? {
                    priors.push(p.k);
                }
            }
        }
        let (frame, s) = build_frame(goal.dim(), cfg.method, cfg.estimator.q, &priors, rng)?;
        let mut probe = RayProbe::new(oracle, goal, &state, sigma, tol);
        let coefficients = estimate_in_frame(cfg.method, &frame, s, &mut probe);
        costs.sign += probe.sign_queries;
        costs.finite_diff += probe.fd_queries;
        capped += probe.capped;
        rec.advance(used(oracle));
        let coefficients = match coefficients {
            Ok(c) => c,
            Err(Error::BudgetExhausted { .. }) => {
                stop = StopReason::Budget;
                break;
            }
            Err(e) => return Err(e),
        };
        let v = clip_grad_norm(&frame.combine(&coefficients), cfg.g_max);

        let before = oracle.queries();
        let eta0 = eta.unwrap_or_else(|| cfg.line_search.initial_step / v.norm().max(S::min_positive_value()));
        let outcome = line_search(oracle, goal, &state, &v, eta0, &cfg.line_search, cfg.norm, tol);
        costs.line_search += oracle.queries() - before;
        match outcome {
            Ok(o) => {
                stalls = 0;
                eta = Some(o.eta);
                state = o.state;
                if state.distortion < best.distortion {
                    best = state.clone();
                }
                rec.offer(used(oracle), state.distortion);
                if o.exhausted {
                    stop = StopReason::Budget;
                    break 'outer;
                }
            }
            Err(Error::NoImprovement) => {
                rec.advance(used(oracle));
                stalls += 1;
                if stalls >= cfg.stall_patience {
                    sigma = (sigma * S::lit(0.5)).max(cfg.sigma_floor);
                    stalls = 0;
                    log::debug!("line search stalled; sigma halved to {sigma}");
                }
            }
            Err(Error::BudgetExhausted { .. }) => {
                stop = StopReason::Budget;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(finish(rec, used(oracle), Some(best), costs, iterations, stop, capped))
}

fn pgd_start<S: Scalar, R: RngCore + ?Sized>(
    oracle: &HardLabelOracle<S>,
    surrogates: &[&dyn Differentiable<S>],
    goal: &AttackGoal<S>,
    pgd: &PgdConfig<S>,
    cfg: &AttackConfig<S>,
    rng: &mut R,
    rec: &mut Recorder<S>,
) -> Result<Option<RayState<S>>> {
    let tol = cfg.estimator.bs_tol;
    let Some(surrogate) = surrogates.first() else {
        return Err(Error::InvalidConfig("PGD initialization needs a surrogate".into()));
    };
    match pgd_init(*surrogate, goal, pgd, cfg.unit_box) {
        Ok(theta) => match ray_radius(oracle, goal, &theta, None, tol) {
            Ok(r) => {
                let state = RayState::new(theta, r, cfg.norm);
                rec.offer(oracle.queries(), state.distortion);
                return Ok(Some(state));
            }
            Err(Error::NoCrossing) => log::debug!("PGD direction misses the target; random fallback"),
            Err(e) => return Err(e),
        },
        Err(Error::ZeroVector) => log::debug!("PGD made no progress; random fallback"),
        Err(e) => return Err(e),
    }
    random_init(oracle, goal, 100, cfg.norm, tol, rng, rec)
}

fn finish<S: Scalar>(
    rec: Recorder<S>,
    queries: u64,
    best: Option<RayState<S>>,
    costs: CostBook,
    iterations: usize,
    stop: StopReason,
    capped: usize,
) -> AttackTrace<S> {
    let points = rec.finish(queries);
    let (final_theta, final_radius, final_distortion) = match best {
        Some(s) => (Some(s.theta), s.radius, s.distortion),
        None => (None, S::infinity(), S::infinity()),
    };
    AttackTrace {
        points,
        success: final_radius.is_finite(),
        final_theta,
        final_radius,
        final_distortion,
        queries,
        iterations,
        costs,
        stop,
        capped,
    }
}

//! Expected cosine similarity `γ` between estimated and true gradients:
//! closed forms, the conditions under which priors help, and a Monte Carlo
//! harness that runs the real estimator assembly with exact derivatives.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{build_frame, estimate_in_frame, EstimatorKind, ExactProbe};
use crate::vecmath::{
    embed_priors_with_cosines, ln_beta, log_gamma_ratio, sample_unit_sphere, substream, OrthonormalFrame, Vector,
};

/// Dimension `d`, vector count `q`, and the cosines `α_i` of `s` priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySpec {
    pub d: usize,
    pub q: usize,
    pub s: usize,
    pub alphas: Vec<f64>,
}

impl TheorySpec {
    pub fn sign_opt(d: usize, q: usize) -> Self {
        TheorySpec { d, q, s: 0, alphas: Vec::new() }
    }

    pub fn with_priors(d: usize, q: usize, alphas: &[f64]) -> Self {
        TheorySpec { d, q, s: alphas.len(), alphas: alphas.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 1 || self.q > self.d {
            return Err(Error::InvalidSpec(format!("need 1 <= q <= d, got q={} d={}", self.q, self.d)));
        }
        if self.s >= self.q {
            return Err(Error::InvalidSpec(format!("need s < q, got s={} q={}", self.s, self.q)));
        }
        if self.alphas.len() != self.s {
            return Err(Error::InvalidSpec(format!("{} cosines given for s={}", self.alphas.len(), self.s)));
        }
        if self.alphas.iter().any(|a| !(a.abs() <= 1.0)) {
            return Err(Error::InvalidSpec("every |alpha| must be at most 1".into()));
        }
        if self.sum_sq() > 1.0 + 1e-12 {
            return Err(Error::InvalidSpec(format!("sum of squared cosines {} exceeds 1", self.sum_sq())));
        }
        Ok(())
    }

    fn sum_abs(&self) -> f64 {
        self.alphas.iter().map(|a| a.abs()).sum()
    }

    fn sum_sq(&self) -> f64 {
        self.alphas.iter().map(|a| a * a).sum()
    }

    fn rest(&self) -> f64 {
        (1.0 - self.sum_sq()).max(0.0)
    }

    fn require_priors(&self) -> Result<()> {
        self.validate()?;
        if self.s == 0 {
            return Err(Error::InvalidSpec("at least one prior is required".into()));
        }
        Ok(())
    }
}

/// `E|β|` for one coordinate of a uniform point on `S^{n−1}`:
/// `Γ(n/2) / (Γ((n+1)/2)·√π)`.
pub fn mean_abs_coordinate(n: usize) -> Result<f64> {
    let n = n as f64;
    Ok(log_gamma_ratio(n / 2.0, (n + 1.0) / 2.0)?.exp() / PI.sqrt())
}

fn sign_opt_spec(d: usize, q: usize) -> Result<()> {
    TheorySpec::sign_opt(d, q).validate()
}

/// `E[γ] = √q·Γ(d/2)/(Γ((d+1)/2)√π)`.
pub fn mean_gamma_sign_opt(d: usize, q: usize) -> Result<f64> {
    sign_opt_spec(d, q)?;
    Ok((q as f64).sqrt() * mean_abs_coordinate(d)?)
}

/// `E[γ²] = ((2/π)(q−1) + 1)/d`.
pub fn mean_sq_gamma_sign_opt(d: usize, q: usize) -> Result<f64> {
    sign_opt_spec(d, q)?;
    Ok(pair_term(q) / d as f64)
}

fn pair_term(q: usize) -> f64 {
    2.0 / PI * (q as f64 - 1.0) + 1.0
}

pub fn mean_gamma_prior_sign_opt(spec: &TheorySpec) -> Result<f64> {
    spec.require_priors()?;
    let (q, s) = (spec.q as f64, spec.s as f64);
    let ratio = mean_abs_coordinate(spec.d - spec.s)?;
    Ok((spec.sum_abs() + (q - s) * spec.rest().sqrt() * ratio) / q.sqrt())
}

pub fn mean_sq_gamma_prior_sign_opt(spec: &TheorySpec) -> Result<f64> {
    spec.require_priors()?;
    let (q, s, ds) = (spec.q as f64, spec.s as f64, (spec.d - spec.s) as f64);
    let a = spec.sum_abs();
    let rest = spec.rest();
    let ratio = mean_abs_coordinate(spec.d - spec.s)?;
    let inner = a * a + (q - s) / ds * pair_term(spec.q - spec.s) * rest + 2.0 * a * (q - s) * rest.sqrt() * ratio;
    Ok(inner / q)
}

/// `E[γ²] = Σα² + ((2/π)(q−s−1) + 1)(1 − Σα²)/(d−s)`.
pub fn mean_sq_gamma_prior_opt(spec: &TheorySpec) -> Result<f64> {
    spec.require_priors()?;
    Ok(spec.sum_sq() + pair_term(spec.q - spec.s) * spec.rest() / (spec.d - spec.s) as f64)
}

/// Lower and upper bounds on `E[γ]`; the upper one is `√E[γ²]`.
pub fn prior_opt_gamma_bounds(spec: &TheorySpec) -> Result<(f64, f64)> {
    let upper = mean_sq_gamma_prior_opt(spec)?.sqrt();
    let n = (spec.d - spec.s) as f64;
    let ratio = log_gamma_ratio(n / 2.0, (n + 1.0) / 2.0)?.exp();
    let lower = (spec.sum_sq() + (spec.q - spec.s) as f64 * spec.rest() / PI * ratio * ratio).sqrt();
    if lower > upper * (1.0 + 1e-12) {
        return Err(Error::InvalidSpec(format!("bounds out of order: {lower} > {upper}")));
    }
    Ok((lower, upper.max(lower)))
}

/// Smallest `Σα²` for which Prior-OPT's `E[γ²]` exceeds Sign-OPT's, and its
/// small-`q/d` approximation `2s/(πd)`.
pub fn advantage_condition(d: usize, q: usize, s: usize) -> Result<(f64, f64)> {
    sign_opt_spec(d, q)?;
    if s >= q {
        return Err(Error::InvalidSpec(format!("need s < q, got s={s} q={q}")));
    }
    let c1 = pair_term(q) / d as f64;
    let c2 = pair_term(q - s) / (d - s) as f64;
    Ok(((c1 - c2) / (1.0 - c2), 2.0 * s as f64 / (PI * d as f64)))
}

/// Range of `|α|` where one-prior Prior-Sign-OPT has larger `E[γ]` than
/// Sign-OPT; `None` when it never does.
pub fn crossing_interval_prior_sign_opt(d: usize, q: usize) -> Result<Option<(f64, f64)>> {
    sign_opt_spec(d, q)?;
    if q < 2 {
        return Ok(None);
    }
    let base = mean_gamma_sign_opt(d, q)?;
    let diff = |a: f64| -> Result<f64> { Ok(mean_gamma_prior_sign_opt(&TheorySpec::with_priors(d, q, &[a]))? - base) };

    // the difference is concave in α: golden-section search for its peak
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut c = b - inv_phi * (b - a);
    let mut e = a + inv_phi * (b - a);
    let (mut fc, mut fe) = (diff(c)?, diff(e)?);
    while b - a > 1e-10 {
        if fc > fe {
            b = e;
            e = c;
            fe = fc;
            c = b - inv_phi * (b - a);
            fc = diff(c)?;
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + inv_phi * (b - a);
            fe = diff(e)?;
        }
    }
    let peak = (a + b) / 2.0;
    if diff(peak)? <= 0.0 {
        return Ok(None);
    }
    let root = |mut neg: f64, mut pos: f64| -> Result<f64> {
        while (pos - neg).abs() > 1e-12 {
            let mid = 0.5 * (neg + pos);
            if diff(mid)? > 0.0 {
                pos = mid;
            } else {
                neg = mid;
            }
        }
        Ok(0.5 * (neg + pos))
    };
    let lo = if diff(0.0)? > 0.0 { 0.0 } else { root(0.0, peak)? };
    let hi = if diff(1.0)? > 0.0 { 1.0 } else { root(1.0, peak)? };
    Ok(Some((lo, hi)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub mean_gamma: f64,
    pub mean_gamma_sq: f64,
    pub stderr_mean: f64,
    pub stderr_sq: f64,
    pub trials: usize,
}

impl GammaStats {
    fn from_samples(gammas: &[f64]) -> Self {
        let n = gammas.len() as f64;
        let mean = gammas.iter().sum::<f64>() / n;
        let mean_sq = gammas.iter().map(|g| g * g).sum::<f64>() / n;
        let var = gammas.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let var_sq = gammas.iter().map(|g| (g * g - mean_sq).powi(2)).sum::<f64>() / (n - 1.0);
        GammaStats {
            mean_gamma: mean,
            mean_gamma_sq: mean_sq,
            stderr_mean: (var / n).sqrt(),
            stderr_sq: (var_sq / n).sqrt(),
            trials: gammas.len(),
        }
    }
}

/// How trials are realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McPath {
    /// Priors and random vectors are the first `q` coordinate axes and the
    /// gradient is drawn in that frame, which has the same joint law by
    /// rotation invariance; costs `O(q²)` per trial.
    #[default]
    Reduced,
    /// Random gradient in `R^d`, priors embedded at the given cosines, random
    /// vectors by Gram-Schmidt over Gaussians.
    Full,
}

pub const MIN_TRIALS: usize = 100;

/// Statistics of `γ` over `trials` independent trials; trial `i` draws from
/// its own substream of `seed`.
pub fn mc_estimate_gamma(kind: EstimatorKind, spec: &TheorySpec, trials: usize, seed: u64) -> Result<GammaStats> {
    mc_estimate_gamma_with(kind, spec, trials, seed, McPath::Reduced)
}

pub fn mc_estimate_gamma_with(
    kind: EstimatorKind,
    spec: &TheorySpec,
    trials: usize,
    seed: u64,
    path: McPath,
) -> Result<GammaStats> {
    spec.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::InvalidSpec(format!("at least {MIN_TRIALS} trials are required")));
    }
    if kind == EstimatorKind::SignOpt && spec.s != 0 {
        return Err(Error::InvalidSpec("sign_opt takes no priors".into()));
    }
    if kind.uses_priors() && spec.s == 0 {
        return Err(Error::InvalidSpec(format!("{} needs at least one prior", kind.name())));
    }
    let tail = if spec.d > spec.q {
        Some(ChiSquared::new((spec.d - spec.q) as f64).map_err(|e| Error::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let gammas: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, &[t as u64]);
            match path {
                McPath::Reduced => reduced_trial(kind, spec, tail.as_ref(), &mut rng),
                McPath::Full => full_trial(kind, spec, &mut rng),
            }
        })
        .collect::<Result<_>>()?;
    Ok(GammaStats::from_samples(&gammas))
}

fn gamma_of(v: &Vector<f64>, g: &Vector<f64>) -> f64 {
    let n = v.norm();
    if n > 0.0 {
        v.dot(g) / n
    } else {
        0.0
    }
}

fn reduced_trial(
    kind: EstimatorKind,
    spec: &TheorySpec,
    tail: Option<&ChiSquared<f64>>,
    rng: &mut crate::vecmath::Rng,
) -> Result<f64> {
    let (q, s) = (spec.q, spec.s);
    let z: Vec<f64> = (0..q - s).map(|_| rng.sample(StandardNormal)).collect();
    let tail_sq = tail.map_or(0.0, |c| c.sample(rng));
    let norm = (z.iter().map(|v| v * v).sum::<f64>() + tail_sq).sqrt();
    let scale = spec.rest().sqrt() / norm;
    let mut g = Vec::with_capacity(q);
    g.extend_from_slice(&spec.alphas);
    g.extend(z.iter().map(|v| v * scale));
    let g = Vector::from(g);
    let frame = if kind.is_pure() { OrthonormalFrame::identity(q, s) } else { OrthonormalFrame::identity(q, q) };
    let coefficients = estimate_in_frame(kind, &frame, s, &mut ExactProbe { gradient: &g })?;
    Ok(gamma_of(&frame.combine(&coefficients), &g))
}

fn full_trial(kind: EstimatorKind, spec: &TheorySpec, rng: &mut crate::vecmath::Rng) -> Result<f64> {
    let g: Vector<f64> = sample_unit_sphere(spec.d, rng);
    let priors = embed_priors_with_cosines(&g, &spec.alphas, rng)?;
    let (frame, s) = build_frame(spec.d, kind, spec.q, priors.vectors(), rng)?;
    let coefficients = estimate_in_frame(kind, &frame, s, &mut ExactProbe { gradient: &g })?;
    Ok(gamma_of(&frame.combine(&coefficients), &g))
}

/// Closed form against Monte Carlo for one estimator and spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub kind: EstimatorKind,
    pub d: usize,
    pub q: usize,
    pub s: usize,
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub mc_mean: f64,
    pub mc_sq: f64,
    pub stderr_mean: f64,
    pub stderr_sq: f64,
    /// Exact `E[γ]` where one is known.
    pub cf_mean: Option<f64>,
    /// Bracket on `E[γ]` where only bounds are known.
    pub cf_bounds: Option<(f64, f64)>,
    pub cf_sq: f64,
    pub mean_ok: bool,
    pub sq_ok: bool,
    pub pass: bool,
}

/// Width of the acceptance band in standard errors.
pub const STDERR_BAND: f64 = 3.0;

fn within(value: f64, target: f64, stderr: f64) -> bool {
    (value - target).abs() <= STDERR_BAND * stderr + 1e-9 * target.abs().max(1.0)
}

pub fn validate_spec(kind: EstimatorKind, spec: &TheorySpec, trials: usize, seed: u64) -> Result<TheoryRow> {
    let stats = mc_estimate_gamma(kind, spec, trials, seed)?;
    let (cf_mean, cf_bounds, cf_sq) = match kind {
        EstimatorKind::SignOpt => {
            (Some(mean_gamma_sign_opt(spec.d, spec.q)?), None, mean_sq_gamma_sign_opt(spec.d, spec.q)?)
        }
        EstimatorKind::PriorSignOpt => {
            (Some(mean_gamma_prior_sign_opt(spec)?), None, mean_sq_gamma_prior_sign_opt(spec)?)
        }
        EstimatorKind::PriorOpt => (None, Some(prior_opt_gamma_bounds(spec)?), mean_sq_gamma_prior_opt(spec)?),
        other => return Err(Error::InvalidSpec(format!("no closed form for {}", other.name()))),
    };
    let mean_ok = match (cf_mean, cf_bounds) {
        (Some(m), _) => within(stats.mean_gamma, m, stats.stderr_mean),
        (None, Some((lo, hi))) => {
            let slack = STDERR_BAND * stats.stderr_mean + 1e-9;
            stats.mean_gamma >= lo - slack && stats.mean_gamma <= hi + slack
        }
        (None, None) => false,
    };
    let sq_ok = within(stats.mean_gamma_sq, cf_sq, stats.stderr_sq);
    Ok(TheoryRow {
        kind,
        d: spec.d,
        q: spec.q,
        s: spec.s,
        alphas: spec.alphas.clone(),
        trials,
        mc_mean: stats.mean_gamma,
        mc_sq: stats.mean_gamma_sq,
        stderr_mean: stats.stderr_mean,
        stderr_sq: stats.stderr_sq,
        cf_mean,
        cf_bounds,
        cf_sq,
        mean_ok,
        sq_ok,
        pass: mean_ok && sq_ok,
    })
}

pub const GRID_DIMS: [usize; 4] = [16, 64, 256, 3072];
pub const GRID_QS: [usize; 4] = [1, 10, 50, 200];

/// Prior cosine sets used for `s` priors.
pub fn grid_alphas(s: usize) -> Vec<Vec<f64>> {
    match s {
        1 => vec![vec![0.0], vec![0.1], vec![0.3], vec![0.6]],
        2 => vec![vec![0.0, 0.0], vec![0.3, 0.1], vec![0.6, 0.3], vec![0.6, 0.6]],
        _ => {
            let mut sets = vec![vec![0.0; s], vec![0.1; s], vec![0.3; s]];
            let mut mix = vec![0.0; s];
            mix[0] = 0.6;
            mix[1] = 0.3;
            mix[s - 1] = 0.1;
            sets.push(mix);
            sets.retain(|a| a.iter().map(|x| x * x).sum::<f64>() <= 1.0);
            sets
        }
    }
}

/// `(kind, spec)` pairs of the validation grid; `kinds` selects estimators.
pub fn grid_specs(kinds: &[EstimatorKind]) -> Vec<(EstimatorKind, TheorySpec)> {
    let mut out = Vec::new();
    for &kind in kinds {
        for &d in &GRID_DIMS {
            for &q in GRID_QS.iter().filter(|&&q| q <= d) {
                if kind == EstimatorKind::SignOpt {
                    out.push((kind, TheorySpec::sign_opt(d, q)));
                    continue;
                }
                for s in [1usize, 2, 5] {
                    if s >= q {
                        continue;
                    }
                    for alphas in grid_alphas(s) {
                        out.push((kind, TheorySpec::with_priors(d, q, &alphas)));
                    }
                }
            }
        }
    }
    out
}

/// Monte Carlo against closed forms over the grid; rows in grid order.
pub fn theory_grid(kinds: &[EstimatorKind], trials: usize, seed: u64) -> Result<Vec<TheoryRow>> {
    grid_specs(kinds)
        .iter()
        .enumerate()
        .map(|(i, (kind, spec))| validate_spec(*kind, spec, trials, crate::vecmath::mix(seed, i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub mc: f64,
    pub closed_form: f64,
    pub stderr: f64,
    pub pass: bool,
}

impl MomentCheck {
    fn new(samples: &[f64], closed_form: f64) -> Self {
        let n = samples.len() as f64;
        let mc = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        MomentCheck { mc, closed_form, stderr, pass: within(mc, closed_form, stderr) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub d: usize,
    pub trials: usize,
    /// `E|β| = Γ(d/2)/(Γ((d+1)/2)√π)`.
    pub abs_mean: MomentCheck,
    /// `E[β²] = 1/d`.
    pub sq_mean: MomentCheck,
    /// Fixed cosine `β_p` of the conditioning direction.
    pub beta_p: f64,
    /// `E|β⊥| = Γ((d−1)/2)/(Γ(d/2)√π)·√(1 − β_p²)`.
    pub conditional_abs_mean: MomentCheck,
    /// Kolmogorov–Smirnov distance between samples of `β` and the density
    /// `(1 − β²)^{(d−3)/2}/B((d−1)/2, 1/2)`.
    pub ks_statistic: f64,
    pub ks_pass: bool,
    pub pass: bool,
}

pub const KS_THRESHOLD: f64 = 0.01;

/// `KS_THRESHOLD`, widened to the 1% Kolmogorov critical value for small `n`.
pub fn ks_threshold(n: usize) -> f64 {
    KS_THRESHOLD.max(1.63 / (n as f64).sqrt())
}
pub const LEMMA_BETA_P: f64 = 0.6;

/// Checks the sphere-coordinate lemmas at dimension `d ≥ 2`.
pub fn lemma_checks(d: usize, trials: usize, seed: u64) -> Result<LemmaReport> {
    if d < 2 {
        return Err(Error::InvalidSpec("lemma checks need d >= 2".into()));
    }
    if trials < MIN_TRIALS {
        return Err(Error::InvalidSpec(format!("at least {MIN_TRIALS} trials are required")));
    }
    let rest_full = ChiSquared::new((d - 1) as f64).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let rest_sub = if d > 2 {
        Some(ChiSquared::new((d - 2) as f64).map_err(|e| Error::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let perp = (1.0 - LEMMA_BETA_P * LEMMA_BETA_P).sqrt();
    let samples: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, &[t as u64]);
            // first coordinate of a uniform point on S^{d−1}
            let z: f64 = rng.sample(StandardNormal);
            let beta = z / (z * z + rest_full.sample(&mut rng)).sqrt();
            // u uniform on the sphere orthogonal to p; g's part there has norm √(1 − β_p²)
            let w: f64 = rng.sample(StandardNormal);
            let tail = rest_sub.as_ref().map_or(0.0, |c| c.sample(&mut rng));
            let beta_perp = perp * w / (w * w + tail).sqrt();
            (beta, beta_perp)
        })
        .collect();
    let betas: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let abs: Vec<f64> = betas.iter().map(|b| b.abs()).collect();
    let sq: Vec<f64> = betas.iter().map(|b| b * b).collect();
    let cond: Vec<f64> = samples.iter().map(|s| s.1.abs()).collect();

    let abs_mean = MomentCheck::new(&abs, mean_abs_coordinate(d)?);
    let sq_mean = MomentCheck::new(&sq, 1.0 / d as f64);
    let conditional_abs_mean = MomentCheck::new(&cond, mean_abs_coordinate(d - 1)? * perp);
    let ks_statistic = ks_against_density(&betas, d);
    let ks_pass = ks_statistic < ks_threshold(betas.len());
    Ok(LemmaReport {
        d,
        trials,
        pass: abs_mean.pass && sq_mean.pass && conditional_abs_mean.pass && ks_pass,
        abs_mean,
        sq_mean,
        beta_p: LEMMA_BETA_P,
        conditional_abs_mean,
        ks_statistic,
        ks_pass,
    })
}

/// CDF of `β` on a grid in `φ = asin β`, where the density becomes
/// `cos^{d−2} φ / B` and is bounded for every `d ≥ 2`.
struct BetaCdf {
    phis: Vec<f64>,
    cdf: Vec<f64>,
}

impl BetaCdf {
    const CELLS: usize = 200_000;

    fn new(d: usize) -> Self {
        let log_b = ln_beta((d as f64 - 1.0) / 2.0, 0.5);
        let h = PI / Self::CELLS as f64;
        let density = |phi: f64| -> f64 {
            let c = phi.cos().max(0.0);
            if d == 2 {
                (-log_b).exp()
            } else if c == 0.0 {
                0.0
            } else {
                ((d as f64 - 2.0) * c.ln() - log_b).exp()
            }
        };
        let mut phis = Vec::with_capacity(Self::CELLS + 1);
        let mut cdf = Vec::with_capacity(Self::CELLS + 1);
        let mut acc = 0.0;
        phis.push(-PI / 2.0);
        cdf.push(0.0);
        for i in 0..Self::CELLS {
            let a = -PI / 2.0 + i as f64 * h;
            let b = a + h;
            // Simpson on each cell
            acc += h / 6.0 * (density(a) + 4.0 * density(0.5 * (a + b)) + density(b));
            phis.push(b);
            cdf.push(acc);
        }
        BetaCdf { phis, cdf }
    }

    fn eval(&self, beta: f64) -> f64 {
        let phi = beta.clamp(-1.0, 1.0).asin();
        let h = PI / Self::CELLS as f64;
        let pos = ((phi + PI / 2.0) / h).clamp(0.0, Self::CELLS as f64);
        let i = (pos.floor() as usize).min(Self::CELLS - 1);
        let frac = (phi - self.phis[i]) / h;
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }
}

fn ks_against_density(samples: &[f64], d: usize) -> f64 {
    let cdf = BetaCdf::new(d);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let f = cdf.eval(b);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sign_opt_closed_forms() {
        assert!(close(mean_gamma_sign_opt(2, 1).unwrap(), 2.0 / PI, 1e-12));
        assert!(close(mean_gamma_sign_opt(3, 1).unwrap(), 0.5, 1e-12));
        assert!(close(mean_gamma_sign_opt(3072, 200).unwrap(), 0.2036, 1e-4));
        assert!(close(mean_sq_gamma_sign_opt(77, 1).unwrap(), 1.0 / 77.0, 1e-15));
        assert!(close(mean_sq_gamma_sign_opt(3072, 200).unwrap(), 0.0415648, 1e-7));
        assert!(mean_gamma_sign_opt(4, 5).is_err());
        assert!(mean_gamma_sign_opt(4, 0).is_err());
    }

    #[test]
    fn jensen_holds_for_sign_opt() {
        let mut rng = substream(1, &[]);
        for _ in 0..50 {
            let d = rng.random_range(1..4000usize);
            let q = rng.random_range(1..=d);
            let m = mean_gamma_sign_opt(d, q).unwrap();
            assert!(m * m <= mean_sq_gamma_sign_opt(d, q).unwrap() + 1e-15, "d={d} q={q}");
        }
    }

    #[test]
    fn prior_sign_opt_reductions() {
        for q in [2, 10, 50] {
            let one = TheorySpec::with_priors(80, q, &[1.0]);
            assert!(close(mean_gamma_prior_sign_opt(&one).unwrap(), 1.0 / (q as f64).sqrt(), 1e-12));
            let zero = TheorySpec::with_priors(80, q, &[0.0]);
            let expected = (q as f64 - 1.0) / (q as f64).sqrt() * mean_abs_coordinate(79).unwrap();
            assert!(close(mean_gamma_prior_sign_opt(&zero).unwrap(), expected, 1e-12));
        }
    }

    #[test]
    fn zero_cosines_reduce_to_sign_opt_in_complement() {
        // s zero-cosine priors contribute nothing; the rest is Sign-OPT with q−s in d−s
        for (d, q, s) in [(64, 10, 2), (3072, 200, 5), (16, 10, 1)] {
            let spec = TheorySpec::with_priors(d, q, &vec![0.0; s]);
            let scale = ((q - s) as f64 / q as f64).sqrt();
            let mean = mean_gamma_prior_sign_opt(&spec).unwrap();
            assert!(close(mean, scale * mean_gamma_sign_opt(d - s, q - s).unwrap(), 1e-12));
            let sq = mean_sq_gamma_prior_sign_opt(&spec).unwrap();
            assert!(close(sq, scale * scale * mean_sq_gamma_sign_opt(d - s, q - s).unwrap(), 1e-12));
            let po = mean_sq_gamma_prior_opt(&spec).unwrap();
            assert!(close(po, pair_term(q - s) / (d - s) as f64, 1e-15));
        }
    }

    #[test]
    fn prior_opt_forms() {
        let spec = TheorySpec::with_priors(3072, 200, &[0.3]);
        assert!(close(mean_sq_gamma_prior_opt(&spec).unwrap(), 0.1276, 1e-4));
        let perfect = TheorySpec::with_priors(50, 10, &[1.0]);
        assert!(close(mean_sq_gamma_prior_opt(&perfect).unwrap(), 1.0, 1e-15));
        let (lo, hi) = prior_opt_gamma_bounds(&perfect).unwrap();
        assert!(close(lo, 1.0, 1e-12) && close(hi, 1.0, 1e-12));
        let (lo, hi) = prior_opt_gamma_bounds(&spec).unwrap();
        assert!(lo <= hi);
    }

    #[test]
    fn spec_validation() {
        assert!(TheorySpec::with_priors(10, 5, &[0.8, 0.8]).validate().is_err());
        assert!(TheorySpec::with_priors(10, 2, &[0.1, 0.1]).validate().is_err());
        assert!(TheorySpec::with_priors(10, 3, &[1.5]).validate().is_err());
        assert!(mean_gamma_prior_sign_opt(&TheorySpec::sign_opt(10, 3)).is_err());
    }

    #[test]
    fn advantage_threshold() {
        let (exact, approx) = advantage_condition(3072, 200, 1).unwrap();
        assert!(close(approx, 2.073e-4, 1e-7));
        assert!(((exact - approx) / approx).abs() < 0.05);
        let (exact, approx) = advantage_condition(12, 10, 9).unwrap();
        assert!(((exact - approx) / approx).abs() > 0.2);
        for (d, q, s) in [(3072, 200, 1), (500, 40, 3)] {
            let (t, _) = advantage_condition(d, q, s).unwrap();
            let sign = mean_sq_gamma_sign_opt(d, q).unwrap();
            let a = |sum_sq: f64| TheorySpec::with_priors(d, q, &vec![(sum_sq / s as f64).sqrt(); s]);
            assert!(mean_sq_gamma_prior_opt(&a(t * 1.01)).unwrap() > sign);
            assert!(mean_sq_gamma_prior_opt(&a(t * 0.99)).unwrap() <= sign);
        }
    }

    #[test]
    fn threshold_coherence_when_q_is_small() {
        let mut rng = substream(2, &[]);
        for _ in 0..50 {
            let d = rng.random_range(200..5000usize);
            let q = rng.random_range(2..=d / 10);
            let s = rng.random_range(1..q.min(6));
            let (exact, approx) = advantage_condition(d, q, s).unwrap();
            assert!(((exact - approx) / exact).abs() <= 0.05, "d={d} q={q} s={s}");
        }
    }

    #[test]
    fn crossing_interval_matches_reported_values() {
        let (lo, hi) = crossing_interval_prior_sign_opt(3072, 200).unwrap().unwrap();
        assert!(close(lo, 0.01422, 1e-3), "lo {lo}");
        assert!(close(hi, 0.611, 1e-3), "hi {hi}");
        let base = mean_gamma_sign_opt(3072, 200).unwrap();
        assert!(mean_gamma_prior_sign_opt(&TheorySpec::with_priors(3072, 200, &[0.5])).unwrap() > base);
        assert!(mean_gamma_prior_sign_opt(&TheorySpec::with_priors(3072, 200, &[0.7])).unwrap() < base);
        // tiny instances only need to be handled
        for (d, q) in [(8, 8), (2, 1), (2, 2), (3, 3)] {
            let _ = crossing_interval_prior_sign_opt(d, q).unwrap();
        }
    }

    #[test]
    fn closed_forms_grow_with_q() {
        for d in [64usize, 3072] {
            for alpha in [0.005, 0.2] {
                let mut prev = (0.0, 0.0, 0.0);
                for q in 2..=d.min(400) {
                    let spec = TheorySpec::with_priors(d, q, &[alpha]);
                    let (lo, hi) = prior_opt_gamma_bounds(&spec).unwrap();
                    let cur = (mean_gamma_sign_opt(d, q).unwrap(), lo, hi);
                    assert!(cur.0 >= prev.0 && cur.1 >= prev.1 && cur.2 >= prev.2, "d={d} q={q}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn prior_sign_opt_grows_with_q_past_turning_point() {
        // (α + (q−1)c)/√q decreases until q = α/c − 1, with c = √(1−α²)·E|β| in d−1
        for d in [64usize, 3072] {
            for alpha in [0.005f64, 0.2, 0.6] {
                let c = (1.0 - alpha * alpha).sqrt() * mean_abs_coordinate(d - 1).unwrap();
                let turn = (alpha / c - 1.0).ceil().max(1.0) as usize;
                let mean = |q: usize| mean_gamma_prior_sign_opt(&TheorySpec::with_priors(d, q, &[alpha])).unwrap();
                for q in (turn + 1).max(2)..d.min(600) {
                    assert!(mean(q + 1) >= mean(q) - 1e-15, "d={d} alpha={alpha} q={q}");
                }
                if turn > 3 {
                    assert!(mean(3) < mean(2));
                }
            }
        }
    }

    #[test]
    fn mc_sign_opt_small() {
        let stats = mc_estimate_gamma(EstimatorKind::SignOpt, &TheorySpec::sign_opt(3, 1), 100_000, 7).unwrap();
        assert!(within(stats.mean_gamma, 0.5, stats.stderr_mean));
    }

    #[test]
    fn reduced_and_full_paths_agree() {
        for (kind, spec) in [
            (EstimatorKind::SignOpt, TheorySpec::sign_opt(12, 5)),
            (EstimatorKind::PriorSignOpt, TheorySpec::with_priors(12, 5, &[0.3, 0.2])),
            (EstimatorKind::PriorOpt, TheorySpec::with_priors(12, 5, &[0.5])),
        ] {
            let a = mc_estimate_gamma_with(kind, &spec, 20_000, 3, McPath::Reduced).unwrap();
            let b = mc_estimate_gamma_with(kind, &spec, 20_000, 4, McPath::Full).unwrap();
            let se = (a.stderr_mean.powi(2) + b.stderr_mean.powi(2)).sqrt();
            assert!((a.mean_gamma - b.mean_gamma).abs() <= 4.0 * se, "{kind:?}");
            let se = (a.stderr_sq.powi(2) + b.stderr_sq.powi(2)).sqrt();
            assert!((a.mean_gamma_sq - b.mean_gamma_sq).abs() <= 4.0 * se, "{kind:?}");
        }
    }

    #[test]
    fn mc_is_deterministic() {
        let spec = TheorySpec::with_priors(64, 10, &[0.3]);
        let a = mc_estimate_gamma(EstimatorKind::PriorOpt, &spec, 500, 11).unwrap();
        let b = mc_estimate_gamma(EstimatorKind::PriorOpt, &spec, 500, 11).unwrap();
        assert_eq!(a, b);
        assert!(mc_estimate_gamma(EstimatorKind::PriorOpt, &spec, 99, 11).is_err());
    }

    #[test]
    fn lemmas_small_dims() {
        for d in [2, 3] {
            let r = lemma_checks(d, 100_000, 5).unwrap();
            assert!(r.pass, "{r:?}");
        }
        assert!(lemma_checks(1, 1000, 0).is_err());
    }

    #[test]
    fn lemma_density_cdf_is_normalized() {
        for d in [2, 3, 16, 256] {
            let c = BetaCdf::new(d);
            assert!(close(c.eval(1.0), 1.0, 1e-9), "d={d}");
            assert!(close(c.eval(0.0), 0.5, 1e-9));
        }
        // uniform at d = 3
        let c = BetaCdf::new(3);
        assert!(close(c.eval(0.2), 0.6, 1e-9));
    }
}

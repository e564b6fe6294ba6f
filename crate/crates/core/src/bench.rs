//! Benchmark harness: synthetic instance suites, metrics over query traces,
//! and bit-exact artifact emission. Everything here is `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, CostBook, InitStrategy, StopReason, TracePoint};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::modelzoo::{perturb_twin, Classifier, Differentiable, MlpModel, Model, SoftmaxLinearModel};
use crate::rayoracle::{AttackGoal, GoalMode};
use crate::vecmath::{mix, sample_gaussian, substream, Vector};

/// `x` in decimal with 9 significant digits (`inf`/`nan` spelled out).
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0.00000000".into();
    }
    // Scientific formatting rounds first, so the exponent already accounts
    // for carries such as 9.9999999995 -> 10.0000000.
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp <= 8 {
        return format!("{:.*}", (8 - exp) as usize, x);
    }
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if x < 0.0 { "-" } else { "" };
    format!("{sign}{digits}{}", "0".repeat((exp - 8) as usize))
}

/// CSV trace: header `query,distortion`, LF line endings.
pub fn trace_csv(points: &[TracePoint<f64>]) -> String {
    let mut out = String::from("query,distortion\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.query, format_sig9(p.distortion));
    }
    out
}

/// Best distortion with cumulative queries `≤ budget`; `+∞` before the first point.
pub fn best_at(points: &[TracePoint<f64>], budget: u64) -> f64 {
    points.iter().take_while(|p| p.query <= budget).map(|p| p.distortion).fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanDistortion {
    /// `None` when every trace was excluded.
    pub mean: Option<f64>,
    pub included: usize,
    /// Traces still at `+∞` at this budget.
    pub excluded: usize,
}

pub fn mean_distortion_at<T: AsRef<[TracePoint<f64>]>>(traces: &[T], budget: u64) -> Result<MeanDistortion> {
    if traces.is_empty() {
        return Err(Error::EmptySuite);
    }
    let (mut sum, mut included) = (0.0, 0usize);
    for t in traces {
        let b = best_at(t.as_ref(), budget);
        if b.is_finite() {
            sum += b;
            included += 1;
        }
    }
    Ok(MeanDistortion {
        mean: (included > 0).then(|| sum / included as f64),
        included,
        excluded: traces.len() - included,
    })
}

/// Default success threshold `√(0.001·d)`.
pub fn default_epsilon(d: usize) -> f64 {
    (0.001 * d as f64).sqrt()
}

/// Threshold used for low-dimensional image benchmarks.
pub const EPSILON_CIFAR: f64 = 1.0;

/// Fraction of traces whose best distortion at `budget` is below `epsilon`.
pub fn asr<T: AsRef<[TracePoint<f64>]>>(traces: &[T], budget: u64, epsilon: f64) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::EmptySuite);
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let hits = traces.iter().filter(|t| best_at(t.as_ref(), budget) < epsilon).count();
    Ok(hits as f64 / traces.len() as f64)
}

/// Area under the best-so-far step curve over `[0, budget_max]`. The first
/// point's value is extended back to query 0.
pub fn auc(points: &[TracePoint<f64>], budget_max: u64) -> Result<f64> {
    let first = points.first().ok_or(Error::EmptyTrace)?;
    let mut area = 0.0;
    let mut level = first.distortion;
    let mut at = 0u64;
    for p in points {
        if p.query >= budget_max {
            break;
        }
        area += level * (p.query - at) as f64;
        level = level.min(p.distortion);
        at = p.query;
    }
    Ok(area + level * (budget_max - at) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    /// Nearest-prototype classifier, prototypes `~ N(0, scale²I)`.
    LinearPrototypes {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Random one-hidden-layer network; instances are labelled by it.
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurrogateRecipe {
    /// Target weights plus `N(0, rho²)` noise, `count` independent draws.
    Twin { rho: f64, count: usize },
    /// Prototypes re-estimated from `samples` fresh points per class.
    Independent { samples: usize, count: usize },
}

impl SurrogateRecipe {
    pub fn count(&self) -> usize {
        match *self {
            SurrogateRecipe::Twin { count, .. } | SurrogateRecipe::Independent { count, .. } => count,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    #[default]
    Untargeted,
    Targeted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    /// Used in trace file names.
    pub name: String,
    #[serde(default)]
    pub attack: AttackConfig<f64>,
    /// How many surrogates of the pool to use, in pool order.
    #[serde(default)]
    pub surrogates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub instances: usize,
    pub d: usize,
    pub classes: usize,
    pub family: Family,
    pub surrogates: SurrogateRecipe,
    #[serde(default)]
    pub goal: GoalKind,
    /// Instance spread around its class prototype (linear) or scale (MLP).
    #[serde(default = "one")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Reporting budgets, ascending; the last one caps every run.
    pub budgets: Vec<u64>,
    /// Defaults to `√(0.001·d)`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub methods: Vec<MethodSpec>,
}

fn one() -> f64 {
    1.0
}

fn field(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

impl SuiteConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: SuiteConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn max_budget(&self) -> u64 {
        self.budgets.last().copied().unwrap_or(0)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| default_epsilon(self.d))
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(field("instances", "must be at least 1"));
        }
        if self.d == 0 {
            return Err(field("d", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(field("classes", "must be at least 2"));
        }
        match self.family {
            Family::LinearPrototypes { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return Err(field("family.scale", "must be positive"));
            }
            Family::Mlp { hidden: 0 } => return Err(field("family.hidden", "must be at least 1")),
            _ => {}
        }
        match self.surrogates {
            SurrogateRecipe::Twin { rho, .. } if !(rho >= 0.0 && rho.is_finite()) => {
                return Err(field("surrogates.rho", "must be non-negative"));
            }
            SurrogateRecipe::Independent { samples: 0, .. } => {
                return Err(field("surrogates.samples", "must be at least 1"));
            }
            SurrogateRecipe::Independent { .. } if matches!(self.family, Family::Mlp { .. }) => {
                return Err(field("surrogates", "independent surrogates need the linear_prototypes family"));
            }
            _ => {}
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(field("noise", "must be non-negative"));
        }
        if self.budgets.is_empty() {
            return Err(field("budgets", "must not be empty"));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) || self.budgets[0] == 0 {
            return Err(field("budgets", "must be positive and strictly ascending"));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(field("epsilon", "must be positive"));
            }
        }
        if self.methods.is_empty() {
            return Err(field("methods", "must not be empty"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            let at = |f: &str| format!("methods[{i}].{f}");
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(field(&at("name"), "must be non-empty [A-Za-z0-9_-]"));
            }
            if self.methods[..i].iter().any(|o| o.name == m.name) {
                return Err(field(&at("name"), format!("duplicate method name {:?}", m.name)));
            }
            if m.surrogates > self.surrogates.count() {
                return Err(field(
                    &at("surrogates"),
                    format!("uses {} but the pool has {}", m.surrogates, self.surrogates.count()),
                ));
            }
            if m.attack.method.uses_priors() && m.surrogates == 0 {
                return Err(field(&at("surrogates"), format!("{} needs at least one", m.attack.method.name())));
            }
            if m.attack.estimator.q > self.d {
                return Err(field(
                    &at("attack.estimator.q"),
                    format!("{} exceeds d = {}", m.attack.estimator.q, self.d),
                ));
            }
            if let InitStrategy::Pgd { .. } = m.attack.init {
                if m.surrogates == 0 {
                    return Err(field(&at("attack.init"), "pgd initialization needs a surrogate"));
                }
                if self.goal == GoalKind::Targeted {
                    return Err(field(&at("attack.init"), "pgd initialization is untargeted only"));
                }
            }
            AttackConfig { budget: self.max_budget(), ..m.attack.clone() }
                .validate()
                .map_err(|e| field(&at("attack"), e))?;
        }
        Ok(())
    }
}

/// One attacked point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub index: usize,
    pub goal: AttackGoal<f64>,
    /// Target-class exemplar for targeted goals.
    pub exemplar: Option<Vector<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSuite {
    pub target: Model<f64>,
    pub surrogates: Vec<Model<f64>>,
    /// Correctly classified instances only.
    pub instances: Vec<Instance>,
    pub generated: usize,
    pub skipped: Vec<usize>,
}

fn prototypes(d: usize, classes: usize, scale: f64, seed: u64) -> Vec<Vector<f64>> {
    let mut rng = substream(seed, &[0]);
    (0..classes).map(|_| sample_gaussian::<f64, _>(d, &mut rng).scaled(scale)).collect()
}

/// Builds target, surrogate pool and instances deterministically from the seed.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<GeneratedSuite> {
    cfg.validate()?;
    let (d, classes) = (cfg.d, cfg.classes);
    let protos = match cfg.family {
        Family::LinearPrototypes { scale } => Some(prototypes(d, classes, scale, cfg.seed)),
        Family::Mlp { .. } => None,
    };
    let target = match (&cfg.family, &protos) {
        (Family::LinearPrototypes { .. }, Some(p)) => Model::Linear(SoftmaxLinearModel::from_prototypes(p)?),
        (Family::Mlp { hidden }, _) => {
            Model::Mlp(MlpModel::random(classes, d, *hidden, &mut substream(cfg.seed, &[0])))
        }
        _ => unreachable!("prototypes exist for the linear family"),
    };
    let surrogates = (0..cfg.surrogates.count())
        .map(|k| {
            let mut rng = substream(cfg.seed, &[2, k as u64]);
            match cfg.surrogates {
                SurrogateRecipe::Twin { rho, .. } => Ok(perturb_twin(&target, rho, &mut rng)),
                SurrogateRecipe::Independent { samples, .. } => {
                    let p = protos.as_ref().expect("validated: linear family");
                    let est: Vec<Vector<f64>> = p
                        .iter()
                        .map(|mu| {
                            let mut acc = Vector::zeros(d);
                            for _ in 0..samples {
                                acc.add_scaled(1.0, mu);
                                acc.add_scaled(cfg.noise, &sample_gaussian(d, &mut rng));
                            }
                            acc.scaled(1.0 / samples as f64)
                        })
                        .collect();
                    Ok(Model::Linear(SoftmaxLinearModel::from_prototypes(&est)?))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let clf = target.as_classifier();
    let exemplars: Option<Vec<Vector<f64>>> = (cfg.goal == GoalKind::Targeted)
        .then(|| (0..classes).map(|t| class_exemplar(clf, protos.as_deref(), t, cfg)).collect())
        .transpose()?;

    let mut instances = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..cfg.instances {
        let mut rng = substream(cfg.seed, &[1, i as u64]);
        let (x, label) = match &protos {
            Some(p) => {
                let y = i % classes;
                let mut x = p[y].clone();
                x.add_scaled(cfg.noise, &sample_gaussian(d, &mut rng));
                (x, y)
            }
            None => {
                let x = sample_gaussian::<f64, _>(d, &mut rng).scaled(cfg.noise);
                let y = clf.predict(&x);
                (x, y)
            }
        };
        if clf.predict(&x) != label {
            log::info!("instance {i} is misclassified by the target; skipped");
            skipped.push(i);
            continue;
        }
        let (goal, exemplar) = match &exemplars {
            None => (AttackGoal::untargeted(x, label), None),
            Some(ex) => {
                let t = (label + 1 + rng.random_range(0..classes - 1)) % classes;
                (AttackGoal::targeted(x, t, label)?, Some(ex[t].clone()))
            }
        };
        instances.push(Instance { index: i, goal, exemplar });
    }
    Ok(GeneratedSuite { target, surrogates, instances, generated: cfg.instances, skipped })
}

fn class_exemplar(
    clf: &dyn Classifier<f64>,
    protos: Option<&[Vector<f64>]>,
    t: usize,
    cfg: &SuiteConfig,
) -> Result<Vector<f64>> {
    if let Some(p) = protos {
        return Ok(p[t].clone());
    }
    let mut rng = substream(cfg.seed, &[4, t as u64]);
    for _ in 0..10_000 {
        let x = sample_gaussian::<f64, _>(cfg.d, &mut rng).scaled(cfg.noise.max(1.0));
        if clf.predict(&x) == t {
            return Ok(x);
        }
    }
    Err(field("goal", format!("no exemplar of class {t} found for targeted runs")))
}

/// One (method, instance) run as written to the JSONL summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub kind: EstimatorKind,
    pub instance: usize,
    pub label: usize,
    pub target: Option<usize>,
    pub seed: u64,
    pub success: bool,
    pub queries: u64,
    pub iterations: usize,
    /// `None` when no adversarial ray was found.
    pub final_distortion: Option<f64>,
    pub costs: CostBook,
    pub stop: Option<StopReason>,
    pub capped: usize,
    pub error: Option<String>,
    /// `[query, distortion]`, `null` for `+∞`.
    pub points: Vec<(u64, Option<f64>)>,
}

impl RunRecord {
    pub fn trace_points(&self) -> Vec<TracePoint<f64>> {
        self.points.iter().map(|&(query, d)| TracePoint { query, distortion: d.unwrap_or(f64::INFINITY) }).collect()
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub name: String,
    pub kind: EstimatorKind,
    pub runs: usize,
    /// Runs that ended in an error (no usable trace).
    pub errors: usize,
    /// One entry per budget.
    pub mean_distortion: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    pub asr: Vec<f64>,
    /// Mean absolute AUC over `[0, last budget]`.
    pub auc: Option<f64>,
    pub auc_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub budgets: Vec<u64>,
    pub epsilon: f64,
    pub instances_generated: usize,
    pub instances_attacked: usize,
    pub instances_skipped: usize,
    pub methods: Vec<MethodMetrics>,
}

/// Recomputes the report from run records, e.g. a re-parsed summary.
pub fn report_from_records(
    records: &[RunRecord],
    methods: &[String],
    budgets: &[u64],
    epsilon: f64,
    generated: usize,
    skipped: usize,
) -> Result<MetricReport> {
    let max_budget = *budgets.last().ok_or(Error::EmptySuite)?;
    let mut out = Vec::new();
    for name in methods {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| &r.method == name).collect();
        let kind = runs.first().ok_or(Error::EmptySuite)?.kind;
        let traces: Vec<Vec<TracePoint<f64>>> = runs.iter().map(|r| r.trace_points()).collect();
        let mut mean_distortion = Vec::new();
        let mut excluded = Vec::new();
        let mut rates = Vec::new();
        for &b in budgets {
            let m = mean_distortion_at(&traces, b)?;
            mean_distortion.push(m.mean);
            excluded.push(m.excluded);
            rates.push(asr(&traces, b, epsilon)?);
        }
        let areas: Vec<f64> = traces.iter().filter_map(|t| auc(t, max_budget).ok()).filter(|a| a.is_finite()).collect();
        out.push(MethodMetrics {
            name: name.clone(),
            kind,
            runs: runs.len(),
            errors: runs.iter().filter(|r| r.error.is_some()).count(),
            mean_distortion,
            excluded,
            asr: rates,
            auc: (!areas.is_empty()).then(|| areas.iter().sum::<f64>() / areas.len() as f64),
            auc_excluded: traces.len() - areas.len(),
        });
    }
    Ok(MetricReport {
        budgets: budgets.to_vec(),
        epsilon,
        instances_generated: generated,
        instances_attacked: generated - skipped,
        instances_skipped: skipped,
        methods: out,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub suite: GeneratedSuite,
    /// Instance-major, methods in config order.
    pub records: Vec<RunRecord>,
    pub report: MetricReport,
}

/// Runs one method on one instance. Errors inside the attack are recorded,
/// not propagated.
pub fn run_one(suite: &GeneratedSuite, cfg: &SuiteConfig, method: &MethodSpec, inst: &Instance) -> RunRecord {
    let seed = mix(cfg.seed, inst.index as u64);
    let mut attack = AttackConfig { budget: cfg.max_budget(), seed, ..method.attack.clone() };
    if let Some(ex) = &inst.exemplar {
        attack.init = InitStrategy::TargetedExemplar { point: ex.clone() };
    }
    let surrogates: Vec<&dyn Differentiable<f64>> = suite.surrogates[..method.surrogates]
        .iter()
        .map(|m| m.as_differentiable().expect("suite surrogates are differentiable"))
        .collect();
    let target = match inst.goal.mode {
        GoalMode::Targeted { target, .. } => Some(target),
        GoalMode::Untargeted { .. } => None,
    };
    let mut rec = RunRecord {
        method: method.name.clone(),
        kind: method.attack.method,
        instance: inst.index,
        label: inst.goal.mode.true_label(),
        target,
        seed,
        success: false,
        queries: 0,
        iterations: 0,
        final_distortion: None,
        costs: CostBook::default(),
        stop: None,
        capped: 0,
        error: None,
        points: Vec::new(),
    };
    match run_attack(suite.target.as_classifier(), &surrogates, &inst.goal, &attack) {
        Ok(t) => {
            rec.success = t.success;
            rec.queries = t.queries;
            rec.iterations = t.iterations;
            rec.final_distortion = finite(t.final_distortion);
            rec.costs = t.costs;
            rec.stop = Some(t.stop);
            rec.capped = t.capped;
            rec.points = t.points.iter().map(|p| (p.query, finite(p.distortion))).collect();
        }
        Err(e) => {
            log::warn!("{} on instance {}: {e}", method.name, inst.index);
            rec.error = Some(e.to_string());
        }
    }
    rec
}

/// Generates the suite and runs every method on every kept instance.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteOutcome> {
    let suite = generate_suite(cfg)?;
    let jobs: Vec<(&Instance, &MethodSpec)> =
        suite.instances.iter().flat_map(|i| cfg.methods.iter().map(move |m| (i, m))).collect();
    let records: Vec<RunRecord> = jobs.par_iter().map(|(i, m)| run_one(&suite, cfg, m, i)).collect();
    let names: Vec<String> = cfg.methods.iter().map(|m| m.name.clone()).collect();
    if suite.instances.is_empty() {
        return Err(Error::EmptySuite);
    }
    let report =
        report_from_records(&records, &names, &cfg.budgets, cfg.epsilon(), suite.generated, suite.skipped.len())?;
    Ok(SuiteOutcome { suite, records, report })
}

/// One JSON document per line, LF-terminated.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Writes `traces/{method}_{instance}.csv`, `summary.jsonl`, `report.json`
/// and the models under `models/`.
pub fn write_suite(outcome: &SuiteOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("traces"))?;
    fs::create_dir_all(dir.join("models"))?;
    for r in &outcome.records {
        let name = format!("{}_{:04}.csv", r.method, r.instance);
        fs::write(dir.join("traces").join(name), trace_csv(&r.trace_points()))?;
    }
    fs::write(dir.join("summary.jsonl"), to_jsonl(&outcome.records)?)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    fs::write(dir.join("models").join("target.json"), outcome.suite.target.to_json()? + "\n")?;
    for (k, m) in outcome.suite.surrogates.iter().enumerate() {
        fs::write(dir.join("models").join(format!("surrogate_{k}.json")), m.to_json()? + "\n")?;
    }
    Ok(())
}

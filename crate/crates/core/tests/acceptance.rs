//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails when any criterion fails, except the ones listed in
//! `KNOWN_GAPS` (see the README's acceptance section).

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayopt::attack::{run_attack, AttackConfig, InitStrategy, StopReason};
use rayopt::bench::{best_at, run_suite, to_jsonl, trace_csv, SuiteConfig};
use rayopt::estimators::{estimate, EstimatorConfig, EstimatorKind};
use rayopt::modelzoo::{
    exact_ray_radius, AffineAlongRay, Classifier, Differentiable, HardLabelOracle, MlpModel, SoftmaxLinearModel,
    VoronoiModel,
};
use rayopt::priors::{surrogate_radius, surrogate_ray_gradient};
use rayopt::rayoracle::{
    binary_search_radius, ray_radius, sign_query, AttackGoal, GoalMode, Norm, RayState, Tolerance,
};
use rayopt::theory::{
    advantage_condition, crossing_interval_prior_sign_opt, lemma_checks, theory_grid, LemmaReport, TheoryRow,
};
use rayopt::vecmath::{mix, sample_gaussian, sample_unit_sphere, seeded, Rng, Vector};

/// Criteria that fail on this implementation; analysed in the README.
const KNOWN_GAPS: &[usize] = &[9];

const ORDERING_SUITE: &str = include_str!("../../../configs/ordering.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rows_pass(rows: &[&TheoryRow]) -> (usize, usize) {
    (rows.iter().filter(|r| r.pass).count(), rows.len())
}

fn theory_criteria(limit: Duration) -> [Outcome; 3] {
    let kinds = [EstimatorKind::SignOpt, EstimatorKind::PriorSignOpt, EstimatorKind::PriorOpt];
    let t = Instant::now();
    let rows = theory_grid(&kinds, 10_000, 0).expect("theory grid");
    let elapsed = t.elapsed();
    kinds.map(|k| {
        let mine: Vec<&TheoryRow> = rows.iter().filter(|r| r.kind == k).collect();
        let (ok, n) = rows_pass(&mine);
        let worst =
            mine.iter().filter(|r| !r.pass).map(|r| format!(" d={} q={} s={}", r.d, r.q, r.s)).collect::<String>();
        let fast = elapsed < limit;
        outcome(ok == n && fast, format!("{ok}/{n} cells within band, grid {:.1?}{worst}", elapsed))
    })
}

fn landmark_values() -> Outcome {
    let (lo, hi) = crossing_interval_prior_sign_opt(3072, 200).unwrap().expect("interval exists");
    let (exact, _) = advantage_condition(3072, 200, 1).unwrap();
    let approx = 2.0 / (std::f64::consts::PI * 3072.0);
    let rel = (exact - approx).abs() / approx;
    let pass = (lo - 0.01422).abs() <= 1e-3 && (hi - 0.611).abs() <= 1e-3 && rel <= 0.05;
    outcome(
        pass,
        format!("interval ({lo:.5}, {hi:.4}), threshold {exact:.3e} vs {approx:.3e} ({:.2}% off)", rel * 100.0),
    )
}

fn lemmas() -> Outcome {
    let reports: Vec<LemmaReport> = [2usize, 3, 16, 256]
        .iter()
        .enumerate()
        .map(|(i, &d)| lemma_checks(d, 100_000, mix(0, i as u64)).unwrap())
        .collect();
    let detail = reports
        .iter()
        .map(|r| format!("d={} ks={:.4}{}", r.d, r.ks_statistic, if r.pass { "" } else { " FAILED" }))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(reports.iter().all(|r| r.pass), detail)
}

/// Random rays with a finite radius, each paired with the radius where the
/// ray first re-enters the original class (`+∞` if never).
fn random_rays<M: Classifier<f64> + AffineAlongRay<f64>>(
    model: &M,
    goal: &AttackGoal<f64>,
    count: usize,
    rng: &mut Rng,
) -> Vec<(Vector<f64>, f64, f64)> {
    let y = goal.mode.true_label();
    let back = GoalMode::Targeted { target: y, label: (y + 1) % model.num_classes() };
    let mut out = Vec::new();
    while out.len() < count {
        let theta: Vector<f64> = sample_unit_sphere(model.dim(), rng);
        let r = exact_ray_radius(model, &goal.original, &theta, &goal.mode);
        if r.is_finite() && r < 100.0 {
            let past = r + 1e-9;
            let reentry = past + exact_ray_radius(model, &goal.point_along(&theta, past), &theta, &back);
            out.push((theta, r, reentry));
        }
    }
    out
}

/// Returns (max error, rays whose query count differs from `1 + ⌈log₂(hi/tol)⌉`).
fn oracle_agreement<M: Classifier<f64> + AffineAlongRay<f64>>(
    model: &M,
    goal: &AttackGoal<f64>,
    rng: &mut Rng,
) -> (f64, usize) {
    let tol = 1e-4;
    let mut worst = 0.0f64;
    let mut off = 0;
    for (theta, exact, reentry) in random_rays(model, goal, 100, rng) {
        let oracle = HardLabelOracle::new(model, None);
        let hi = exact + (reentry.min(2.0 * exact) - exact) * (0.2 + 0.8 * rand::Rng::random::<f64>(rng));
        let r = binary_search_radius(&oracle, goal, &theta, hi, Tolerance::Absolute(tol)).unwrap();
        worst = worst.max((r - exact).abs());
        let bound = 1 + (hi / tol).log2().ceil() as u64;
        off += (oracle.queries() != bound) as usize;
    }
    (worst, off)
}

fn radius_oracle() -> Outcome {
    let mut rng = seeded(6);
    let d = 8;
    let linear = SoftmaxLinearModel::<f64>::random(4, d, 1.0, &mut rng);
    let x: Vector<f64> = sample_gaussian(d, &mut rng);
    let lin_goal = AttackGoal::untargeted(x.clone(), linear.predict(&x));
    let (lin_err, lin_off) = oracle_agreement(&linear, &lin_goal, &mut rng);

    let centers: Vec<Vector<f64>> = (0..12).map(|_| sample_gaussian(d, &mut rng)).collect();
    let voronoi = VoronoiModel::new(4, &centers, (0..12).map(|i| i % 4).collect()).unwrap();
    let x = centers[0].scaled(0.9);
    let vor_goal = AttackGoal::untargeted(x.clone(), voronoi.predict(&x));
    let (vor_err, vor_off) = oracle_agreement(&voronoi, &vor_goal, &mut rng);

    let pass = lin_err <= 1e-4 && vor_err <= 1e-4 && lin_off == 0 && vor_off == 0;
    outcome(
        pass,
        format!("max error linear {lin_err:.2e} voronoi {vor_err:.2e}; query-count mismatches {}", lin_off + vor_off),
    )
}

fn min_gradient_cosine(surrogate: &dyn Differentiable<f64>, rng: &mut Rng) -> f64 {
    let d = surrogate.dim();
    let tight = Tolerance::Absolute(1e-12);
    let h = 1e-6;
    let mut worst = 1.0f64;
    let mut states = 0;
    while states < 100 {
        let x: Vector<f64> = sample_gaussian(d, rng);
        let goal = AttackGoal::untargeted(x.clone(), surrogate.predict(&x));
        let theta: Vector<f64> = sample_unit_sphere(d, rng);
        let Ok(lambda0) = surrogate_radius(surrogate, &goal, &theta, tight) else { continue };
        let Ok(analytic) = surrogate_ray_gradient(surrogate, &goal, &theta, lambda0).and_then(|g| g.exact_gradient())
        else {
            continue;
        };
        let mut fd = Vector::zeros(d);
        let mut ok = true;
        for i in 0..d {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            match (surrogate_radius(surrogate, &goal, &plus, tight), surrogate_radius(surrogate, &goal, &minus, tight))
            {
                (Ok(a), Ok(b)) => fd[i] = (a - b) / (2.0 * h),
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        worst = worst.min(analytic.dot(&fd) / (analytic.norm() * fd.norm()));
        states += 1;
    }
    worst
}

fn gradient_identity() -> Outcome {
    let mut rng = seeded(7);
    let linear = SoftmaxLinearModel::<f64>::random(3, 10, 1.0, &mut rng);
    let mlp = MlpModel::<f64>::random(3, 10, 16, &mut rng);
    let lin = min_gradient_cosine(&linear, &mut rng);
    let net = min_gradient_cosine(&mlp, &mut rng);
    outcome(lin >= 0.995 && net >= 0.995, format!("min cosine linear {lin:.6} mlp {net:.6}"))
}

fn sign_fidelity() -> Outcome {
    let mut rng = seeded(8);
    let d = 10;
    let mlp = MlpModel::<f64>::random(3, d, 16, &mut rng);
    let oracle = HardLabelOracle::unmetered(&mlp);
    let tight = Tolerance::Absolute(1e-12);
    let sigma = 1e-3;
    let (mut agree, mut probes) = (0, 0);
    while probes < 500 {
        let x: Vector<f64> = sample_gaussian(d, &mut rng);
        let goal = AttackGoal::untargeted(x.clone(), mlp.predict(&x));
        let theta: Vector<f64> = sample_unit_sphere(d, &mut rng);
        let u: Vector<f64> = sample_unit_sphere(d, &mut rng);
        let mut tilted = theta.clone();
        tilted.add_scaled(sigma, &u);
        let tilted = tilted.normalized().unwrap();
        let (Ok(g0), Ok(g1)) =
            (ray_radius(&oracle, &goal, &theta, None, tight), ray_radius(&oracle, &goal, &tilted, None, tight))
        else {
            continue;
        };
        let reference = if g1 > g0 { 1.0 } else { -1.0 };
        let one_query = sign_query(&oracle, &goal, &theta, g0, &u, sigma).unwrap();
        agree += (one_query == reference) as usize;
        probes += 1;
    }
    let rate = agree as f64 / probes as f64;
    outcome(rate >= 0.99, format!("{agree}/{probes} probes agree ({:.1}%)", rate * 100.0))
}

struct SuiteRun {
    cfg: SuiteConfig,
    outcome: rayopt::bench::SuiteOutcome,
    elapsed: Duration,
}

fn ordering(run: &SuiteRun) -> Outcome {
    let names: Vec<&str> = run.cfg.methods.iter().map(|m| m.name.as_str()).collect();
    let budget = run.cfg.max_budget();
    let mut finals: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &run.outcome.records {
        finals
            .entry(names.iter().find(|n| **n == r.method).unwrap())
            .or_default()
            .push(best_at(&r.trace_points(), budget));
    }
    let mean = |m: &str| finals[m].iter().sum::<f64>() / finals[m].len() as f64;
    let paired = |a: &str, b: &str, strict: bool| {
        let n = finals[a].len();
        let wins = finals[a].iter().zip(&finals[b]).filter(|(x, y)| if strict { x < y } else { x <= y }).count();
        (wins, n)
    };
    let (po_pso, n) = paired("prior_opt", "prior_sign_opt", true);
    let (pso_so, _) = paired("prior_sign_opt", "sign_opt", true);
    let (po2_po, _) = paired("prior_opt_2", "prior_opt", false);
    let frac = |w: usize| w as f64 / n as f64 >= 0.75;
    let (po, pso, so, po2) = (mean("prior_opt"), mean("prior_sign_opt"), mean("sign_opt"), mean("prior_opt_2"));
    let pass = po < pso
        && pso < so
        && po2 <= po
        && frac(po_pso)
        && frac(pso_so)
        && frac(po2_po)
        && run.elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "means @{budget}: prior_opt {po:.4}, prior_sign_opt {pso:.4}, sign_opt {so:.4}, prior_opt_2 {po2:.4}; \
             paired wins po<pso {po_pso}/{n}, pso<so {pso_so}/{n}, po2<=po {po2_po}/{n}; {:.1?}",
            run.elapsed
        ),
    )
}

fn plateau(run: &SuiteRun) -> Outcome {
    let budgets = &run.outcome.report.budgets;
    let (i2, i5) = (budgets.iter().position(|&b| b == 2000).unwrap(), budgets.iter().position(|&b| b == 5000).unwrap());
    let gain = |name: &str| {
        let m = run.outcome.report.methods.iter().find(|m| m.name == name).unwrap();
        m.mean_distortion[i2].unwrap() - m.mean_distortion[i5].unwrap()
    };
    let reference = gain("prior_opt");
    let pure = [gain("pure_prior"), gain("pure_prior_sign")];
    let pass = reference > 0.0 && pure.iter().all(|g| *g < 0.1 * reference);
    outcome(
        pass,
        format!("2000->5000 gain: prior_opt {reference:.4}, pure_prior {:.4}, pure_prior_sign {:.4}", pure[0], pure[1]),
    )
}

fn determinism(run: &SuiteRun) -> Outcome {
    let again = run_suite(&run.cfg).unwrap();
    let bytes = |o: &rayopt::bench::SuiteOutcome| {
        let mut s = to_jsonl(&o.records).unwrap();
        for r in &o.records {
            s.push_str(&trace_csv(&r.trace_points()));
        }
        s.push_str(&serde_json::to_string(&o.report).unwrap());
        s
    };
    let (a, b) = (bytes(&run.outcome), bytes(&again));
    outcome(a == b, format!("{} bytes of records, traces and report compared", a.len()))
}

fn accounting(run: &SuiteRun) -> Outcome {
    let mut mismatches = 0;
    for r in &run.outcome.records {
        let sign_only = !matches!(r.kind, EstimatorKind::PriorOpt | EstimatorKind::PurePrior);
        if r.costs.total() != r.queries || (sign_only && r.costs.finite_diff != 0) {
            mismatches += 1;
        }
    }

    // per-estimate split on fresh states
    let mut rng = seeded(12);
    let d = 32;
    let target = SoftmaxLinearModel::<f64>::random(5, d, 1.0, &mut rng);
    let mut estimates = 0;
    for kind in [EstimatorKind::SignOpt, EstimatorKind::PriorSignOpt, EstimatorKind::PriorOpt, EstimatorKind::PurePrior]
    {
        for _ in 0..20 {
            let x: Vector<f64> = sample_gaussian(d, &mut rng);
            let goal = AttackGoal::untargeted(x.clone(), target.predict(&x));
            let free = HardLabelOracle::unmetered(&target);
            let theta: Vector<f64> = sample_unit_sphere(d, &mut rng);
            let Ok(radius) = ray_radius(&free, &goal, &theta, None, Tolerance::default()) else { continue };
            let state = RayState::new(theta, radius, Norm::L2);
            let priors: Vec<Vector<f64>> = (0..2).map(|_| sample_unit_sphere(d, &mut rng)).collect();
            let oracle = HardLabelOracle::new(&target, None);
            let cfg = EstimatorConfig { kind, q: 10, ..EstimatorConfig::default() };
            let Ok(est) = estimate(&oracle, &goal, &state, &cfg, &priors, &mut rng) else { continue };
            let s = est.priors_used as u64;
            let expected_sign = match kind {
                EstimatorKind::PriorOpt => 10 - s,
                EstimatorKind::PurePrior => 0,
                _ => 10,
            };
            let ok = est.queries_spent == oracle.queries()
                && est.sign_queries + est.fd_queries == est.queries_spent
                && est.sign_queries == expected_sign
                && (matches!(kind, EstimatorKind::PriorOpt | EstimatorKind::PurePrior) || est.fd_queries == 0);
            mismatches += (!ok) as usize;
            estimates += 1;
        }
    }

    // a budget-stopped run still balances
    let goal_x: Vector<f64> = sample_gaussian(d, &mut rng);
    let goal = AttackGoal::untargeted(goal_x.clone(), target.predict(&goal_x));
    let cfg = AttackConfig {
        method: EstimatorKind::SignOpt,
        init: InitStrategy::Random { n: 20 },
        budget: 777,
        ..AttackConfig::default()
    };
    let trace = run_attack(&target, &[], &goal, &cfg).unwrap();
    let cut = trace.stop == StopReason::Budget && trace.costs.total() == trace.queries && trace.queries == 777;
    mismatches += (!cut) as usize;

    outcome(
        mismatches == 0,
        format!(
            "{} suite runs, {estimates} estimates, 1 budget-cut run; {mismatches} mismatches",
            run.outcome.records.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let [c1, c2, c3] = theory_criteria(Duration::from_secs(300));
    results.push((1, "sign-opt expected cosine vs closed form", c1));
    results.push((2, "prior-sign-opt expected cosine vs closed form", c2));
    results.push((3, "prior-opt expected cosine within bounds", c3));
    results.push((4, "crossing interval and advantage threshold landmarks", landmark_values()));
    results.push((5, "sphere-coordinate lemmas", lemmas()));
    results.push((6, "bisection radius vs exact radius", radius_oracle()));
    results.push((7, "surrogate ray-gradient identity", gradient_identity()));
    results.push((8, "one-query sign vs two radius searches", sign_fidelity()));

    let cfg = SuiteConfig::from_json(ORDERING_SUITE).unwrap();
    let t = Instant::now();
    let outcome_ = run_suite(&cfg).unwrap();
    let run = SuiteRun { cfg, outcome: outcome_, elapsed: t.elapsed() };
    results.push((9, "end-to-end method ordering", ordering(&run)));
    results.push((10, "pure-prior plateau", plateau(&run)));
    results.push((11, "byte-identical reruns", determinism(&run)));
    results.push((12, "query accounting", accounting(&run)));

    let mut unexpected = Vec::new();
    for (id, name, o) in &results {
        let tag = match (o.pass, KNOWN_GAPS.contains(id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => {
                unexpected.push(*id);
                "FAIL"
            }
        };
        println!("criterion {id:>2} {tag}: {name} | {}", o.detail);
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use rayopt::attack::run_attack;
use rayopt::bench::{format_sig9, run_suite, to_jsonl, trace_csv, write_suite, RunRecord, SuiteConfig};
use rayopt::estimators::EstimatorKind;
use rayopt::modelzoo::{Differentiable, Model};
use rayopt::theory::{lemma_checks, theory_grid, LemmaReport, TheoryRow};
use rayopt::{AttackConfig, Error, Goal};

#[derive(Parser)]
#[command(name = "rayopt", version, about = "Hard-label ray-search attacks with transfer priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (stdout when omitted, except for `suite`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the query budget.
    #[arg(long, global = true)]
    budget: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// One attack run.
    Attack,
    /// Every method on every generated instance.
    Suite,
    /// Closed forms against Monte Carlo over the validation grid.
    Theory,
    /// Sphere-coordinate lemma checks.
    Lemmas,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

/// Exit codes.
const CONFIG: u8 = 2;
const INFEASIBLE: u8 = 3;
const INVARIANT: u8 = 4;

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::InvalidConfig(_)
            | Error::InvalidSpec(_)
            | Error::InvalidModel(_)
            | Error::DimensionMismatch { .. }
            | Error::BadExemplar
            | Error::InfeasibleCosines(_) => CONFIG,
            Error::BudgetExhausted { .. } | Error::InitFailed | Error::NoCrossing | Error::TargetedSetupFailed => {
                INFEASIBLE
            }
            _ => INVARIANT,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AttackFile {
    target: Model<f64>,
    #[serde(default)]
    surrogates: Vec<Model<f64>>,
    goal: Goal,
    #[serde(default)]
    attack: AttackConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TheoryFile {
    kinds: Vec<EstimatorKind>,
    trials: usize,
    seed: u64,
}

impl Default for TheoryFile {
    fn default() -> Self {
        TheoryFile {
            kinds: vec![EstimatorKind::SignOpt, EstimatorKind::PriorSignOpt, EstimatorKind::PriorOpt],
            trials: 10_000,
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LemmaFile {
    dims: Vec<usize>,
    trials: usize,
    seed: u64,
}

impl Default for LemmaFile {
    fn default() -> Self {
        LemmaFile { dims: vec![2, 3, 16, 256], trials: 100_000, seed: 0 }
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<Option<T>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| fail(CONFIG, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map(Some).map_err(|e| fail(CONFIG, format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, file: &str, body: &str) -> Result<(), Failure> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::from(Error::from(e)))?;
            fs::write(dir.join(file), body).map_err(|e| Failure::from(Error::from(e)))
        }
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn attack(cli: &Cli) -> Result<(), Failure> {
    let Some(mut file) = read_config::<AttackFile>(cli.config.as_deref())? else {
        return Err(fail(CONFIG, "attack needs --config"));
    };
    if let Some(seed) = cli.seed {
        file.attack.seed = seed;
    }
    if let Some(budget) = cli.budget {
        file.attack.budget = budget;
    }
    file.target.validate()?;
    let d = file.target.as_classifier().dim();
    if file.goal.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: file.goal.dim() }.into());
    }
    if !file.goal.check(file.target.as_classifier()) {
        return Err(fail(CONFIG, "goal: the target already satisfies the success rule at the original point"));
    }
    let mut surrogates: Vec<&dyn Differentiable<f64>> = Vec::new();
    for (i, m) in file.surrogates.iter().enumerate() {
        m.validate()?;
        let s =
            m.as_differentiable().ok_or_else(|| fail(CONFIG, format!("surrogates[{i}]: model has no gradients")))?;
        if s.dim() != d {
            return Err(fail(CONFIG, format!("surrogates[{i}]: dimension {} differs from the target's {d}", s.dim())));
        }
        surrogates.push(s);
    }
    let trace = run_attack(file.target.as_classifier(), &surrogates, &file.goal, &file.attack)?;
    if trace.costs.total() != trace.queries {
        return Err(fail(INVARIANT, "query ledger does not match the per-operation costs"));
    }
    match cli.format {
        Format::Csv => emit(cli.out.as_deref(), "trace.csv", &trace_csv(&trace.points))?,
        Format::Jsonl => {
            let finite = |x: f64| x.is_finite().then_some(x);
            let record = RunRecord {
                method: file.attack.method.name().into(),
                kind: file.attack.method,
                instance: 0,
                label: file.goal.mode.true_label(),
                target: match file.goal.mode {
                    rayopt::rayoracle::GoalMode::Targeted { target, .. } => Some(target),
                    rayopt::rayoracle::GoalMode::Untargeted { .. } => None,
                },
                seed: file.attack.seed,
                success: trace.success,
                queries: trace.queries,
                iterations: trace.iterations,
                final_distortion: finite(trace.final_distortion),
                costs: trace.costs,
                stop: Some(trace.stop),
                capped: trace.capped,
                error: None,
                points: trace.points.iter().map(|p| (p.query, finite(p.distortion))).collect(),
            };
            emit(cli.out.as_deref(), "run.jsonl", &to_jsonl(&[record])?)?
        }
    }
    if !trace.success {
        return Err(fail(INFEASIBLE, "no adversarial ray found within the budget"));
    }
    Ok(())
}

fn suite(cli: &Cli) -> Result<(), Failure> {
    let Some(mut cfg) = read_config::<SuiteConfig>(cli.config.as_deref())? else {
        return Err(fail(CONFIG, "suite needs --config"));
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = cli.budget {
        cfg.budgets.retain(|&x| x < b);
        cfg.budgets.push(b);
    }
    cfg.validate()?;
    let outcome = run_suite(&cfg)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("rayopt-out"));
    write_suite(&outcome, &dir)?;
    let r = &outcome.report;
    eprintln!(
        "{} instances generated, {} attacked, {} skipped; results in {}",
        r.instances_generated,
        r.instances_attacked,
        r.instances_skipped,
        dir.display()
    );
    for m in &r.methods {
        let means: Vec<String> = m.mean_distortion.iter().map(|x| x.map_or("-".into(), format_sig9)).collect();
        eprintln!("  {:<20} mean distortion @{:?}: {}", m.name, r.budgets, means.join(" "));
    }
    Ok(())
}

fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut s =
        String::from("kind,d,q,s,alphas,trials,mc_mean,stderr_mean,cf_mean,cf_lo,cf_hi,mc_sq,stderr_sq,cf_sq,pass\n");
    let opt = |x: Option<f64>| x.map_or(String::new(), format_sig9);
    for r in rows {
        let alphas: Vec<String> = r.alphas.iter().map(|&a| format_sig9(a)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.kind.name(),
            r.d,
            r.q,
            r.s,
            alphas.join(";"),
            r.trials,
            format_sig9(r.mc_mean),
            format_sig9(r.stderr_mean),
            opt(r.cf_mean),
            opt(r.cf_bounds.map(|b| b.0)),
            opt(r.cf_bounds.map(|b| b.1)),
            format_sig9(r.mc_sq),
            format_sig9(r.stderr_sq),
            format_sig9(r.cf_sq),
            r.pass
        );
    }
    s
}

fn theory(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = read_config::<TheoryFile>(cli.config.as_deref())?.unwrap_or_default();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let rows = theory_grid(&cfg.kinds, cfg.trials, cfg.seed)?;
    match cli.format {
        Format::Csv => emit(cli.out.as_deref(), "theory.csv", &theory_csv(&rows))?,
        Format::Jsonl => emit(cli.out.as_deref(), "theory.jsonl", &to_jsonl(&rows)?)?,
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(fail(INVARIANT, format!("{failed} of {} cells outside the Monte Carlo band", rows.len())));
    }
    Ok(())
}

fn lemmas_csv(reports: &[LemmaReport]) -> String {
    let mut s = String::from("d,trials,check,mc,closed_form,stderr,pass\n");
    for r in reports {
        for (name, c) in
            [("abs_mean", r.abs_mean), ("sq_mean", r.sq_mean), ("conditional_abs_mean", r.conditional_abs_mean)]
        {
            let _ = writeln!(
                s,
                "{},{},{name},{},{},{},{}",
                r.d,
                r.trials,
                format_sig9(c.mc),
                format_sig9(c.closed_form),
                format_sig9(c.stderr),
                c.pass
            );
        }
        let _ = writeln!(s, "{},{},ks_statistic,{},,,{}", r.d, r.trials, format_sig9(r.ks_statistic), r.ks_pass);
    }
    s
}

fn lemmas(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = read_config::<LemmaFile>(cli.config.as_deref())?.unwrap_or_default();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let reports = cfg
        .dims
        .iter()
        .enumerate()
        .map(|(i, &d)| lemma_checks(d, cfg.trials, rayopt::vecmath::mix(cfg.seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    match cli.format {
        Format::Csv => emit(cli.out.as_deref(), "lemmas.csv", &lemmas_csv(&reports))?,
        Format::Jsonl => emit(cli.out.as_deref(), "lemmas.jsonl", &to_jsonl(&reports)?)?,
    }
    if reports.iter().any(|r| !r.pass) {
        return Err(fail(INVARIANT, "a lemma check failed"));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.budget.is_some() && matches!(cli.command, Command::Theory | Command::Lemmas) {
        log::warn!("--budget has no effect on this subcommand");
    }
    let result = match cli.command {
        Command::Attack => attack(&cli),
        Command::Suite => suite(&cli),
        Command::Theory => theory(&cli),
        Command::Lemmas => lemmas(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! Command line interface.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::expr::CustomProblem;
use super::{
    boundary_arclength, compare_with_oracle, convergence_study, manufactured_active, manufactured_inactive,
    operator_sweep, random_instance, ConvergenceTable, Domain, MeshFamily, StudyConfig, StudyMeta,
};
use crate::control_ops::BoxBounds;
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};
use crate::optimizer::{qp_oracle, ControlOptions, ControlProblem, ProblemSpec, ORACLE_MAX_EDGES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "crbc", version, about = "Crouzeix-Raviart Dirichlet boundary control solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one problem and write a summary and the boundary control.
    Solve(SolveArgs),
    /// Convergence table over mesh levels.
    Study(StudyArgs),
    /// Compare the projected gradient solver with the dense QP oracle on small meshes.
    OracleCheck(OracleArgs),
    /// Enrichment orthogonality and inverse-projection norms per level.
    Operators(OperatorArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct Common {
    /// square, pentagon, or `polygon FILE` (one `x y` corner per line, counterclockwise)
    #[arg(long, num_args = 1..=2, value_names = ["KIND", "FILE"], default_values = ["square"])]
    domain: Vec<String>,
    /// Output format.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Directory for output files; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProblemArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Control bounds, overriding the problem's own.
    #[arg(long, num_args = 2, value_names = ["UA", "UB"], allow_hyphen_values = true)]
    bounds: Option<Vec<f64>>,
    /// inactive, active, or `custom FILE` (TOML with `source` and `target` expressions)
    #[arg(long, num_args = 1..=2, value_names = ["KIND", "FILE"], default_values = ["inactive"])]
    problem: Vec<String>,
    /// Lower bound of the active problem as a fraction of -pi/alpha.
    #[arg(long, default_value_t = 0.5)]
    clip: f64,
    /// KKT tolerance of the projected gradient method.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    problem: ProblemArgs,
    /// Mesh level.
    #[arg(long, default_value_t = 2)]
    levels: usize,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    problem: ProblemArgs,
    /// Number of levels.
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 0)]
    first_level: usize,
    /// Reference level for problems without closed form (default: finest + 3).
    #[arg(long)]
    reference_level: Option<usize>,
    /// Exit with status 4 if the last control rate falls below this.
    #[arg(long)]
    require_eoc: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Number of levels, starting from 0; levels beyond the oracle's size limit are skipped.
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tolerated L2(Gamma) control deviation.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Debug, Args)]
struct OperatorArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    /// Random pairs per level for the orthogonality check.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (program name first) and runs the command, returning the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => solve(a, stdout),
        Command::Study(a) => study(a, stdout),
        Command::OracleCheck(a) => oracle_check(a, stdout, stderr),
        Command::Operators(a) => operators(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::InvalidParameter(_)
                | Error::InvalidBounds { .. }
                | Error::Parse(_)
                | Error::NonConvexPolygon { .. }
                | Error::Io(_) => EXIT_USAGE,
                _ => EXIT_SOLVER,
            }
        }
    }
}

fn parse_domain(words: &[String]) -> Result<Domain> {
    match words {
        [k] if k == "square" => Ok(Domain::UnitSquare),
        [k] if k == "pentagon" => Ok(Domain::Pentagon),
        [k, file] if k == "polygon" => Ok(Domain::Polygon(read_polygon(Path::new(file))?)),
        _ => Err(Error::InvalidParameter(format!(
            "--domain expects square, pentagon or `polygon FILE`, got {:?}",
            words.join(" ")
        ))),
    }
}

/// Reads polygon corners, one `x y` pair per line; `#` starts a comment.
pub fn read_polygon(path: &Path) -> Result<Vec<Point>> {
    let text = std::fs::read_to_string(path)?;
    let mut corners = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if nums.len() != 2 {
            return Err(Error::Parse(format!("{}:{}: expected `x y`", path.display(), i + 1)));
        }
        corners.push([nums[0], nums[1]]);
    }
    Ok(corners)
}

fn build_problem(args: &ProblemArgs, domain: &Domain, mesh: Arc<Mesh>) -> Result<ProblemSpec> {
    let manufactured = |kind: &str| -> Result<()> {
        if *domain != Domain::UnitSquare {
            return Err(Error::InvalidParameter(format!(
                "the {kind} manufactured problem is defined on the unit square only"
            )));
        }
        Ok(())
    };
    let mut spec = match args.problem.as_slice() {
        [k] if k == "inactive" => {
            manufactured(k)?;
            manufactured_inactive(mesh, args.alpha)?
        }
        [k] if k == "active" => {
            manufactured(k)?;
            manufactured_active(mesh, args.alpha, args.clip)?
        }
        [k, file] if k == "custom" => {
            let c = CustomProblem::load(Path::new(file))?;
            let (f, yd) = c.fields()?;
            let alpha = c.alpha.unwrap_or(args.alpha);
            let [ua, ub] = c.bounds.unwrap_or([-1.0, 1.0]);
            ProblemSpec::new(mesh, alpha, BoxBounds::new(ua, ub)?, move |x| f(x), move |x| yd(x))?
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "--problem expects inactive, active or `custom FILE`, got {:?}",
                other.join(" ")
            )))
        }
    };
    if let Some(b) = &args.bounds {
        spec.bounds = BoxBounds::new(b[0], b[1])?;
        // Overridden bounds may activate the constraint, so the closed form no longer applies.
        spec.exact = None;
    }
    Ok(spec)
}

fn control_options(args: &ProblemArgs) -> ControlOptions {
    ControlOptions { tol: args.tol, max_iter: args.max_iter, ..Default::default() }
}

fn emit(common: &Common, name: &str, csv: &str, json: &str, stdout: &mut dyn Write) -> Result<()> {
    let (text, ext) = match common.format {
        Format::Csv => (csv, "csv"),
        Format::Json => (json, "json"),
    };
    match &common.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{name}.{ext}")), text)?;
        }
        None => {
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn rows_to_csv<T: Serialize>(rows: &[T]) -> String {
    let values: Vec<serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .map(|r| match serde_json::to_value(r).expect("rows serialize") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("rows are structs"),
        })
        .collect();
    let Some(first) = values.first() else { return String::new() };
    let keys: Vec<&String> = first.keys().collect();
    let mut s = keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",");
    s.push('\n');
    for v in &values {
        let line: Vec<String> = keys
            .iter()
            .map(|k| match &v[*k] {
                serde_json::Value::Number(n) if n.is_f64() => format!("{:.16e}", n.as_f64().unwrap()),
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(t) => t.clone(),
                other => other.to_string(),
            })
            .collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn flags_of(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct SolveSummary {
    domain: String,
    level: usize,
    h: f64,
    boundary_edges: usize,
    alpha: f64,
    u_a: f64,
    u_b: f64,
    objective: f64,
    kkt_residual: f64,
    iterations: usize,
    active_components: usize,
    control_error: Option<f64>,
    state_error: Option<f64>,
    flux_error: Option<f64>,
}

#[derive(Serialize)]
struct BoundarySample {
    edge: usize,
    s_start: f64,
    s_end: f64,
    x_mid: f64,
    y_mid: f64,
    control: f64,
    flux_start: f64,
}

fn solve(args: &SolveArgs, stdout: &mut dyn Write) -> Result<i32> {
    let domain = parse_domain(&args.common.domain)?;
    let family = MeshFamily::new(domain.clone())?;
    let mesh = family.level(args.levels)?;
    let spec = build_problem(&args.problem, &domain, mesh.clone())?;
    let sol = ControlProblem::new(spec.clone())?.solve_control(&control_options(&args.problem))?;
    let ex = spec.exact.as_ref();
    let summary = SolveSummary {
        domain: domain.name().into(),
        level: args.levels,
        h: mesh.h,
        boundary_edges: mesh.num_boundary_edges(),
        alpha: spec.alpha,
        u_a: spec.bounds.u_a,
        u_b: spec.bounds.u_b,
        objective: sol.objective,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
        active_components: sol.active_count(&spec.bounds, 1e-12),
        control_error: ex.map(|e| sol.control.l2_error(|x, n| (e.control)(x, n))),
        state_error: ex.map(|e| sol.state.composite.l2_error(|x| (e.state)(x))),
        flux_error: ex.map(|e| sol.flux.l2_error(|x, n| (e.flux)(x, n))),
    };
    let s = boundary_arclength(&mesh);
    let samples: Vec<BoundarySample> = (0..mesh.num_boundary_edges())
        .map(|i| {
            let mid = mesh.edges[mesh.boundary_cycle[i]].midpoint;
            BoundarySample {
                edge: i,
                s_start: s[i],
                s_end: s[i + 1],
                x_mid: mid[0],
                y_mid: mid[1],
                control: sol.control.coeffs[i],
                flux_start: sol.flux.coeffs[i],
            }
        })
        .collect();
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let samples_json = serde_json::to_string_pretty(&samples).expect("samples serialize");
    emit(&args.common, "summary", &rows_to_csv(std::slice::from_ref(&summary)), &summary_json, stdout)?;
    emit(&args.common, "boundary_control", &rows_to_csv(&samples), &samples_json, stdout)?;
    Ok(EXIT_OK)
}

fn study(args: &StudyArgs, stdout: &mut dyn Write) -> Result<i32> {
    let domain = parse_domain(&args.common.domain)?;
    let family = MeshFamily::new(domain.clone())?;
    let template = build_problem(&args.problem, &domain, family.level(args.first_level)?)?;
    let levels: Vec<usize> = (args.first_level..args.first_level + args.levels).collect();
    let config = StudyConfig { levels, reference_level: args.reference_level, options: control_options(&args.problem) };
    let table = convergence_study(&template, &family, &config)?;
    let meta = StudyMeta {
        flags: flags_of(&[
            ("domain", args.common.domain.join(" ")),
            ("problem", args.problem.problem.join(" ")),
            ("alpha", args.problem.alpha.to_string()),
            ("levels", args.levels.to_string()),
            ("first_level", args.first_level.to_string()),
            ("bounds", format!("{} {}", template.bounds.u_a, template.bounds.u_b)),
        ]),
        seed: args.seed,
        timestamp: now(),
    };
    emit(&args.common, "study", &table.to_csv(), &table.to_json(&meta), stdout)?;
    if let Some(floor) = args.require_eoc {
        let rates = table.eoc("control_error").unwrap_or_default();
        if rates.last().copied().flatten().is_none_or(|r| r < floor) {
            return Ok(EXIT_THRESHOLD);
        }
    }
    Ok(EXIT_OK)
}

/// Parses a table written by `study`.
pub fn read_table(path: &Path) -> Result<ConvergenceTable> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(ConvergenceTable::from_json(&text)?.0)
    } else {
        ConvergenceTable::from_csv(&text)
    }
}

#[derive(Serialize)]
struct OracleRow {
    level: usize,
    instance: usize,
    boundary_edges: usize,
    control_distance: f64,
    objective_gap: f64,
    objective: f64,
    kkt_residual: f64,
}

fn oracle_check(args: &OracleArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let family = MeshFamily::new(parse_domain(&args.common.domain)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut rows = Vec::new();
    for level in 0..args.levels {
        let mesh = family.level(level)?;
        if mesh.num_boundary_edges() > ORACLE_MAX_EDGES {
            continue;
        }
        for instance in 0..args.instances {
            let spec = random_instance(mesh.clone(), &mut rng)?;
            let c = compare_with_oracle(&spec, &ControlOptions::default())?;
            rows.push(OracleRow {
                level,
                instance,
                boundary_edges: c.boundary_edges,
                control_distance: c.control_distance,
                objective_gap: c.objective_gap,
                objective: c.objective,
                kkt_residual: c.kkt_residual,
            });
        }
    }
    if rows.is_empty() {
        let m = family.level(0)?;
        // Surface the size refusal for the coarsest mesh.
        qp_oracle(&random_instance(m, &mut rng)?)?;
    }
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    emit(&args.common, "oracle_check", &rows_to_csv(&rows), &json, stdout)?;
    let worst = rows.iter().map(|r| r.control_distance).fold(0.0, f64::max);
    let worst_gap = rows.iter().map(|r| r.objective_gap / (1.0 + r.objective.abs())).fold(0.0, f64::max);
    writeln!(stderr, "max control deviation {worst:.3e}, max relative objective gap {worst_gap:.3e}")?;
    Ok(if worst <= args.tol && worst_gap <= 1e-12 { EXIT_OK } else { EXIT_THRESHOLD })
}

fn operators(args: &OperatorArgs, stdout: &mut dyn Write) -> Result<i32> {
    let family = MeshFamily::new(parse_domain(&args.common.domain)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let rows = operator_sweep(&family, args.levels, args.pairs, &mut rng)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    emit(&args.common, "operators", &rows_to_csv(&rows), &json, stdout)?;
    Ok(EXIT_OK)
}

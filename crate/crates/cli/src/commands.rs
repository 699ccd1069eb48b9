//! Command-line interface.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use intentgrasp_core::persist::write_atomic;
use intentgrasp_core::{
    builtin_spec, generate, load_dataset, load_model, save_dataset, save_model, Dataset, DivergenceReport,
    FeatureBounds, GeneratorSpec, Solver, ZoneLayout,
};
use serde::Serialize;

use crate::error::CliError;
use crate::ops::{
    ambiguity_report, fit_dataset, intent_report, parse_floats, plan_report, resolve_layout, IntentReport,
    ModelSummary, PlanReport, PlanRequest,
};
use crate::reference::{reproduce, ReproductionReport};
use crate::service::{self, Entry, Registry};

#[derive(Debug, Parser)]
#[command(name = "intentgrasp", version, about = "Intent-aware grasp planning")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    #[value(alias = "projected-gradient")]
    Pg,
    #[value(alias = "augmented-lagrangian")]
    Al,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Pg => Solver::ProjectedGradient,
            SolverArg::Al => Solver::AugmentedLagrangian,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a built-in or JSON generator spec.
    Generate {
        /// Built-in name (cup7, cup5, cup4, flashlight7) or spec file.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "INTENTGRASP_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        samples_per_zone: Option<usize>,
    },
    /// Fit a multi-task model on a dataset.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        /// dataset, full, seven, five, four, or comma-separated zone bitmasks.
        #[arg(long, default_value = "dataset")]
        layout: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn per-task intent probabilities into a target vector.
    Intent {
        /// Take the layout from this model file.
        #[arg(long, conflicts_with = "layout")]
        model: Option<PathBuf>,
        /// Cup layout: seven, five, four, full or zone bitmasks.
        #[arg(long)]
        layout: Option<String>,
        #[arg(short = 'w', long = "intent")]
        w: String,
        #[arg(long)]
        clarify_threshold: Option<f64>,
    },
    /// Plan a grasp pose matching the target vector.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'w', long = "intent")]
        w: String,
        #[arg(long, value_enum, default_value = "pg")]
        solver: SolverArg,
        #[arg(long, default_value_t = 0)]
        restarts: usize,
        #[arg(long, env = "INTENTGRASP_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long, allow_hyphen_values = true, requires = "upper")]
        lower: Option<String>,
        #[arg(long, allow_hyphen_values = true, requires = "lower")]
        upper: Option<String>,
        /// Training data to pick the initial pose from.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        clarify_threshold: Option<f64>,
    },
    /// KL divergence matrices between the task populations of a model.
    Ambiguity {
        #[arg(long)]
        model: PathBuf,
        /// Samples for tasks without a singleton class.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Recompute the reference target vectors and reconstructions.
    ReproduceTables,
    /// Run the HTTP service with the built-in models.
    Serve {
        #[arg(long, default_value = service::DEFAULT_LISTEN)]
        listen: SocketAddr,
        /// Extra model files, registered under their file stem.
        #[arg(long)]
        model: Vec<PathBuf>,
    },
}

/// Parses `args` and runs the command, writing results to `out`. Returns the
/// process exit code; errors are written to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let json = cli.json;
    match &cli.command {
        Command::Generate {
            spec,
            out: path,
            seed,
            samples_per_zone,
        } => {
            let mut spec = load_spec(spec)?;
            if let Some(s) = seed {
                spec.seed = *s;
            }
            if let Some(n) = samples_per_zone {
                spec.samples_per_zone = *n;
            }
            let dataset = Dataset {
                object: spec.object.clone(),
                layout: spec.layout.clone(),
                schema: spec.schema.clone(),
                samples: generate(&spec)?,
            };
            save_dataset(path, &dataset)?;
            let summary = GenerateSummary {
                path: path.display().to_string(),
                object: dataset.object,
                samples: dataset.samples.len(),
                seed: spec.seed,
            };
            emit(out, json, &summary, |o| {
                writeln!(
                    o,
                    "wrote {} samples of {} (seed {}) to {}",
                    summary.samples, summary.object, summary.seed, summary.path
                )
            })
        }
        Command::Fit {
            dataset,
            layout,
            out: path,
        } => {
            let dataset = load_dataset(dataset, None)?;
            let layout = resolve_layout(&dataset.layout, layout)?;
            let model = fit_dataset(&dataset, &layout)?;
            save_model(path, &model)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let summary = ModelSummary::of(&name, &model);
            emit(out, json, &summary, |o| {
                writeln!(
                    o,
                    "fitted {} classes on {} samples",
                    summary.classes.len(),
                    dataset.samples.len()
                )?;
                for c in &summary.classes {
                    writeln!(o, "  {:<24} prior {:.6}", c.zone.label, c.prior)?;
                }
                writeln!(o, "prior sum {:.6}", summary.prior_sum)?;
                writeln!(o, "wrote {}", path.display())
            })
        }
        Command::Intent {
            model,
            layout,
            w,
            clarify_threshold,
        } => {
            let layout = match (model, layout) {
                (Some(m), _) => load_model(m, None)?.layout().clone(),
                (None, choice) => resolve_layout(&ZoneLayout::seven_zone(), choice.as_deref().unwrap_or("seven"))?,
            };
            let report = intent_report(&layout, &parse_floats(w)?, *clarify_threshold)?;
            emit(out, json, &report, |o| write_intent(o, &report))
        }
        Command::Plan {
            model,
            w,
            solver,
            restarts,
            seed,
            max_iter,
            lower,
            upper,
            dataset,
            out: path,
            clarify_threshold,
        } => {
            let model = load_model(model, None)?;
            let candidates = match dataset {
                Some(p) => load_dataset(p, Some(model.schema()))?.samples,
                None => Vec::new(),
            };
            let bounds = match (lower, upper) {
                (Some(l), Some(u)) => Some(FeatureBounds {
                    lower: parse_floats(l)?,
                    upper: parse_floats(u)?,
                }),
                _ => None,
            };
            let request = PlanRequest {
                solver: (*solver).into(),
                seed: seed.unwrap_or(0),
                restarts: *restarts,
                max_iter: *max_iter,
                bounds,
                clarification_threshold: *clarify_threshold,
                ..PlanRequest::new(parse_floats(w)?)
            };
            if !json {
                // The target is shown before the (possibly slow) solve.
                let intent = intent_report(model.layout(), &request.w, request.clarification_threshold)?;
                write_intent(out, &intent).map_err(io_error)?;
                out.flush().map_err(io_error)?;
            }
            let report = plan_report(&model, &candidates, &request, None)?;
            if let Some(p) = path {
                write_json_file(p, &report)?;
            }
            if report.non_converged && json {
                writeln!(err, "NONCONVERGED").map_err(io_error)?;
            }
            emit(out, json, &report, |o| {
                write_plan(o, &report, model.schema().features())
            })
        }
        Command::Ambiguity { model, dataset } => {
            let model = load_model(model, None)?;
            let samples = match dataset {
                Some(p) => Some(load_dataset(p, Some(model.schema()))?.samples),
                None => None,
            };
            let report = ambiguity_report(&model, samples.as_deref())?;
            emit(out, json, &report, |o| write_divergence(o, &report))
        }
        Command::ReproduceTables => {
            let report = reproduce()?;
            emit(out, json, &report, |o| write_reproduction(o, &report))?;
            if report.ok() {
                Ok(())
            } else {
                Err(CliError::Mismatch(format!("{} reference checks failed", report.failed)))
            }
        }
        Command::Serve { listen, model } => {
            let registry = Arc::new(Registry::with_builtins()?);
            let runtime = tokio::runtime::Runtime::new().map_err(io_error)?;
            runtime.block_on(async {
                for path in model {
                    let name = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .ok_or_else(|| CliError::validation(format!("{} has no file name", path.display())))?;
                    let entry = Entry {
                        model: load_model(path, None)?,
                        samples: Vec::new(),
                    };
                    registry
                        .publish(&name, entry)
                        .await
                        .map_err(|_| CliError::validation(format!("model {name:?} is registered twice")))?;
                }
                writeln!(err, "listening on http://{listen}").map_err(io_error)?;
                service::serve(*listen, registry).await.map_err(io_error)
            })
        }
    }
}

#[derive(Debug, Serialize)]
struct GenerateSummary {
    path: String,
    object: String,
    samples: usize,
    seed: u64,
}

fn load_spec(spec: &str) -> Result<GeneratorSpec, CliError> {
    if let Ok(s) = builtin_spec(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::validation(format!(
            "{spec:?} is neither a built-in spec nor an existing file"
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{spec}: {e}")))?;
    let parsed: GeneratorSpec =
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{spec}: {e}")))?;
    parsed.validate()?;
    Ok(parsed)
}

fn io_error(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn emit<T: Serialize>(
    out: &mut dyn Write,
    json: bool,
    value: &T,
    text: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), CliError> {
    if json {
        let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(out, "{s}").map_err(io_error)
    } else {
        text(out).map_err(io_error)
    }
}

fn write_intent(o: &mut dyn Write, r: &IntentReport) -> std::io::Result<()> {
    writeln!(o, "inaction {:.4}", r.inaction)?;
    match &r.v {
        None => writeln!(o, "CLARIFICATION NEEDED: inaction reaches the threshold"),
        Some(v) => {
            writeln!(o, "target v:")?;
            for (z, p) in r.zones.iter().zip(v) {
                writeln!(o, "  {:<24} {:.4}", z.label, p)?;
            }
            if let Some(w) = &r.reconstruction_of_v {
                write_tasks(o, "reconstruction of v", &r.tasks, w)?;
            }
            Ok(())
        }
    }
}

fn write_tasks(o: &mut dyn Write, title: &str, tasks: &[String], w: &[f64]) -> std::io::Result<()> {
    let parts: Vec<String> = tasks.iter().zip(w).map(|(t, p)| format!("{t} {p:.4}")).collect();
    writeln!(o, "{title}: {}", parts.join(", "))
}

fn write_plan(
    o: &mut dyn Write,
    r: &PlanReport,
    features: &[intentgrasp_core::taskmodel::FeatureDescriptor],
) -> std::io::Result<()> {
    let Some(p) = &r.plan else {
        return Ok(());
    };
    let status = if p.converged { "converged" } else { "NONCONVERGED" };
    writeln!(o, "{status}: {} after {} iterations", p.solver.id(), p.iterations)?;
    writeln!(
        o,
        "residual {:.6e} (initial pose {:.6e})",
        p.residual, p.initial_residual
    )?;
    writeln!(o, "pose:")?;
    for (f, x) in features.iter().zip(&p.x) {
        writeln!(o, "  {:<12} {:>12.6} {}", f.name, x, f.unit)?;
    }
    writeln!(o, "posterior:")?;
    for (z, q) in r.intent.zones.iter().zip(&p.posterior) {
        writeln!(o, "  {:<24} {:.4}", z.label, q)?;
    }
    if let Some(w) = &r.reconstructed_intent {
        write_tasks(o, "reconstructed intent", &r.intent.tasks, w)?;
    }
    if let Some(v) = r.constraint_violation {
        writeln!(o, "constraint violation {v:.3e}")?;
    }
    Ok(())
}

fn write_matrix(o: &mut dyn Write, title: &str, tasks: &[String], m: &[Vec<f64>]) -> std::io::Result<()> {
    writeln!(o, "{title}:")?;
    write!(o, "  {:<10}", "")?;
    for t in tasks {
        write!(o, " {t:>10}")?;
    }
    writeln!(o)?;
    for (t, row) in tasks.iter().zip(m) {
        write!(o, "  {t:<10}")?;
        for x in row {
            write!(o, " {x:>10.4}")?;
        }
        writeln!(o)?;
    }
    Ok(())
}

fn write_divergence(o: &mut dyn Write, r: &DivergenceReport) -> std::io::Result<()> {
    write_matrix(o, "KL(row || column)", &r.tasks, &r.nonsymmetric)?;
    write_matrix(o, "symmetric", &r.tasks, &r.symmetric)?;
    write_matrix(o, "Pinsker bound", &r.tasks, &r.pinsker)?;
    let ev: Vec<String> = r.eigenvalues.iter().map(|e| format!("{e:.4}")).collect();
    writeln!(o, "eigenvalues: {}", ev.join(", "))?;
    if !r.substituted.is_empty() {
        writeln!(o, "fitted from samples: {}", r.substituted.join(", "))?;
    }
    Ok(())
}

fn write_reproduction(o: &mut dyn Write, r: &ReproductionReport) -> std::io::Result<()> {
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    for c in &r.checks {
        let tag = match (c.asserted, c.pass) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        writeln!(o, "{tag} {}", c.name)?;
        writeln!(o, "     expected {}", fmt(&c.expected))?;
        writeln!(o, "     computed {}", fmt(&c.computed))?;
        if let Some(n) = &c.note {
            writeln!(o, "     not asserted: {n}")?;
        }
    }
    writeln!(o, "{} passed, {} failed", r.passed, r.failed)
}

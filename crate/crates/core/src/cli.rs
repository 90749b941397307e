//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage or parameter error, 3 unreadable or invalid
//! input data, 4 fit did not converge (results are still written), 5 I/O
//! failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::basis::BasisSpec;
use crate::datagen::{Scenario, ScenarioSpec, NORMAL_SAMPLER};
use crate::error::Error;
use crate::io::{emit_curves, emit_results, ingest_curves, read_labels, write_atomic, Layout};
use crate::metrics::evaluate;
use crate::model::FitResult;
use crate::robust::{fit_robust_em, RobustFitConfig};
use crate::standard::{fit_standard_em, StandardFitConfig, StandardInit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "curvemix",
    version,
    about = "Clustering of curves with regression mixtures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic curve set with known labels.
    Generate(GenerateArgs),
    /// Fit a regression mixture and write labels, parameters, trace and mean curves.
    Fit(FitArgs),
    /// Compare predicted labels with reference labels.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    #[value(name = "two_class")]
    TwoClass,
    #[value(name = "three_class")]
    ThreeClass,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Long,
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    Standard,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Poly,
    Bspline,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// `long` keeps the true labels; `wide` drops them.
    #[arg(long, value_enum, default_value = "long")]
    pub layout: LayoutArg,
}

#[derive(Debug, clap::Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub engine: EngineArg,
    /// Number of clusters; standard engine only.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value = "poly")]
    pub basis: BasisArg,
    #[arg(long)]
    pub degree: usize,
    /// Equally spaced interior knots over the data range; bspline only.
    #[arg(long)]
    pub knots: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    #[arg(long = "max-iter", default_value_t = 1000)]
    pub max_iter: usize,
    /// Seeds the random starting partitions of the standard engine.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random starts for the standard engine; the best final fit is kept.
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// CSV with `curve_id` and `cluster` (or `label`) columns.
    #[arg(long)]
    pub pred: PathBuf,
    /// Same format, or long curve data with a `label` column.
    #[arg(long)]
    pub truth: PathBuf,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) => EXIT_USAGE,
        Error::InvalidInput(_) | Error::Parse { .. } => EXIT_INPUT,
        Error::Io { .. } | Error::Json(_) => EXIT_IO,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Fit(a) => fit(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Prints a line to stdout, ignoring a closed pipe.
fn say(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

#[derive(Serialize)]
struct GenerateMeta<'a> {
    scenario: &'a str,
    seed: u64,
    n: usize,
    m: usize,
    normal_sampler: &'a str,
}

/// Path of the metadata file written next to generated data.
pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn generate(a: &GenerateArgs) -> std::result::Result<i32, Failure> {
    let scenario = match a.scenario {
        ScenarioArg::TwoClass => Scenario::TwoClass,
        ScenarioArg::ThreeClass => Scenario::ThreeClass,
    };
    let spec = ScenarioSpec::new(scenario, a.seed);
    let set = spec.generate()?;
    let layout = match a.layout {
        LayoutArg::Long => Layout::Long,
        LayoutArg::Wide => Layout::Wide,
    };
    emit_curves(&set, &a.out, layout)?;
    let meta = GenerateMeta {
        scenario: scenario.name(),
        seed: a.seed,
        n: spec.n,
        m: spec.m,
        normal_sampler: NORMAL_SAMPLER,
    };
    let meta_file = meta_path(&a.out);
    write_atomic(
        &meta_file,
        &serde_json::to_vec_pretty(&meta).map_err(Error::from)?,
    )?;
    eprintln!("wrote {} curves to {}", set.n(), a.out.display());
    Ok(EXIT_OK)
}

fn fit(a: &FitArgs) -> std::result::Result<i32, Failure> {
    match (a.engine, a.k) {
        (EngineArg::Robust, Some(_)) => {
            return Err(usage(
                "--K is not accepted by the robust engine, which selects K itself",
            ))
        }
        (EngineArg::Standard, None) => return Err(usage("the standard engine requires --K")),
        _ => {}
    }
    if a.basis == BasisArg::Poly && a.knots.is_some() {
        return Err(usage("--knots only applies to --basis bspline"));
    }

    let data = ingest_curves(&a.input)?;
    let basis = match a.basis {
        BasisArg::Poly => BasisSpec::polynomial(a.degree),
        BasisArg::Bspline => {
            let (lo, hi) = data.x_range();
            BasisSpec::bspline_uniform(a.degree, a.knots.unwrap_or(0), lo, hi)?
        }
    };
    let result: FitResult = match a.engine {
        EngineArg::Standard => {
            let config = StandardFitConfig {
                k: a.k.expect("checked above"),
                epsilon: a.epsilon,
                max_iter: a.max_iter,
                n_restarts: a.restarts,
                seed: a.seed,
            };
            fit_standard_em(&data, &basis, &config, StandardInit::Random)?
        }
        EngineArg::Robust => {
            let config = RobustFitConfig {
                epsilon: a.epsilon,
                max_iter: a.max_iter,
                ..RobustFitConfig::default()
            };
            fit_robust_em(&data, &basis, &config)?
        }
    };
    let bundle = emit_results(&result, &data, &a.out)?;
    for w in &result.trace.warnings {
        eprintln!("warning: {w}");
    }
    say(&format!(
        "K={} iterations={} converged={} loglik={} out={}",
        result.k(),
        result.iterations,
        result.converged,
        result.trace.records.last().map_or(f64::NAN, |r| r.loglik),
        bundle.labels.parent().unwrap_or(Path::new(".")).display()
    ));
    if !result.converged {
        eprintln!("error: no convergence within {} iterations", a.max_iter);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

fn evaluate_cmd(a: &EvaluateArgs) -> std::result::Result<i32, Failure> {
    let pred = read_labels(&a.pred)?;
    let truth = read_labels(&a.truth)?;
    if pred.len() != truth.len() {
        return Err(Error::input(format!(
            "{} predicted labels but {} reference labels",
            pred.len(),
            truth.len()
        ))
        .into());
    }
    let lookup: std::collections::HashMap<&str, usize> =
        pred.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut p = Vec::with_capacity(truth.len());
    let mut t = Vec::with_capacity(truth.len());
    for (id, l) in &truth {
        let Some(&pl) = lookup.get(id.as_str()) else {
            return Err(Error::input(format!("curve {id:?} has no predicted label")).into());
        };
        p.push(pl);
        t.push(*l);
    }
    let metrics = evaluate(&p, &t)?;
    say(&serde_json::to_string_pretty(&metrics).map_err(Error::from)?);
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robust_engine_rejects_k() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = run([
            "curvemix",
            "fit",
            "--input",
            "missing.csv",
            "--engine",
            "robust",
            "--K",
            "2",
            "--degree",
            "1",
            "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([out.display().to_string()]));
        assert_eq!(code, EXIT_USAGE);
        assert!(!out.exists());
    }

    #[test]
    fn standard_engine_requires_k() {
        let code = run([
            "curvemix",
            "fit",
            "--input",
            "missing.csv",
            "--engine",
            "standard",
            "--degree",
            "1",
            "--out",
            "x",
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["curvemix", "generate", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn missing_input_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "curvemix".to_string(),
            "fit".into(),
            "--input".into(),
            dir.path().join("nope.csv").display().to_string(),
            "--engine".into(),
            "robust".into(),
            "--degree".into(),
            "1".into(),
            "--out".into(),
            dir.path().join("o").display().to_string(),
        ]);
        assert_eq!(code, EXIT_IO);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::InvalidParameter("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), EXIT_INPUT);
        let parse = Error::Parse {
            path: "f".into(),
            line: 2,
            message: "bad".into(),
        };
        assert_eq!(exit_code(&parse), EXIT_INPUT);
    }

    #[test]
    fn meta_path_appends_suffix() {
        assert_eq!(
            meta_path(Path::new("a/b.csv")),
            PathBuf::from("a/b.csv.meta.json")
        );
    }
}

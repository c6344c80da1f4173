//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a scenario is infeasible, 2 an invariant or
//! suite assertion failed, 3 bad input (unreadable or invalid scenario,
//! unknown strategy, unwritable output). Errors are printed to stderr as a
//! single JSON object.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::sim::export::{self, ExportError};
use crate::sim::log::SimError;
use crate::sim::metrics;
use crate::sim::presets;
use crate::sim::report::Comparison;
use crate::sim::runner::{self, Execution};
use crate::sim::scenario::{Resolved, Scenario};
use crate::sim::strategy::StrategySpec;
use crate::sim::suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_BAD_INPUT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "elastic-sim",
    version,
    about = "Simulate elastic scaling of MoE inference instances"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every strategy of a scenario; any infeasible strategy is an error.
    Run(ScenarioArgs),
    /// Run strategies side by side; infeasible ones are skipped.
    Compare(ScenarioArgs),
    /// Run the cumulative ablation ladder on a scenario.
    Ablation(ScenarioArgs),
    /// Run every shipped preset and check the expected orderings.
    PaperSuite(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Output directory.
    #[arg(long, env = "ELASTIC_SIM_OUT")]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run scenarios one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario file, or the name of a shipped preset.
    #[arg(long)]
    scenario: String,
    /// Comma-separated strategies, overriding the file.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadInput(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Invariant(String),
    #[error(transparent)]
    Export(#[from] ExportError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput(_) | CliError::Export(_) => EXIT_BAD_INPUT,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::BadInput(_) => "bad-input",
            CliError::Export(_) => "output",
            CliError::Infeasible(_) => "infeasible",
            CliError::Invariant(_) => "invariant",
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            exit_code: i32,
            message: String,
        }
        serde_json::to_string(&Body {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("error body serializes")
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let err = CliError::BadInput(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(report) => {
            print!("{report}");
            EXIT_OK
        }
        Err((report, err)) => {
            print!("{report}");
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    }
}

type Outcome = Result<String, (String, CliError)>;

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Run(a) => scenario_command(&a, Mode::Run),
        Command::Compare(a) => scenario_command(&a, Mode::Compare),
        Command::Ablation(a) => scenario_command(&a, Mode::Ablation),
        Command::PaperSuite(a) => paper_suite(&a),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Run,
    Compare,
    Ablation,
}

fn execution(common: &CommonArgs) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn load_scenario(arg: &str) -> Result<Scenario, CliError> {
    let path = Path::new(arg);
    if path.exists() {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::BadInput(format!("{arg}: {e}")))?;
        return Scenario::from_json(&text).map_err(|e| CliError::BadInput(format!("{arg}: {e}")));
    }
    presets::scenario(arg)
        .ok_or_else(|| CliError::BadInput(format!("{arg}: no such file or preset")))
}

fn out_dir(common: &CommonArgs, scenario: Option<&Scenario>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| scenario.and_then(|s| s.out.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn resolve(a: &ScenarioArgs, mode: Mode) -> Result<(Scenario, Vec<Resolved>), CliError> {
    let mut sc = load_scenario(&a.scenario)?;
    if let Some(seed) = a.common.seed {
        sc.seed = seed;
    }
    if let Some(list) = &a.strategies {
        sc.strategies = list
            .iter()
            .map(|s| s.parse::<StrategySpec>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::BadInput(e.to_string()))?;
    }
    if mode == Mode::Ablation {
        sc.strategies = StrategySpec::ladder();
    }
    let cal = presets::calibration();
    let resolved = sc
        .expand()
        .iter()
        .map(|s| s.resolve(&cal))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::BadInput(e.to_string()))?;
    Ok((sc, resolved))
}

fn scenario_command(a: &ScenarioArgs, mode: Mode) -> Outcome {
    let (sc, resolved) = resolve(a, mode).map_err(|e| (String::new(), e))?;
    let out = out_dir(&a.common, Some(&sc));
    let outcomes = runner::run_all(&resolved, execution(&a.common));
    let comparisons = Comparison::group(resolved, outcomes);
    let mut report = String::new();
    let mut first_error: Option<CliError> = None;
    for c in &comparisons {
        let dir = export::write_comparison(c, &out).map_err(|e| (report.clone(), e.into()))?;
        report.push_str(&match mode {
            Mode::Ablation => ablation_table(c),
            Mode::Run | Mode::Compare => comparison_table(c),
        });
        let _ = writeln!(report, "  -> {}", dir.display());
        for o in &c.outcomes {
            let Err(e) = &o.result else { continue };
            let err = match e {
                SimError::Invariant(_) => {
                    CliError::Invariant(format!("{} {}: {e}", o.scenario, o.strategy))
                }
                SimError::Infeasible { .. } if mode == Mode::Run => {
                    CliError::Infeasible(format!("{} {}: {e}", o.scenario, o.strategy))
                }
                SimError::Infeasible { .. } => continue,
            };
            // An invariant failure outranks infeasibility.
            if first_error
                .as_ref()
                .is_none_or(|f| err.exit_code() > f.exit_code())
            {
                first_error = Some(err);
            }
        }
    }
    match first_error {
        None => Ok(report),
        Some(e) => Err((report, e)),
    }
}

fn fmt_opt(x: Option<f64>, digits: usize) -> String {
    x.map_or("-".to_string(), |v| format!("{v:.digits$}"))
}

fn comparison_table(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", c.name());
    let _ = writeln!(
        s,
        "  {:<34} {:>10} {:>10} {:>10} {:>10}",
        "strategy", "latency_s", "downtime_s", "peak_gb", "slo_att"
    );
    for (spec, log) in c.runs() {
        let m = metrics::summarize(log, &c.scenario.slo);
        let _ = writeln!(
            s,
            "  {:<34} {:>10} {:>10} {:>10} {:>10}",
            spec.to_string(),
            fmt_opt(m.scale_latency, 2),
            fmt_opt(m.downtime, 2),
            fmt_opt(m.peak_mem_gb, 1),
            fmt_opt(m.attainment, 3)
        );
    }
    for (spec, reason) in c.skipped() {
        let _ = writeln!(s, "  skipped {spec}: {reason}");
    }
    s
}

fn ablation_table(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", c.name());
    let _ = writeln!(
        s,
        "  {:<28} {:>12} {:>12} {:>12}",
        "variant", "scale_time", "downtime", "peak_mem_gb"
    );
    for (spec, log) in c.runs() {
        if let Some(r) = log.scalings.first() {
            let _ = writeln!(
                s,
                "  {:<28} {:>12.2} {:>12.2} {:>12.1}",
                spec.ablation_label(),
                r.latency,
                r.downtime,
                r.peak_mem as f64 / 1e9
            );
        }
    }
    for (spec, reason) in c.skipped() {
        let _ = writeln!(s, "  skipped {spec}: {reason}");
    }
    s
}

fn paper_suite(a: &CommonArgs) -> Outcome {
    let out = out_dir(a, None);
    let report = suite::run(execution(a), a.seed)
        .map_err(|e| (String::new(), CliError::BadInput(e.to_string())))?;
    for c in &report.comparisons {
        export::write_comparison(c, &out).map_err(|e| (String::new(), e.into()))?;
    }
    write_checks(&report.checks, &out).map_err(|e| (String::new(), e.into()))?;
    let mut text = String::new();
    for c in &report.checks {
        let _ = writeln!(
            text,
            "criterion {:>2} {} {}: {}",
            c.id,
            if c.pass { "PASS" } else { "FAIL" },
            c.title,
            c.detail
        );
    }
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.id.to_string())
        .collect();
    if failed.is_empty() {
        Ok(text)
    } else {
        Err((
            text,
            CliError::Invariant(format!("criteria failed: {}", failed.join(", "))),
        ))
    }
}

fn write_checks(checks: &[suite::Check], out: &Path) -> Result<(), ExportError> {
    let path = out.join("criteria.csv");
    let csv_err = |source| ExportError::Csv {
        path: path.clone(),
        source,
    };
    std::fs::create_dir_all(out).map_err(|source| ExportError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["criterion", "title", "pass", "detail"])
        .map_err(csv_err)?;
    for c in checks {
        w.write_record([
            c.id.to_string(),
            c.title.to_string(),
            c.pass.to_string(),
            c.detail.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: path.clone(),
        source,
    })
}

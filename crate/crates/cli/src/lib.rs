//! Command-line harness for the Nelson mean-field laboratory: configuration,
//! effective and microscopic runs, `(N, Λ)` sweeps, invariant suites and
//! CSV/JSON emission.

pub mod check;
pub mod config;
pub mod error;
pub mod output;
pub mod runs;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::check::{CheckOptions, Mutation};
use crate::config::{resolve, Kind, RunConfig};
use crate::error::{HarnessError, Result};

#[derive(Debug, Parser)]
#[command(name = "nelson", version, about = "Mean-field laboratory for the cutoff Nelson model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the Schrödinger–Klein–Gordon pair.
    Effective(Flags),
    /// Propagate one N-particle state next to its mean-field pair.
    Microscopic(Flags),
    /// Microscopic runs over an (N, Λ) grid with envelope fits.
    Sweep(Flags),
    /// Run the invariant suites.
    Check(Flags),
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path (CSV; the JSON summary goes next to it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fault injection for `check` (flip-dbeta-b-source).
    #[arg(long)]
    pub mutation: Option<String>,
}

impl Command {
    fn split(&self) -> (Kind, &Flags) {
        match self {
            Command::Effective(f) => (Kind::Effective, f),
            Command::Microscopic(f) => (Kind::Microscopic, f),
            Command::Sweep(f) => (Kind::Sweep, f),
            Command::Check(f) => (Kind::Check, f),
        }
    }
}

/// Loads the config (defaults when no file is given), applies flag
/// overrides and validates.
pub fn prepare(kind: Kind, flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(k) = cfg.kind {
        if k != kind {
            return Err(HarnessError::Config(format!(
                "config kind '{}' does not match subcommand '{}'",
                k.as_str(),
                kind.as_str()
            )));
        }
    }
    cfg.kind = Some(kind);
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(w) = flags.workers {
        cfg.workers = Some(w);
    }
    if let Some(out) = &flags.out {
        cfg.output = Some(out.clone());
    }
    if flags.mutation.is_some() && kind != Kind::Check {
        return Err(HarnessError::Usage("--mutation applies to check only".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    kind: &'static str,
    config: &'a RunConfig,
    columns: [&'static str; 19],
    result: T,
}

fn default_output(kind: Kind) -> PathBuf {
    match kind {
        Kind::Check => PathBuf::from("nelson-check.json"),
        k => PathBuf::from(format!("nelson-{}.csv", k.as_str())),
    }
}

/// Runs one subcommand to completion, writing its outputs.
pub fn execute(kind: Kind, cfg: &RunConfig, mutation: Mutation) -> Result<()> {
    let out = cfg.output.clone().unwrap_or_else(|| default_output(kind));
    let (resolved, _) = match kind {
        Kind::Check => (cfg.clone(), Vec::new()),
        _ => resolve(cfg)?,
    };
    macro_rules! emit {
        ($records:expr, $result:expr) => {{
            let summary = Summary {
                kind: kind.as_str(),
                config: &resolved,
                columns: output::COLUMNS,
                result: $result,
            };
            output::emit(&out, &$records, &summary)?;
            eprintln!(
                "wrote {} and {}",
                out.display(),
                output::summary_path(&out).display()
            );
        }};
    }
    match kind {
        Kind::Effective => {
            let (records, summary) = runs::run_effective(cfg)?;
            emit!(records, summary);
        }
        Kind::Microscopic => {
            let (records, summary) = runs::run_microscopic(cfg)?;
            emit!(records, summary);
        }
        Kind::Sweep => {
            let (records, summary) = runs::run_sweep(cfg)?;
            for t in &summary.trends {
                eprintln!(
                    "Lambda = {}: Tr|γ − p| at t = {} over N = {:?}: {:?}, slope {} ({})",
                    t.cutoff,
                    t.t,
                    t.particles,
                    t.tr_dist_10,
                    t.log_log_slope.map(|s| format!("{s:.3}")).unwrap_or_else(|| "n/a".into()),
                    t.label
                );
            }
            emit!(records, summary);
        }
        Kind::Check => {
            let opts = CheckOptions {
                seed: cfg.seed,
                coupling: cfg.coupling,
                mutation,
            };
            let report = check::run_check(&opts)?;
            for s in &report.suites {
                for c in &s.checks {
                    println!(
                        "{} {:<19} {} (worst {:.3e}, tolerance {:.1e}, {} instances)",
                        if c.passed { "PASS" } else { "FAIL" },
                        s.name,
                        c.what,
                        c.worst,
                        c.tolerance,
                        c.instances
                    );
                }
            }
            output::write_atomic(&out, &output::json_bytes(&report)?)?;
            if !report.passed {
                let failed = report.suites.iter().filter(|s| !s.passed).count();
                return Err(HarnessError::SuiteFailure {
                    failed,
                    total: report.suites.len(),
                });
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (kind, flags) = cli.command.split();
    let cfg = prepare(kind, flags)?;
    let mutation = match &flags.mutation {
        Some(name) => Mutation::parse(name)?,
        None => Mutation::None,
    };
    match cfg.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Usage(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| execute(kind, &cfg, mutation))
        }
        None => execute(kind, &cfg, mutation),
    }
}

/// Parses arguments, runs, and maps the outcome to an exit status:
/// 0 success, 1 usage or config error, 2 suite failure, 3 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

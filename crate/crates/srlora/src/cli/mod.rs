//! Command-line front end.
//!
//! One thin binary dispatches to the library: `train` executes a config and
//! writes run artifacts, `verify` runs seeded property suites, `report`
//! derives analysis CSVs from a finished run directory, and `compare` runs
//! two configs across a seed list. Exit codes: 0 success, 1 validation or
//! usage error, 2 runtime or property failure, 3 I/O error.
//!
//! Every artifact path printed to standard output exists when the exit
//! code is 0.

mod report;
mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::trainer::{train, write_artifacts, RunConfig};

pub use report::ReportKind;
pub use verify::Suite;

#[derive(Debug, Parser)]
#[command(
    name = "srlora",
    version,
    about = "Low-rank adapters with scheduled subspace recomposition",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a training config and write metrics, ledger, checkpoint, and
    /// resolved config into the output directory.
    Train {
        /// Path to a JSON run config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a property suite with fixed seeds and print one line per check.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Derive an analysis CSV from a finished run directory.
    Report {
        /// Directory holding the artifacts of one `train` invocation.
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        kind: ReportKind,
        /// Output file; defaults to `report-<kind>.csv` inside the run
        /// directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run two configs over a seed list and write compare.csv.
    Compare {
        /// First JSON run config.
        config_a: PathBuf,
        /// Second config; must equal the first except for mode and
        /// r_target.
        config_b: PathBuf,
        /// Seeds to run both configs under.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Directory for compare.csv (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments (the first is the program name) and executes one
/// command. Returns the process exit code instead of exiting so tests can
/// drive it in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out.as_deref(), seed),
        Command::Verify { suite } => return verify::cmd_verify(suite),
        Command::Report { run_dir, kind, out } => report::cmd_report(&run_dir, kind, out.as_deref()),
        Command::Compare {
            config_a,
            config_b,
            seeds,
            out,
        } => cmd_compare(&config_a, &config_b, &seeds, out.as_deref()),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn cmd_train(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = Some(out.to_path_buf());
    }
    let out_dir = config.output_dir.clone().ok_or_else(|| {
        Error::InvalidConfig(
            "no output directory: set output_dir in the config or pass --out".to_string(),
        )
    })?;
    let run = train(config)?;
    let paths = write_artifacts(&run, &out_dir)?;
    for path in [
        &paths.metrics,
        &paths.ledger,
        &paths.checkpoint,
        &paths.resolved_config,
    ] {
        println!("{}", path.display());
    }
    println!("final eval loss {}", run.eval_loss()?);
    Ok(())
}

fn cmd_compare(
    config_a: &Path,
    config_b: &Path,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<()> {
    let a = load_config(config_a)?;
    let b = load_config(config_b)?;
    ensure_comparable(config_a, &a, config_b, &b)?;
    a.validate()?;
    b.validate()?;

    let mut csv = String::from("seed,final_loss_a,final_loss_b\n");
    let (mut wins_a, mut wins_b, mut ties) = (0usize, 0usize, 0usize);
    for &seed in seeds {
        let final_loss = |config: &RunConfig| -> Result<f64> {
            let mut config = config.clone();
            config.seed = seed;
            let run = train(config)?;
            run.eval_loss()
        };
        let loss_a = final_loss(&a)?;
        let loss_b = final_loss(&b)?;
        if loss_a < loss_b {
            wins_a += 1;
        } else if loss_b < loss_a {
            wins_b += 1;
        } else {
            ties += 1;
        }
        csv.push_str(&format!("{seed},{loss_a},{loss_b}\n"));
    }

    let out_dir = out.unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("compare.csv");
    std::fs::write(&csv_path, csv)?;
    println!("{}", csv_path.display());
    println!("summary: config_a wins {wins_a}, config_b wins {wins_b}, ties {ties}");
    Ok(())
}

/// The two compared configs must be identical apart from `mode` and
/// `r_target`, so the comparison isolates the switching mechanism.
fn ensure_comparable(
    path_a: &Path,
    a: &RunConfig,
    path_b: &Path,
    b: &RunConfig,
) -> Result<()> {
    let strip = |config: &RunConfig| -> Result<serde_json::Value> {
        let mut value = serde_json::to_value(config)?;
        let map = value.as_object_mut().expect("config serializes to object");
        map.remove("mode");
        map.remove("r_target");
        Ok(value)
    };
    if strip(a)? != strip(b)? {
        return Err(Error::InvalidConfig(format!(
            "{} and {} differ beyond mode/r_target",
            path_a.display(),
            path_b.display()
        )));
    }
    Ok(())
}

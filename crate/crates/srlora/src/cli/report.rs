//! Post-hoc summaries over a finished run directory.
//!
//! Every kind reads the artifacts `train` wrote (`metrics.csv`,
//! `ledger.csv`, `resolved-config.json`) and emits a derived CSV. Open
//! episodes are treated as retired at `n_all` so intervals are always
//! defined.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use crate::error::{Error, Result};
use crate::recompose::SlotLedger;
use crate::trainer::{parse_ledger_csv, MetricLog, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Intervals,
    Variance,
    Loss,
}

impl ReportKind {
    fn as_str(self) -> &'static str {
        match self {
            ReportKind::Intervals => "intervals",
            ReportKind::Variance => "variance",
            ReportKind::Loss => "loss",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(super) fn cmd_report(run_dir: &Path, kind: ReportKind, out: Option<&Path>) -> Result<()> {
    let config = super::load_config(&run_dir.join("resolved-config.json"))?;
    let body = match kind {
        ReportKind::Intervals => intervals_csv(run_dir, &config)?,
        ReportKind::Variance => variance_csv(run_dir, &config)?,
        ReportKind::Loss => loss_csv(run_dir)?,
    };
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join(format!("report-{kind}.csv")));
    write_report(&out_path, &body)?;
    println!("{}", out_path.display());
    Ok(())
}

fn read_episodes(run_dir: &Path) -> Result<Vec<(usize, crate::recompose::Episode)>> {
    let text = super::read_to_string(&run_dir.join("ledger.csv"))?;
    parse_ledger_csv(&text)
}

fn intervals_csv(run_dir: &Path, config: &RunConfig) -> Result<String> {
    let episodes = read_episodes(run_dir)?;
    let mut out =
        String::from("layer_id,slot,singular_index,activated_step,retired_step,interval\n");
    for (layer_id, e) in episodes {
        let retired = e.retired_step.unwrap_or(config.n_all);
        if retired < e.activated_step {
            return Err(Error::InvalidArgument(format!(
                "episode in layer {layer_id} retires at {retired} before activation at {}",
                e.activated_step
            )));
        }
        let retired_field = e.retired_step.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{layer_id},{},{},{},{retired_field},{}\n",
            e.slot,
            e.singular_index,
            e.activated_step,
            retired - e.activated_step
        ));
    }
    Ok(out)
}

fn variance_csv(run_dir: &Path, config: &RunConfig) -> Result<String> {
    let episodes = read_episodes(run_dir)?;
    let ledger = SlotLedger::from_episodes(config.architecture.n_layers(), episodes)?;
    let mut out = String::from("layer_id,variance,episode_count\n");
    for stats in ledger.interval_variance(config.n_all) {
        out.push_str(&format!(
            "{},{},{}\n",
            stats.layer_id, stats.variance, stats.episode_count
        ));
    }
    Ok(out)
}

fn loss_csv(run_dir: &Path) -> Result<String> {
    let text = super::read_to_string(&run_dir.join("metrics.csv"))?;
    let log = MetricLog::parse_csv(&text)?;
    Ok(log.to_csv())
}

fn write_report(path: &PathBuf, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

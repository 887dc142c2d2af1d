//! Run artifacts. Every file is written to a sibling temporary and renamed
//! into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use halk::simulator::{metrics_to_string, RunResult};

use crate::config::ExperimentConfig;

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// One row per round: `t,<prefix>0,<prefix>1,...`.
fn per_agent_csv<T: std::fmt::Display>(prefix: &str, rows: &[Vec<T>]) -> String {
    let agents = rows.first().map_or(0, Vec::len);
    let mut s = String::from("t");
    for i in 0..agents {
        write!(s, ",{prefix}{i}").unwrap();
    }
    s.push('\n');
    for (t, row) in rows.iter().enumerate() {
        write!(s, "{t}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    rounds_completed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    early_stop: Option<&'a str>,
    nodes: usize,
    edges: usize,
    epsilon: f64,
    nu: f64,
    config: &'a ExperimentConfig,
}

pub struct RunSummary<'a> {
    pub command: &'a str,
    pub edges: usize,
    pub epsilon: f64,
    pub nu: f64,
}

/// Writes `metrics.csv`, `model_orders.csv`, `bandwidths.csv` and
/// `manifest.toml` into `cfg.out_dir`.
pub fn write_run(cfg: &ExperimentConfig, summary: &RunSummary<'_>, result: &RunResult) -> Result<Vec<PathBuf>> {
    let dir = &cfg.out_dir;
    let bandwidths: Vec<Vec<String>> = result
        .bandwidths
        .iter()
        .map(|r| r.iter().map(|b| format!("{b:.16e}")).collect())
        .collect();
    let manifest = Manifest {
        command: summary.command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        rounds_completed: result.metrics.len(),
        early_stop: result.early_stop.as_deref(),
        nodes: result.model_orders.first().map_or(0, Vec::len),
        edges: summary.edges,
        epsilon: summary.epsilon,
        nu: summary.nu,
        config: cfg,
    };
    let files = [
        ("metrics.csv", metrics_to_string(&result.metrics)),
        ("model_orders.csv", per_agent_csv("agent", &result.model_orders)),
        ("bandwidths.csv", per_agent_csv("agent", &bandwidths)),
        ("manifest.toml", toml::to_string(&manifest)?),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

//! `halk`: run the field benchmark, data-driven experiments, baselines and
//! bound checks.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric failure
//! (divergence, factorization failure, or a failed bound check).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{BaselineMethod, ChecksFailed, Diverged};
use config::{parse_override, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "halk", version, about = "Decentralized online kernel learning with proximity constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of rounds.
    #[arg(long = "T", value_name = "T")]
    rounds: Option<usize>,
    /// Override any config key, e.g. `--set eta=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, toml::Value)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// HALK on the synthetic spatio-temporal field.
    SimulateField {
        #[command(flatten)]
        common: Common,
    },
    /// HALK on per-node observations from a CSV file.
    RunData {
        #[command(flatten)]
        common: Common,
        /// CSV with columns node_id,pos_x,pos_y,x0..,<target>.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Name of the target column.
        #[arg(long)]
        target: Option<String>,
    },
    /// A comparison method on the field, or on `data_path` when set.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        #[command(flatten)]
        common: Common,
        /// Penalty coefficient.
        #[arg(long)]
        c: Option<f64>,
        /// RBF centres per feature.
        #[arg(long)]
        points: Option<usize>,
        /// Parsimony constant for the centralized learner.
        #[arg(long)]
        parsimony: Option<f64>,
    },
    /// Evaluate bound checks on a metrics CSV.
    CheckBounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn load(common: &Common, extra: Vec<(String, toml::Value)>) -> Result<ExperimentConfig> {
    let mut ov = common.overrides.clone();
    if let Some(s) = common.seed {
        ov.push(("seed".into(), toml::Value::Integer(i64::try_from(s)?)));
    }
    if let Some(o) = &common.out {
        ov.push(("out_dir".into(), toml::Value::String(o.to_string_lossy().into_owned())));
    }
    if let Some(t) = common.rounds {
        ov.push(("rounds".into(), toml::Value::Integer(i64::try_from(t)?)));
    }
    ov.extend(extra);
    ExperimentConfig::load(common.config.as_deref(), &ov)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SimulateField { common } => commands::simulate_field(&load(&common, vec![])?),
        Command::RunData { common, data, target } => {
            let mut extra = Vec::new();
            if let Some(d) = data {
                extra.push(("data_path".into(), toml::Value::String(d.to_string_lossy().into_owned())));
            }
            if let Some(t) = target {
                extra.push(("target_column".into(), toml::Value::String(t)));
            }
            commands::run_data(&load(&common, extra)?)
        }
        Command::Baseline {
            method,
            common,
            c,
            points,
            parsimony,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = c {
                extra.push(("penalty_c".into(), toml::Value::Float(c)));
            }
            if let Some(p) = points {
                extra.push(("rbf_points".into(), toml::Value::Integer(i64::try_from(p)?)));
            }
            if let Some(p) = parsimony {
                extra.push(("centralized_parsimony".into(), toml::Value::Float(p)));
            }
            commands::baseline(&load(&common, extra)?, method)
        }
        Command::CheckBounds { common, metrics } => commands::check_bounds(&load(&common, vec![])?, &metrics),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Diverged>() || cause.is::<ChecksFailed>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<halk::Error>() {
            if e.is_numeric() {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

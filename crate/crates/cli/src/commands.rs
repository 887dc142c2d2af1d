use std::fmt;

use anyhow::{bail, Context, Result};

use halk::agent::compute_nu;
use halk::datagen::{build_connected_field, load_node_csv, DataSource, FieldSource, NodeSource};
use halk::simulator::{check_model_order_bound, init_agents, read_metrics, RunResult, Runner};
use halk::theory::{rate_regression, MIN_RATE_ROUNDS};
use halk::topology::build_geometric_with_metric;
use halk::{Dictionary, HyperParams, Topology};

use crate::config::ExperimentConfig;
use crate::output::{write_run, RunSummary};

const FIELD_LAYOUT_ATTEMPTS: usize = 100;
const MAX_RBF_CENTRES: usize = 10_000;
const RATE_MAX_SLOPE: f64 = -0.35;

/// A run produced non-finite metrics.
#[derive(Debug)]
pub struct Diverged(pub String);

impl fmt::Display for Diverged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "numeric failure: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

/// Bound checks ran and at least one failed.
#[derive(Debug)]
pub struct ChecksFailed(pub usize);

impl fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineMethod {
    Penalty,
    Rbf,
    Centralized,
}

impl BaselineMethod {
    fn name(self) -> &'static str {
        match self {
            BaselineMethod::Penalty => "baseline-penalty",
            BaselineMethod::Rbf => "baseline-rbf",
            BaselineMethod::Centralized => "baseline-centralized",
        }
    }
}

struct Problem {
    topology: Topology,
    source: Box<dyn DataSource>,
    /// Per-feature `(min, max)` of the inputs.
    ranges: Vec<(f64, f64)>,
}

fn field_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let (model, topology) = build_connected_field(
        cfg.nodes,
        cfg.area,
        cfg.omega,
        cfg.seed,
        cfg.connect_radius,
        FIELD_LAYOUT_ATTEMPTS,
    )?;
    let model = model.with_noise(cfg.process_noise_var, cfg.obs_noise_var)?;
    Ok(Problem {
        topology,
        source: Box::new(FieldSource { model }),
        ranges: vec![(0.0, 1.0)],
    })
}

fn data_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let Some(path) = cfg.data_path.as_deref() else {
        bail!("no data file given (use --data or data_path)");
    };
    if !path.is_file() {
        bail!("data file {} does not exist", path.display());
    }
    let data = load_node_csv(path, &cfg.target_column).with_context(|| format!("loading {}", path.display()))?;
    let topology = build_geometric_with_metric(
        &data.positions,
        cfg.connect_radius,
        cfg.gamma_rule,
        cfg.gamma_scale,
        cfg.distance,
    )?;
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); data.dim];
    for s in data.streams.iter().flatten() {
        for (r, &x) in ranges.iter_mut().zip(&s.x) {
            r.0 = r.0.min(x);
            r.1 = r.1.max(x);
        }
    }
    Ok(Problem {
        topology,
        source: Box::new(NodeSource {
            data,
            mode: cfg.stream(),
        }),
        ranges,
    })
}

fn problem_for(cfg: &ExperimentConfig) -> Result<Problem> {
    if cfg.data_path.is_some() {
        data_problem(cfg)
    } else {
        field_problem(cfg)
    }
}

/// `nu` from the theory constants when requested, else the configured value.
fn effective_hyper_params(cfg: &ExperimentConfig, topology: &Topology, parsimony: f64) -> Result<HyperParams> {
    let mut hp = cfg.hyper_params(parsimony)?;
    if cfg.nu_from_theory {
        let c = cfg
            .theory_constants(topology.node_count(), topology.edge_count())?
            .context("nu_from_theory needs slater_xi and k1")?;
        hp.nu = compute_nu(&c, cfg.rounds, hp.alpha())?;
    }
    hp.validate()?;
    Ok(hp)
}

fn ensure_finite(result: &RunResult) -> Result<()> {
    for m in &result.metrics {
        let vals = [
            m.global_loss,
            m.avg_loss,
            m.max_violation,
            m.avg_violation,
            m.mean_violation_pos,
            m.dual_norm,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Diverged(format!("non-finite metrics at round {}", m.t)).into());
        }
    }
    Ok(())
}

fn finish(cfg: &ExperimentConfig, command: &str, topology: &Topology, hp: &HyperParams, result: &RunResult) -> Result<()> {
    let summary = RunSummary {
        command,
        edges: topology.edge_count(),
        epsilon: hp.epsilon,
        nu: hp.nu,
    };
    write_run(cfg, &summary, result)?;
    if let Some(msg) = &result.early_stop {
        log::warn!("{msg}");
    }
    // outputs are kept for inspection even when the run diverged
    ensure_finite(result)?;
    let last = result.metrics.last();
    println!(
        "{command}: {} rounds, avg_loss {:.6e}, settled max model order {:.1}, output in {}",
        result.metrics.len(),
        last.map_or(f64::NAN, |m| m.avg_loss),
        result.settled_model_order(0.2),
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_halk(cfg: &ExperimentConfig, problem: &Problem, command: &str) -> Result<()> {
    let hp = effective_hyper_params(cfg, &problem.topology, cfg.parsimony)?;
    let agents = init_agents(
        &problem.topology,
        cfg.kernel()?,
        problem.source.dim(),
        cfg.loss_spec()?,
        cfg.proximity_spec()?,
    )?;
    let result = Runner::new(&problem.topology, problem.source.as_ref(), hp, cfg.rounds)
        .with_schedule(cfg.schedule)
        .run_halk(agents, None)?;
    finish(cfg, command, &problem.topology, &hp, &result)
}

pub fn simulate_field(cfg: &ExperimentConfig) -> Result<()> {
    run_halk(cfg, &field_problem(cfg)?, "simulate-field")
}

pub fn run_data(cfg: &ExperimentConfig) -> Result<()> {
    run_halk(cfg, &data_problem(cfg)?, "run-data")
}

/// Evenly spaced centres on the product grid of `ranges`.
fn grid_dictionary(ranges: &[(f64, f64)], per_dim: usize) -> Result<Dictionary> {
    let total = ranges
        .iter()
        .try_fold(1usize, |acc, _| acc.checked_mul(per_dim))
        .filter(|&n| n <= MAX_RBF_CENTRES);
    let Some(total) = total else {
        bail!("rbf grid would exceed {MAX_RBF_CENTRES} centres; lower rbf_points");
    };
    let dim = ranges.len();
    let mut flat = Vec::with_capacity(total * dim);
    for k in 0..total {
        let mut rest = k;
        for &(lo, hi) in ranges {
            let idx = rest % per_dim;
            rest /= per_dim;
            let x = if per_dim == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * idx as f64 / (per_dim - 1) as f64
            };
            flat.push(x);
        }
    }
    Ok(Dictionary::from_flat(dim, flat)?)
}

pub fn baseline(cfg: &ExperimentConfig, method: BaselineMethod) -> Result<()> {
    let problem = problem_for(cfg)?;
    let topo = &problem.topology;
    let source = problem.source.as_ref();
    let kernel = cfg.kernel()?;
    let parsimony = if method == BaselineMethod::Centralized {
        cfg.centralized_parsimony
    } else {
        cfg.parsimony
    };
    let hp = effective_hyper_params(cfg, topo, parsimony)?;
    let runner = Runner::new(topo, source, hp, cfg.rounds).with_schedule(cfg.schedule);
    let agents = || -> Result<_> { Ok(init_agents(topo, kernel, source.dim(), cfg.loss_spec()?, cfg.proximity_spec()?)?) };
    let result = match method {
        BaselineMethod::Penalty => runner.run_penalty_baseline(agents()?, cfg.penalty_c, cfg.penalty_spec()?, None)?,
        BaselineMethod::Rbf => {
            let dict = grid_dictionary(&problem.ranges, cfg.rbf_points)?;
            runner.run_rbf_baseline(agents()?, &dict)?
        }
        BaselineMethod::Centralized => runner.run_centralized_baseline(kernel, cfg.loss_spec()?, None)?,
    };
    finish(cfg, method.name(), topo, &hp, &result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        })
    }
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Reads a metrics CSV and evaluates the checks that need only per-round
/// aggregates. The graph is rebuilt from the config to count edges.
pub fn check_bounds(cfg: &ExperimentConfig, metrics_path: &std::path::Path) -> Result<()> {
    if !metrics_path.is_file() {
        bail!("metrics file {} does not exist", metrics_path.display());
    }
    let metrics = read_metrics(metrics_path)?;
    if metrics.is_empty() {
        bail!("metrics file {} has no rows", metrics_path.display());
    }
    let problem = problem_for(cfg)?;
    let topo = &problem.topology;
    let hp = effective_hyper_params(cfg, topo, cfg.parsimony)?;
    let mut lines: Vec<(&str, Verdict, String)> = Vec::new();

    let finite = metrics.iter().all(|m| {
        [m.global_loss, m.avg_loss, m.max_violation, m.avg_violation, m.mean_violation_pos, m.dual_norm]
            .iter()
            .all(|v| v.is_finite())
    });
    lines.push(("finite", verdict(finite), format!("rows={}", metrics.len())));

    let min_dual = metrics.iter().map(|m| m.dual_norm).fold(f64::INFINITY, f64::min);
    lines.push(("dual_nonnegative", verdict(min_dual >= 0.0), format!("min_dual_norm={min_dual:.6e}")));

    let last = metrics.last().expect("non-empty");
    lines.push((
        "average_feasibility",
        verdict(last.avg_violation <= 0.0),
        format!("max_edge_avg_slack={:.6e}", last.avg_violation),
    ));

    // dual_norm bounds every single multiplier, so the envelope is conservative
    if hp.alpha() > 0.0 && metrics.len() >= 4 {
        let synthetic = RunResult {
            model_orders: metrics.iter().map(|m| vec![m.max_model_order]).collect(),
            max_duals: metrics.iter().map(|m| vec![m.dual_norm]).collect(),
            metrics: Vec::new(),
            agents: Vec::new(),
            bandwidths: Vec::new(),
            edge_avg_slack: Default::default(),
            edge_avg_pos_slack: Default::default(),
            exchanged: 0,
            early_stop: None,
        };
        let chk = check_model_order_bound(
            &synthetic,
            cfg.loss_spec()?.lipschitz_c,
            cfg.proximity_lipschitz,
            topo.edge_count(),
            hp.alpha(),
            problem.source.dim(),
        )?;
        lines.push((
            "model_order_envelope",
            verdict(chk.ok()),
            format!(
                "beta={:.6e} q3={:.6e} q4={:.6e}",
                chk.beta, chk.beta_third_quarter, chk.beta_last_quarter
            ),
        ));
    } else {
        lines.push(("model_order_envelope", Verdict::Skip, "needs alpha > 0 and 4 rounds".into()));
    }

    match cfg.optimum {
        Some(opt) if metrics.len() >= MIN_RATE_ROUNDS => {
            let avg: Vec<f64> = metrics.iter().map(|m| m.avg_loss).collect();
            match rate_regression(&avg, opt, cfg.rate_floor) {
                Ok(fit) => lines.push((
                    "rate_regression",
                    verdict(fit.ok(RATE_MAX_SLOPE)),
                    format!("slope={:.4} points={} limit={RATE_MAX_SLOPE}", fit.slope, fit.points),
                )),
                Err(e) => lines.push(("rate_regression", Verdict::Fail, e.to_string())),
            }
        }
        Some(_) => lines.push((
            "rate_regression",
            Verdict::Skip,
            format!("needs {MIN_RATE_ROUNDS} rounds, have {}", metrics.len()),
        )),
        None => lines.push(("rate_regression", Verdict::Skip, "no optimum configured".into())),
    }

    match cfg.theory_constants(topo.node_count(), topo.edge_count())? {
        Some(c) => {
            let need = compute_nu(&c, metrics.len(), hp.alpha())?;
            lines.push((
                "nu_admissible",
                verdict(hp.nu >= need),
                format!("nu={:.6e} required={need:.6e}", hp.nu),
            ));
        }
        None => lines.push(("nu_admissible", Verdict::Skip, "no slater_xi/k1 configured".into())),
    }

    let mut failed = 0;
    for (name, v, detail) in &lines {
        println!("{name:<22} {v}  {detail}");
        if *v == Verdict::Fail {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

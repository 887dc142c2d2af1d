//! Synchronous round engine, baselines, metrics output and the model-order
//! diagnostic.
//!
//! Every round reads a snapshot of all functions: neighbour evaluations,
//! losses and slacks are computed first, then every agent updates
//! independently. Cross-agent sums always run in agent-index order, so serial
//! and parallel schedules give bit-identical results.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, HyperParams, PrimalReport, Sample};
use crate::datagen::DataSource;
use crate::error::{Error, Result};
use crate::kernels::{self, Dictionary, KernelSpec};
use crate::komp::{self, DEFAULT_JITTER};
use crate::objectives::{LossSpec, ProximitySpec};
use crate::rkhs::KernelExpansion;
use crate::topology::Topology;

pub const METRICS_HEADER: &str =
    "t,global_loss,avg_loss,max_violation,avg_violation,mean_violation_pos,total_model_order,max_model_order,dual_norm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    /// `sum_i l(f_i(x_i), y_i)` with the round-start functions.
    pub global_loss: f64,
    /// Prefix mean of `global_loss`.
    pub avg_loss: f64,
    /// Largest raw slack `h_ij - gamma_ij` this round.
    pub max_violation: f64,
    /// Largest running time-average of the per-edge slack.
    pub avg_violation: f64,
    /// Mean over directed edges of `[h_ij - gamma_ij]_+`.
    pub mean_violation_pos: f64,
    /// After the round's update.
    pub total_model_order: usize,
    pub max_model_order: usize,
    /// `||mu||_2` over all directed edges after the update.
    pub dual_norm: f64,
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e}",
            self.t,
            self.global_loss,
            self.avg_loss,
            self.max_violation,
            self.avg_violation,
            self.mean_violation_pos,
            self.total_model_order,
            self.max_model_order,
            self.dual_norm
        )
    }
}

pub fn write_metrics<W: Write>(mut out: W, metrics: &[RoundMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

pub fn metrics_to_string(metrics: &[RoundMetrics]) -> String {
    let mut buf = Vec::new();
    write_metrics(&mut buf, metrics).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("metrics are ASCII")
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Data(format!(
            "unexpected metrics header `{}`",
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::Data(format!("line {}: {e}", k + 2))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Serial,
    #[default]
    Parallel,
}

/// Receives every agent's primal report, in agent order, after each round.
pub trait Observer {
    fn on_step(&mut self, t: usize, agent: usize, report: &PrimalReport);
}

impl<F: FnMut(usize, usize, &PrimalReport)> Observer for F {
    fn on_step(&mut self, t: usize, agent: usize, report: &PrimalReport) {
        self(t, agent, report)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub agents: Vec<AgentState>,
    /// `model_orders[t][i]` after round `t`.
    pub model_orders: Vec<Vec<usize>>,
    /// `max_j mu_ij` after round `t`.
    pub max_duals: Vec<Vec<f64>>,
    pub bandwidths: Vec<Vec<f64>>,
    /// Running time-average slack per directed edge at the last round.
    pub edge_avg_slack: BTreeMap<(usize, usize), f64>,
    /// Running time-average of `[slack]_+` per directed edge.
    pub edge_avg_pos_slack: BTreeMap<(usize, usize), f64>,
    /// Scalar evaluations sent across the network.
    pub exchanged: usize,
    /// Set when the data source ran out before the requested horizon.
    pub early_stop: Option<String>,
}

impl RunResult {
    pub fn rounds(&self) -> usize {
        self.metrics.len()
    }

    /// Largest per-agent mean model order over the trailing `fraction` of
    /// rounds.
    pub fn settled_model_order(&self, fraction: f64) -> f64 {
        let n = self.model_orders.len();
        if n == 0 {
            return 0.0;
        }
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let tail = &self.model_orders[n - k..];
        let agents = tail[0].len();
        (0..agents)
            .map(|i| tail.iter().map(|r| r[i] as f64).sum::<f64>() / k as f64)
            .fold(0.0, f64::max)
    }
}

/// Agents with `f = 0` and zero duals.
pub fn init_agents(
    topology: &Topology,
    spec: KernelSpec,
    dim: usize,
    loss: LossSpec,
    prox: ProximitySpec,
) -> Result<Vec<AgentState>> {
    (0..topology.node_count())
        .map(|i| AgentState::new(i, spec, dim, topology, loss, prox))
        .collect()
}

pub struct Runner<'a> {
    pub topology: &'a Topology,
    pub source: &'a dyn DataSource,
    pub hp: HyperParams,
    pub rounds: usize,
    pub schedule: Schedule,
}

/// Per-agent update used by the engine: returns the primal report when the
/// method produces one.
type Update<'u> = dyn Fn(&mut AgentState, &Sample, &BTreeMap<usize, f64>) -> Result<Option<PrimalReport>> + Sync + 'u;

impl<'a> Runner<'a> {
    pub fn new(topology: &'a Topology, source: &'a dyn DataSource, hp: HyperParams, rounds: usize) -> Self {
        Runner {
            topology,
            source,
            hp,
            rounds,
            schedule: Schedule::default(),
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    fn check_agents(&self, agents: &[AgentState]) -> Result<()> {
        self.hp.validate()?;
        let v = self.topology.node_count();
        if agents.len() != v || self.source.agents() != v {
            return Err(Error::InvalidArgument(format!(
                "topology has {v} nodes, {} agents given, data source serves {}",
                agents.len(),
                self.source.agents()
            )));
        }
        for (i, a) in agents.iter().enumerate() {
            if a.id != i {
                return Err(Error::InvalidArgument(format!("agent at position {i} has id {}", a.id)));
            }
            if a.f.dim() != self.source.dim() {
                return Err(Error::Dimension {
                    expected: self.source.dim(),
                    found: a.f.dim(),
                });
            }
        }
        Ok(())
    }

    /// Primal-dual rounds with compression.
    pub fn run_halk(&self, agents: Vec<AgentState>, observer: Option<&mut dyn Observer>) -> Result<RunResult> {
        let topo = self.topology;
        let hp = self.hp;
        let update = move |a: &mut AgentState, s: &Sample, e: &BTreeMap<usize, f64>| a.step(s, e, topo, &hp).map(Some);
        self.drive(agents, observer, &update)
    }

    /// Primal-only rounds: the multiplier term becomes `c sum_j p'(f_i(x), f_j(x))`
    /// for the penalty function `p`. Metrics still measure the agents' own
    /// proximity constraints.
    pub fn run_penalty_baseline(
        &self,
        mut agents: Vec<AgentState>,
        c: f64,
        penalty: ProximitySpec,
        observer: Option<&mut dyn Observer>,
    ) -> Result<RunResult> {
        if !(c >= 0.0) {
            return Err(Error::InvalidArgument(format!("penalty coefficient must be non-negative, got {c}")));
        }
        for a in &mut agents {
            a.out_duals.values_mut().for_each(|m| *m = c);
        }
        let hp = self.hp;
        let update = move |a: &mut AgentState, s: &Sample, e: &BTreeMap<usize, f64>| {
            let own = a.f.evaluate(&s.x)?;
            let mut coef = a.loss.deriv(own, s.y);
            for &j in a.out_duals.keys() {
                let fj = *e.get(&j).ok_or_else(|| {
                    Error::Protocol(format!("agent {} is missing the evaluation from neighbour {j}", a.id))
                })?;
                coef += c * penalty.deriv_first(own, fj);
            }
            let rep = a.primal_from_coefficient(s, coef, &hp)?;
            a.f = rep.projected.clone();
            Ok(Some(rep))
        };
        self.drive(agents, observer, &update)
    }

    /// Primal-dual rounds on a fixed dictionary shared by all agents. The
    /// functional gradient is projected onto the span of the dictionary:
    /// `w <- (1 - eta lambda) w - eta g K_DD^{-1} k_D(x)`; no compression.
    pub fn run_rbf_baseline(&self, mut agents: Vec<AgentState>, dictionary: &Dictionary) -> Result<RunResult> {
        if dictionary.dim() != self.source.dim() {
            return Err(Error::Dimension {
                expected: self.source.dim(),
                found: dictionary.dim(),
            });
        }
        for a in &mut agents {
            let spec = *a.spec();
            a.f = KernelExpansion::new(spec, dictionary.clone(), vec![0.0; dictionary.len()])?;
        }
        let mut factors: BTreeMap<u64, Cholesky<f64, Dyn>> = BTreeMap::new();
        if !dictionary.is_empty() {
            for a in &agents {
                let spec = *a.spec();
                let key = spec.bandwidth().to_bits();
                if let std::collections::btree_map::Entry::Vacant(v) = factors.entry(key) {
                    v.insert(komp::factor(&kernels::gram(&spec, dictionary), DEFAULT_JITTER)?);
                }
            }
        }
        let topo = self.topology;
        let hp = self.hp;
        let update = move |a: &mut AgentState, s: &Sample, e: &BTreeMap<usize, f64>| {
            let own = a.f.evaluate(&s.x)?;
            let duals = a.dual_from_value(own, e, topo, &hp)?;
            if !a.f.is_empty() {
                let coef = a.gradient_coefficient(own, s, e)?;
                let spec = *a.spec();
                let kx = DVector::from_vec(kernels::kernel_vector(&spec, a.f.dictionary(), &s.x)?);
                let dir = factors[&spec.bandwidth().to_bits()].solve(&kx);
                let shrink = 1.0 - hp.eta * hp.lambda;
                let w: Vec<f64> = a
                    .f
                    .weights()
                    .iter()
                    .zip(dir.iter())
                    .map(|(w, d)| shrink * w - hp.eta * coef * d)
                    .collect();
                a.f = KernelExpansion::new(spec, a.f.dictionary().clone(), w)?.ball_project(hp.radius)?;
            }
            a.out_duals = duals;
            Ok(None)
        };
        self.drive(agents, None, &update)
    }

    /// One function trained on the pooled stream: each round it is scored
    /// on all `V` samples, then takes a single compressed step along the
    /// mean of their loss gradients. Metrics report no edges and a single
    /// model.
    pub fn run_centralized_baseline(
        &self,
        spec: KernelSpec,
        loss: LossSpec,
        observer: Option<&mut dyn Observer>,
    ) -> Result<RunResult> {
        self.hp.validate()?;
        let single = Topology::new(1, &[])?;
        let mut agent = AgentState::new(0, spec, self.source.dim(), &single, loss, ProximitySpec::default())?;
        let mut observer = observer;
        let mut out = RunResult::empty();
        let mut loss_sum = 0.0;
        for t in 0..self.rounds {
            let Some(samples) = self.next_round(t)? else {
                out.early_stop = Some(exhausted(t, self.rounds));
                break;
            };
            let mut global = 0.0;
            for s in &samples {
                global += agent.loss.loss(agent.f.evaluate(&s.x)?, s.y);
            }
            let v = samples.len() as f64;
            let atoms = samples
                .iter()
                .map(|s| Ok((s.x.as_slice(), agent.loss.deriv(agent.f.evaluate(&s.x)?, s.y) / v)))
                .collect::<Result<Vec<_>>>()?;
            let rep = agent.primal_from_atoms(&atoms, &self.hp)?;
            agent.f = rep.projected.clone();
            if let Some(o) = observer.as_deref_mut() {
                o.on_step(t, 0, &rep);
            }
            loss_sum += global;
            let m = agent.model_order();
            out.metrics.push(RoundMetrics {
                t,
                global_loss: global,
                avg_loss: loss_sum / (t + 1) as f64,
                max_violation: 0.0,
                avg_violation: 0.0,
                mean_violation_pos: 0.0,
                total_model_order: m,
                max_model_order: m,
                dual_norm: 0.0,
            });
            out.model_orders.push(vec![m]);
            out.max_duals.push(vec![0.0]);
            out.bandwidths.push(vec![agent.spec().bandwidth()]);
        }
        out.agents = vec![agent];
        Ok(out)
    }

    fn next_round(&self, t: usize) -> Result<Option<Vec<Sample>>> {
        let Some(samples) = self.source.round(t)? else {
            return Ok(None);
        };
        if samples.len() != self.source.agents() {
            return Err(Error::Data(format!(
                "round {t}: expected {} samples, got {}",
                self.source.agents(),
                samples.len()
            )));
        }
        for s in &samples {
            if s.x.len() != self.source.dim() {
                return Err(Error::Dimension {
                    expected: self.source.dim(),
                    found: s.x.len(),
                });
            }
        }
        Ok(Some(samples))
    }

    fn drive(
        &self,
        mut agents: Vec<AgentState>,
        mut observer: Option<&mut dyn Observer>,
        update: &Update<'_>,
    ) -> Result<RunResult> {
        self.check_agents(&agents)?;
        let topo = self.topology;
        let directed: Vec<(usize, usize)> = topo.directed_edges().collect();
        let mut slack_sum = vec![0.0; directed.len()];
        let mut pos_sum = vec![0.0; directed.len()];
        let mut loss_sum = 0.0;
        let mut out = RunResult::empty();
        let parallel = self.schedule == Schedule::Parallel;

        for t in 0..self.rounds {
            let Some(samples) = self.next_round(t)? else {
                let msg = exhausted(t, self.rounds);
                log::warn!("{msg}");
                out.early_stop = Some(msg);
                break;
            };

            // exchange: f_j(x_i) from the round-start snapshot, plus f_i(x_i)
            let snapshot = &agents;
            let exchange = |i: usize| -> Result<(f64, BTreeMap<usize, f64>)> {
                let x = &samples[i].x;
                let own = snapshot[i].f.evaluate(x)?;
                let evals = topo
                    .neighbors(i)?
                    .iter()
                    .map(|&j| snapshot[j].f.evaluate(x).map(|v| (j, v)))
                    .collect::<Result<_>>()?;
                Ok((own, evals))
            };
            let exchanged: Vec<(f64, BTreeMap<usize, f64>)> = if parallel {
                (0..agents.len()).into_par_iter().map(exchange).collect::<Result<_>>()?
            } else {
                (0..agents.len()).map(exchange).collect::<Result<_>>()?
            };
            out.exchanged += exchanged.iter().map(|(_, e)| e.len()).sum::<usize>();

            let mut global = 0.0;
            for (i, a) in agents.iter().enumerate() {
                global += a.loss.loss(exchanged[i].0, samples[i].y);
            }
            loss_sum += global;
            let mut max_violation = f64::NEG_INFINITY;
            let mut pos_total = 0.0;
            for (k, &(i, j)) in directed.iter().enumerate() {
                let (own, evals) = &exchanged[i];
                let gamma = topo.gamma(i, j).expect("directed edge has a tolerance");
                let slack = agents[i].prox.value(*own, evals[&j]) - gamma;
                max_violation = max_violation.max(slack);
                slack_sum[k] += slack;
                pos_sum[k] += slack.max(0.0);
                pos_total += slack.max(0.0);
            }

            type Item<'x> = (&'x mut AgentState, (&'x Sample, &'x (f64, BTreeMap<usize, f64>)));
            let step = |(a, (s, (_, e))): Item<'_>| update(a, s, e);
            let reports: Vec<Option<PrimalReport>> = if parallel {
                agents
                    .par_iter_mut()
                    .zip(samples.par_iter().zip(exchanged.par_iter()))
                    .map(step)
                    .collect::<Result<_>>()?
            } else {
                agents
                    .iter_mut()
                    .zip(samples.iter().zip(exchanged.iter()))
                    .map(step)
                    .collect::<Result<_>>()?
            };
            if let Some(o) = observer.as_deref_mut() {
                for (i, r) in reports.iter().enumerate() {
                    if let Some(r) = r {
                        o.on_step(t, i, r);
                    }
                }
            }

            let n = (t + 1) as f64;
            let orders: Vec<usize> = agents.iter().map(AgentState::model_order).collect();
            let mut dual2 = 0.0;
            for a in &agents {
                for m in a.out_duals.values() {
                    dual2 += m * m;
                }
            }
            let (max_violation, avg_violation, mean_pos) = if directed.is_empty() {
                (0.0, 0.0, 0.0)
            } else {
                (
                    max_violation,
                    slack_sum.iter().map(|s| s / n).fold(f64::NEG_INFINITY, f64::max),
                    pos_total / directed.len() as f64,
                )
            };
            out.metrics.push(RoundMetrics {
                t,
                global_loss: global,
                avg_loss: loss_sum / n,
                max_violation,
                avg_violation,
                mean_violation_pos: mean_pos,
                total_model_order: orders.iter().sum(),
                max_model_order: orders.iter().copied().max().unwrap_or(0),
                dual_norm: dual2.sqrt(),
            });
            out.max_duals.push(agents.iter().map(AgentState::max_dual).collect());
            out.bandwidths.push(agents.iter().map(|a| a.spec().bandwidth()).collect());
            out.model_orders.push(orders);
        }

        let n = out.metrics.len().max(1) as f64;
        for (k, e) in directed.iter().enumerate() {
            out.edge_avg_slack.insert(*e, slack_sum[k] / n);
            out.edge_avg_pos_slack.insert(*e, pos_sum[k] / n);
        }
        out.agents = agents;
        Ok(out)
    }
}

impl RunResult {
    fn empty() -> Self {
        RunResult {
            metrics: Vec::new(),
            agents: Vec::new(),
            model_orders: Vec::new(),
            max_duals: Vec::new(),
            bandwidths: Vec::new(),
            edge_avg_slack: BTreeMap::new(),
            edge_avg_pos_slack: BTreeMap::new(),
            exchanged: 0,
            early_stop: None,
        }
    }
}

fn exhausted(t: usize, rounds: usize) -> String {
    format!("data source exhausted after {t} of {rounds} rounds")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOrderCheck {
    /// Largest `M_it / (R_M,it / alpha)^(2p)` over the run.
    pub beta: f64,
    /// The same maximum over the third and fourth quarters of the run.
    pub beta_third_quarter: f64,
    pub beta_last_quarter: f64,
    pub finite: bool,
    pub stable: bool,
}

impl ModelOrderCheck {
    pub fn ok(&self) -> bool {
        self.finite && self.stable
    }
}

/// Fits `beta` in `M_it <= beta (R_M,it / alpha)^(2p)`, with
/// `R_M,it = C + Lh E max_j mu_ij,t` and `E` the number of edges. The fit is
/// stable when the two quarter-wise maxima in the second half agree within
/// a factor 2.
pub fn check_model_order_bound(
    result: &RunResult,
    lipschitz_c: f64,
    lipschitz_lh: f64,
    edges: usize,
    alpha: f64,
    p: usize,
) -> Result<ModelOrderCheck> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let n = result.model_orders.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 rounds, got {n}")));
    }
    let mut finite = true;
    let ratio_max = |range: std::ops::Range<usize>, finite: &mut bool| {
        let mut best: f64 = 0.0;
        for t in range {
            for (i, &m) in result.model_orders[t].iter().enumerate() {
                let rm = lipschitz_c + lipschitz_lh * edges as f64 * result.max_duals[t][i];
                let env = (rm / alpha).powi(2 * p as i32);
                let r = m as f64 / env;
                if !r.is_finite() {
                    *finite = false;
                }
                best = best.max(r);
            }
        }
        best
    };
    let beta = ratio_max(0..n, &mut finite);
    let q3 = ratio_max(n / 2..3 * n / 4, &mut finite);
    let q4 = ratio_max(3 * n / 4..n, &mut finite);
    let (lo, hi) = (q3.min(q4), q3.max(q4));
    let stable = hi == 0.0 || (lo > 0.0 && hi / lo <= 2.0);
    Ok(ModelOrderCheck {
        beta,
        beta_third_quarter: q3,
        beta_last_quarter: q4,
        finite,
        stable,
    })
}

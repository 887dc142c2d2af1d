//! Per-agent primal-dual state machine.
//!
//! One round for agent `i`, given its sample `(x, y)` and the neighbour
//! evaluations `f_j(x)` taken from the round-start snapshot:
//!
//! 1. functional gradient step: shrink the weights by `1 - eta*lambda` and
//!    append `x` with weight `-eta * (l'(f_i(x), y) + sum_j mu_ij h'(f_i(x), f_j(x)))`;
//! 2. optionally re-estimate the Gaussian bandwidth on the grown dictionary;
//! 3. compress with KOMP, then project onto the Hilbert ball;
//! 4. dual ascent on each outgoing edge, using the same round-start values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{squared_distance, Dictionary, KernelSpec};
use crate::komp::{komp_prune, KompBudget};
use crate::objectives::{LossSpec, ProximitySpec};
use crate::rkhs::KernelExpansion;
use crate::theory::TheoryConstants;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub lambda: f64,
    pub delta: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub radius: f64,
    pub adapt_bandwidth: bool,
}

impl HyperParams {
    /// Compression budget from the parsimony constant: `epsilon = P * eta^2`.
    pub fn parsimony_budget(parsimony: f64, eta: f64) -> f64 {
        parsimony * eta * eta
    }

    /// `alpha = epsilon / eta`.
    pub fn alpha(&self) -> f64 {
        self.epsilon / self.eta
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.eta > 0.0) {
            return bad(format!("step size must be positive, got {}", self.eta));
        }
        if !(self.lambda > 0.0) {
            return bad(format!("regularizer lambda must be positive, got {}", self.lambda));
        }
        if !(self.eta * self.lambda < 1.0) {
            return bad(format!(
                "step size must satisfy eta < 1/lambda (eta={}, lambda={})",
                self.eta, self.lambda
            ));
        }
        if !(self.delta >= 0.0) {
            return bad(format!("dual regularizer must be non-negative, got {}", self.delta));
        }
        if !(self.nu >= 0.0) {
            return bad(format!("tightening nu must be non-negative, got {}", self.nu));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("compression budget must be non-negative, got {}", self.epsilon));
        }
        if !(self.radius > 0.0) {
            return bad(format!("ball radius must be positive, got {}", self.radius));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Sample { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub f: KernelExpansion,
    /// `mu_ij` for every neighbour `j`, keyed by neighbour id.
    pub out_duals: BTreeMap<usize, f64>,
    pub loss: LossSpec,
    pub prox: ProximitySpec,
}

/// Everything one primal step produced; the intermediate functions are kept
/// so callers can audit the compression contract.
#[derive(Debug, Clone)]
pub struct PrimalReport {
    pub uncompressed: KernelExpansion,
    /// KOMP output before the ball projection.
    pub compressed: KernelExpansion,
    pub projected: KernelExpansion,
    pub pruned: usize,
    /// Coefficient of the appended atom, `-eta * (l' + sum mu h')`.
    pub new_weight: f64,
}

impl AgentState {
    /// Fresh agent with `f = 0` and zero duals on every incident edge.
    pub fn new(
        id: usize,
        spec: KernelSpec,
        dim: usize,
        topology: &Topology,
        loss: LossSpec,
        prox: ProximitySpec,
    ) -> Result<Self> {
        let out_duals = topology.neighbors(id)?.iter().map(|&j| (j, 0.0)).collect();
        Ok(AgentState {
            id,
            f: KernelExpansion::zero(spec, dim),
            out_duals,
            loss,
            prox,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        self.f.spec()
    }

    pub fn model_order(&self) -> usize {
        self.f.len()
    }

    pub fn max_dual(&self) -> f64 {
        self.out_duals.values().copied().fold(0.0, f64::max)
    }

    fn neighbor_value(&self, evals: &BTreeMap<usize, f64>, j: usize) -> Result<f64> {
        evals.get(&j).copied().ok_or_else(|| {
            Error::Protocol(format!(
                "agent {} is missing the evaluation from neighbour {j}",
                self.id
            ))
        })
    }

    /// `l'(f_i(x), y) + sum_j mu_ij h'(f_i(x), f_j(x))`, with the given duals.
    pub fn gradient_coefficient_with(
        &self,
        own_value: f64,
        sample: &Sample,
        evals: &BTreeMap<usize, f64>,
        duals: &BTreeMap<usize, f64>,
    ) -> Result<f64> {
        let mut g = self.loss.deriv(own_value, sample.y);
        for (&j, &mu) in duals {
            let fj = self.neighbor_value(evals, j)?;
            g += mu * self.prox.deriv_first(own_value, fj);
        }
        Ok(g)
    }

    pub fn gradient_coefficient(
        &self,
        own_value: f64,
        sample: &Sample,
        evals: &BTreeMap<usize, f64>,
    ) -> Result<f64> {
        self.gradient_coefficient_with(own_value, sample, evals, &self.out_duals)
    }

    /// Un-projected functional stochastic gradient step.
    pub fn primal_uncompressed(
        &self,
        sample: &Sample,
        evals: &BTreeMap<usize, f64>,
        hp: &HyperParams,
    ) -> Result<KernelExpansion> {
        let own = self.f.evaluate(&sample.x)?;
        let coef = self.gradient_coefficient(own, sample, evals)?;
        self.f
            .scale_weights(1.0 - hp.eta * hp.lambda)
            .append_atom(&sample.x, -hp.eta * coef)
    }

    /// Gradient step, optional bandwidth update, KOMP and ball projection.
    /// Does not touch `self`; see [`AgentState::step`].
    pub fn primal_step(
        &self,
        sample: &Sample,
        evals: &BTreeMap<usize, f64>,
        hp: &HyperParams,
    ) -> Result<PrimalReport> {
        let own = self.f.evaluate(&sample.x)?;
        let coef = self.gradient_coefficient(own, sample, evals)?;
        self.primal_from_coefficient(sample, coef, hp)
    }

    pub(crate) fn primal_from_coefficient(
        &self,
        sample: &Sample,
        coef: f64,
        hp: &HyperParams,
    ) -> Result<PrimalReport> {
        self.primal_from_atoms(&[(sample.x.as_slice(), coef)], hp)
    }

    /// Step that appends one atom per `(x, coef)` pair. Pairs with identical
    /// inputs are folded into a single atom first. `new_weight` reports the
    /// sum of the appended weights.
    pub(crate) fn primal_from_atoms(&self, atoms: &[(&[f64], f64)], hp: &HyperParams) -> Result<PrimalReport> {
        let mut folded: Vec<(&[f64], f64)> = Vec::with_capacity(atoms.len());
        for &(x, coef) in atoms {
            match folded.iter_mut().find(|(p, _)| *p == x) {
                Some(entry) => entry.1 += coef,
                None => folded.push((x, coef)),
            }
        }
        let mut uncompressed = self.f.scale_weights(1.0 - hp.eta * hp.lambda);
        let mut new_weight = 0.0;
        for (x, coef) in folded {
            uncompressed = uncompressed.append_atom(x, -hp.eta * coef)?;
            new_weight += -hp.eta * coef;
        }
        if hp.adapt_bandwidth {
            let sigma = adapt_bandwidth(uncompressed.dictionary(), uncompressed.spec().bandwidth());
            uncompressed = uncompressed.with_spec(uncompressed.spec().with_bandwidth(sigma)?);
        }
        let out = komp_prune(&uncompressed, &KompBudget::new(hp.epsilon)?)?;
        let projected = out.expansion.ball_project(hp.radius)?;
        Ok(PrimalReport {
            uncompressed,
            compressed: out.expansion,
            projected,
            pruned: out.pruned,
            new_weight,
        })
    }

    /// Projected dual ascent on every outgoing edge:
    /// `mu <- [mu (1 - delta eta^2) + eta (h(f_i(x), f_j(x)) - gamma_ij + nu)]_+`.
    pub fn dual_step(
        &self,
        sample: &Sample,
        evals: &BTreeMap<usize, f64>,
        topology: &Topology,
        hp: &HyperParams,
    ) -> Result<BTreeMap<usize, f64>> {
        let own = self.f.evaluate(&sample.x)?;
        self.dual_from_value(own, evals, topology, hp)
    }

    pub(crate) fn dual_from_value(
        &self,
        own: f64,
        evals: &BTreeMap<usize, f64>,
        topology: &Topology,
        hp: &HyperParams,
    ) -> Result<BTreeMap<usize, f64>> {
        let mut next = BTreeMap::new();
        for (&j, &mu) in &self.out_duals {
            let fj = self.neighbor_value(evals, j)?;
            let gamma = topology.gamma(self.id, j).ok_or_else(|| {
                Error::Protocol(format!("no edge ({}, {j}) in the topology", self.id))
            })?;
            let slack = self.prox.value(own, fj) - gamma + hp.nu;
            next.insert(j, dual_update(mu, slack, hp.eta, hp.delta));
        }
        Ok(next)
    }

    /// Simultaneous primal-dual update: both halves read the round-start
    /// function, then the new function and duals are installed.
    pub fn step(
        &mut self,
        sample: &Sample,
        evals: &BTreeMap<usize, f64>,
        topology: &Topology,
        hp: &HyperParams,
    ) -> Result<PrimalReport> {
        let own = self.f.evaluate(&sample.x)?;
        let duals = self.dual_from_value(own, evals, topology, hp)?;
        let coef = self.gradient_coefficient(own, sample, evals)?;
        let report = self.primal_from_coefficient(sample, coef, hp)?;
        self.f = report.projected.clone();
        self.out_duals = duals;
        Ok(report)
    }
}

/// One projected dual ascent step for a single edge, given `h - gamma + nu`.
pub fn dual_update(mu: f64, slack: f64, eta: f64, delta: f64) -> f64 {
    (mu * (1.0 - delta * eta * eta) + eta * slack).max(0.0)
}

/// Online bandwidth re-estimate over a dictionary:
///
/// `sigma' = sqrt( (1/M) sum_l [ sum_{k!=l} w_lk |d_l - d_k|^2 / sum_{k!=l} w_lk ] )`,
/// `w_lk = exp(-|d_l - d_k|^2 / (2 sigma^2))`.
///
/// Dictionaries with fewer than two atoms, or degenerate results, leave the
/// bandwidth unchanged.
pub fn adapt_bandwidth(dict: &Dictionary, sigma: f64) -> f64 {
    let m = dict.len();
    if m < 2 {
        return sigma;
    }
    let two_s2 = 2.0 * sigma * sigma;
    let mut total = 0.0;
    let mut d2 = Vec::with_capacity(m - 1);
    for l in 0..m {
        d2.clear();
        d2.extend((0..m).filter(|&k| k != l).map(|k| squared_distance(dict.point(l), dict.point(k))));
        // weights are shifted by the nearest distance so they cannot all underflow
        let base = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let (mut num, mut den) = (0.0, 0.0);
        for &d in &d2 {
            let w = (-(d - base) / two_s2).exp();
            num += w * d;
            den += w;
        }
        total += num / den;
    }
    let next = (total / m as f64).sqrt();
    if next.is_finite() && next > 0.0 {
        next
    } else {
        sigma
    }
}

/// Tightening `nu = zeta / sqrt(T) + Lambda * alpha` with `zeta` and `Lambda`
/// at their smallest admissible values.
pub fn compute_nu(constants: &TheoryConstants, horizon: usize, alpha: f64) -> Result<f64> {
    constants.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(constants.zeta() / (horizon as f64).sqrt() + constants.lambda_bound() * alpha)
}

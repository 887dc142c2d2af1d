//! Flat experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use halk::datagen::StreamMode;
use halk::objectives::{LossFamily, LossSpec, ProximityFamily, ProximitySpec, DEFAULT_HUBER_THRESHOLD};
use halk::simulator::Schedule;
use halk::theory::TheoryConstants;
use halk::topology::{DistanceMetric, GammaRule};
use halk::{HyperParams, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Resample,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbfLayout {
    /// Evenly spaced centres per feature over the observed range.
    Grid,
}

/// Every key is optional in the file; missing keys take the field benchmark
/// defaults. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub eta: f64,
    pub lambda: f64,
    pub delta: f64,
    pub nu: f64,
    /// Parsimony constant `P`; the budget is `P * eta^2` unless `epsilon` is set.
    pub parsimony: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Hilbert-ball radius.
    pub radius_b: f64,
    pub bandwidth: f64,
    pub adapt_bandwidth: bool,

    pub loss: LossKind,
    pub huber_threshold: f64,
    /// Lipschitz modulus for the squared loss; Huber uses its threshold.
    pub loss_lipschitz: f64,
    pub proximity: ProximityFamily,
    pub proximity_lipschitz: f64,

    pub nodes: usize,
    pub area: f64,
    pub omega: f64,
    pub process_noise_var: f64,
    pub obs_noise_var: f64,
    /// Field runs: unit-square units. Data runs: units of `distance`.
    pub connect_radius: f64,
    /// Data runs only; the field graph always uses the correlation rule.
    pub gamma_rule: GammaRule,
    pub gamma_scale: f64,
    pub distance: DistanceMetric,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    pub target_column: String,
    pub stream_mode: StreamKind,

    pub rounds: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: Schedule,

    pub penalty_c: f64,
    pub penalty_proximity: ProximityFamily,
    pub rbf_points: usize,
    pub rbf_layout: RbfLayout,
    pub centralized_parsimony: f64,

    /// Slater margin; with `k1` and `nu_from_theory` it sets `nu`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slater_xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    pub nu_from_theory: bool,
    /// Per-round optimum of the global loss, for the rate check.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimum: Option<f64>,
    pub rate_floor: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            eta: 0.01,
            lambda: 1e-5,
            delta: 1e-5,
            nu: 0.0,
            parsimony: 8.0,
            epsilon: None,
            radius_b: 100.0,
            bandwidth: 0.05,
            adapt_bandwidth: false,
            loss: LossKind::Huber,
            huber_threshold: DEFAULT_HUBER_THRESHOLD,
            loss_lipschitz: 1.0,
            proximity: ProximityFamily::AbsoluteDifference,
            proximity_lipschitz: 1.0,
            nodes: 40,
            area: 100.0,
            omega: 2.0,
            process_noise_var: 0.1,
            obs_noise_var: 0.5,
            connect_radius: 0.3,
            gamma_rule: GammaRule::Correlation,
            gamma_scale: 1.0,
            distance: DistanceMetric::Euclidean,
            data_path: None,
            target_column: "y".into(),
            stream_mode: StreamKind::Resample,
            rounds: 1500,
            seed: 1,
            out_dir: PathBuf::from("out"),
            schedule: Schedule::Parallel,
            penalty_c: 0.08,
            penalty_proximity: ProximityFamily::AbsoluteDifference,
            rbf_points: 20,
            rbf_layout: RbfLayout::Grid,
            centralized_parsimony: 0.001,
            slater_xi: None,
            k1: None,
            nu_from_theory: false,
            optimum: None,
            rate_floor: 0.0,
        }
    }
}

impl ExperimentConfig {
    #[cfg(test)]
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads `path` (or starts from the defaults), applies `key=value`
    /// overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg: ExperimentConfig = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper_params(self.parsimony)?.validate()?;
        self.kernel()?;
        self.loss_spec()?;
        self.proximity_spec()?;
        ProximitySpec::new(self.penalty_proximity, self.proximity_lipschitz)?;
        if self.rounds == 0 {
            bail!("rounds must be positive");
        }
        if self.nodes < 2 {
            bail!("need at least 2 nodes, got {}", self.nodes);
        }
        for (name, v) in [
            ("area", self.area),
            ("connect_radius", self.connect_radius),
            ("gamma_scale", self.gamma_scale),
        ] {
            if !(v > 0.0) {
                bail!("{name} must be positive, got {v}");
            }
        }
        if !(self.process_noise_var >= 0.0 && self.obs_noise_var >= 0.0) {
            bail!("noise variances must be non-negative");
        }
        if !(self.penalty_c >= 0.0) {
            bail!("penalty_c must be non-negative, got {}", self.penalty_c);
        }
        if self.rbf_points == 0 {
            bail!("rbf_points must be positive");
        }
        if !(self.centralized_parsimony >= 0.0) {
            bail!("centralized_parsimony must be non-negative");
        }
        if self.nu_from_theory && (self.slater_xi.is_none() || self.k1.is_none()) {
            bail!("nu_from_theory needs slater_xi and k1");
        }
        Ok(())
    }

    /// Hyper-parameters with parsimony `p`; an explicit `epsilon` wins.
    pub fn hyper_params(&self, p: f64) -> Result<HyperParams> {
        let epsilon = self.epsilon.unwrap_or_else(|| HyperParams::parsimony_budget(p, self.eta));
        if !(epsilon >= 0.0) {
            bail!("compression budget must be non-negative, got {epsilon}");
        }
        Ok(HyperParams {
            eta: self.eta,
            lambda: self.lambda,
            delta: self.delta,
            nu: self.nu,
            epsilon,
            radius: self.radius_b,
            adapt_bandwidth: self.adapt_bandwidth,
        })
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        Ok(KernelSpec::gaussian(self.bandwidth)?)
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        Ok(match self.loss {
            LossKind::Squared => LossSpec::new(LossFamily::SquaredError, self.loss_lipschitz)?,
            LossKind::Huber => LossSpec::huber(self.huber_threshold)?,
        })
    }

    pub fn proximity_spec(&self) -> Result<ProximitySpec> {
        Ok(ProximitySpec::new(self.proximity, self.proximity_lipschitz)?)
    }

    pub fn penalty_spec(&self) -> Result<ProximitySpec> {
        Ok(ProximitySpec::new(self.penalty_proximity, self.proximity_lipschitz)?)
    }

    pub fn stream(&self) -> StreamMode {
        match self.stream_mode {
            StreamKind::Resample => StreamMode::Resample { seed: self.seed },
            StreamKind::Sequential => StreamMode::Sequential,
        }
    }

    /// Theory constants for a graph with `agents` nodes and `edges` edges,
    /// when `slater_xi` and `k1` are given.
    pub fn theory_constants(&self, agents: usize, edges: usize) -> Result<Option<TheoryConstants>> {
        let (Some(xi), Some(k1)) = (self.slater_xi, self.k1) else {
            return Ok(None);
        };
        let c = TheoryConstants {
            radius: self.radius_b,
            agents,
            lipschitz_c: self.loss_spec()?.lipschitz_c,
            kernel_sup: self.kernel()?.sup_norm(),
            lambda: self.lambda,
            slater_xi: xi,
            lipschitz_lh: self.proximity_lipschitz,
            edges,
            k1,
            delta: self.delta,
        };
        c.validate()?;
        Ok(Some(c))
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(raw: &str) -> std::result::Result<(String, toml::Value), String> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{raw}`"));
    }
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

//! Synthetic correlated field and per-node CSV data, behind a common
//! [`DataSource`] interface.
//!
//! Randomness is drawn from independent ChaCha substreams keyed by
//! `(seed, tag, a, b)`, so results never depend on the order in which
//! agents or rounds are evaluated.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agent::Sample;
use crate::error::{Error, Result};
use crate::topology::{build_geometric, GammaRule, Topology};

const CHOL_JITTER: f64 = 1e-10;
const CHOL_MAX_JITTER: f64 = 1e-4;

/// Substream tags.
pub mod tags {
    pub const POSITIONS: u64 = 1;
    pub const PROCESS_NOISE: u64 = 2;
    pub const OBS_NOISE: u64 = 3;
    pub const RESAMPLE: u64 = 4;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for the substream `(seed, tag, a, b)`.
pub fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [tag, a, b] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    /// Node positions in the square `[0, area]^2`.
    pub positions: Vec<[f64; 2]>,
    pub area: f64,
    /// `R_s[i][j] = exp(-|l_i - l_j| / area)`.
    pub correlation: DMatrix<f64>,
    /// Lower-triangular `L` with `L L^T = R_s` (so `C = L^T` in `C^T C = R_s`).
    pub chol: DMatrix<f64>,
    /// `(1/V, 2/V, ..., 1)`.
    pub mean: Vec<f64>,
    pub omega: f64,
    pub process_noise_var: f64,
    pub obs_noise_var: f64,
    pub seed: u64,
}

impl FieldModel {
    pub fn nodes(&self) -> usize {
        self.positions.len()
    }

    /// Positions scaled to the unit square.
    pub fn normalized_positions(&self) -> Vec<[f64; 2]> {
        self.positions
            .iter()
            .map(|p| [p[0] / self.area, p[1] / self.area])
            .collect()
    }

    /// Model over fixed positions. Positions are divided by `area` before
    /// the correlation is formed.
    pub fn from_positions(positions: Vec<[f64; 2]>, area: f64, omega: f64, seed: u64) -> Result<Self> {
        let v = positions.len();
        if v < 2 {
            return Err(Error::InvalidArgument(format!("field needs at least 2 nodes, got {v}")));
        }
        if !(area > 0.0) {
            return Err(Error::InvalidArgument(format!("area side must be positive, got {area}")));
        }
        let correlation = DMatrix::from_fn(v, v, |i, j| {
            let d = ((positions[i][0] - positions[j][0]).powi(2)
                + (positions[i][1] - positions[j][1]).powi(2))
            .sqrt();
            (-d / area).exp()
        });
        let chol = cholesky_lower(&correlation)?;
        Ok(FieldModel {
            positions,
            area,
            correlation,
            chol,
            mean: (1..=v).map(|k| k as f64 / v as f64).collect(),
            omega,
            process_noise_var: 0.1,
            obs_noise_var: 0.5,
            seed,
        })
    }

    pub fn with_noise(mut self, process_noise_var: f64, obs_noise_var: f64) -> Result<Self> {
        if !(process_noise_var >= 0.0) || !(obs_noise_var >= 0.0) {
            return Err(Error::InvalidArgument("noise variances must be non-negative".into()));
        }
        self.process_noise_var = process_noise_var;
        self.obs_noise_var = obs_noise_var;
        Ok(self)
    }

    /// Regression input shared by all nodes at round `t`: the phase of the
    /// periodic mean, `frac(omega t / 2 pi)`.
    pub fn feature(&self, t: usize) -> f64 {
        let turns = self.omega * t as f64 / (2.0 * PI);
        turns - turns.floor()
    }

    /// `s = pi + L (1 sin(omega t) + v)`, `y = s + n`.
    pub fn sample_round(&self, t: usize) -> (Vec<f64>, Vec<f64>) {
        let v = self.nodes();
        let phase = (self.omega * t as f64).sin();
        let sd_v = self.process_noise_var.sqrt();
        let mut rng = substream(self.seed, tags::PROCESS_NOISE, t as u64, 0);
        let z = DVector::from_fn(v, |_, _| phase + sd_v * rng.sample::<f64, _>(StandardNormal));
        let mixed = &self.chol * z;
        let sd_n = self.obs_noise_var.sqrt();
        let mut s = Vec::with_capacity(v);
        let mut y = Vec::with_capacity(v);
        for i in 0..v {
            let si = self.mean[i] + mixed[i];
            let mut rng = substream(self.seed, tags::OBS_NOISE, t as u64, i as u64);
            s.push(si);
            y.push(si + sd_n * rng.sample::<f64, _>(StandardNormal));
        }
        (s, y)
    }
}

fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut j = 0.0;
    loop {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += j;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l());
        }
        if j >= CHOL_MAX_JITTER {
            return Err(Error::Numeric {
                message: "correlation matrix is not positive definite".into(),
                jitter: j,
                size: n,
            });
        }
        j = if j == 0.0 { CHOL_JITTER } else { j * 10.0 };
    }
}

/// `V` positions drawn uniformly in `[0, area]^2`.
pub fn build_field(v: usize, area: f64, omega: f64, seed: u64) -> Result<FieldModel> {
    build_field_attempt(v, area, omega, seed, 0)
}

fn build_field_attempt(v: usize, area: f64, omega: f64, seed: u64, attempt: u64) -> Result<FieldModel> {
    if !(area > 0.0) {
        return Err(Error::InvalidArgument(format!("area side must be positive, got {area}")));
    }
    let mut rng = substream(seed, tags::POSITIONS, attempt, 0);
    let positions = (0..v)
        .map(|_| [rng.random_range(0.0..area), rng.random_range(0.0..area)])
        .collect();
    FieldModel::from_positions(positions, area, omega, seed)
}

/// Field plus its communication graph: nodes closer than `connect_radius`
/// (in unit-square units) are linked with tolerance `exp(-dist)`. Positions
/// are redrawn from the next substream until the graph is connected.
pub fn build_connected_field(
    v: usize,
    area: f64,
    omega: f64,
    seed: u64,
    connect_radius: f64,
    max_attempts: usize,
) -> Result<(FieldModel, Topology)> {
    let mut last = None;
    for attempt in 0..max_attempts.max(1) {
        let model = build_field_attempt(v, area, omega, seed, attempt as u64)?;
        match build_geometric(&model.normalized_positions(), connect_radius, GammaRule::Correlation, 1.0) {
            Ok(t) => {
                if attempt > 0 {
                    log::info!("field graph connected after {} redraws", attempt);
                }
                return Ok((model, t));
            }
            Err(e @ Error::Topology(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Topology("no connected layout found".into())))
}

/// Samples for every agent at each round, or `None` once exhausted.
pub trait DataSource: Sync {
    fn agents(&self) -> usize;
    fn dim(&self) -> usize;
    fn round(&self, t: usize) -> Result<Option<Vec<Sample>>>;
}

#[derive(Debug, Clone)]
pub struct FieldSource {
    pub model: FieldModel,
}

impl DataSource for FieldSource {
    fn agents(&self) -> usize {
        self.model.nodes()
    }

    fn dim(&self) -> usize {
        1
    }

    fn round(&self, t: usize) -> Result<Option<Vec<Sample>>> {
        let x = self.model.feature(t);
        let (_, y) = self.model.sample_round(t);
        Ok(Some(y.into_iter().map(|yi| Sample::new(vec![x], yi)).collect()))
    }
}

/// Per-node observations loaded from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub positions: Vec<[f64; 2]>,
    pub streams: Vec<Vec<Sample>>,
    pub dim: usize,
}

/// Reads `node_id,pos_x,pos_y,x0..x{p-1},<target>`. Feature columns are the
/// ones named `x0, x1, ...`; other extra columns are ignored. Node ids must
/// be `0..N-1`; each node's position is taken from its first row.
pub fn load_node_csv(path: &Path, target: &str) -> Result<NodeData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing required column `{name}`")))
    };
    let id_col = find("node_id")?;
    let px = find("pos_x")?;
    let py = find("pos_y")?;
    let y_col = find(target)?;
    let mut feature_cols = Vec::new();
    while let Ok(c) = find(&format!("x{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    if feature_cols.is_empty() {
        return Err(Error::Data("missing required column `x0`".into()));
    }

    let mut nodes: BTreeMap<usize, ([f64; 2], Vec<Sample>)> = BTreeMap::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec?;
        let get = |c: usize| -> Result<&str> {
            rec.get(c)
                .map(str::trim)
                .ok_or_else(|| Error::Data(format!("line {line}: missing column {}", &header[c])))
        };
        let num = |c: usize| -> Result<f64> {
            get(c)?
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("line {line}: column {}: {e}", &header[c])))
        };
        let id: usize = get(id_col)?
            .parse()
            .map_err(|e| Error::Data(format!("line {line}: node_id: {e}")))?;
        let x = feature_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let y = num(y_col)?;
        let pos = [num(px)?, num(py)?];
        nodes.entry(id).or_insert_with(|| (pos, Vec::new())).1.push(Sample::new(x, y));
    }
    if nodes.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let n = nodes.keys().next_back().map_or(0, |&m| m + 1);
    if let Some(missing) = (0..n).find(|i| !nodes.contains_key(i)) {
        return Err(Error::Data(format!("node {missing} has no rows (ids must be 0..{})", n - 1)));
    }
    let (positions, streams) = nodes.into_values().unzip();
    Ok(NodeData {
        positions,
        streams,
        dim: feature_cols.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Each round draws one row per node uniformly with replacement.
    Resample { seed: u64 },
    /// Rows are consumed in file order; the source ends with the shortest
    /// stream.
    Sequential,
}

#[derive(Debug, Clone)]
pub struct NodeSource {
    pub data: NodeData,
    pub mode: StreamMode,
}

impl DataSource for NodeSource {
    fn agents(&self) -> usize {
        self.data.streams.len()
    }

    fn dim(&self) -> usize {
        self.data.dim
    }

    fn round(&self, t: usize) -> Result<Option<Vec<Sample>>> {
        let mut out = Vec::with_capacity(self.agents());
        for (i, stream) in self.data.streams.iter().enumerate() {
            let row = match self.mode {
                StreamMode::Resample { seed } => {
                    let mut rng = substream(seed, tags::RESAMPLE, t as u64, i as u64);
                    rng.random_range(0..stream.len())
                }
                StreamMode::Sequential => {
                    if t >= stream.len() {
                        return Ok(None);
                    }
                    t
                }
            };
            out.push(stream[row].clone());
        }
        Ok(Some(out))
    }
}

/// Fixed per-round samples held in memory; ends after the last round.
#[derive(Debug, Clone)]
pub struct VecSource {
    pub dim: usize,
    pub rounds: Vec<Vec<Sample>>,
}

impl DataSource for VecSource {
    fn agents(&self) -> usize {
        self.rounds.first().map_or(0, Vec::len)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn round(&self, t: usize) -> Result<Option<Vec<Sample>>> {
        Ok(self.rounds.get(t).cloned())
    }
}

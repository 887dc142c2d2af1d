//! Kernel functions and batch evaluation between point sets.
//!
//! Every kernel evaluation in the crate goes through [`KernelSpec`]. Only the
//! Gaussian family ships today; the enum leaves room for more.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-|x - x'|^2 / (2 sigma^2))`, normalized so that `k(x, x) = 1`.
    Gaussian { bandwidth: f64 },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(KernelSpec::Gaussian { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => bandwidth,
        }
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Result<Self> {
        match self {
            KernelSpec::Gaussian { .. } => KernelSpec::gaussian(bandwidth),
        }
    }

    /// Supremum of `sqrt(k(x, x))` over the domain.
    pub fn sup_norm(&self) -> f64 {
        match self {
            KernelSpec::Gaussian { .. } => 1.0,
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => {
                let d2 = squared_distance(x, x2);
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// A `p x M` set of points, stored atom-major in one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    dim: usize,
    data: Vec<f64>,
}

impl Dictionary {
    pub fn empty(dim: usize) -> Self {
        Dictionary {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_points<P: AsRef<[f64]>>(dim: usize, points: &[P]) -> Result<Self> {
        let mut d = Dictionary::empty(dim);
        for p in points {
            d.push(p.as_ref())?;
        }
        Ok(d)
    }

    /// Builds from a flat atom-major buffer (`len` must be a multiple of `dim`).
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "flat buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Dictionary { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, m: usize) -> &[f64] {
        &self.data[m * self.dim..(m + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        self.data.extend_from_slice(x);
        Ok(())
    }

    /// Sub-dictionary with the atoms at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dictionary {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &m in indices {
            data.extend_from_slice(self.point(m));
        }
        Dictionary {
            dim: self.dim,
            data,
        }
    }

    /// Column-wise concatenation `[self, other]`.
    pub fn concat(&self, other: &Dictionary) -> Result<Dictionary> {
        check_dim(self.dim, other.dim)?;
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Dictionary {
            dim: self.dim,
            data,
        })
    }
}

pub fn eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim(x.len(), x2.len())?;
    Ok(spec.eval_unchecked(x, x2))
}

/// `[k(d_1, x), ..., k(d_M, x)]`.
pub fn kernel_vector(spec: &KernelSpec, dict: &Dictionary, x: &[f64]) -> Result<Vec<f64>> {
    if !dict.is_empty() {
        check_dim(dict.dim(), x.len())?;
    }
    Ok(dict.points().map(|d| spec.eval_unchecked(d, x)).collect())
}

/// Cross-kernel matrix with entry `(m, n) = k(D[m], D2[n])`.
pub fn kernel_matrix(spec: &KernelSpec, dict: &Dictionary, dict2: &Dictionary) -> Result<DMatrix<f64>> {
    if !dict.is_empty() && !dict2.is_empty() {
        check_dim(dict.dim(), dict2.dim())?;
    }
    let (m, n) = (dict.len(), dict2.len());
    if std::ptr::eq(dict, dict2) {
        return Ok(gram(spec, dict));
    }
    Ok(DMatrix::from_fn(m, n, |a, b| {
        spec.eval_unchecked(dict.point(a), dict2.point(b))
    }))
}

/// Symmetric Gram matrix `K_{D,D}`, filled from the upper triangle.
pub fn gram(spec: &KernelSpec, dict: &Dictionary) -> DMatrix<f64> {
    let m = dict.len();
    let mut k = DMatrix::zeros(m, m);
    for a in 0..m {
        k[(a, a)] = spec.eval_unchecked(dict.point(a), dict.point(a));
        for b in (a + 1)..m {
            let v = spec.eval_unchecked(dict.point(a), dict.point(b));
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    k
}

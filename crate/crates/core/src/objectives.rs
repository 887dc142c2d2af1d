//! Local losses and pairwise proximity functions, with the scalar
//! (sub)derivatives the functional gradient needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Huber threshold used by the field benchmark.
pub const DEFAULT_HUBER_THRESHOLD: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossFamily {
    SquaredError,
    Huber { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: LossFamily,
    /// Lipschitz modulus `C` used by the theory helpers.
    pub lipschitz_c: f64,
}

impl LossSpec {
    pub fn squared(lipschitz_c: f64) -> Result<Self> {
        Self::new(LossFamily::SquaredError, lipschitz_c)
    }

    /// Huber loss; its derivative is bounded by the threshold, which is
    /// therefore also its Lipschitz modulus.
    pub fn huber(threshold: f64) -> Result<Self> {
        Self::new(LossFamily::Huber { threshold }, threshold)
    }

    pub fn new(family: LossFamily, lipschitz_c: f64) -> Result<Self> {
        if let LossFamily::Huber { threshold } = family {
            if !(threshold > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "Huber threshold must be positive, got {threshold}"
                )));
            }
        }
        if !(lipschitz_c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz modulus must be positive, got {lipschitz_c}"
            )));
        }
        Ok(LossSpec {
            family,
            lipschitz_c,
        })
    }

    pub fn loss(&self, prediction: f64, target: f64) -> f64 {
        let r = target - prediction;
        match self.family {
            LossFamily::SquaredError => 0.5 * r * r,
            LossFamily::Huber { threshold } => {
                if r.abs() <= threshold {
                    0.5 * r * r
                } else {
                    threshold * r.abs() - 0.5 * threshold * threshold
                }
            }
        }
    }

    /// Derivative with respect to the prediction. At the Huber kink the
    /// quadratic branch is used, which equals `-/+ threshold` there.
    pub fn deriv(&self, prediction: f64, target: f64) -> f64 {
        let r = target - prediction;
        match self.family {
            LossFamily::SquaredError => -r,
            LossFamily::Huber { threshold } => {
                if r.abs() <= threshold {
                    -r
                } else {
                    -threshold * r.signum()
                }
            }
        }
    }
}

pub fn loss(spec: &LossSpec, prediction: f64, target: f64) -> f64 {
    spec.loss(prediction, target)
}

pub fn loss_deriv(spec: &LossSpec, prediction: f64, target: f64) -> f64 {
    spec.deriv(prediction, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityFamily {
    /// `|zi - zj|`
    #[default]
    AbsoluteDifference,
    /// `(zi - zj)^2`
    SquaredDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProximitySpec {
    pub family: ProximityFamily,
    pub lipschitz_lh: f64,
}

impl ProximitySpec {
    pub fn new(family: ProximityFamily, lipschitz_lh: f64) -> Result<Self> {
        if !(lipschitz_lh > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "proximity Lipschitz constant must be positive, got {lipschitz_lh}"
            )));
        }
        Ok(ProximitySpec {
            family,
            lipschitz_lh,
        })
    }

    pub fn absolute() -> Self {
        ProximitySpec {
            family: ProximityFamily::AbsoluteDifference,
            lipschitz_lh: 1.0,
        }
    }

    pub fn value(&self, zi: f64, zj: f64) -> f64 {
        let d = zi - zj;
        match self.family {
            ProximityFamily::AbsoluteDifference => d.abs(),
            ProximityFamily::SquaredDifference => d * d,
        }
    }

    /// Partial derivative in the first argument; the subgradient 0 is used
    /// at a tie for the absolute difference.
    pub fn deriv_first(&self, zi: f64, zj: f64) -> f64 {
        let d = zi - zj;
        match self.family {
            ProximityFamily::AbsoluteDifference => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ProximityFamily::SquaredDifference => 2.0 * d,
        }
    }
}

impl Default for ProximitySpec {
    fn default() -> Self {
        ProximitySpec::absolute()
    }
}

pub fn proximity(spec: &ProximitySpec, zi: f64, zj: f64) -> f64 {
    spec.value(zi, zj)
}

pub fn proximity_deriv_first(spec: &ProximitySpec, zi: f64, zj: f64) -> f64 {
    spec.deriv_first(zi, zj)
}

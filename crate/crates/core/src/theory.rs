//! Executable forms of the analytical bounds, used as one-sided test oracles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, HyperParams, Sample};
use crate::error::{Error, Result};
use crate::rkhs::KernelExpansion;
use crate::topology::Topology;

/// Absolute slack on the compression check, covering round-off in the
/// difference norm.
pub const PROJECTION_SLACK: f64 = 1e-8;

/// Fewest rounds [`rate_regression`] accepts.
pub const MIN_RATE_ROUNDS: usize = 2000;

/// Problem constants of the convergence analysis. `kernel_sup` is `X` with
/// `kappa(x, x) <= X^2`; `edges` is `E`; `k1` bounds the second moment of the
/// constraint slack and must be supplied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub radius: f64,
    pub agents: usize,
    pub lipschitz_c: f64,
    pub kernel_sup: f64,
    pub lambda: f64,
    pub slater_xi: f64,
    pub lipschitz_lh: f64,
    pub edges: usize,
    pub k1: f64,
    pub delta: f64,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("radius", self.radius),
            ("lipschitz_c", self.lipschitz_c),
            ("kernel_sup", self.kernel_sup),
            ("lambda", self.lambda),
            ("slater_xi", self.slater_xi),
            ("lipschitz_lh", self.lipschitz_lh),
            ("k1", self.k1),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.agents == 0 {
            return Err(Error::InvalidArgument("agents must be positive".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be non-negative, got {}", self.delta)));
        }
        Ok(())
    }

    /// `K = 8 V X^2 C^2 + 4 V lambda^2 R^2 + 2 E K1 + 2 E Lh^2 X^2 R^2`.
    pub fn k_constant(&self) -> f64 {
        let v = self.agents as f64;
        let e = self.edges as f64;
        let x2 = self.kernel_sup * self.kernel_sup;
        let r2 = self.radius * self.radius;
        8.0 * v * x2 * self.lipschitz_c.powi(2)
            + 4.0 * v * self.lambda.powi(2) * r2
            + 2.0 * e * self.k1
            + 2.0 * e * self.lipschitz_lh.powi(2) * x2 * r2
    }

    /// Smallest admissible `zeta`.
    pub fn zeta(&self) -> f64 {
        let v = self.agents as f64;
        let q = 4.0 * v * self.radius
            * (self.lipschitz_c * self.kernel_sup + self.lambda * self.radius)
            / self.slater_xi;
        0.5 * (self.radius * self.radius
            + (1.0 + self.delta) * (2.0 + 2.0 * q * q)
            + self.k_constant())
    }

    /// Smallest admissible `Lambda = 4 V R`.
    pub fn lambda_bound(&self) -> f64 {
        4.0 * self.agents as f64 * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub observed: f64,
    pub bound: f64,
    pub ok: bool,
}

impl BoundCheck {
    fn new(observed: f64, bound: f64) -> Self {
        BoundCheck {
            observed,
            bound,
            ok: observed <= bound,
        }
    }
}

/// Squared Hilbert norm of one agent's stochastic primal gradient
/// `g kappa(x, .) + lambda f` against
/// `4 X^2 C^2 + 4 X^2 Lh^2 E ||mu_i||^2 + 2 lambda^2 R^2`, where `E` is the
/// agent's degree (the network bound summed over one agent).
pub fn gradient_norm_bound(
    state: &AgentState,
    sample: &Sample,
    evals: &BTreeMap<usize, f64>,
    hp: &HyperParams,
    constants: &TheoryConstants,
) -> Result<BoundCheck> {
    constants.validate()?;
    let f = &state.f;
    let fx = f.evaluate(&sample.x)?;
    let g = state.gradient_coefficient(fx, sample, evals)?;
    let kxx = crate::kernels::eval(f.spec(), &sample.x, &sample.x)?;
    let observed = g * g * kxx + 2.0 * g * hp.lambda * fx + hp.lambda * hp.lambda * f.squared_norm();

    let x2 = constants.kernel_sup.powi(2);
    let degree = state.out_duals.len() as f64;
    let mu2: f64 = state.out_duals.values().map(|m| m * m).sum();
    let bound = 4.0 * x2 * constants.lipschitz_c.powi(2)
        + 4.0 * x2 * constants.lipschitz_lh.powi(2) * degree * mu2
        + 2.0 * hp.lambda.powi(2) * constants.radius.powi(2);
    Ok(BoundCheck::new(observed.max(0.0), bound))
}

/// Squared norm of one agent's stochastic dual gradient
/// `(h_ij - gamma_ij + nu - delta eta mu_ij)_j` against
/// `E (2 K1 + 2 Lh^2 X^2 R^2 + 2 delta^2 eta^2 ||mu_i||^2)`.
pub fn dual_gradient_bound(
    state: &AgentState,
    sample: &Sample,
    evals: &BTreeMap<usize, f64>,
    topology: &Topology,
    hp: &HyperParams,
    constants: &TheoryConstants,
) -> Result<BoundCheck> {
    constants.validate()?;
    let fx = state.f.evaluate(&sample.x)?;
    let mut observed = 0.0;
    let mut mu2 = 0.0;
    for (&j, &mu) in &state.out_duals {
        let fj = *evals
            .get(&j)
            .ok_or_else(|| Error::Protocol(format!("missing evaluation from neighbour {j}")))?;
        let gamma = topology
            .gamma(state.id, j)
            .ok_or_else(|| Error::Protocol(format!("no edge ({}, {j})", state.id)))?;
        let d = state.prox.value(fx, fj) - gamma + hp.nu - hp.delta * hp.eta * mu;
        observed += d * d;
        mu2 += mu * mu;
    }
    let e = state.out_duals.len() as f64;
    let bound = e
        * (2.0 * constants.k1
            + 2.0 * constants.lipschitz_lh.powi(2) * constants.kernel_sup.powi(2) * constants.radius.powi(2)
            + 2.0 * (hp.delta * hp.eta).powi(2) * mu2);
    Ok(BoundCheck::new(observed, bound))
}

/// Compression contract: `||before - after||_H <= epsilon` (plus
/// [`PROJECTION_SLACK`]).
pub fn projection_error_bound(
    before: &KernelExpansion,
    after: &KernelExpansion,
    epsilon: f64,
) -> Result<BoundCheck> {
    let err = before.difference(after)?.hilbert_norm();
    Ok(BoundCheck {
        observed: err,
        bound: epsilon,
        ok: err <= epsilon + PROJECTION_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Points that entered the fit (positive gaps in the second half).
    pub points: usize,
}

impl RateFit {
    pub fn ok(&self, max_slope: f64) -> bool {
        self.slope <= max_slope
    }
}

/// Least-squares fit of `log(avg[t] - optimum - floor)` against `log(t + 1)`
/// over the second half of the series. Non-positive gaps are skipped.
pub fn rate_regression(prefix_avg: &[f64], optimum: f64, floor: f64) -> Result<RateFit> {
    if prefix_avg.len() < MIN_RATE_ROUNDS {
        return Err(Error::InvalidArgument(format!(
            "rate regression needs at least {MIN_RATE_ROUNDS} rounds, got {}",
            prefix_avg.len()
        )));
    }
    let start = prefix_avg.len() / 2;
    let (xs, ys): (Vec<f64>, Vec<f64>) = prefix_avg[start..]
        .iter()
        .enumerate()
        .filter_map(|(k, &v)| {
            let gap = v - optimum - floor;
            (gap > 0.0 && gap.is_finite()).then(|| (((start + k + 1) as f64).ln(), gap.ln()))
        })
        .unzip();
    if xs.len() < 2 {
        return Err(Error::Numeric {
            message: "fewer than two positive gaps to regress".into(),
            jitter: 0.0,
            size: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        points: xs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Dictionary, KernelSpec};
    use crate::objectives::{LossSpec, ProximitySpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constants(edges: usize) -> TheoryConstants {
        TheoryConstants {
            radius: 2.0,
            agents: 1,
            lipschitz_c: 3.0,
            kernel_sup: 1.0,
            lambda: 0.1,
            slater_xi: 0.5,
            lipschitz_lh: 1.0,
            edges,
            k1: 10.0,
            delta: 0.0,
        }
    }

    fn hp() -> HyperParams {
        HyperParams {
            eta: 0.05,
            lambda: 0.1,
            delta: 0.01,
            nu: 0.0,
            epsilon: 0.0,
            radius: 2.0,
            adapt_bandwidth: false,
        }
    }

    #[test]
    fn zero_state_gradient_bound() {
        let t = Topology::new(1, &[]).unwrap();
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let a = AgentState::new(0, spec, 1, &t, LossSpec::squared(3.0).unwrap(), ProximitySpec::absolute())
            .unwrap();
        let s = Sample::new(vec![0.2], -2.5);
        let c = gradient_norm_bound(&a, &s, &BTreeMap::new(), &hp(), &constants(0)).unwrap();
        assert!((c.observed - 6.25).abs() < 1e-12);
        assert!((c.bound - (4.0 * 9.0 + 2.0 * 0.01 * 4.0)).abs() < 1e-12);
        assert!(c.ok);
    }

    #[test]
    fn gradient_norm_matches_rkhs_construction() {
        let t = Topology::new(3, &[(0, 1, 0.1), (0, 2, 0.1)]).unwrap();
        let spec = KernelSpec::gaussian(0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = AgentState::new(0, spec, 1, &t, LossSpec::huber(1.0).unwrap(), ProximitySpec::absolute())
            .unwrap();
        for _ in 0..50 {
            let pts: Vec<[f64; 1]> = (0..4).map(|_| [rng.random_range(0.0..1.0)]).collect();
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            a.f = KernelExpansion::new(spec, Dictionary::from_points(1, &pts).unwrap(), w).unwrap();
            a.f = a.f.ball_project(2.0).unwrap();
            a.out_duals.insert(1, rng.random_range(0.0..2.0));
            a.out_duals.insert(2, rng.random_range(0.0..2.0));
            let x = vec![rng.random_range(0.0..1.0)];
            let s = Sample::new(x.clone(), rng.random_range(-3.0..3.0));
            let evals = BTreeMap::from([(1, rng.random_range(-1.0..1.0)), (2, rng.random_range(-1.0..1.0))]);
            let mut c = constants(2);
            c.lipschitz_c = 1.0;
            let check = gradient_norm_bound(&a, &s, &evals, &hp(), &c).unwrap();
            // gradient built explicitly as an expansion
            let fx = a.f.evaluate(&x).unwrap();
            let g = a.gradient_coefficient(fx, &s, &evals).unwrap();
            let grad = a.f.scale_weights(0.1).append_atom(&x, g).unwrap();
            assert!((grad.hilbert_norm().powi(2) - check.observed).abs() < 1e-9);
            assert!(check.ok, "{check:?}");

            let d = dual_gradient_bound(&a, &s, &evals, &t, &hp(), &c).unwrap();
            assert!(d.ok, "{d:?}");
        }
    }

    #[test]
    fn projection_bound_cases() {
        let spec = KernelSpec::gaussian(0.5).unwrap();
        let f = KernelExpansion::new(spec, Dictionary::from_points(1, &[[0.0], [1.0]]).unwrap(), vec![1.0, 0.5])
            .unwrap();
        let c = projection_error_bound(&f, &f, 0.0).unwrap();
        assert_eq!(c.observed, 0.0);
        assert!(c.ok);
        let g = KernelExpansion::new(spec, Dictionary::from_points(1, &[[0.0]]).unwrap(), vec![1.0]).unwrap();
        let e = projection_error_bound(&f, &g, 0.0).unwrap();
        assert!((e.observed - 0.5).abs() < 1e-12);
        assert!(!e.ok);
        assert!(projection_error_bound(&f, &g, 0.5).unwrap().ok);
        assert_eq!(projection_error_bound(&f, &g, 1.0).unwrap().bound, 2.0 * projection_error_bound(&f, &g, 0.5).unwrap().bound);
    }

    #[test]
    fn regression_on_constructed_series() {
        let n = 4000;
        let s: Vec<f64> = (0..n).map(|t| 1.0 + 3.0 / ((t + 1) as f64).sqrt()).collect();
        let fit = rate_regression(&s, 1.0, 0.0).unwrap();
        assert!((fit.slope + 0.5).abs() <= 0.02);
        assert!(fit.ok(-0.35));

        let flat = vec![2.0; n];
        let fit = rate_regression(&flat, 1.0, 0.0).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert!(!fit.ok(-0.35));

        assert!(rate_regression(&flat[..100], 1.0, 0.0).is_err());
        assert!(rate_regression(&flat, 5.0, 0.0).is_err());
    }
}

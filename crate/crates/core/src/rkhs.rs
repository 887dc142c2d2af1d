//! Functions in the RKHS represented as finite kernel expansions
//! `f(.) = sum_m w_m k(d_m, .)`, and the Hilbert-space arithmetic on them.
//!
//! Expansions are values: every update returns a new expansion.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{self, Dictionary, KernelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelExpansion {
    spec: KernelSpec,
    dict: Dictionary,
    weights: Vec<f64>,
}

impl KernelExpansion {
    /// The zero function (empty dictionary).
    pub fn zero(spec: KernelSpec, dim: usize) -> Self {
        KernelExpansion {
            spec,
            dict: Dictionary::empty(dim),
            weights: Vec::new(),
        }
    }

    pub fn new(spec: KernelSpec, dict: Dictionary, weights: Vec<f64>) -> Result<Self> {
        if dict.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "dictionary has {} atoms but {} weights were given",
                dict.len(),
                weights.len()
            )));
        }
        Ok(KernelExpansion {
            spec,
            dict,
            weights,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.dict.dim()
    }

    /// Model order `M`.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Same dictionary and weights read under a different kernel. This changes
    /// the function; it is how online bandwidth adaptation swaps spaces.
    pub fn with_spec(&self, spec: KernelSpec) -> KernelExpansion {
        KernelExpansion {
            spec,
            dict: self.dict.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.evaluate_unchecked(x))
    }

    pub(crate) fn evaluate_unchecked(&self, x: &[f64]) -> f64 {
        self.dict
            .points()
            .zip(&self.weights)
            .map(|(d, w)| w * self.spec.eval_unchecked(d, x))
            .sum()
    }

    /// `w_f^T K_{D_f, D_g} w_g`.
    pub fn hilbert_inner(&self, other: &KernelExpansion) -> Result<f64> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch(format!(
                "{:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        if self.is_empty() || other.is_empty() {
            return Ok(0.0);
        }
        check_dim(self.dim(), other.dim())?;
        let mut acc = 0.0;
        for (d, w) in self.dict.points().zip(&self.weights) {
            let mut row = 0.0;
            for (e, v) in other.dict.points().zip(&other.weights) {
                row += v * self.spec.eval_unchecked(d, e);
            }
            acc += w * row;
        }
        Ok(acc)
    }

    /// `sqrt(w^T K w)`. Round-off can make the quadratic form slightly
    /// negative for functions that are numerically zero; it is clamped at 0.
    pub fn hilbert_norm(&self) -> f64 {
        self.squared_norm().max(0.0).sqrt()
    }

    pub(crate) fn squared_norm(&self) -> f64 {
        let k = kernels::gram(&self.spec, &self.dict);
        let w = DVector::from_column_slice(&self.weights);
        w.dot(&(&k * &w))
    }

    pub fn scale_weights(&self, c: f64) -> KernelExpansion {
        KernelExpansion {
            spec: self.spec,
            dict: self.dict.clone(),
            weights: self.weights.iter().map(|w| w * c).collect(),
        }
    }

    pub fn append_atom(&self, x: &[f64], weight: f64) -> Result<KernelExpansion> {
        let mut dict = self.dict.clone();
        dict.push(x)?;
        let mut weights = self.weights.clone();
        weights.push(weight);
        Ok(KernelExpansion {
            spec: self.spec,
            dict,
            weights,
        })
    }

    /// Projection onto the Hilbert ball of the given radius: weights are
    /// rescaled when the norm exceeds it.
    pub fn ball_project(&self, radius: f64) -> Result<KernelExpansion> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        let norm = self.hilbert_norm();
        if norm <= radius {
            return Ok(self.clone());
        }
        Ok(self.scale_weights(radius / norm))
    }

    /// `self - other` as one expansion over the concatenated dictionaries.
    pub fn difference(&self, other: &KernelExpansion) -> Result<KernelExpansion> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch(format!(
                "{:?} vs {:?}",
                self.spec, other.spec
            )));
        }
        let dict = self.dict.concat(&other.dict)?;
        let weights = self
            .weights
            .iter()
            .copied()
            .chain(other.weights.iter().map(|w| -w))
            .collect();
        Ok(KernelExpansion {
            spec: self.spec,
            dict,
            weights,
        })
    }

    /// Flat text record: `p M sigma`, then the `p x M` dictionary row-major,
    /// then the `M` weights, whitespace separated on one line.
    pub fn to_record(&self) -> String {
        let p = self.dim();
        let m = self.len();
        let mut out = format!("{} {} {}", p, m, self.spec.bandwidth());
        for r in 0..p {
            for a in 0..m {
                out.push(' ');
                out.push_str(&self.dict.point(a)[r].to_string());
            }
        }
        for w in &self.weights {
            out.push(' ');
            out.push_str(&w.to_string());
        }
        out
    }

    pub fn from_record(record: &str) -> Result<KernelExpansion> {
        let bad = |msg: &str| Error::InvalidArgument(format!("malformed expansion record: {msg}"));
        let mut it = record.split_whitespace();
        let p: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("dimension"))?;
        let m: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("model order"))?;
        let sigma: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bandwidth"))?;
        let nums: Vec<f64> = it
            .map(|s| s.parse::<f64>().map_err(|_| bad(s)))
            .collect::<Result<_>>()?;
        if nums.len() != p * m + m {
            return Err(bad("wrong number of values"));
        }
        let mut flat = vec![0.0; p * m];
        for r in 0..p {
            for a in 0..m {
                flat[a * p + r] = nums[r * m + a];
            }
        }
        let dict = Dictionary::from_flat(p.max(1), flat)?;
        let dict = if p == 0 { Dictionary::empty(0) } else { dict };
        KernelExpansion::new(KernelSpec::gaussian(sigma)?, dict, nums[p * m..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> KernelSpec {
        KernelSpec::gaussian(0.4).unwrap()
    }

    fn random_expansion(rng: &mut ChaCha8Rng, m: usize) -> KernelExpansion {
        let pts: Vec<[f64; 2]> = (0..m)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let w = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        KernelExpansion::new(spec(), Dictionary::from_points(2, &pts).unwrap(), w).unwrap()
    }

    fn unit_atom(x: &[f64]) -> KernelExpansion {
        KernelExpansion::zero(spec(), x.len()).append_atom(x, 1.0).unwrap()
    }

    #[test]
    fn evaluate_cases() {
        let z = KernelExpansion::zero(spec(), 2);
        assert_eq!(z.evaluate(&[0.1, 0.2]).unwrap(), 0.0);
        let x = [0.3, -0.1];
        let f = z.append_atom(&x, 2.5).unwrap();
        assert_eq!(f.evaluate(&x).unwrap(), 2.5);
        assert!(f.evaluate(&[1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_expansion(&mut rng, 4);
        let x = [0.25, 0.5];
        let mut explicit = 0.0;
        for m in 0..4 {
            let d = f.dictionary().point(m);
            let d2 = (d[0] - x[0]).powi(2) + (d[1] - x[1]).powi(2);
            explicit += f.weights()[m] * (-d2 / (2.0 * 0.4 * 0.4)).exp();
        }
        assert_abs_diff_eq!(f.evaluate(&x).unwrap(), explicit, epsilon = 1e-14);
    }

    #[test]
    fn inner_and_norm_closed_forms() {
        let z = KernelExpansion::zero(spec(), 1);
        let f = z.append_atom(&[0.7], 3.0).unwrap();
        assert_eq!(z.hilbert_inner(&f).unwrap(), 0.0);
        assert_eq!(f.hilbert_inner(&f).unwrap(), 9.0);
        assert_eq!(z.hilbert_norm(), 0.0);
        assert_eq!(z.append_atom(&[0.7], -2.0).unwrap().hilbert_norm(), 2.0);
        let twin = z
            .append_atom(&[0.2], 1.0)
            .unwrap()
            .append_atom(&[0.2], 1.0)
            .unwrap();
        assert_abs_diff_eq!(twin.hilbert_norm(), 2.0, epsilon = 1e-15);
        let other = KernelExpansion::zero(KernelSpec::gaussian(1.0).unwrap(), 1)
            .append_atom(&[0.0], 1.0)
            .unwrap();
        assert!(matches!(
            f.hilbert_inner(&other),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn scale_and_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_expansion(&mut rng, 5);
        let zeroed = f.scale_weights(0.0);
        assert_eq!(zeroed.len(), 5);
        assert!(zeroed.weights().iter().all(|&w| w == 0.0));
        assert_eq!(f.scale_weights(1.0), f);
        let ratio = f.scale_weights(0.99).hilbert_norm() / f.hilbert_norm();
        assert_abs_diff_eq!(ratio, 0.99, epsilon = 1e-12);

        let small = unit_atom(&[0.0, 0.0]).scale_weights(0.5);
        assert_eq!(small.ball_project(1.0).unwrap(), small);
        let big = unit_atom(&[0.0, 0.0]).scale_weights(4.0);
        assert_eq!(big.ball_project(2.0).unwrap().weights(), &[2.0]);
        assert!(big.ball_project(0.0).is_err());

        for _ in 0..20 {
            let f = random_expansion(&mut rng, 6);
            let pre = f.hilbert_norm();
            let post = f.ball_project(1.0).unwrap().hilbert_norm();
            assert_abs_diff_eq!(post, pre.min(1.0), epsilon = 1e-10);
        }
    }

    #[test]
    fn append_cases() {
        let z = KernelExpansion::zero(spec(), 2);
        let single = z.append_atom(&[0.1, 0.1], 0.7).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.weights(), &[0.7]);
        assert!(z.append_atom(&[0.1], 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = random_expansion(&mut rng, 3);
        let g = f.append_atom(&[0.5, 0.5], 0.0).unwrap();
        for _ in 0..10 {
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            assert_eq!(g.evaluate(&z).unwrap(), f.evaluate(&z).unwrap());
        }
        let x = [0.2, -0.6];
        let w = -1.3;
        let g = f.append_atom(&x, w).unwrap();
        for _ in 0..10 {
            let z = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let lhs = g.evaluate(&z).unwrap();
            let rhs = f.evaluate(&z).unwrap() + w * kernels::eval(&spec(), &x, &z).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-13);
        }
    }

    #[test]
    fn record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_expansion(&mut rng, 4);
        let back = KernelExpansion::from_record(&f.to_record()).unwrap();
        for (a, b) in f.weights().iter().zip(back.weights()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
        assert_eq!(back.dictionary(), f.dictionary());
        assert_eq!(back.spec(), f.spec());
        let z = KernelExpansion::zero(spec(), 3);
        let back = KernelExpansion::from_record(&z.to_record()).unwrap();
        assert!(back.is_empty());
        assert!(KernelExpansion::from_record("2 1 0.5 1.0").is_err());
    }

    proptest! {
        #[test]
        fn reproducing_property(seed in 0u64..500, x0 in -1.0f64..1.0, x1 in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_expansion(&mut rng, 5);
            let x = [x0, x1];
            let lhs = f.hilbert_inner(&unit_atom(&x)).unwrap();
            prop_assert!((lhs - f.evaluate(&x).unwrap()).abs() <= 1e-10);
        }

        #[test]
        fn inner_product_axioms(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_expansion(&mut rng, 4);
            let g = random_expansion(&mut rng, 3);
            prop_assert!((f.hilbert_inner(&g).unwrap() - g.hilbert_inner(&f).unwrap()).abs() < 1e-12);
            let sum = f.difference(&g.scale_weights(-1.0)).unwrap();
            let diff = f.difference(&g).unwrap();
            let lhs = sum.squared_norm() + diff.squared_norm();
            let rhs = 2.0 * f.squared_norm() + 2.0 * g.squared_norm();
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }

        #[test]
        fn append_norm_identity(seed in 0u64..500, w in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_expansion(&mut rng, 4);
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = f.append_atom(&x, w).unwrap();
            let expect = f.squared_norm() + 2.0 * w * f.evaluate(&x).unwrap() + w * w;
            prop_assert!((g.squared_norm() - expect).abs() <= 1e-9);
        }
    }
}

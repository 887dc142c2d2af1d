//! Destructive kernel orthogonal matching pursuit with pre-fitting.
//!
//! Starting from the full dictionary of a target expansion, atoms are removed
//! greedily: each pass computes, for every surviving atom, the Hilbert-norm
//! error of the best approximation of the *original* target without it, and
//! drops the cheapest one while that error stays within the budget. Weights
//! are refit by least squares in the Hilbert norm after every removal.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernels::{self, Dictionary};
use crate::rkhs::KernelExpansion;

pub const DEFAULT_JITTER: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-4;
/// A removal is accepted when its squared error is within
/// `epsilon^2 + ZERO_SLACK^2`, so a zero budget still drops exactly
/// redundant atoms despite round-off.
pub const ZERO_SLACK: f64 = 1e-7;

/// Relative width of the band of near-best candidate scores that the fast
/// path re-checks exactly.
const TIE_WINDOW: f64 = 1e-8;

/// At most this many near-best candidates are refit per pass.
const MAX_TIE_CHECKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KompBudget {
    pub epsilon: f64,
    pub jitter: f64,
}

impl KompBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "compression budget must be finite and non-negative, got {epsilon}"
            )));
        }
        Ok(KompBudget {
            epsilon,
            jitter: DEFAULT_JITTER,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }
}

#[derive(Debug, Clone)]
pub struct KompOutcome {
    pub expansion: KernelExpansion,
    /// Indices into the target dictionary of the surviving atoms, ascending.
    pub kept: Vec<usize>,
    pub pruned: usize,
    /// Hilbert-norm distance to the target as computed during pruning.
    pub error: f64,
}

/// Cholesky factor of `a + jitter * I`, escalating the jitter tenfold until
/// the factorization succeeds or the ceiling is reached.
pub(crate) fn factor(a: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let mut j = jitter.max(0.0);
    loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += j;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok(ch);
        }
        if j >= MAX_JITTER {
            let diag_min = (0..n).map(|i| a[(i, i)]).fold(f64::INFINITY, f64::min);
            return Err(Error::Numeric {
                message: format!("gram matrix not positive definite (smallest diagonal {diag_min:e})"),
                jitter: j,
                size: n,
            });
        }
        j = if j == 0.0 { DEFAULT_JITTER } else { (j * 10.0).min(MAX_JITTER) };
    }
}

/// `b^T A^{-1} b` through the triangular factor, which stays accurate for
/// ill-conditioned grams.
fn projected_energy(ch: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> f64 {
    let l = ch.l_dirty();
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y.iter().map(|v| v * v).sum()
}

fn submatrix(k: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| k[(idx[a], idx[b])])
}

/// Weights over `dict` that best approximate `target` in the Hilbert norm:
/// the solution of `(K_DD + jitter I) w = K_{D, D~} w~`.
pub fn refit_weights(target: &KernelExpansion, dict: &Dictionary) -> Result<Vec<f64>> {
    refit_weights_with_jitter(target, dict, DEFAULT_JITTER)
}

pub fn refit_weights_with_jitter(
    target: &KernelExpansion,
    dict: &Dictionary,
    jitter: f64,
) -> Result<Vec<f64>> {
    if dict.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot refit onto an empty dictionary".into(),
        ));
    }
    let spec = target.spec();
    let k = kernels::gram(spec, dict);
    let cross = kernels::kernel_matrix(spec, dict, target.dictionary())?;
    let b = cross * DVector::from_column_slice(target.weights());
    let ch = factor(&k, jitter)?;
    Ok(ch.solve(&b).as_slice().to_vec())
}

/// Precomputed quantities of one target shared by every candidate error.
struct Problem {
    gram: DMatrix<f64>,
    /// `b_j = <k(d_j, .), f~> = f~(d_j)`.
    b: DVector<f64>,
    weights: DVector<f64>,
    energy: f64,
    jitter: f64,
}

impl Problem {
    fn new(target: &KernelExpansion, jitter: f64) -> Problem {
        let gram = kernels::gram(target.spec(), target.dictionary());
        let w = DVector::from_column_slice(target.weights());
        let b = &gram * &w;
        let energy = w.dot(&b).max(0.0);
        Problem {
            gram,
            b,
            weights: w,
            energy,
            jitter,
        }
    }

    /// Squared residual `||f~ - sum_S w_s k(d_s, .)||^2` of the refit on the
    /// atoms `keep`. Evaluated as `c^T K c` on the coefficient difference `c`
    /// with the unshifted gram: the jitter only perturbs the weights, and
    /// the rounding error scales with `c` rather than with `||f~||^2`.
    fn residual2(&self, keep: &[usize]) -> Result<f64> {
        if keep.is_empty() {
            return Ok(self.energy);
        }
        let w = self.weights(keep)?;
        let mut c = self.weights.clone();
        for (&i, wi) in keep.iter().zip(&w) {
            c[i] -= wi;
        }
        Ok(c.dot(&(&self.gram * &c)).max(0.0))
    }

    fn weights(&self, keep: &[usize]) -> Result<Vec<f64>> {
        let ch = factor(&submatrix(&self.gram, keep), self.jitter)?;
        let b = DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.b[i]));
        Ok(ch.solve(&b).as_slice().to_vec())
    }
}

/// Hilbert norm of the least-squares residual when `target` is refit on the
/// atoms listed in `keep_indices`.
pub fn removal_error(target: &KernelExpansion, keep_indices: &[usize]) -> Result<f64> {
    removal_error_with_jitter(target, keep_indices, DEFAULT_JITTER)
}

pub fn removal_error_with_jitter(
    target: &KernelExpansion,
    keep_indices: &[usize],
    jitter: f64,
) -> Result<f64> {
    if let Some(&bad) = keep_indices.iter().find(|&&i| i >= target.len()) {
        return Err(Error::InvalidArgument(format!(
            "index {bad} out of range for model order {}",
            target.len()
        )));
    }
    Ok(Problem::new(target, jitter).residual2(keep_indices)?.sqrt())
}

/// Greedy destructive pruning of `target` under the Hilbert-norm budget.
///
/// Candidate errors come from one factorization per pass: with optimal
/// weights `w = K_S^{-1} b_S`, dropping atom `j` raises the squared residual
/// by `w_j^2 / (K_S^{-1})_jj`. Candidates scoring within rounding of the
/// best are then ranked, and the winner's error measured, by direct refits.
pub fn komp_prune(target: &KernelExpansion, budget: &KompBudget) -> Result<KompOutcome> {
    greedy(target, budget, |problem, active| {
        let ch = factor(&submatrix(&problem.gram, active), problem.jitter)?;
        let b = DVector::from_iterator(active.len(), active.iter().map(|&i| problem.b[i]));
        let base = (problem.energy - projected_energy(&ch, &b)).max(0.0);
        let w = ch.solve(&b);
        let inv = ch.inverse();
        let scores: Vec<f64> = (0..active.len())
            .map(|pos| base + w[pos] * w[pos] / inv[(pos, pos)])
            .collect();
        let low = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let cutoff = low + TIE_WINDOW * low.max(problem.energy);
        // candidates within rounding of the best are ranked by direct refits
        let mut near: Vec<usize> = (0..active.len()).filter(|&p| scores[p] <= cutoff).collect();
        near.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        near.truncate(MAX_TIE_CHECKS);
        near.sort_unstable();
        let mut rest = Vec::with_capacity(active.len());
        let mut best: Option<(usize, f64)> = None;
        for pos in near {
            rest.clear();
            rest.extend(active.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, &i)| i));
            let gamma = problem.residual2(&rest)?.sqrt();
            if best.is_none_or(|(_, g)| gamma < g) {
                best = Some((pos, gamma));
            }
        }
        Ok(best.expect("active set is non-empty"))
    })
}

/// Reference implementation that refits every candidate subset from
/// scratch. Quartic in the model order; kept as a test oracle.
pub fn komp_prune_exact(target: &KernelExpansion, budget: &KompBudget) -> Result<KompOutcome> {
    let mut candidate = Vec::new();
    greedy(target, budget, |problem, active| {
        let mut best: Option<(usize, f64)> = None;
        for pos in 0..active.len() {
            candidate.clear();
            candidate.extend(active.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, &i)| i));
            let gamma = problem.residual2(&candidate)?.sqrt();
            // strict comparison keeps the smallest index on ties
            if best.is_none_or(|(_, g)| gamma < g) {
                best = Some((pos, gamma));
            }
        }
        Ok(best.expect("active set is non-empty"))
    })
}

fn greedy<F>(target: &KernelExpansion, budget: &KompBudget, mut pick: F) -> Result<KompOutcome>
where
    F: FnMut(&Problem, &[usize]) -> Result<(usize, f64)>,
{
    let m = target.len();
    if m == 0 {
        return Ok(KompOutcome {
            expansion: target.clone(),
            kept: Vec::new(),
            pruned: 0,
            error: 0.0,
        });
    }
    let problem = Problem::new(target, budget.jitter);
    let threshold = (budget.epsilon * budget.epsilon + ZERO_SLACK * ZERO_SLACK).sqrt();
    let mut active: Vec<usize> = (0..m).collect();
    let mut error = 0.0;

    while !active.is_empty() {
        let (pos, gamma) = pick(&problem, &active)?;
        if gamma > threshold {
            break;
        }
        active.remove(pos);
        error = gamma;
    }

    let pruned = m - active.len();
    if pruned == 0 {
        return Ok(KompOutcome {
            expansion: target.clone(),
            kept: active,
            pruned,
            error: 0.0,
        });
    }
    let expansion = if active.is_empty() {
        KernelExpansion::zero(*target.spec(), target.dim())
    } else {
        let weights = problem.weights(&active)?;
        KernelExpansion::new(*target.spec(), target.dictionary().select(&active), weights)?
    };
    Ok(KompOutcome {
        expansion,
        kept: active,
        pruned,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> KernelSpec {
        KernelSpec::gaussian(0.5).unwrap()
    }

    fn random_target(rng: &mut ChaCha8Rng, m: usize) -> KernelExpansion {
        let pts: Vec<[f64; 1]> = (0..m).map(|_| [rng.random_range(0.0..2.0)]).collect();
        let w = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        KernelExpansion::new(spec(), Dictionary::from_points(1, &pts).unwrap(), w).unwrap()
    }

    #[test]
    fn refit_on_own_dictionary_recovers_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_target(&mut rng, 4);
        let w = refit_weights(&f, f.dictionary()).unwrap();
        for (a, b) in w.iter().zip(f.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
        let single = KernelExpansion::zero(spec(), 1).append_atom(&[0.3], 1.7).unwrap();
        let w = refit_weights(&single, single.dictionary()).unwrap();
        assert_abs_diff_eq!(w[0], 1.7, epsilon = 1e-8);
        assert!(refit_weights(&single, &Dictionary::empty(1)).is_err());
    }

    #[test]
    fn refit_beats_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_target(&mut rng, 3);
        let sub = Dictionary::from_points(1, &[[0.4], [1.5]]).unwrap();
        let w = refit_weights(&f, &sub).unwrap();
        let resid = |w: &[f64]| {
            let g = KernelExpansion::new(spec(), sub.clone(), w.to_vec()).unwrap();
            f.difference(&g).unwrap().hilbert_norm()
        };
        let best = resid(&w);
        for _ in 0..1000 {
            let cand = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            assert!(best <= resid(&cand) + 1e-12);
        }
    }

    #[test]
    fn removal_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_target(&mut rng, 4);
        assert_abs_diff_eq!(removal_error(&f, &[0, 1, 2, 3]).unwrap(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(removal_error(&f, &[]).unwrap(), f.hilbert_norm(), epsilon = 1e-12);
        assert!(removal_error(&f, &[4]).is_err());

        let dup = KernelExpansion::zero(spec(), 1)
            .append_atom(&[0.6], 0.8)
            .unwrap()
            .append_atom(&[0.6], -0.3)
            .unwrap()
            .append_atom(&[1.4], 0.5)
            .unwrap();
        assert_abs_diff_eq!(removal_error(&dup, &[0, 2]).unwrap(), 0.0, epsilon = 1e-7);

        // quadratic-form oracle, solved with LU rather than Cholesky
        let keep = [0usize, 1, 3];
        let kd = f.dictionary().select(&keep);
        let kk = kernels::gram(&spec(), &kd);
        let b = kernels::kernel_matrix(&spec(), &kd, f.dictionary()).unwrap()
            * DVector::from_column_slice(f.weights());
        let sol = kk.lu().solve(&b).unwrap();
        let oracle = (f.hilbert_norm().powi(2) - b.dot(&sol)).sqrt();
        assert_abs_diff_eq!(removal_error(&f, &keep).unwrap(), oracle, epsilon = 1e-8);
    }

    #[test]
    fn zero_budget_keeps_distinct_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_target(&mut rng, 5);
        let out = komp_prune(&f, &KompBudget::new(0.0).unwrap()).unwrap();
        assert_eq!(out.pruned, 0);
        assert_eq!(out.expansion, f);
    }

    #[test]
    fn duplicate_atoms_merge() {
        let f = KernelExpansion::zero(spec(), 1)
            .append_atom(&[0.25], 0.5)
            .unwrap()
            .append_atom(&[0.25], 0.75)
            .unwrap();
        for eps in [0.0, 0.1, 1e-3] {
            let out = komp_prune(&f, &KompBudget::new(eps).unwrap()).unwrap();
            assert_eq!(out.expansion.len(), 1);
            assert_abs_diff_eq!(out.expansion.weights()[0], 1.25, epsilon = 1e-8);
            let resid = out.expansion.difference(&f).unwrap().hilbert_norm();
            assert!(resid <= 1e-7);
        }
    }

    #[test]
    fn empty_target_and_full_prune() {
        let z = KernelExpansion::zero(spec(), 1);
        let out = komp_prune(&z, &KompBudget::new(1.0).unwrap()).unwrap();
        assert!(out.expansion.is_empty());
        let small = z.append_atom(&[0.0], 0.01).unwrap();
        let out = komp_prune(&small, &KompBudget::new(0.1).unwrap()).unwrap();
        assert!(out.expansion.is_empty());
        assert_eq!(out.pruned, 1);
    }

    #[test]
    fn negative_budget_rejected() {
        assert!(KompBudget::new(-1e-3).is_err());
        assert!(KompBudget::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn budget_contract(seed in 0u64..2000, m in 1usize..9, eps in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_target(&mut rng, m);
            let out = komp_prune(&f, &KompBudget::new(eps).unwrap()).unwrap();
            prop_assert!(out.expansion.len() <= f.len());
            let resid = out.expansion.difference(&f).unwrap().hilbert_norm();
            prop_assert!(resid <= eps + 2.0 * ZERO_SLACK);
        }

        #[test]
        fn larger_budget_never_keeps_more(seed in 0u64..2000, e1 in 0.0f64..0.4, extra in 0.0f64..0.4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_target(&mut rng, 6);
            let a = komp_prune(&f, &KompBudget::new(e1).unwrap()).unwrap();
            let b = komp_prune(&f, &KompBudget::new(e1 + extra).unwrap()).unwrap();
            prop_assert!(a.expansion.len() >= b.expansion.len());
        }

        #[test]
        fn fast_pruning_matches_exact_refits(seed in 0u64..5000, m in 1usize..10, eps in 0.0f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_target(&mut rng, m);
            let budget = KompBudget::new(eps).unwrap();
            let fast = komp_prune(&f, &budget).unwrap();
            let exact = komp_prune_exact(&f, &budget).unwrap();
            prop_assert_eq!(fast.kept, exact.kept);
        }

        // A second pass is measured against the compressed function, so the
        // budget left over after the first pass is sqrt(eps^2 - r^2).
        #[test]
        fn second_pass_with_remaining_budget_is_a_no_op(seed in 0u64..2000, eps in 0.0f64..0.4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_target(&mut rng, 6);
            let first = komp_prune(&f, &KompBudget::new(eps).unwrap()).unwrap();
            let r = first.expansion.difference(&f).unwrap().hilbert_norm();
            let remaining = (eps * eps - r * r).max(0.0).sqrt();
            let budget = (remaining - 1e-6).max(0.0);
            let second = komp_prune(&first.expansion, &KompBudget::new(budget).unwrap()).unwrap();
            prop_assert_eq!(second.pruned, 0);
        }
    }
}

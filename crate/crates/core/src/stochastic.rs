//! The martingale family `M^x`, stochastic integrals, and exact martingale
//! representation on a scenario tree.
//!
//! The increment of `M^x` over step `s` along a branch is
//! `sum_k g_k(s, parent, x) * dW[k]`, which matches the prescribed
//! covariation `<M^x, M^y>` increment `Q_{s,parent}(x, y) * dA_s` exactly
//! because the branch designs have exact second moments.
//!
//! Representation solves, node by node, the normal equations with Gram
//! matrix `Q(x_i, x_j) * dA`; the right-hand side always lies in the range
//! of the Gram matrix, so the minimum-norm solution leaves a residual
//! martingale that is strongly orthogonal to every driving maturity up to
//! roundoff.

use crate::error::{Error, Result};
use crate::kernel::CovarianceKernel;
use crate::measure::{FiniteMeasure, Maturity};
use crate::tree::{Adapted, Predictable, ScenarioTree};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Relative singular-value threshold for the per-node regressions.
pub const REGRESSION_RELATIVE_TOL: f64 = 1e-12;

/// Errors unless the kernel's factor loadings fit the tree.
pub fn check_rank(tree: &ScenarioTree, kernel: &CovarianceKernel) -> Result<()> {
    if kernel.rank() > tree.factors() {
        return Err(Error::RankExceedsFactors {
            rank: kernel.rank(),
            factors: tree.factors(),
        });
    }
    Ok(())
}

/// Increment of `M^x` over step `s` along the branch into `child`.
pub fn martingale_increment(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    step: usize,
    child: usize,
    x: Maturity,
) -> f64 {
    let node = tree.node(step, child);
    (0..kernel.rank())
        .map(|k| kernel.loading(step, node.parent, k, x) * node.dw[k])
        .sum()
}

/// Increment of the measure integral `mu . dM` over step `s` into `child`.
pub fn measure_increment(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    step: usize,
    child: usize,
    mu: &FiniteMeasure,
) -> f64 {
    mu.atoms()
        .iter()
        .map(|&(x, c)| c * martingale_increment(tree, kernel, step, child, x))
        .sum()
}

/// The path of `M^x` as an adapted process with `M^x_0 = 0`.
pub fn martingale_path(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    x: Maturity,
) -> Result<Adapted<f64>> {
    check_rank(tree, kernel)?;
    let mut levels = vec![vec![0.0]];
    for s in 1..=tree.steps() {
        let prev = &levels[s - 1];
        let row = (0..tree.level_len(s))
            .map(|c| {
                prev[tree.node(s, c).parent] + martingale_increment(tree, kernel, s, c, x)
            })
            .collect();
        levels.push(row);
    }
    Ok(Adapted::from_levels(levels))
}

/// Pathwise stochastic integral of a predictable measure-valued integrand.
pub fn stochastic_integral(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    integrand: &Predictable<FiniteMeasure>,
) -> Result<Adapted<f64>> {
    check_rank(tree, kernel)?;
    assert_eq!(integrand.len(), tree.steps());
    let mut levels = vec![vec![0.0]];
    for s in 1..=tree.steps() {
        let prev = &levels[s - 1];
        let row = (0..tree.level_len(s))
            .map(|c| {
                let parent = tree.node(s, c).parent;
                prev[parent]
                    + measure_increment(tree, kernel, s, c, integrand.value(s, parent))
            })
            .collect();
        levels.push(row);
    }
    Ok(Adapted::from_levels(levels))
}

/// Minimum-norm solution of `(gram * da) h = rhs` with a relative
/// eigenvalue threshold.
///
/// The right-hand side always lies in the range of the Gram matrix here, so
/// the pseudo-inverse through a symmetric eigendecomposition plus two rounds
/// of iterative refinement recovers the solution to near machine precision
/// even for badly conditioned point sets.
pub(crate) fn solve_normal_equations(
    gram: &DMatrix<f64>,
    da: f64,
    rhs: &DVector<f64>,
) -> DVector<f64> {
    let mat = gram * da;
    let eig = mat.clone().symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lambda_max <= 0.0 {
        return DVector::zeros(rhs.len());
    }
    let cutoff = REGRESSION_RELATIVE_TOL * lambda_max;
    let vectors = &eig.eigenvectors;
    let apply_pinv = |v: &DVector<f64>| -> DVector<f64> {
        let proj = vectors.transpose() * v;
        let scaled = DVector::from_iterator(
            proj.len(),
            proj.iter().enumerate().map(|(k, p)| {
                let l = eig.eigenvalues[k];
                if l > cutoff {
                    p / l
                } else {
                    0.0
                }
            }),
        );
        vectors * scaled
    };
    let mut h = apply_pinv(rhs);
    for _ in 0..2 {
        let residual = rhs - &mat * &h;
        h += apply_pinv(&residual);
    }
    h
}

/// Output of [`represent`]: an exact decomposition
/// `xi = mean + (H . M^n)_S + N_S` with `N` a martingale, null at zero and
/// strongly orthogonal to every `M^{x_i}`.
#[derive(Debug, Clone)]
pub struct Representation {
    pub mean: f64,
    pub maturities: Vec<Maturity>,
    /// Per-step coefficient vectors of the integrand on the maturities.
    pub integrand: Predictable<Vec<f64>>,
    /// The orthogonal residual martingale `N` (path values, `N_0 = 0`).
    pub residual: Adapted<f64>,
}

impl Representation {
    pub fn integrand_measure(&self, step: usize, node: usize) -> FiniteMeasure {
        FiniteMeasure::from_coeffs(&self.maturities, self.integrand.value(step, node))
    }
}

/// Per-node work of one backward representation step: regression
/// coefficients and the residual increments of all children.
fn represent_node(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    maturities: &[Maturity],
    step: usize,
    node: usize,
    next_values: &[f64],
    cond_mean: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = maturities.len();
    let da = tree.clock().delta(step);
    let gram = kernel.gram(step, node, maturities)?;

    let children: Vec<usize> = tree.children(step - 1, node).collect();
    let increments: Vec<Vec<f64>> = children
        .iter()
        .map(|&c| {
            maturities
                .iter()
                .map(|&x| martingale_increment(tree, kernel, step, c, x))
                .collect()
        })
        .collect();

    let mut rhs = DVector::zeros(n);
    for (ci, &c) in children.iter().enumerate() {
        let p = tree.node(step, c).probability;
        let centered = next_values[c] - cond_mean;
        for i in 0..n {
            rhs[i] += p * centered * increments[ci][i];
        }
    }

    let coeffs = solve_normal_equations(&gram, da, &rhs);
    let residuals = children
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let fitted: f64 = (0..n).map(|i| coeffs[i] * increments[ci][i]).sum();
            next_values[c] - cond_mean - fitted
        })
        .collect();
    Ok((coeffs.iter().copied().collect(), residuals))
}

/// Exact martingale representation of a terminal claim against the first
/// `n` maturities.
pub fn represent(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    maturities: &[Maturity],
    xi: &[f64],
) -> Result<Representation> {
    check_rank(tree, kernel)?;
    crate::measure::require_distinct(maturities)?;
    assert_eq!(xi.len(), tree.leaf_count());

    // Conditional-expectation cascade of the claim.
    let mut cond: Vec<Vec<f64>> = vec![xi.to_vec()];
    for t in (0..tree.steps()).rev() {
        let next = tree.cond_exp(t, &cond[0]);
        cond.insert(0, next);
    }
    let mean = cond[0][0];

    let mut integrand: Vec<Vec<Vec<f64>>> = Vec::with_capacity(tree.steps());
    let mut residual_levels: Vec<Vec<f64>> = vec![vec![0.0]];
    for s in 1..=tree.steps() {
        let next_values = &cond[s];
        let per_node: Vec<(Vec<f64>, Vec<f64>)> = (0..tree.level_len(s - 1))
            .into_par_iter()
            .map(|v| {
                represent_node(tree, kernel, maturities, s, v, next_values, cond[s - 1][v])
            })
            .collect::<Result<_>>()?;

        let mut coeff_row = Vec::with_capacity(per_node.len());
        let mut res_row = vec![0.0; tree.level_len(s)];
        for (v, (coeffs, residuals)) in per_node.into_iter().enumerate() {
            for (b, c) in tree.children(s - 1, v).enumerate() {
                res_row[c] = residual_levels[s - 1][v] + residuals[b];
            }
            coeff_row.push(coeffs);
        }
        integrand.push(coeff_row);
        residual_levels.push(res_row);
    }

    Ok(Representation {
        mean,
        maturities: maturities.to_vec(),
        integrand: Predictable::from_steps(integrand),
        residual: Adapted::from_levels(residual_levels),
    })
}

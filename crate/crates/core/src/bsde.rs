//! Backward solvers for the full and small-market BSDEs, weighted norms,
//! Picard iteration with contraction diagnostics, and Galerkin convergence
//! studies over the number of traded maturities.
//!
//! The one-step scheme is implicit in `Y` and explicit in `(H, N)`:
//! at a node `v` with clock increment `dA`, the martingale parts `(H, dN)`
//! come from the exact representation of `Y_{t+1}` (the drift is measurable
//! at `v` and does not alter them), and `Y_t` solves the scalar equation
//!
//! ```text
//! Y_t = E[Y_{t+1} | F_t] + f(t, Y_t, H_t) * dA.
//! ```
//!
//! Weighted norms use the discrete convention: the weight of step `s` is
//! `exp(beta * K_{s-1})` (left endpoint, predictable), `Y` is sampled at the
//! right endpoint of the step, and `H` and the increments of `N` carry their
//! natural per-step values. At `beta = 0` these reduce to the plain
//! unweighted norms.

use crate::error::{Error, Result};
use crate::kernel::CovarianceKernel;
use crate::measure::{FiniteMeasure, Maturity};
use crate::stochastic::{check_rank, martingale_increment, solve_normal_equations};
use crate::tree::{Adapted, Clock, Predictable, ScenarioTree};
use nalgebra::DVector;
use rayon::prelude::*;
use std::sync::Arc;

type DriverFn = dyn Fn(usize, usize, f64, &FiniteMeasure) -> f64 + Send + Sync;

/// A Lipschitz driver together with its declared Lipschitz processes.
///
/// `eta[s-1]` and `theta[s-1]` dominate the `y`- and `h`-sensitivities of
/// the driver over step `s`. The derived `alpha^2 = eta + theta^2` feeds the
/// clock `K = sum alpha^2 dA` carried by the exponential weights; the
/// all-zero case falls back to `alpha^2 = 1` so that `K = A`.
#[derive(Clone)]
pub struct DriverSpec {
    f: Arc<DriverFn>,
    eta: Vec<f64>,
    theta: Vec<f64>,
    alpha_sq: Vec<f64>,
}

impl std::fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriverSpec")
            .field("eta", &self.eta)
            .field("theta", &self.theta)
            .finish()
    }
}

impl DriverSpec {
    pub fn new<F>(f: F, eta: Vec<f64>, theta: Vec<f64>) -> Self
    where
        F: Fn(usize, usize, f64, &FiniteMeasure) -> f64 + Send + Sync + 'static,
    {
        assert_eq!(eta.len(), theta.len());
        let alpha_sq = eta
            .iter()
            .zip(&theta)
            .map(|(&e, &t)| {
                let a = e + t * t;
                if a == 0.0 {
                    1.0
                } else {
                    a
                }
            })
            .collect();
        DriverSpec {
            f: Arc::new(f),
            eta,
            theta,
            alpha_sq,
        }
    }

    /// Overrides the derived `alpha^2` (the hedging driver uses
    /// `alpha^2 = 1 + theta^2`).
    pub fn with_alpha_sq(mut self, alpha_sq: Vec<f64>) -> Self {
        assert_eq!(alpha_sq.len(), self.eta.len());
        assert!(alpha_sq.iter().all(|&a| a > 0.0));
        self.alpha_sq = alpha_sq;
        self
    }

    /// The zero driver on a clock with `steps` steps.
    pub fn zero(steps: usize) -> Self {
        DriverSpec::new(|_, _, _, _| 0.0, vec![0.0; steps], vec![0.0; steps])
    }

    pub fn evaluate(&self, step: usize, node: usize, y: f64, h: &FiniteMeasure) -> f64 {
        (self.f)(step, node, y, h)
    }

    pub fn steps(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self, step: usize) -> f64 {
        self.eta[step - 1]
    }

    pub fn theta(&self, step: usize) -> f64 {
        self.theta[step - 1]
    }

    pub fn alpha_sq(&self, step: usize) -> f64 {
        self.alpha_sq[step - 1]
    }

    /// `K_t = sum_{s <= t} alpha_s^2 dA_s` at levels `0..=S`.
    pub fn k_levels(&self, clock: &Clock) -> Vec<f64> {
        assert_eq!(clock.steps(), self.steps());
        let mut k = Vec::with_capacity(clock.steps() + 1);
        k.push(0.0);
        for s in 1..=clock.steps() {
            k.push(k[s - 1] + self.alpha_sq(s) * clock.delta(s));
        }
        k
    }
}

/// Diagnostics accumulated by a backward sweep.
#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    /// Largest per-node residual of the one-step identity.
    pub max_one_step_residual: f64,
    /// Total scalar-solve iterations over all nodes.
    pub total_implicit_iterations: u64,
    /// Largest scalar-solve iteration count at a single node.
    pub max_implicit_iterations: u32,
}

/// An adapted triple `(Y, H, N)` produced by a backward solver.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y: Adapted<f64>,
    pub maturities: Vec<Maturity>,
    /// Integrand coefficients on the maturities, per `(step, node)`.
    pub integrand: Predictable<Vec<f64>>,
    /// Path values of the orthogonal martingale `N` (`N_0 = 0`).
    pub residual: Adapted<f64>,
    pub diagnostics: SolveDiagnostics,
}

impl BsdeSolution {
    pub fn integrand_measure(&self, step: usize, node: usize) -> FiniteMeasure {
        FiniteMeasure::from_coeffs(&self.maturities, self.integrand.value(step, node))
    }

    pub fn initial_value(&self) -> f64 {
        *self.y.value(0, 0)
    }
}

fn implicit_scalar_solve(
    driver: &DriverSpec,
    step: usize,
    node: usize,
    cond_mean: f64,
    h: &FiniteMeasure,
    da: f64,
) -> Result<(f64, u32)> {
    let eval = |y: f64| -> Result<f64> {
        let v = driver.evaluate(step, node, y, h);
        if !v.is_finite() {
            return Err(Error::NonFiniteDriver { step });
        }
        Ok(v)
    };
    let scale = 1.0 + cond_mean.abs();
    let tol = 1e-15 * scale;
    let mut iters = 0u32;

    // Plain fixed point, contractive when eta * dA < 1.
    let mut y = cond_mean;
    for _ in 0..100 {
        iters += 1;
        let next = cond_mean + eval(y)? * da;
        if (next - y).abs() <= tol {
            return Ok((next, iters));
        }
        y = next;
    }

    // Damped fixed point widens the basin to slopes in (-3, 1).
    y = cond_mean;
    for _ in 0..400 {
        iters += 1;
        let next = 0.5 * y + 0.5 * (cond_mean + eval(y)? * da);
        if (next - y).abs() <= 0.5 * tol {
            let resid = (next - cond_mean - eval(next)? * da).abs();
            if resid <= 1e-12 * scale {
                return Ok((next, iters));
            }
            break;
        }
        y = next;
    }

    // Bisection on y - cond_mean - f(y) * dA over an expanding bracket.
    let g = |y: f64| -> Result<f64> { Ok(y - cond_mean - eval(y)? * da) };
    let mut radius = scale;
    let mut bracket = None;
    for _ in 0..60 {
        iters += 1;
        let (lo, hi) = (cond_mean - radius, cond_mean + radius);
        if g(lo)?.signum() != g(hi)?.signum() {
            bracket = Some((lo, hi));
            break;
        }
        radius *= 2.0;
    }
    let (mut lo, mut hi) = bracket.ok_or(Error::ImplicitSolveDiverged {
        step,
        eta_da: driver.eta(step) * da,
    })?;
    let mut glo = g(lo)?;
    for _ in 0..200 {
        iters += 1;
        let mid = 0.5 * (lo + hi);
        let gm = g(mid)?;
        if gm == 0.0 || (hi - lo).abs() <= tol {
            return Ok((mid, iters));
        }
        if gm.signum() == glo.signum() {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    let best = 0.5 * (lo + hi);
    if g(best)?.abs() <= 1e-10 * scale {
        Ok((best, iters))
    } else {
        Err(Error::ImplicitSolveDiverged {
            step,
            eta_da: driver.eta(step) * da,
        })
    }
}

/// Per-node sweep output: `(y, coefficients, residual increments,
/// conditional mean, iterations)`.
type NodeSweep = (f64, Vec<f64>, Vec<f64>, f64, u32);

/// One node of a backward sweep: representation of the next-level values
/// plus a caller-supplied drift rule producing `Y` at the node.
fn sweep_node<D>(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    maturities: &[Maturity],
    step: usize,
    node: usize,
    next_values: &[f64],
    drift: &D,
) -> Result<NodeSweep>
where
    D: Fn(usize, usize, f64, &FiniteMeasure) -> Result<(f64, u32)> + Sync,
{
    let n = maturities.len();
    let da = tree.clock().delta(step);
    let gram = kernel.gram(step, node, maturities)?;
    let children: Vec<usize> = tree.children(step - 1, node).collect();

    let mut cond_mean = 0.0;
    for &c in &children {
        cond_mean += tree.node(step, c).probability * next_values[c];
    }

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
    let delta_n: Vec<f64> = children
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let fitted: f64 = (0..n).map(|i| coeffs[i] * increments[ci][i]).sum();
            next_values[c] - cond_mean - fitted
        })
        .collect();

    let h_measure = FiniteMeasure::from_coeffs(maturities, coeffs.as_slice());
    let (y, iters) = drift(step, node, cond_mean, &h_measure)?;
    Ok((
        y,
        coeffs.iter().copied().collect(),
        delta_n,
        cond_mean,
        iters,
    ))
}

fn backward_sweep<D>(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    maturities: &[Maturity],
    xi: &[f64],
    driver: &DriverSpec,
    drift: D,
) -> Result<BsdeSolution>
where
    D: Fn(usize, usize, f64, &FiniteMeasure) -> Result<(f64, u32)> + Sync,
{
    check_rank(tree, kernel)?;
    crate::measure::require_distinct(maturities)?;
    assert_eq!(xi.len(), tree.leaf_count());

    let steps = tree.steps();
    let mut y_levels: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    y_levels[steps] = xi.to_vec();
    let mut coeff_steps: Vec<Vec<Vec<f64>>> = vec![Vec::new(); steps];
    let mut dn_steps: Vec<Vec<f64>> = vec![Vec::new(); steps];
    let mut diagnostics = SolveDiagnostics::default();

    for s in (1..=steps).rev() {
        let next_values = y_levels[s].clone();
        let per_node: Vec<NodeSweep> = (0..tree.level_len(s - 1))
            .into_par_iter()
            .map(|v| sweep_node(tree, kernel, maturities, s, v, &next_values, &drift))
            .collect::<Result<_>>()?;

        let da = tree.clock().delta(s);
        let mut y_row = Vec::with_capacity(per_node.len());
        let mut coeff_row = Vec::with_capacity(per_node.len());
        let mut dn_row = vec![0.0; tree.level_len(s)];
        for (v, (y, coeffs, delta_n, cond_mean, iters)) in per_node.into_iter().enumerate() {
            let h_measure = FiniteMeasure::from_coeffs(maturities, &coeffs);
            let f_val = driver.evaluate(s, v, y, &h_measure);
            let residual = (y - cond_mean - f_val * da).abs();
            diagnostics.max_one_step_residual = diagnostics.max_one_step_residual.max(residual);
            diagnostics.total_implicit_iterations += iters as u64;
            diagnostics.max_implicit_iterations = diagnostics.max_implicit_iterations.max(iters);
            for (b, c) in tree.children(s - 1, v).enumerate() {
                dn_row[c] = delta_n[b];
            }
            y_row.push(y);
            coeff_row.push(coeffs);
        }
        y_levels[s - 1] = y_row;
        coeff_steps[s - 1] = coeff_row;
        dn_steps[s - 1] = dn_row;
    }

    // Accumulate N path values from its increments.
    let mut n_levels: Vec<Vec<f64>> = vec![vec![0.0]];
    for s in 1..=steps {
        let row = (0..tree.level_len(s))
            .map(|c| n_levels[s - 1][tree.node(s, c).parent] + dn_steps[s - 1][c])
            .collect();
        n_levels.push(row);
    }

    Ok(BsdeSolution {
        y: Adapted::from_levels(y_levels),
        maturities: maturities.to_vec(),
        integrand: Predictable::from_steps(coeff_steps),
        residual: Adapted::from_levels(n_levels),
        diagnostics,
    })
}

/// Solves the BSDE with the given driver against the martingales of the
/// listed maturities (the full equation when the list saturates the kernel
/// rank, the `n`-th small-market equation when it is a prefix).
pub fn solve_bsde(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    driver: &DriverSpec,
    xi: &[f64],
    maturities: &[Maturity],
) -> Result<BsdeSolution> {
    assert_eq!(driver.steps(), tree.steps());
    backward_sweep(tree, kernel, maturities, xi, driver, |step, node, m, h| {
        let da = tree.clock().delta(step);
        implicit_scalar_solve(driver, step, node, m, h, da)
    })
}

// ---------------------------------------------------------------------------
// Weighted norms
// ---------------------------------------------------------------------------

/// The three squared components of the `S_beta` norm of a triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedNorms {
    pub beta: f64,
    /// `||alpha Y||^2_{T,beta}`
    pub y_sq: f64,
    /// `||H||^2_{M,beta}`
    pub h_sq: f64,
    /// `||N||^2_{H^2_beta}`
    pub n_sq: f64,
}

impl WeightedNorms {
    pub fn total_sq(&self) -> f64 {
        self.y_sq + self.h_sq + self.n_sq
    }

    pub fn s_beta(&self) -> f64 {
        self.total_sq().sqrt()
    }
}

/// Discrete weighted norms of an adapted triple.
///
/// Step `s` carries the predictable weight `exp(beta * K_{s-1})`; the `Y`
/// component is sampled at the right endpoint of each step.
#[allow(clippy::too_many_arguments)]
pub fn weighted_norms(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    driver: &DriverSpec,
    beta: f64,
    y: &Adapted<f64>,
    maturities: &[Maturity],
    integrand: &Predictable<Vec<f64>>,
    residual: &Adapted<f64>,
) -> WeightedNorms {
    let k = driver.k_levels(tree.clock());
    let mut y_sq = 0.0;
    let mut h_sq = 0.0;
    let mut n_sq = 0.0;
    for s in 1..=tree.steps() {
        let weight = (beta * k[s - 1]).exp();
        let da = tree.clock().delta(s);
        let alpha_sq = driver.alpha_sq(s);
        for c in 0..tree.level_len(s) {
            let p = tree.path_prob(s, c);
            let yv = *y.value(s, c);
            y_sq += weight * alpha_sq * p * yv * yv * da;
            let dn = residual.value(s, c) - residual.value(s - 1, tree.node(s, c).parent);
            n_sq += weight * p * dn * dn;
        }
        for v in 0..tree.level_len(s - 1) {
            let p = tree.path_prob(s - 1, v);
            let gram = kernel
                .gram(s, v, maturities)
                .expect("distinct maturities validated upstream");
            let coeffs = DVector::from_vec(integrand.value(s, v).clone());
            let norm = (coeffs.transpose() * &gram * &coeffs)[0];
            h_sq += weight * p * norm * da;
        }
    }
    WeightedNorms {
        beta,
        y_sq,
        h_sq,
        n_sq,
    }
}

impl BsdeSolution {
    pub fn norms(
        &self,
        tree: &ScenarioTree,
        kernel: &CovarianceKernel,
        driver: &DriverSpec,
        beta: f64,
    ) -> WeightedNorms {
        weighted_norms(
            tree,
            kernel,
            driver,
            beta,
            &self.y,
            &self.maturities,
            &self.integrand,
            &self.residual,
        )
    }
}

/// Difference triple on the longer maturity list: `(Y, maturities,
/// integrand coefficients, N)`.
pub type TripleDiff = (Adapted<f64>, Vec<Maturity>, Predictable<Vec<f64>>, Adapted<f64>);

/// Componentwise difference of two solutions whose maturity lists agree on
/// the shorter one's prefix; the difference lives on the longer list.
pub fn solution_diff(a: &BsdeSolution, b: &BsdeSolution) -> TripleDiff {
    let (long, short, sign) = if a.maturities.len() >= b.maturities.len() {
        (a, b, 1.0)
    } else {
        (b, a, -1.0)
    };
    for (x, y) in long.maturities.iter().zip(&short.maturities) {
        assert_eq!(
            x.value(),
            y.value(),
            "maturity lists must agree on the shared prefix"
        );
    }
    let n = long.maturities.len();
    let y_diff = Adapted::from_levels(
        long.y
            .levels()
            .iter()
            .zip(short.y.levels())
            .map(|(la, lb)| la.iter().zip(lb).map(|(x, y)| sign * (x - y)).collect())
            .collect(),
    );
    let coeff_diff = Predictable::from_steps(
        long.integrand
            .steps()
            .iter()
            .zip(short.integrand.steps())
            .map(|(ra, rb)| {
                ra.iter()
                    .zip(rb)
                    .map(|(ca, cb)| {
                        (0..n)
                            .map(|i| sign * (ca[i] - cb.get(i).copied().unwrap_or(0.0)))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    );
    let n_diff = Adapted::from_levels(
        long.residual
            .levels()
            .iter()
            .zip(short.residual.levels())
            .map(|(la, lb)| la.iter().zip(lb).map(|(x, y)| sign * (x - y)).collect())
            .collect(),
    );
    (y_diff, long.maturities.clone(), coeff_diff, n_diff)
}

/// `S_beta` norms of the difference of two solutions.
pub fn distance_norms(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    driver: &DriverSpec,
    beta: f64,
    a: &BsdeSolution,
    b: &BsdeSolution,
) -> WeightedNorms {
    let (y, maturities, coeffs, n) = solution_diff(a, b);
    weighted_norms(tree, kernel, driver, beta, &y, &maturities, &coeffs, &n)
}

// ---------------------------------------------------------------------------
// Picard iteration
// ---------------------------------------------------------------------------

/// Convergence report of [`picard_solve`].
#[derive(Debug, Clone)]
pub struct PicardDiagnostics {
    /// Squared-`S_beta` ratios of successive iterate differences.
    pub ratios: Vec<f64>,
    /// `S_beta` distance between the last two iterates.
    pub final_distance: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates the contraction map from `(0, 0, 0)`: freeze the driver
/// arguments at the previous iterate and solve the resulting
/// driver-independent equation.
///
/// Requires `beta > 3`, the hypothesis under which the map contracts with
/// squared-norm factor `2 / (beta - 1)`.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    driver: &DriverSpec,
    xi: &[f64],
    maturities: &[Maturity],
    beta: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(BsdeSolution, PicardDiagnostics)> {
    if !(beta > 3.0) {
        return Err(Error::BetaOutOfRange(beta));
    }
    assert_eq!(driver.steps(), tree.steps());
    check_rank(tree, kernel)?;

    let mut current = BsdeSolution {
        y: Adapted::zeros_like(tree),
        maturities: maturities.to_vec(),
        integrand: Predictable::from_steps(
            (1..=tree.steps())
                .map(|s| vec![vec![0.0; maturities.len()]; tree.level_len(s - 1)])
                .collect(),
        ),
        residual: Adapted::zeros_like(tree),
        diagnostics: SolveDiagnostics::default(),
    };

    let mut ratios = Vec::new();
    let mut prev_distance_sq: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut final_distance = f64::INFINITY;

    for _ in 0..max_iters {
        iterations += 1;
        let frozen: Vec<Vec<f64>> = (1..=tree.steps())
            .map(|s| {
                (0..tree.level_len(s - 1))
                    .map(|v| {
                        let h = current.integrand_measure(s, v);
                        driver.evaluate(s, v, *current.y.value(s - 1, v), &h)
                    })
                    .collect()
            })
            .collect();
        for (s, row) in frozen.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteDriver { step: s + 1 });
            }
        }

        let next = backward_sweep(tree, kernel, maturities, xi, driver, |step, node, m, _h| {
            Ok((m + frozen[step - 1][node] * tree.clock().delta(step), 0))
        })?;

        let dist_sq = distance_norms(tree, kernel, driver, beta, &next, &current).total_sq();
        if let Some(prev) = prev_distance_sq {
            if prev > 0.0 {
                ratios.push(dist_sq / prev);
            }
        }
        prev_distance_sq = Some(dist_sq);
        final_distance = dist_sq.sqrt();
        current = next;
        if final_distance <= tol {
            converged = true;
            break;
        }
    }

    Ok((
        current,
        PicardDiagnostics {
            ratios,
            final_distance,
            iterations,
            converged,
        },
    ))
}

// ---------------------------------------------------------------------------
// The gamma certificate
// ---------------------------------------------------------------------------

/// An admissible pair of Young constants and the approximation constant they
/// certify.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCertificate {
    pub beta: f64,
    pub mu_sq: f64,
    pub lambda_sq: f64,
    pub gamma: f64,
}

/// `gamma = (lambda^2 - 1) * max{ 1/(beta-2-mu^2), 1/(1 - 1/mu^2 - 1/lambda^2) }`
/// when the pair is admissible, `None` otherwise.
pub fn gamma_value(beta: f64, mu_sq: f64, lambda_sq: f64) -> Option<f64> {
    if !(mu_sq > 0.0) || !(lambda_sq > 1.0) {
        return None;
    }
    let a = beta - 2.0 - mu_sq;
    let b = 1.0 - 1.0 / mu_sq - 1.0 / lambda_sq;
    if !(a > 0.0) || !(b > 0.0) {
        return None;
    }
    Some((lambda_sq - 1.0) * (1.0 / a).max(1.0 / b))
}

/// Minimizes the certified constant over admissible `(mu^2, lambda^2)` by a
/// refined grid search (relative refinement below `1e-6`).
pub fn compute_gamma(beta: f64) -> Result<GammaCertificate> {
    if !(beta > 3.0) {
        return Err(Error::BetaOutOfRange(beta));
    }
    let grid = 64;
    let mut mu_lo = 1.0 + 1e-9;
    let mut mu_hi = beta - 2.0 - 1e-9;
    // lambda^2 is searched through its offset above the admissibility edge
    // 1/(1 - 1/mu^2).
    let mut off_lo = 1e-9;
    let mut off_hi = 100.0;
    let mut best: Option<GammaCertificate> = None;

    for _round in 0..16 {
        let mut round_best: Option<GammaCertificate> = None;
        for i in 0..=grid {
            let mu_sq = mu_lo + (mu_hi - mu_lo) * i as f64 / grid as f64;
            if !(mu_sq > 1.0) {
                continue;
            }
            let edge = 1.0 / (1.0 - 1.0 / mu_sq);
            for j in 0..=grid {
                let lambda_sq = edge + off_lo + (off_hi - off_lo) * j as f64 / grid as f64;
                if let Some(gamma) = gamma_value(beta, mu_sq, lambda_sq) {
                    if round_best.is_none_or(|b: GammaCertificate| gamma < b.gamma) {
                        round_best = Some(GammaCertificate {
                            beta,
                            mu_sq,
                            lambda_sq,
                            gamma,
                        });
                    }
                }
            }
        }
        let rb = round_best.expect("admissible region nonempty for beta > 3");
        if best.is_none_or(|b| rb.gamma < b.gamma) {
            best = Some(rb);
        }
        // Zoom around the best point found so far.
        let b = best.unwrap();
        let mu_span = (mu_hi - mu_lo) / 4.0;
        mu_lo = (b.mu_sq - mu_span).max(1.0 + 1e-12);
        mu_hi = (b.mu_sq + mu_span).min(beta - 2.0 - 1e-12);
        let edge = 1.0 / (1.0 - 1.0 / b.mu_sq);
        let off = (b.lambda_sq - edge).max(1e-12);
        let off_span = (off_hi - off_lo) / 4.0;
        off_lo = (off - off_span).max(1e-12);
        off_hi = off + off_span;
    }
    Ok(best.expect("grid search produced a candidate"))
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

/// One row of the small-market convergence table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub norm_y: f64,
    pub norm_h: f64,
    pub norm_n: f64,
    pub s_beta_total: f64,
    pub gamma: f64,
    pub bound_slack: f64,
}

/// Solves the small-market equations for `n = 1..=n_max` against the full
/// solution at `n_max` and tabulates the `S_beta` distances together with
/// the certified bound slack `gamma * ||dN||^2 - (||alpha dY||^2 + ||dH||^2)`.
pub fn convergence_study(
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    driver: &DriverSpec,
    xi: &[f64],
    base_points: &[Maturity],
    beta: f64,
) -> Result<Vec<ConvergenceRow>> {
    let certificate = compute_gamma(beta)?;
    let full = solve_bsde(tree, kernel, driver, xi, base_points)?;
    let rows: Vec<ConvergenceRow> = (1..=base_points.len())
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|n| -> Result<ConvergenceRow> {
            let small = solve_bsde(tree, kernel, driver, xi, &base_points[..n])?;
            let norms = distance_norms(tree, kernel, driver, beta, &full, &small);
            Ok(ConvergenceRow {
                n,
                norm_y: norms.y_sq,
                norm_h: norms.h_sq,
                norm_n: norms.n_sq,
                s_beta_total: norms.total_sq(),
                gamma: certificate.gamma,
                bound_slack: certificate.gamma * norms.n_sq - (norms.y_sq + norms.h_sq),
            })
        })
        .collect::<Result<_>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::martingale_path;
    use crate::tree::{BranchingDesign, DEFAULT_NODE_CAP};
    use approx::assert_abs_diff_eq;

    fn m(v: f64) -> Maturity {
        Maturity::new(v).unwrap()
    }

    fn build(steps: usize, delta: f64, factors: usize) -> ScenarioTree {
        ScenarioTree::build(
            Clock::uniform(steps, delta).unwrap(),
            factors,
            BranchingDesign::FullBinary,
            DEFAULT_NODE_CAP,
        )
        .unwrap()
    }

    fn rank2_kernel() -> CovarianceKernel {
        CovarianceKernel::poly(vec![vec![0.9, 0.3], vec![0.2, -0.8, 0.5]])
    }

    #[test]
    fn zero_driver_constant_claim() {
        let tree = build(3, 0.2, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::zero(3);
        let xi = vec![2.5; tree.leaf_count()];
        let sol = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.5)]).unwrap();
        for t in 0..=3 {
            for v in sol.y.level(t) {
                assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-13);
            }
        }
        for s in 1..=3 {
            for v in 0..tree.level_len(s - 1) {
                assert_abs_diff_eq!(sol.integrand.value(s, v)[0], 0.0, epsilon = 1e-13);
            }
        }
        for v in sol.residual.terminal() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-13);
        }
        assert!(sol.diagnostics.max_one_step_residual < 1e-12);
    }

    #[test]
    fn linear_driver_closed_form() {
        // f(y) = -r y with xi = 1: the implicit recursion gives
        // Y_0 = (1 + r d)^(-S), deterministically.
        let (r, delta, steps) = (0.4, 0.25, 5);
        let tree = build(steps, delta, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::new(
            move |_s, _n, y, _h| -r * y,
            vec![r; steps],
            vec![0.0; steps],
        );
        let xi = vec![1.0; tree.leaf_count()];
        let sol = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.5)]).unwrap();
        let expected = (1.0 + r * delta).powi(-(steps as i32));
        assert_abs_diff_eq!(sol.initial_value(), expected, epsilon = 1e-12);
        assert!(sol.diagnostics.max_one_step_residual < 1e-12);
    }

    #[test]
    fn martingale_claim_recovers_integrand() {
        let tree = build(3, 0.3, 2);
        let kernel = rank2_kernel();
        let driver = DriverSpec::zero(3);
        let x = m(0.6);
        let path = martingale_path(&tree, &kernel, x).unwrap();
        let sol = solve_bsde(&tree, &kernel, &driver, path.terminal(), &[x, m(1.0)]).unwrap();
        for t in 0..=3 {
            for (a, b) in sol.y.level(t).iter().zip(path.level(t)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-11);
            }
        }
        for v in sol.residual.terminal() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-10);
        }
        // The recovered integrand equals delta_x in U' at every node.
        for s in 1..=3 {
            for v in 0..tree.level_len(s - 1) {
                let h = sol.integrand_measure(s, v);
                let diff = h.sub(&FiniteMeasure::dirac(x, 1.0));
                assert_abs_diff_eq!(kernel.uprime_norm_sq(s, v, &diff), 0.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn one_step_identity_on_every_branch() {
        let tree = build(3, 0.2, 2);
        let kernel = rank2_kernel();
        let driver = DriverSpec::new(
            |_s, _n, y, h: &FiniteMeasure| -0.5 * y + h.atoms().iter().map(|a| a.1).sum::<f64>(),
            vec![0.5; 3],
            vec![2.0; 3],
        );
        let xi: Vec<f64> = (0..tree.leaf_count())
            .map(|i| ((i * 13 + 5) % 11) as f64 * 0.21 - 1.0)
            .collect();
        let maturities = [m(0.25), m(0.75)];
        let sol = solve_bsde(&tree, &kernel, &driver, &xi, &maturities).unwrap();
        for s in 1..=tree.steps() {
            let da = tree.clock().delta(s);
            for v in 0..tree.level_len(s - 1) {
                let h = sol.integrand_measure(s, v);
                let f_val = driver.evaluate(s, v, *sol.y.value(s - 1, v), &h);
                for c in tree.children(s - 1, v) {
                    let hm = crate::stochastic::measure_increment(&tree, &kernel, s, c, &h);
                    let dn = sol.residual.value(s, c) - sol.residual.value(s - 1, v);
                    let lhs = sol.y.value(s - 1, v) + hm + dn;
                    let rhs = sol.y.value(s, c) + f_val * da;
                    assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn implicit_divergence_reports_finer_clock() {
        // eta * dA = 1 with positive feedback: y = m + y has no solution.
        let tree = build(1, 1.0, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::new(|_s, _n, y, _h| y, vec![1.0], vec![0.0]);
        let xi = vec![1.0, 1.0];
        let err = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.5)]).unwrap_err();
        assert!(matches!(err, Error::ImplicitSolveDiverged { .. }));
        assert!(err.to_string().contains("finer clock"));
    }

    #[test]
    fn non_finite_driver_rejected() {
        let tree = build(1, 0.5, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::new(|_s, _n, _y, _h| f64::NAN, vec![0.1], vec![0.0]);
        let err = solve_bsde(&tree, &kernel, &driver, &[1.0, 1.0], &[m(0.5)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDriver { .. }));
    }

    #[test]
    fn picard_zero_driver_single_iteration() {
        let tree = build(2, 0.3, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::zero(2);
        let xi: Vec<f64> = (0..tree.leaf_count()).map(|i| i as f64).collect();
        let (sol, diag) =
            picard_solve(&tree, &kernel, &driver, &xi, &[m(0.5)], 4.0, 50, 1e-12).unwrap();
        assert!(diag.converged);
        assert!(diag.iterations <= 2);
        let direct = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.5)]).unwrap();
        let d = distance_norms(&tree, &kernel, &driver, 4.0, &sol, &direct);
        assert!(d.s_beta() < 1e-12);
    }

    #[test]
    fn picard_rejects_beta_at_most_three() {
        let tree = build(1, 0.5, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::zero(1);
        let err = picard_solve(&tree, &kernel, &driver, &[0.0, 0.0], &[m(0.5)], 3.0, 10, 1e-10)
            .unwrap_err();
        assert!(matches!(err, Error::BetaOutOfRange(_)));
    }

    #[test]
    fn picard_contraction_and_agreement() {
        let tree = build(4, 0.125, 2);
        let kernel = rank2_kernel();
        let lam = FiniteMeasure::dirac(m(0.25), 0.8);
        let theta: Vec<f64> = (1..=4)
            .map(|s| kernel.uprime_norm_sq(s, 0, &lam).sqrt())
            .collect();
        let kernel_c = kernel.clone();
        let driver = DriverSpec::new(
            move |s, n, y, h| -0.6 * y + kernel_c.uprime_inner(s, n, h, &lam),
            vec![0.6; 4],
            theta,
        );
        let xi: Vec<f64> = (0..tree.leaf_count())
            .map(|i| ((i * 7 + 3) % 13) as f64 * 0.31 - 2.0)
            .collect();
        let maturities = [m(0.25), m(0.75), m(1.0)];
        let (sol, diag) =
            picard_solve(&tree, &kernel, &driver, &xi, &maturities, 4.0, 200, 1e-12).unwrap();
        assert!(diag.converged, "picard did not converge: {diag:?}");
        for r in &diag.ratios {
            assert!(
                *r <= 2.0 / 3.0 + 1e-8,
                "ratio {r} above the contraction constant"
            );
        }
        let direct = solve_bsde(&tree, &kernel, &driver, &xi, &maturities).unwrap();
        let d = distance_norms(&tree, &kernel, &driver, 4.0, &sol, &direct);
        assert!(d.s_beta() < 1e-9, "cross-solver distance {}", d.s_beta());
    }

    #[test]
    fn weighted_norms_beta_zero_unweighted() {
        let tree = build(2, 0.5, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::new(|_s, _n, y, _h| -y, vec![1.0; 2], vec![0.0; 2]);
        let xi = vec![1.0; tree.leaf_count()];
        let sol = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.5)]).unwrap();
        let n0 = sol.norms(&tree, &kernel, &driver, 0.0);
        // Unweighted: sum_s E[alpha^2 Y_s^2] dA with alpha^2 = 1 here.
        let mut manual = 0.0;
        for s in 1..=2usize {
            let da = tree.clock().delta(s);
            for c in 0..tree.level_len(s) {
                manual += tree.path_prob(s, c) * sol.y.value(s, c).powi(2) * da;
            }
        }
        assert_abs_diff_eq!(n0.y_sq, manual, epsilon = 1e-14);
    }

    #[test]
    fn zero_lipschitz_data_uses_clock_weights() {
        // eta = theta = 0 falls back to alpha^2 = 1, so K = A and the step-s
        // weight is exp(beta * A_{s-1}).
        let clock = Clock::from_increments(vec![0.2, 0.3]).unwrap();
        let driver = DriverSpec::zero(2);
        let k = driver.k_levels(&clock);
        assert_abs_diff_eq!(k[1], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(k[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn weighted_norms_hand_computed_two_step() {
        // Deterministic Y on a one-factor tree; the sums reduce to plain
        // arithmetic. eta = (0.5, 0.25), theta = 0, dA = 0.5 so
        // alpha^2 = (0.5, 0.25), K = (0, 0.25, 0.375), beta = 2.
        let tree = build(2, 0.5, 1);
        let kernel = CovarianceKernel::constant(1.0);
        let driver = DriverSpec::new(|_s, _n, _y, _h| 0.0, vec![0.5, 0.25], vec![0.0, 0.0]);
        let y = Adapted::from_levels(vec![
            vec![1.0],
            vec![2.0; tree.level_len(1)],
            vec![3.0; tree.level_len(2)],
        ]);
        let coeffs = Predictable::from_steps(vec![
            vec![vec![0.0]; tree.level_len(0)],
            vec![vec![0.0]; tree.level_len(1)],
        ]);
        let n = Adapted::zeros_like(&tree);
        let norms = weighted_norms(&tree, &kernel, &driver, 2.0, &y, &[m(0.5)], &coeffs, &n);
        let manual = (2.0_f64 * 0.0).exp() * 0.5 * 4.0 * 0.5
            + (2.0_f64 * 0.25).exp() * 0.25 * 9.0 * 0.5;
        assert_abs_diff_eq!(norms.y_sq, manual, epsilon = 1e-12);
        assert_eq!(norms.h_sq, 0.0);
        assert_eq!(norms.n_sq, 0.0);
    }

    #[test]
    fn beta_monotonicity_of_weights() {
        let tree = build(3, 0.2, 2);
        let kernel = rank2_kernel();
        let driver = DriverSpec::new(|_s, _n, y, _h| -0.3 * y, vec![0.3; 3], vec![0.0; 3]);
        let xi: Vec<f64> = (0..tree.leaf_count()).map(|i| (i % 5) as f64 - 2.0).collect();
        let sol = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.3), m(0.8)]).unwrap();
        let lo = sol.norms(&tree, &kernel, &driver, 1.0);
        let hi = sol.norms(&tree, &kernel, &driver, 4.0);
        assert!(lo.y_sq <= hi.y_sq + 1e-15);
        assert!(lo.h_sq <= hi.h_sq + 1e-15);
        assert!(lo.n_sq <= hi.n_sq + 1e-15);
    }

    #[test]
    fn gamma_candidate_value_from_reference_pair() {
        let g = gamma_value(4.0, 1.5, 6.0).unwrap();
        assert_abs_diff_eq!(g, 30.0, epsilon = 1e-10);
    }

    #[test]
    fn gamma_optimizer_beats_reference() {
        let cert = compute_gamma(4.0).unwrap();
        assert!(cert.gamma <= 30.0, "gamma {} above 30", cert.gamma);
        // Certificate invariants.
        assert!(cert.beta - 2.0 - cert.mu_sq > 0.0);
        assert!(1.0 - 1.0 / cert.mu_sq - 1.0 / cert.lambda_sq > 0.0);
        assert!(cert.lambda_sq > 1.0);
        let direct = gamma_value(4.0, cert.mu_sq, cert.lambda_sq).unwrap();
        assert_abs_diff_eq!(cert.gamma, direct, epsilon = 1e-12);
    }

    #[test]
    fn gamma_rejects_beta_three() {
        assert!(matches!(compute_gamma(3.0), Err(Error::BetaOutOfRange(_))));
    }

    #[test]
    fn gamma_decreases_with_beta() {
        let g4 = compute_gamma(4.0).unwrap().gamma;
        let g10 = compute_gamma(10.0).unwrap().gamma;
        assert!(g10 < g4, "gamma(10) = {g10} not below gamma(4) = {g4}");
    }

    #[test]
    fn convergence_study_zero_distance_at_full_rank() {
        let tree = build(3, 0.2, 2);
        let kernel = rank2_kernel();
        let driver = DriverSpec::new(|_s, _n, y, _h| -0.4 * y, vec![0.4; 3], vec![0.0; 3]);
        let xi: Vec<f64> = (0..tree.leaf_count())
            .map(|i| ((i * 11 + 2) % 7) as f64 * 0.4 - 1.0)
            .collect();
        let points = [m(0.2), m(0.6), m(1.0)];
        let rows = convergence_study(&tree, &kernel, &driver, &xi, &points, 4.0).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[2].s_beta_total <= 1e-10);
        assert!(rows[0].s_beta_total >= rows[2].s_beta_total);
        for row in &rows {
            assert!(
                row.bound_slack >= -1e-10,
                "slack {} at n={}",
                row.bound_slack,
                row.n
            );
        }
    }

    #[test]
    fn convergence_study_spanned_claim_zero_everywhere() {
        // f = 0 and a claim measurable w.r.t. M^{x_1}: already representable
        // in every small market.
        let tree = build(3, 0.25, 2);
        let kernel = rank2_kernel();
        let driver = DriverSpec::zero(3);
        let x1 = m(0.4);
        let path = martingale_path(&tree, &kernel, x1).unwrap();
        let points = [x1, m(0.9)];
        let rows =
            convergence_study(&tree, &kernel, &driver, path.terminal(), &points, 4.0).unwrap();
        for row in &rows {
            assert!(
                row.s_beta_total <= 1e-10,
                "distance {} at n={}",
                row.s_beta_total,
                row.n
            );
        }
    }

    #[test]
    fn full_solution_invariant_under_maturity_permutation() {
        // The full solution's Y must not depend on the order of the
        // rank-saturating maturity set.
        let tree = build(3, 0.2, 2);
        let kernel = rank2_kernel();
        let driver = DriverSpec::new(|_s, _n, y, _h| -0.4 * y, vec![0.4; 3], vec![0.0; 3]);
        let xi: Vec<f64> = (0..tree.leaf_count())
            .map(|i| ((i * 11 + 2) % 7) as f64 * 0.4 - 1.0)
            .collect();
        let a = solve_bsde(&tree, &kernel, &driver, &xi, &[m(0.2), m(0.6), m(1.0)]).unwrap();
        let b = solve_bsde(&tree, &kernel, &driver, &xi, &[m(1.0), m(0.2), m(0.6)]).unwrap();
        for t in 0..=tree.steps() {
            for (x, y) in a.y.level(t).iter().zip(b.y.level(t)) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn solvers_agree_on_random_lipschitz_driver() {
        let tree = build(4, 0.15, 2);
        let kernel = rank2_kernel();
        let rho = FiniteMeasure::dirac(m(0.7), 0.5);
        let theta: Vec<f64> = (1..=4)
            .map(|s| kernel.uprime_norm_sq(s, 0, &rho).sqrt())
            .collect();
        let kernel_c = kernel.clone();
        let driver = DriverSpec::new(
            move |s, n, y, h| 0.7 * (0.9 * y).tanh() + kernel_c.uprime_inner(s, n, h, &rho),
            vec![0.7 * 0.9; 4],
            theta,
        );
        let xi: Vec<f64> = (0..tree.leaf_count())
            .map(|i| ((i * 17 + 1) % 19) as f64 * 0.2 - 1.5)
            .collect();
        let maturities = [m(0.3), m(0.7), m(1.0)];
        let direct = solve_bsde(&tree, &kernel, &driver, &xi, &maturities).unwrap();
        let (iterated, diag) =
            picard_solve(&tree, &kernel, &driver, &xi, &maturities, 4.0, 300, 1e-13).unwrap();
        assert!(diag.converged);
        let d = distance_norms(&tree, &kernel, &driver, 4.0, &direct, &iterated);
        assert!(d.s_beta() < 1e-9, "distance {}", d.s_beta());
    }
}

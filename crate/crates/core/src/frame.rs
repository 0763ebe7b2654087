//! Orthonormal frames of Dirac combinations under the `U'` scalar product.
//!
//! Given base points `x_1..x_n` and a kernel slice `Q_{s,node}`, a triangular
//! orthogonalization produces frame measures `e^m` supported on `{x_1..x_m}`.
//! Candidates whose squared residual falls below a relative threshold are
//! emitted as the zero measure: degenerate kernels shrink the frame instead
//! of failing. The nonzero members form an orthonormal basis of the span of
//! `{delta_{x_1}..delta_{x_n}}` modulo the kernel's null space.

use crate::error::Result;
use crate::kernel::CovarianceKernel;
use crate::measure::{require_distinct, FiniteMeasure, Maturity};
use crate::tree::ScenarioTree;
use nalgebra::{DMatrix, DVector};

/// Relative zero threshold for squared Gram-Schmidt residuals.
pub const FRAME_ZERO_RELATIVE_TOL: f64 = 1e-12;

/// The frame at a single `(step, node)` slice.
#[derive(Debug, Clone)]
pub struct FrameSlice {
    base: Vec<Maturity>,
    gram: DMatrix<f64>,
    /// Triangular coefficients: `members[m]` holds the coefficients of `e^{m+1}`
    /// on `delta_{x_1}..delta_{x_{m+1}}`, or `None` for a zero member.
    members: Vec<Option<Vec<f64>>>,
}

/// Runs the orthogonalization for one kernel slice.
///
/// Members are built in the given order of base points with no pivoting, so
/// `e^m` is always supported on the first `m` points.
pub fn gram_schmidt_frame(
    kernel: &CovarianceKernel,
    step: usize,
    node: usize,
    points: &[Maturity],
) -> Result<FrameSlice> {
    require_distinct(points)?;
    let gram = kernel.gram(step, node, points)?;
    Ok(FrameSlice::from_gram(points.to_vec(), gram))
}

impl FrameSlice {
    /// Orthogonalizes directly against a precomputed Gram matrix.
    pub fn from_gram(base: Vec<Maturity>, gram: DMatrix<f64>) -> Self {
        let n = base.len();
        let max_diag = (0..n).map(|i| gram[(i, i)]).fold(0.0_f64, f64::max);
        let zero_tol = FRAME_ZERO_RELATIVE_TOL * max_diag;

        let inner = |u: &DVector<f64>, v: &DVector<f64>| -> f64 { (u.transpose() * &gram * v)[0] };

        let mut members: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        let mut kept: Vec<DVector<f64>> = Vec::new();
        for m in 0..n {
            let mut v = DVector::zeros(n);
            v[m] = 1.0;
            // Modified Gram-Schmidt with one re-orthogonalization pass.
            for _ in 0..2 {
                for e in &kept {
                    let proj = inner(&v, e);
                    v -= e * proj;
                }
            }
            let r2 = inner(&v, &v).max(0.0);
            if r2 > zero_tol {
                v /= r2.sqrt();
                members.push(Some(v.iter().copied().take(m + 1).collect()));
                kept.push(v);
            } else {
                members.push(None);
            }
        }
        FrameSlice {
            base,
            gram,
            members,
        }
    }

    pub fn base_points(&self) -> &[Maturity] {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of nonzero frame members (the dimension of the spanned space).
    pub fn nonzero_count(&self) -> usize {
        self.members.iter().filter(|m| m.is_some()).count()
    }

    /// Triangular coefficients of member `m` (1-based), `None` when zero.
    pub fn member_coeffs(&self, m: usize) -> Option<&[f64]> {
        self.members[m - 1].as_deref()
    }

    /// Member `m` (1-based) as a measure; the zero measure for null members.
    pub fn member(&self, m: usize) -> FiniteMeasure {
        match &self.members[m - 1] {
            Some(coeffs) => FiniteMeasure::from_coeffs(&self.base[..coeffs.len()], coeffs),
            None => FiniteMeasure::zero(),
        }
    }

    fn coeff_vector(&self, mu: &FiniteMeasure) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(mu.coeffs_on(&self.base)?))
    }

    /// Inner product of two measures supported on the base points.
    pub fn inner(&self, mu: &FiniteMeasure, nu: &FiniteMeasure) -> Result<f64> {
        let a = self.coeff_vector(mu)?;
        let b = self.coeff_vector(nu)?;
        Ok((a.transpose() * &self.gram * b)[0])
    }

    /// Expansion coefficients `(mu, e^m)_{U'}` for `m = 1..len`.
    ///
    /// `mu` must be supported on the base points (or a prefix thereof).
    pub fn coefficients(&self, mu: &FiniteMeasure) -> Result<Vec<f64>> {
        let c = self.coeff_vector(mu)?;
        let gc = &self.gram * &c;
        Ok(self
            .members
            .iter()
            .map(|m| match m {
                Some(coeffs) => coeffs.iter().zip(gc.iter()).map(|(a, g)| a * g).sum(),
                None => 0.0,
            })
            .collect())
    }

    /// Squared norm of the expansion tail beyond the first `n` members,
    /// `sum_{m > n} (mu, e^m)^2`.
    pub fn tail_norm_sq(&self, mu: &FiniteMeasure, n: usize) -> Result<f64> {
        let coeffs = self.coefficients(mu)?;
        Ok(coeffs.iter().skip(n).map(|c| c * c).sum())
    }

    /// Reconstructs `sum_m coeff_m e^m` as a measure on the base points.
    pub fn reconstruct(&self, coeffs: &[f64]) -> FiniteMeasure {
        let mut acc = FiniteMeasure::zero();
        for (m, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                acc = acc.add_scaled(c, &self.member(m + 1));
            }
        }
        acc
    }
}

/// Frames for every `(step, node)` of a tree, sharing one base point list.
#[derive(Debug, Clone)]
pub struct OrthonormalFrame {
    base: Vec<Maturity>,
    /// `slices[s-1][node]` is the frame governing step `s` at a level-`(s-1)` node.
    slices: Vec<Vec<FrameSlice>>,
}

impl OrthonormalFrame {
    pub fn build(
        kernel: &CovarianceKernel,
        tree: &ScenarioTree,
        points: &[Maturity],
    ) -> Result<Self> {
        let mut slices = Vec::with_capacity(tree.steps());
        for step in 1..=tree.steps() {
            let nodes = tree.level_len(step - 1);
            let mut row = Vec::with_capacity(nodes);
            for node in 0..nodes {
                row.push(gram_schmidt_frame(kernel, step, node, points)?);
            }
            slices.push(row);
        }
        Ok(OrthonormalFrame {
            base: points.to_vec(),
            slices,
        })
    }

    pub fn base_points(&self) -> &[Maturity] {
        &self.base
    }

    pub fn slice(&self, step: usize, node: usize) -> &FrameSlice {
        &self.slices[step - 1][node]
    }
}

//! Bond-market layer: discounted price curves under the structure condition,
//! small-market strategies, the Föllmer–Schweizer decomposition, locally
//! risk-minimizing strategies, and the hedging convergence study.
//!
//! The discounted curve is `P^T = M^T + int b(T) dA` with drift `b = Q lambda`
//! for a predictable market price of risk `lambda`, so the mean-variance
//! tradeoff `sum |lambda|^2_{U'} dA` is finite by construction and its
//! maximum over nodes is recorded at build time.
//!
//! Hedging reduces to the BSDE with driver `f(t, y, h) = -(h, lambda_t)_{U'}`:
//! a claim is approximately attainable exactly when the full-market solution
//! has a vanishing orthogonal part, and for each `n` the small-market
//! solution yields the locally risk-minimizing strategy, whose cost process
//! is `Y^n_0 + N^n` and whose total risk equals the squared martingale norm
//! of `N^n`.

use crate::bsde::{
    compute_gamma, distance_norms, solve_bsde, weighted_norms, BsdeSolution, DriverSpec,
};
use crate::error::{Error, Result};
use crate::kernel::CovarianceKernel;
use crate::measure::{FiniteMeasure, Maturity};
use crate::stochastic::{check_rank, martingale_increment, measure_increment};
use crate::tree::{Adapted, Predictable, ScenarioTree};

/// Residual threshold below which the hedging BSDE certifies attainability.
pub const ATTAINABILITY_TOL: f64 = 1e-10;

/// Tolerance for the mean-self-financing and orthogonality checks.
pub const LRM_TOL: f64 = 1e-10;

/// A bond market on a scenario tree satisfying the structure condition.
#[derive(Debug, Clone)]
pub struct MarketModel {
    tree: ScenarioTree,
    kernel: CovarianceKernel,
    /// Ordered maturities `T_1..T_nmax`; the `n`-th small market trades the
    /// first `n` of them.
    base_points: Vec<Maturity>,
    /// Market price of risk per step.
    lambda: Vec<FiniteMeasure>,
    /// Per-step maximum over nodes of `|lambda_s|^2_{U'}`.
    lambda_norm_sq: Vec<f64>,
    /// Mean-variance tradeoff at levels `0..=S`, built from the per-step
    /// maxima (equal to the common value for node-uniform kernels).
    tradeoff: Vec<f64>,
}

/// Builds the market and validates the structure condition data.
pub fn build_market(
    tree: ScenarioTree,
    kernel: CovarianceKernel,
    base_points: Vec<Maturity>,
    lambda: Vec<FiniteMeasure>,
) -> Result<MarketModel> {
    check_rank(&tree, &kernel)?;
    crate::measure::require_distinct(&base_points)?;
    assert_eq!(lambda.len(), tree.steps(), "one lambda per step");
    let mut lambda_norm_sq = Vec::with_capacity(tree.steps());
    for (idx, lam) in lambda.iter().enumerate() {
        let s = idx + 1;
        let mut max_sq = 0.0_f64;
        for v in 0..tree.level_len(s - 1) {
            let sq = kernel.uprime_norm_sq(s, v, lam);
            if !sq.is_finite() {
                return Err(Error::invalid_config(
                    "market.lambda",
                    format!("non-finite |lambda|^2 at step {s}"),
                ));
            }
            max_sq = max_sq.max(sq);
        }
        lambda_norm_sq.push(max_sq);
    }
    let mut tradeoff = Vec::with_capacity(tree.steps() + 1);
    tradeoff.push(0.0);
    for s in 1..=tree.steps() {
        tradeoff.push(tradeoff[s - 1] + lambda_norm_sq[s - 1] * tree.clock().delta(s));
    }
    Ok(MarketModel {
        tree,
        kernel,
        base_points,
        lambda,
        lambda_norm_sq,
        tradeoff,
    })
}

impl MarketModel {
    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn kernel(&self) -> &CovarianceKernel {
        &self.kernel
    }

    pub fn base_points(&self) -> &[Maturity] {
        &self.base_points
    }

    pub fn lambda(&self, step: usize) -> &FiniteMeasure {
        &self.lambda[step - 1]
    }

    pub fn lambda_norm_sq(&self, step: usize) -> f64 {
        self.lambda_norm_sq[step - 1]
    }

    /// Mean-variance tradeoff at levels `0..=S` (nondecreasing, bounded).
    pub fn tradeoff(&self) -> &[f64] {
        &self.tradeoff
    }

    /// Drift `b_s(x) = (Q_s lambda_s)(x)` at a step/node.
    pub fn drift(&self, step: usize, node: usize, x: Maturity) -> f64 {
        self.kernel.apply_q(step, node, &self.lambda[step - 1], &[x])[0]
    }

    /// Increment of the discounted price `P^x` over step `s` into `child`.
    pub fn price_increment(&self, step: usize, child: usize, x: Maturity) -> f64 {
        let parent = self.tree.node(step, child).parent;
        martingale_increment(&self.tree, &self.kernel, step, child, x)
            + self.drift(step, parent, x) * self.tree.clock().delta(step)
    }

    /// Discounted price path of maturity `x`, normalized to `P^x_0 = 0`.
    pub fn price_path(&self, x: Maturity) -> Adapted<f64> {
        let mut levels = vec![vec![0.0]];
        for s in 1..=self.tree.steps() {
            let row = (0..self.tree.level_len(s))
                .map(|c| {
                    levels[s - 1][self.tree.node(s, c).parent] + self.price_increment(s, c, x)
                })
                .collect();
            levels.push(row);
        }
        Adapted::from_levels(levels)
    }

    /// The hedging driver `f(t, y, h) = -(h, lambda_t)_{U'} = -h(b_t)`, with
    /// `eta = 0`, `theta = |lambda|_{U'}` and `alpha^2 = 1 + theta^2`, so
    /// that `K = tradeoff + A`.
    pub fn hedging_driver(&self) -> DriverSpec {
        let kernel = self.kernel.clone();
        let lambda = self.lambda.clone();
        let steps = self.tree.steps();
        let theta: Vec<f64> = self.lambda_norm_sq.iter().map(|sq| sq.sqrt()).collect();
        let alpha_sq: Vec<f64> = self.lambda_norm_sq.iter().map(|sq| 1.0 + sq).collect();
        DriverSpec::new(
            move |step, node, _y, h| -kernel.uprime_inner(step, node, h, &lambda[step - 1]),
            vec![0.0; steps],
            theta,
        )
        .with_alpha_sq(alpha_sq)
    }
}

/// Forward value path of the self-financing position `c + int H dP`: the
/// terminal level is the attainable claim built from `H` and `c`.
///
/// The drift contribution is accumulated as `(H_s, lambda_s)_{U'} dA_s`,
/// which coincides with `H_s(b_s)` by the structure condition.
pub fn attainable_claim(
    market: &MarketModel,
    holdings: &Predictable<FiniteMeasure>,
    c: f64,
) -> Adapted<f64> {
    let tree = market.tree();
    assert_eq!(holdings.len(), tree.steps());
    let mut levels = vec![vec![c]];
    for s in 1..=tree.steps() {
        let row = (0..tree.level_len(s))
            .map(|child| {
                let parent = tree.node(s, child).parent;
                let h = holdings.value(s, parent);
                let gain = measure_increment(tree, market.kernel(), s, child, h)
                    + market.kernel().uprime_inner(s, parent, h, market.lambda(s))
                        * tree.clock().delta(s);
                levels[s - 1][parent] + gain
            })
            .collect();
        levels.push(row);
    }
    Adapted::from_levels(levels)
}

/// A generalized strategy `(H, C)` on the whole curve; its value process is
/// `V_t = sum_{s<=t} H_s . dP_s + C_t`, self-financing when `C` is constant.
#[derive(Debug, Clone)]
pub struct GeneralizedStrategy {
    pub maturities: Vec<Maturity>,
    pub integrand: Predictable<Vec<f64>>,
    pub cost: Adapted<f64>,
}

impl GeneralizedStrategy {
    pub fn value(&self, market: &MarketModel) -> Adapted<f64> {
        let tree = market.tree();
        let mut levels = vec![vec![*self.cost.value(0, 0)]];
        for s in 1..=tree.steps() {
            let row = (0..tree.level_len(s))
                .map(|child| {
                    let parent = tree.node(s, child).parent;
                    let gains_prev = levels[s - 1][parent] - self.cost.value(s - 1, parent);
                    let h = FiniteMeasure::from_coeffs(
                        &self.maturities,
                        self.integrand.value(s, parent),
                    );
                    let gain = measure_increment(tree, market.kernel(), s, child, &h)
                        + market.kernel().uprime_inner(s, parent, &h, market.lambda(s))
                            * tree.clock().delta(s);
                    gains_prev + gain + self.cost.value(s, child)
                })
                .collect();
            levels.push(row);
        }
        Adapted::from_levels(levels)
    }
}

/// Verdict of the attainability check through the full hedging BSDE.
#[derive(Debug, Clone)]
pub struct AttainabilityReport {
    pub attainable: bool,
    /// Unweighted `||N||^2` of the orthogonal part.
    pub residual_sq: f64,
    /// The replicating generalized strategy `(H, Y_0)` (constant cost).
    pub strategy: GeneralizedStrategy,
    /// Value process of the strategy, `V(Phi) = Y`.
    pub value: Adapted<f64>,
    pub solution: BsdeSolution,
}

/// Solves the full hedging BSDE on the market's whole maturity set and
/// decides approximate attainability by the size of the orthogonal part.
pub fn check_attainability(market: &MarketModel, xi: &[f64]) -> Result<AttainabilityReport> {
    let driver = market.hedging_driver();
    let solution = solve_bsde(
        market.tree(),
        market.kernel(),
        &driver,
        xi,
        market.base_points(),
    )?;
    let norms = solution.norms(market.tree(), market.kernel(), &driver, 0.0);
    let cost = Adapted::from_levels(
        (0..=market.tree().steps())
            .map(|t| vec![solution.initial_value(); market.tree().level_len(t)])
            .collect(),
    );
    let strategy = GeneralizedStrategy {
        maturities: solution.maturities.clone(),
        integrand: solution.integrand.clone(),
        cost,
    };
    Ok(AttainabilityReport {
        attainable: norms.n_sq <= ATTAINABILITY_TOL,
        residual_sq: norms.n_sq,
        value: solution.y.clone(),
        strategy,
        solution,
    })
}

/// The Föllmer–Schweizer decomposition of a claim in the `n`-th small
/// market: `xi = xi0 + sum H . dP^n + N_S` with `N` orthogonal to `M^n`.
#[derive(Debug, Clone)]
pub struct FsDecomposition {
    pub initial_value: f64,
    pub maturities: Vec<Maturity>,
    pub integrand: Predictable<Vec<f64>>,
    pub residual: Adapted<f64>,
}

/// An `L^2`-strategy in a small market: holdings in the first `n` bonds and
/// a bank position, with its value and cost processes.
///
/// The bank position at a node of level `t` is reported against the
/// holdings of the outgoing step (`min(t+1, S)`); the value and cost
/// processes do not depend on that reporting convention.
#[derive(Debug, Clone)]
pub struct SmallMarketStrategy {
    pub maturities: Vec<Maturity>,
    pub holdings: Predictable<Vec<f64>>,
    pub bank: Adapted<f64>,
    pub cost: Adapted<f64>,
    pub value: Adapted<f64>,
}

/// Builds the unique strategy with given holdings and cost process: the
/// value is `sum H . dP^n + C` and the bank position is what the value
/// leaves after the bond holdings.
pub fn strategy_from_cost(
    market: &MarketModel,
    maturities: &[Maturity],
    holdings: &Predictable<Vec<f64>>,
    cost: &Adapted<f64>,
) -> SmallMarketStrategy {
    let tree = market.tree();
    let prices: Vec<Adapted<f64>> = maturities.iter().map(|&x| market.price_path(x)).collect();

    let mut gains = vec![vec![0.0]];
    for s in 1..=tree.steps() {
        let row = (0..tree.level_len(s))
            .map(|child| {
                let parent = tree.node(s, child).parent;
                let h = holdings.value(s, parent);
                let step_gain: f64 = (0..maturities.len())
                    .map(|i| h[i] * (prices[i].value(s, child) - prices[i].value(s - 1, parent)))
                    .sum();
                gains[s - 1][parent] + step_gain
            })
            .collect();
        gains.push(row);
    }

    let steps = tree.steps();
    let mut value_levels = Vec::with_capacity(steps + 1);
    let mut bank_levels = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let mut v_row = Vec::with_capacity(tree.level_len(t));
        let mut b_row = Vec::with_capacity(tree.level_len(t));
        for node in 0..tree.level_len(t) {
            let v = gains[t][node] + cost.value(t, node);
            let (h_step, h_node) = if t < steps {
                (t + 1, node)
            } else {
                (steps, tree.node(steps, node).parent)
            };
            let h = holdings.value(h_step, h_node);
            let bond_value: f64 = (0..maturities.len())
                .map(|i| h[i] * prices[i].value(t, node))
                .sum();
            v_row.push(v);
            b_row.push(v - bond_value);
        }
        value_levels.push(v_row);
        bank_levels.push(b_row);
    }

    SmallMarketStrategy {
        maturities: maturities.to_vec(),
        holdings: holdings.clone(),
        bank: Adapted::from_levels(bank_levels),
        cost: cost.clone(),
        value: Adapted::from_levels(value_levels),
    }
}

impl SmallMarketStrategy {
    /// Exports the strategy as JSON: maturities plus, per node, the bond
    /// coefficients (outgoing-step convention), the bank position and the
    /// cost value.
    pub fn to_json_string(&self, market: &MarketModel) -> Result<String> {
        let tree = market.tree();
        let steps = tree.steps();
        let levels: Vec<Vec<serde_json::Value>> = (0..=steps)
            .map(|t| {
                (0..tree.level_len(t))
                    .map(|node| {
                        let (h_step, h_node) = if t < steps {
                            (t + 1, node)
                        } else {
                            (steps, tree.node(steps, node).parent)
                        };
                        serde_json::json!({
                            "holdings": self.holdings.value(h_step, h_node),
                            "bank": self.bank.value(t, node),
                            "cost": self.cost.value(t, node),
                        })
                    })
                    .collect()
            })
            .collect();
        let doc = serde_json::json!({
            "maturities": self.maturities.iter().map(|m| m.value()).collect::<Vec<_>>(),
            "levels": levels,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Result of [`solve_hedge`].
#[derive(Debug, Clone)]
pub struct HedgeOutcome {
    pub fs: FsDecomposition,
    pub strategy: SmallMarketStrategy,
    pub solution: BsdeSolution,
    /// Total risk `E[(C_S - C_0)^2]`, computed by an exhaustive path sum.
    pub total_risk: f64,
}

/// Solves the small-market hedging BSDE for the first `n` maturities and
/// assembles the locally risk-minimizing strategy with cost `Y^n_0 + N^n`.
pub fn solve_hedge(market: &MarketModel, xi: &[f64], n: usize) -> Result<HedgeOutcome> {
    assert!(
        n >= 1 && n <= market.base_points().len(),
        "small-market size out of range"
    );
    let tree = market.tree();
    let driver = market.hedging_driver();
    let maturities = &market.base_points()[..n];
    let solution = solve_bsde(tree, market.kernel(), &driver, xi, maturities)?;

    let y0 = solution.initial_value();
    let cost = Adapted::from_levels(
        solution
            .residual
            .levels()
            .iter()
            .map(|row| row.iter().map(|nv| y0 + nv).collect())
            .collect(),
    );
    let strategy = strategy_from_cost(market, maturities, &solution.integrand, &cost);

    let c0 = *cost.value(0, 0);
    let total_risk = cost
        .terminal()
        .iter()
        .enumerate()
        .map(|(leaf, c)| tree.path_prob(tree.steps(), leaf) * (c - c0) * (c - c0))
        .sum();

    Ok(HedgeOutcome {
        fs: FsDecomposition {
            initial_value: y0,
            maturities: maturities.to_vec(),
            integrand: solution.integrand.clone(),
            residual: solution.residual.clone(),
        },
        strategy,
        solution,
        total_risk,
    })
}

/// Outcome of the Schweizer characterization checks.
#[derive(Debug, Clone, Copy)]
pub struct LrmCheck {
    pub mean_self_financing: bool,
    pub orthogonal: bool,
    pub max_mean_residual: f64,
    pub max_cov_residual: f64,
}

/// Checks the two sides of the locally-risk-minimizing characterization:
/// the cost increments have zero conditional mean at every node, and zero
/// conditional covariance with each traded martingale increment.
pub fn check_lrm(market: &MarketModel, strategy: &SmallMarketStrategy) -> LrmCheck {
    let tree = market.tree();
    let mut max_mean = 0.0_f64;
    let mut max_cov = 0.0_f64;
    for s in 1..=tree.steps() {
        for v in 0..tree.level_len(s - 1) {
            let mut mean = 0.0;
            let mut covs = vec![0.0; strategy.maturities.len()];
            for c in tree.children(s - 1, v) {
                let p = tree.node(s, c).probability;
                let dc = strategy.cost.value(s, c) - strategy.cost.value(s - 1, v);
                mean += p * dc;
                for (i, &x) in strategy.maturities.iter().enumerate() {
                    covs[i] += p * dc * martingale_increment(tree, market.kernel(), s, c, x);
                }
            }
            max_mean = max_mean.max(mean.abs());
            for cv in covs {
                max_cov = max_cov.max(cv.abs());
            }
        }
    }
    LrmCheck {
        mean_self_financing: max_mean <= LRM_TOL,
        orthogonal: max_cov <= LRM_TOL,
        max_mean_residual: max_mean,
        max_cov_residual: max_cov,
    }
}

/// One row of the hedging convergence table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HedgeRow {
    pub n: usize,
    pub v_dist: f64,
    pub h_dist: f64,
    pub total_risk: f64,
    pub gamma_unweighted: f64,
    pub bound_slack: f64,
}

/// The hedging convergence study together with its cross-checks.
#[derive(Debug, Clone)]
pub struct HedgingStudy {
    pub rows: Vec<HedgeRow>,
    /// `|R(phi^n) - ||N^n||^2|` per row.
    pub risk_identity_gap: Vec<f64>,
    pub attainability_residual: f64,
}

/// Runs the small-market approximation of the generalized hedge of an
/// approximately attainable claim.
///
/// The unweighted constant is the certified weighted `gamma` rescaled by
/// `exp(beta * max K)` with `K = tradeoff + A` from the hedging driver.
pub fn hedging_convergence(market: &MarketModel, xi: &[f64], beta: f64) -> Result<HedgingStudy> {
    let report = check_attainability(market, xi)?;
    if !report.attainable {
        return Err(Error::NotAttainable {
            residual: report.residual_sq,
        });
    }
    let tree = market.tree();
    let driver = market.hedging_driver();
    let certificate = compute_gamma(beta)?;
    let k = driver.k_levels(tree.clock());
    let max_k = k.last().copied().unwrap_or(0.0);
    let gamma_unweighted = certificate.gamma * (beta * max_k).exp();

    // Plain norms: alpha = 1 and unit weights.
    let plain = DriverSpec::zero(tree.steps());
    let full = &report.solution;

    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for n in 1..=market.base_points().len() {
        let outcome = solve_hedge(market, xi, n)?;
        let norms = distance_norms(tree, market.kernel(), &plain, 0.0, full, &outcome.solution);
        let small_n_sq = weighted_norms(
            tree,
            market.kernel(),
            &plain,
            0.0,
            &outcome.solution.y,
            &outcome.solution.maturities,
            &outcome.solution.integrand,
            &outcome.solution.residual,
        )
        .n_sq;
        gaps.push((outcome.total_risk - small_n_sq).abs());
        rows.push(HedgeRow {
            n,
            v_dist: norms.y_sq,
            h_dist: norms.h_sq,
            total_risk: outcome.total_risk,
            gamma_unweighted,
            bound_slack: gamma_unweighted * outcome.total_risk - (norms.y_sq + norms.h_sq),
        });
    }
    Ok(HedgingStudy {
        rows,
        risk_identity_gap: gaps,
        attainability_residual: report.residual_sq,
    })
}

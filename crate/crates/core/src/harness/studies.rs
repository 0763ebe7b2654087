//! Study orchestration: builds the configured objects, runs the requested
//! study, evaluates its hard invariants, and assembles the result bundle.

use crate::bsde::{
    convergence_study, distance_norms, picard_solve, solve_bsde, DriverSpec,
};
use crate::error::{Error, Result};
use crate::frame::gram_schmidt_frame;
use crate::harness::config::{ExperimentConfig, StudyKind};
use crate::harness::families::{
    build_claim, build_driver, build_kernel, build_lambda, expected_attainability,
};
use crate::hedging::{build_market, check_attainability, hedging_convergence, MarketModel};
use crate::kernel::CovarianceKernel;
use crate::measure::{FiniteMeasure, Maturity};
use crate::stochastic::{martingale_increment, represent, stochastic_integral};
use crate::tree::{Predictable, ScenarioTree};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Formats a float with 17 significant digits, '.' separator, suitable for
/// bit-stable CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// One named invariant check with its observed value.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn bound(name: &str, value: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: value <= threshold,
            detail: format!("value {} threshold {}", fmt_f64(value), fmt_f64(threshold)),
        }
    }

    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Everything a run produces: the config echo, per-study CSV tables, the
/// invariant verdicts and coarse timings.
#[derive(Debug, Clone)]
pub struct ResultBundle {
    pub config: ExperimentConfig,
    pub tables: Vec<(String, String)>,
    pub checks: Vec<CheckResult>,
    pub timings_ms: Vec<(String, f64)>,
}

impl ResultBundle {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn summary_json(&self) -> Result<String> {
        let value = serde_json::json!({
            "study": self.config.study.name(),
            "all_passed": self.all_passed(),
            "checks": self.checks,
            "tables": self.tables.iter().map(|(name, _)| name).collect::<Vec<_>>(),
            "config": self.config,
            "timings_ms": self.timings_ms.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect::<serde_json::Map<String, serde_json::Value>>(),
        });
        Ok(format!("{}\n", serde_json::to_string_pretty(&value)?))
    }

    /// Writes every table plus `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, content) in &self.tables {
            let path = dir.join(name);
            std::fs::write(&path, content)?;
            written.push(path);
        }
        let summary = dir.join("summary.json");
        std::fs::write(&summary, self.summary_json()?)?;
        written.push(summary);
        Ok(written)
    }
}

struct BuiltObjects {
    tree: ScenarioTree,
    kernel: CovarianceKernel,
    maturities: Vec<Maturity>,
    market: Option<MarketModel>,
    driver: Option<DriverSpec>,
    claim: Option<Vec<f64>>,
}

fn build_objects(config: &ExperimentConfig, cap_override: Option<u64>) -> Result<BuiltObjects> {
    let maturities = config.maturity_points()?;
    let kernel = build_kernel(&config.kernel, &maturities)?;
    let clock = config.clock.build()?;
    let cap = cap_override.unwrap_or_else(|| config.node_cap());
    let tree = ScenarioTree::build(clock, config.factors, config.branching, cap)?;
    if kernel.rank() > tree.factors() {
        return Err(Error::invalid_config(
            "kernel",
            format!(
                "kernel rank {} exceeds the factor count {}",
                kernel.rank(),
                tree.factors()
            ),
        ));
    }

    let market = match &config.market {
        Some(mc) => {
            let lambda = build_lambda(&mc.lambda, tree.steps())?;
            Some(build_market(
                tree.clone(),
                kernel.clone(),
                maturities.clone(),
                lambda,
            )?)
        }
        None => None,
    };
    let driver = match &config.driver {
        Some(dc) => Some(build_driver(dc, &kernel, &tree)?),
        None => None,
    };
    let claim = match &config.claim {
        Some(cc) => Some(build_claim(
            cc,
            &tree,
            &kernel,
            &maturities,
            market.as_ref(),
        )?),
        None => None,
    };
    Ok(BuiltObjects {
        tree,
        kernel,
        maturities,
        market,
        driver,
        claim,
    })
}

/// Runs the configured study. `cap_override` and `threads` come from the CLI
/// flags; `threads = None` uses the global thread pool.
pub fn run_study(
    config: &ExperimentConfig,
    cap_override: Option<u64>,
    threads: Option<usize>,
) -> Result<ResultBundle> {
    config.validate()?;
    match threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::invalid_config("threads", e.to_string()))?;
            pool.install(|| run_study_inner(config, cap_override))
        }
        None => run_study_inner(config, cap_override),
    }
}

fn run_study_inner(config: &ExperimentConfig, cap_override: Option<u64>) -> Result<ResultBundle> {
    let t0 = Instant::now();
    let objects = build_objects(config, cap_override)?;
    let build_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let (tables, checks) = match config.study {
        StudyKind::BsdeConvergence => bsde_convergence_study(config, &objects)?,
        StudyKind::PicardDiagnostics => picard_study(config, &objects)?,
        StudyKind::HedgingConvergence => hedging_study(config, &objects)?,
        StudyKind::AttainabilityCheck => attainability_study(config, &objects)?,
        StudyKind::InvariantSuite => invariant_suite(config, &objects)?,
    };
    let solve_ms = t1.elapsed().as_secs_f64() * 1e3;

    Ok(ResultBundle {
        config: config.clone(),
        tables,
        checks,
        timings_ms: vec![("build".to_string(), build_ms), ("study".to_string(), solve_ms)],
    })
}

type StudyOutput = (Vec<(String, String)>, Vec<CheckResult>);

fn bsde_convergence_study(config: &ExperimentConfig, obj: &BuiltObjects) -> Result<StudyOutput> {
    let beta = config.beta.expect("validated");
    let driver = obj.driver.as_ref().expect("validated");
    let xi = obj.claim.as_ref().expect("validated");
    let rows = convergence_study(&obj.tree, &obj.kernel, driver, xi, &obj.maturities, beta)?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                fmt_f64(r.norm_y),
                fmt_f64(r.norm_h),
                fmt_f64(r.norm_n),
                fmt_f64(r.s_beta_total),
                fmt_f64(r.gamma),
                fmt_f64(r.bound_slack),
            ]
        })
        .collect();
    let table = csv_table(
        &[
            "n",
            "norm_Y",
            "norm_H",
            "norm_N",
            "s_beta_total",
            "gamma",
            "bound_slack",
        ],
        &csv_rows,
    );

    let last = rows.last().expect("nonempty maturity list");
    let worst_slack = rows.iter().map(|r| r.bound_slack).fold(f64::INFINITY, f64::min);
    let checks = vec![
        CheckResult::bound("distance_zero_at_nmax", last.s_beta_total, 1e-10),
        CheckResult::flag(
            "endpoint_distance_comparison",
            rows[0].s_beta_total >= last.s_beta_total,
            format!(
                "distance(n=1) {} vs distance(n=nmax) {}",
                fmt_f64(rows[0].s_beta_total),
                fmt_f64(last.s_beta_total)
            ),
        ),
        CheckResult::flag(
            "gamma_bound_slack_nonnegative",
            worst_slack >= -1e-10,
            format!("worst slack {}", fmt_f64(worst_slack)),
        ),
    ];
    Ok((vec![("bsde_convergence.csv".to_string(), table)], checks))
}

fn picard_study(config: &ExperimentConfig, obj: &BuiltObjects) -> Result<StudyOutput> {
    let beta = config.beta.expect("validated");
    let driver = obj.driver.as_ref().expect("validated");
    let xi = obj.claim.as_ref().expect("validated");
    let picard_cfg = config.picard.clone().unwrap_or_default();
    let (iterated, diag) = picard_solve(
        &obj.tree,
        &obj.kernel,
        driver,
        xi,
        &obj.maturities,
        beta,
        picard_cfg.max_iters,
        picard_cfg.tol,
    )?;
    let direct = solve_bsde(&obj.tree, &obj.kernel, driver, xi, &obj.maturities)?;
    let agreement = distance_norms(&obj.tree, &obj.kernel, driver, beta, &iterated, &direct)
        .s_beta();

    let csv_rows: Vec<Vec<String>> = diag
        .ratios
        .iter()
        .enumerate()
        .map(|(k, r)| vec![(k + 1).to_string(), fmt_f64(*r)])
        .collect();
    let table = csv_table(&["iteration", "ratio"], &csv_rows);

    let contraction_bound = 2.0 / (beta - 1.0) + 1e-8;
    let worst_ratio = diag.ratios.iter().cloned().fold(0.0_f64, f64::max);
    let checks = vec![
        CheckResult::flag(
            "picard_converged",
            diag.converged,
            format!(
                "{} iterations, final distance {}",
                diag.iterations,
                fmt_f64(diag.final_distance)
            ),
        ),
        CheckResult::bound("contraction_ratios", worst_ratio, contraction_bound),
        CheckResult::bound("cross_solver_agreement", agreement, 1e-9),
    ];
    Ok((vec![("picard.csv".to_string(), table)], checks))
}

fn hedging_study(config: &ExperimentConfig, obj: &BuiltObjects) -> Result<StudyOutput> {
    let beta = config.beta.expect("validated");
    let market = obj.market.as_ref().expect("validated");
    let xi = obj.claim.as_ref().expect("validated");
    let study = hedging_convergence(market, xi, beta)?;

    let csv_rows: Vec<Vec<String>> = study
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                fmt_f64(r.v_dist),
                fmt_f64(r.h_dist),
                fmt_f64(r.total_risk),
                fmt_f64(r.gamma_unweighted),
                fmt_f64(r.bound_slack),
            ]
        })
        .collect();
    let table = csv_table(
        &[
            "n",
            "v_dist",
            "h_dist",
            "total_risk",
            "gamma_unweighted",
            "bound_slack",
        ],
        &csv_rows,
    );

    let last = study.rows.last().expect("nonempty");
    let worst_slack = study
        .rows
        .iter()
        .map(|r| r.bound_slack)
        .fold(f64::INFINITY, f64::min);
    let worst_gap = study
        .risk_identity_gap
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    let checks = vec![
        CheckResult::bound("attainability_residual", study.attainability_residual, 1e-10),
        CheckResult::bound("risk_zero_at_nmax", last.total_risk, 1e-10),
        CheckResult::bound("total_risk_identity", worst_gap, 1e-10),
        CheckResult::flag(
            "gamma_bound_slack_nonnegative",
            worst_slack >= -1e-10,
            format!("worst slack {}", fmt_f64(worst_slack)),
        ),
    ];
    Ok((vec![("hedging_convergence.csv".to_string(), table)], checks))
}

fn attainability_study(config: &ExperimentConfig, obj: &BuiltObjects) -> Result<StudyOutput> {
    let market = obj.market.as_ref().expect("validated");
    let xi = obj.claim.as_ref().expect("validated");
    let report = check_attainability(market, xi)?;

    let rows = vec![vec![
        report.attainable.to_string(),
        fmt_f64(report.residual_sq),
        fmt_f64(report.solution.initial_value()),
    ]];
    let table = csv_table(&["is_attainable", "n_residual_sq", "y0"], &rows);

    let claim_family = config.claim.as_ref().expect("validated").family.clone();
    let check = match expected_attainability(&claim_family) {
        Some(expected) => CheckResult::flag(
            "attainability_matches_claim_family",
            report.attainable == expected,
            format!(
                "family `{claim_family}` expects {expected}, got {} (residual {})",
                report.attainable,
                fmt_f64(report.residual_sq)
            ),
        ),
        None => CheckResult::flag(
            "attainability_determined",
            true,
            format!(
                "family `{claim_family}`: attainable = {}, residual {}",
                report.attainable,
                fmt_f64(report.residual_sq)
            ),
        ),
    };
    Ok((vec![("attainability.csv".to_string(), table)], vec![check]))
}

/// Deterministic probe measures on a point set.
fn probe_measures(points: &[Maturity]) -> Vec<FiniteMeasure> {
    let n = points.len();
    let patterns: [&dyn Fn(usize) -> f64; 3] = [
        &|i| 1.0 / (i + 1) as f64,
        &|i| if i % 2 == 0 { 1.0 } else { -0.5 },
        &|i| 0.3 * (i as f64 + 0.5),
    ];
    patterns
        .iter()
        .map(|p| FiniteMeasure::from_coeffs(points, &(0..n).map(p).collect::<Vec<_>>()))
        .collect()
}

fn invariant_suite(config: &ExperimentConfig, obj: &BuiltObjects) -> Result<StudyOutput> {
    let tree = &obj.tree;
    let kernel = &obj.kernel;
    let points = &obj.maturities;
    let mut checks = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut record = |name: &str, value: f64, threshold: f64, checks: &mut Vec<CheckResult>| {
        rows.push(vec![
            name.to_string(),
            fmt_f64(value),
            fmt_f64(threshold),
            (value <= threshold).to_string(),
        ]);
        checks.push(CheckResult::bound(name, value, threshold));
    };

    // Kernel-space invariants on the first and last step slices.
    let probes = probe_measures(points);
    let mut frame_dev = 0.0_f64;
    let mut parseval_dev = 0.0_f64;
    let mut cauchy_schwarz_excess = 0.0_f64;
    let mut bilinearity_dev = 0.0_f64;
    let mut applyq_dev = 0.0_f64;
    let mut tail_dev = 0.0_f64;
    let mut gram_min_eig: f64 = 0.0;
    for step in [1, tree.steps()] {
        let frame = gram_schmidt_frame(kernel, step, 0, points)?;
        let gram = kernel.gram(step, 0, points)?;
        let min_eig = gram
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        gram_min_eig = gram_min_eig.min(min_eig);
        for i in 1..=frame.len() {
            if frame.member_coeffs(i).is_none() {
                continue;
            }
            for j in 1..=frame.len() {
                if frame.member_coeffs(j).is_none() {
                    continue;
                }
                let v = frame.inner(&frame.member(i), &frame.member(j))?;
                let expect = if i == j { 1.0 } else { 0.0 };
                frame_dev = frame_dev.max((v - expect).abs());
            }
        }
        for mu in &probes {
            let total = kernel.uprime_norm_sq(step, 0, mu);
            let coeffs = frame.coefficients(mu)?;
            let sum_sq: f64 = coeffs.iter().map(|c| c * c).sum();
            parseval_dev = parseval_dev.max((total - sum_sq).abs());
            for (n_cut, _) in coeffs.iter().enumerate() {
                let tail = frame.tail_norm_sq(mu, n_cut)?;
                let partial: f64 = coeffs[..n_cut].iter().map(|c| c * c).sum();
                tail_dev = tail_dev.max((tail - (total - partial)).abs());
            }
            for nu in &probes {
                let inner = kernel.uprime_inner(step, 0, mu, nu);
                let cs = inner * inner
                    - kernel.uprime_norm_sq(step, 0, mu) * kernel.uprime_norm_sq(step, 0, nu);
                cauchy_schwarz_excess = cauchy_schwarz_excess.max(cs);
                let combo = mu.scale(0.7).add_scaled(-1.3, nu);
                let direct = kernel.uprime_inner(step, 0, &combo, &probes[0]);
                let linear = 0.7 * kernel.uprime_inner(step, 0, mu, &probes[0])
                    - 1.3 * kernel.uprime_inner(step, 0, nu, &probes[0]);
                bilinearity_dev = bilinearity_dev.max((direct - linear).abs());
                // apply_q consistency: (mu, nu) = sum_i c_i (Q nu)(x_i).
                let q_at_atoms = kernel.apply_q(
                    step,
                    0,
                    nu,
                    &mu.atoms().iter().map(|&(x, _)| x).collect::<Vec<_>>(),
                );
                let recombined: f64 = mu
                    .atoms()
                    .iter()
                    .zip(&q_at_atoms)
                    .map(|(&(_, c), q)| c * q)
                    .sum();
                applyq_dev = applyq_dev.max((inner - recombined).abs());
            }
        }
    }
    record("frame_orthonormality", frame_dev, 1e-10, &mut checks);
    record("parseval_identity", parseval_dev, 1e-10, &mut checks);
    record(
        "cauchy_schwarz_excess",
        cauchy_schwarz_excess,
        1e-12,
        &mut checks,
    );
    record("bilinearity", bilinearity_dev, 1e-12, &mut checks);
    record("apply_q_consistency", applyq_dev, 1e-12, &mut checks);
    record("tail_norm_identity", tail_dev, 1e-9, &mut checks);
    record("gram_negative_eigenvalue", -gram_min_eig, 1e-12, &mut checks);

    // Tree invariants: exact moments and the covariation law.
    let mut moment_dev = 0.0_f64;
    let mut covariation_dev = 0.0_f64;
    for s in 1..=tree.steps() {
        let da = tree.clock().delta(s);
        for v in 0..tree.level_len(s - 1) {
            let d = tree.factors();
            let mut mean = vec![0.0; d];
            let mut cov = vec![vec![0.0; d]; d];
            for c in tree.children(s - 1, v) {
                let node = tree.node(s, c);
                for i in 0..d {
                    mean[i] += node.probability * node.dw[i];
                    for j in 0..d {
                        cov[i][j] += node.probability * node.dw[i] * node.dw[j];
                    }
                }
            }
            for i in 0..d {
                moment_dev = moment_dev.max(mean[i].abs());
                for j in 0..d {
                    let expect = if i == j { da } else { 0.0 };
                    moment_dev = moment_dev.max((cov[i][j] - expect).abs());
                }
            }
            for (i, &x) in points.iter().enumerate() {
                for &y in &points[i..] {
                    let mut acc = 0.0;
                    for c in tree.children(s - 1, v) {
                        let p = tree.node(s, c).probability;
                        acc += p
                            * martingale_increment(tree, kernel, s, c, x)
                            * martingale_increment(tree, kernel, s, c, y);
                    }
                    covariation_dev =
                        covariation_dev.max((acc - kernel.evaluate(s, v, x, y) * da).abs());
                }
            }
        }
    }
    record("branch_moments", moment_dev, 1e-12, &mut checks);
    record("covariation_law", covariation_dev, 1e-12, &mut checks);

    // Isometry of the stochastic integral on a probe integrand.
    let integrand = Predictable::from_steps(
        (1..=tree.steps())
            .map(|s| {
                (0..tree.level_len(s - 1))
                    .map(|v| probes[(s + v) % probes.len()].clone())
                    .collect()
            })
            .collect(),
    );
    let integral = stochastic_integral(tree, kernel, &integrand)?;
    let lhs = tree.expectation(
        tree.steps(),
        &integral
            .terminal()
            .iter()
            .map(|v| v * v)
            .collect::<Vec<_>>(),
    );
    let mut rhs = 0.0;
    for s in 1..=tree.steps() {
        let da = tree.clock().delta(s);
        for v in 0..tree.level_len(s - 1) {
            rhs += tree.path_prob(s - 1, v)
                * kernel.uprime_norm_sq(s, v, integrand.value(s, v))
                * da;
        }
    }
    record("integral_isometry", (lhs - rhs).abs(), 1e-10, &mut checks);

    // Representation exactness and orthogonality on the configured claim.
    if let Some(xi) = &obj.claim {
        let rep = represent(tree, kernel, points, xi)?;
        let gains = stochastic_integral(
            tree,
            kernel,
            &Predictable::from_steps(
                (1..=tree.steps())
                    .map(|s| {
                        (0..tree.level_len(s - 1))
                            .map(|v| rep.integrand_measure(s, v))
                            .collect()
                    })
                    .collect(),
            ),
        )?;
        let mut residual_dev = 0.0_f64;
        for (leaf, &x) in xi.iter().enumerate() {
            let rebuilt = rep.mean + gains.terminal()[leaf] + rep.residual.terminal()[leaf];
            residual_dev = residual_dev.max((rebuilt - x).abs());
        }
        let mut orth_dev = 0.0_f64;
        let mut mart_dev = 0.0_f64;
        for s in 1..=tree.steps() {
            for v in 0..tree.level_len(s - 1) {
                let mut mean = 0.0;
                let mut covs = vec![0.0; points.len()];
                for c in tree.children(s - 1, v) {
                    let p = tree.node(s, c).probability;
                    let dn = rep.residual.value(s, c) - rep.residual.value(s - 1, v);
                    mean += p * dn;
                    for (i, &x) in points.iter().enumerate() {
                        covs[i] += p * dn * martingale_increment(tree, kernel, s, c, x);
                    }
                }
                mart_dev = mart_dev.max(mean.abs());
                for cv in covs {
                    orth_dev = orth_dev.max(cv.abs());
                }
            }
        }
        record("representation_exactness", residual_dev, 1e-10, &mut checks);
        record("residual_martingale", mart_dev, 1e-12, &mut checks);
        record("residual_orthogonality", orth_dev, 1e-10, &mut checks);
    }

    // Declared Lipschitz bound of the configured driver, spot-checked on a
    // deterministic grid.
    if let Some(driver) = &obj.driver {
        let mut excess: f64 = 0.0;
        let ys = [-2.0, -0.3, 0.0, 1.7];
        for s in 1..=tree.steps() {
            for (mi, mu) in probes.iter().enumerate() {
                for nu in &probes[mi..] {
                    for &y1 in &ys {
                        for &y2 in &ys {
                            let lhs = (driver.evaluate(s, 0, y1, mu)
                                - driver.evaluate(s, 0, y2, nu))
                            .abs();
                            let diff = mu.sub(nu);
                            let bound = driver.eta(s) * (y1 - y2).abs()
                                + driver.theta(s)
                                    * kernel.uprime_norm_sq(s, 0, &diff).sqrt();
                            excess = excess.max(lhs - bound);
                        }
                    }
                }
            }
        }
        record("driver_lipschitz_excess", excess, 1e-10, &mut checks);
    }

    let _ = config;
    let table = csv_table(&["check", "value", "threshold", "passed"], &rows);
    Ok((vec![("invariants.csv".to_string(), table)], checks))
}

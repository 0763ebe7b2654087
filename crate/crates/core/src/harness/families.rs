//! Built-in kernel, driver, market-price-of-risk and claim families,
//! constructible by name from a config document.

use crate::bsde::DriverSpec;
use crate::error::{Error, Result};
use crate::harness::config::FamilyConfig;
use crate::hedging::{attainable_claim, MarketModel};
use crate::kernel::{ClosedFormKernel, CovarianceKernel};
use crate::measure::{FiniteMeasure, Maturity};
use crate::stochastic::martingale_path;
use crate::tree::{Predictable, ScenarioTree};

/// Builds a covariance kernel; anchored families default their anchor set to
/// the config's maturity list.
pub fn build_kernel(cfg: &FamilyConfig, maturities: &[Maturity]) -> Result<CovarianceKernel> {
    match cfg.family.as_str() {
        "constant" => {
            let level = cfg.f64_param("kernel", "level", Some(1.0))?;
            if level < 0.0 {
                return Err(Error::invalid_config("kernel.level", "must be >= 0"));
            }
            Ok(CovarianceKernel::constant(level))
        }
        "rank1-linear" => {
            let scale = cfg.f64_param("kernel", "scale", Some(1.0))?;
            Ok(CovarianceKernel::rank1_linear(scale))
        }
        "exp-distance" => {
            let scale = cfg.f64_param("kernel", "scale", Some(1.0))?;
            if !(scale > 0.0) {
                return Err(Error::invalid_config("kernel.scale", "must be positive"));
            }
            let anchors = anchor_points(cfg, maturities)?;
            CovarianceKernel::exp_distance(scale, anchors)
        }
        "min-plus" => {
            let shift = cfg.f64_param("kernel", "shift", Some(1.0))?;
            let anchors = anchor_points(cfg, maturities)?;
            CovarianceKernel::anchored(ClosedFormKernel::MinPlus { shift }, anchors)
        }
        "poly" => {
            let coeffs = cfg.params.get("coeffs").ok_or_else(|| {
                Error::invalid_config("kernel.coeffs", "missing required parameter")
            })?;
            let rows = coeffs.as_array().ok_or_else(|| {
                Error::invalid_config("kernel.coeffs", "expected an array of arrays")
            })?;
            let mut parsed = Vec::with_capacity(rows.len());
            for (k, row) in rows.iter().enumerate() {
                let arr = row.as_array().ok_or_else(|| {
                    Error::invalid_config(format!("kernel.coeffs[{k}]"), "expected an array")
                })?;
                let mut factor = Vec::with_capacity(arr.len());
                for (j, v) in arr.iter().enumerate() {
                    factor.push(v.as_f64().ok_or_else(|| {
                        Error::invalid_config(
                            format!("kernel.coeffs[{k}][{j}]"),
                            "expected a number",
                        )
                    })?);
                }
                parsed.push(factor);
            }
            if parsed.is_empty() {
                return Err(Error::invalid_config("kernel.coeffs", "must be nonempty"));
            }
            Ok(CovarianceKernel::poly(parsed))
        }
        "time-modulated" => {
            let base_cfg = cfg.params.get("base").ok_or_else(|| {
                Error::invalid_config("kernel.base", "missing base kernel family")
            })?;
            let base: FamilyConfig = serde_json::from_value(base_cfg.clone())
                .map_err(|e| Error::invalid_config("kernel.base", e.to_string()))?;
            let multipliers = cfg
                .f64_array_param("kernel", "multipliers")?
                .ok_or_else(|| {
                    Error::invalid_config("kernel.multipliers", "missing required parameter")
                })?;
            if multipliers.is_empty() || multipliers.iter().any(|&m| !(m > 0.0)) {
                return Err(Error::invalid_config(
                    "kernel.multipliers",
                    "must be a nonempty list of positive numbers",
                ));
            }
            let inner = build_kernel(&base, maturities)?;
            Ok(CovarianceKernel::time_modulated(inner, multipliers))
        }
        other => Err(Error::invalid_config(
            "kernel.family",
            format!("unknown kernel family `{other}`"),
        )),
    }
}

fn anchor_points(cfg: &FamilyConfig, maturities: &[Maturity]) -> Result<Vec<Maturity>> {
    match cfg.f64_array_param("kernel", "anchors")? {
        Some(values) => values
            .into_iter()
            .map(|v| {
                Maturity::new(v)
                    .map_err(|e| Error::invalid_config("kernel.anchors", e.to_string()))
            })
            .collect(),
        None => Ok(maturities.to_vec()),
    }
}

/// Builds a Lipschitz driver; per-step theta bounds take the maximum over
/// nodes when the kernel is node-dependent.
pub fn build_driver(
    cfg: &FamilyConfig,
    kernel: &CovarianceKernel,
    tree: &ScenarioTree,
) -> Result<DriverSpec> {
    let steps = tree.steps();
    match cfg.family.as_str() {
        "zero" => Ok(DriverSpec::zero(steps)),
        "linear-decay" => {
            let rate = cfg.f64_param("driver", "rate", Some(0.5))?;
            if rate < 0.0 {
                return Err(Error::invalid_config("driver.rate", "must be >= 0"));
            }
            Ok(DriverSpec::new(
                move |_s, _n, y, _h| -rate * y,
                vec![rate; steps],
                vec![0.0; steps],
            ))
        }
        "norm-affine" => {
            // f(y, h) = a * tanh(y) + b * |h|_{U'}
            let a = cfg.f64_param("driver", "y_scale", Some(0.5))?;
            let b = cfg.f64_param("driver", "h_scale", Some(0.5))?;
            let k = kernel.clone();
            Ok(DriverSpec::new(
                move |s, n, y, h| a * y.tanh() + b * k.uprime_norm_sq(s, n, h).sqrt(),
                vec![a.abs(); steps],
                vec![b.abs(); steps],
            ))
        }
        "mixing" => {
            // f(y, h) = -a * y + (h, c * delta_x)_{U'}
            let a = cfg.f64_param("driver", "y_rate", Some(0.5))?;
            let point = cfg.f64_param("driver", "h_point", None)?;
            let c = cfg.f64_param("driver", "h_coeff", Some(1.0))?;
            let x = Maturity::new(point)
                .map_err(|e| Error::invalid_config("driver.h_point", e.to_string()))?;
            let probe = FiniteMeasure::dirac(x, c);
            let mut theta = Vec::with_capacity(steps);
            for s in 1..=steps {
                let mut max_norm = 0.0_f64;
                for v in 0..tree.level_len(s - 1) {
                    max_norm = max_norm.max(kernel.uprime_norm_sq(s, v, &probe).sqrt());
                }
                theta.push(max_norm);
            }
            let k = kernel.clone();
            Ok(DriverSpec::new(
                move |s, n, y, h| -a * y + k.uprime_inner(s, n, h, &probe),
                vec![a.abs(); steps],
                theta,
            ))
        }
        other => Err(Error::invalid_config(
            "driver.family",
            format!("unknown driver family `{other}`"),
        )),
    }
}

/// Builds the per-step market price of risk.
pub fn build_lambda(cfg: &FamilyConfig, steps: usize) -> Result<Vec<FiniteMeasure>> {
    match cfg.family.as_str() {
        "zero" => Ok(vec![FiniteMeasure::zero(); steps]),
        "constant-dirac" => {
            let point = cfg.f64_param("market.lambda", "point", None)?;
            let coefficient = cfg.f64_param("market.lambda", "coefficient", Some(1.0))?;
            let x = Maturity::new(point)
                .map_err(|e| Error::invalid_config("market.lambda.point", e.to_string()))?;
            Ok(vec![FiniteMeasure::dirac(x, coefficient); steps])
        }
        "step-varying" => {
            let points = cfg
                .f64_array_param("market.lambda", "points")?
                .ok_or_else(|| {
                    Error::invalid_config("market.lambda.points", "missing required parameter")
                })?;
            let coefficients = cfg
                .f64_array_param("market.lambda", "coefficients")?
                .ok_or_else(|| {
                    Error::invalid_config(
                        "market.lambda.coefficients",
                        "missing required parameter",
                    )
                })?;
            if points.len() != coefficients.len() {
                return Err(Error::invalid_config(
                    "market.lambda",
                    "points and coefficients must have equal length",
                ));
            }
            let ramp = cfg.f64_param("market.lambda", "ramp", Some(0.0))?;
            let atoms: Vec<(Maturity, f64)> = points
                .iter()
                .zip(&coefficients)
                .map(|(&p, &c)| {
                    Maturity::new(p)
                        .map(|x| (x, c))
                        .map_err(|e| Error::invalid_config("market.lambda.points", e.to_string()))
                })
                .collect::<Result<_>>()?;
            let base = FiniteMeasure::from_atoms(atoms);
            let denom = steps.saturating_sub(1).max(1) as f64;
            Ok((1..=steps)
                .map(|s| base.scale(1.0 + ramp * (s - 1) as f64 / denom))
                .collect())
        }
        other => Err(Error::invalid_config(
            "market.lambda.family",
            format!("unknown lambda family `{other}`"),
        )),
    }
}

/// Constant holdings read from a claim config: `coefficients[i]` multiplies
/// `delta_{maturities[i]}`, optionally ramped linearly over the steps.
fn holdings_from_config(
    cfg: &FamilyConfig,
    tree: &ScenarioTree,
    maturities: &[Maturity],
) -> Result<Predictable<FiniteMeasure>> {
    let coefficients = cfg
        .f64_array_param("claim", "coefficients")?
        .ok_or_else(|| Error::invalid_config("claim.coefficients", "missing required parameter"))?;
    if coefficients.len() > maturities.len() {
        return Err(Error::invalid_config(
            "claim.coefficients",
            "more coefficients than maturities",
        ));
    }
    let ramp = cfg.f64_param("claim", "ramp", Some(0.0))?;
    let base = FiniteMeasure::from_coeffs(&maturities[..coefficients.len()], &coefficients);
    let denom = tree.steps().saturating_sub(1).max(1) as f64;
    Ok(Predictable::from_steps(
        (1..=tree.steps())
            .map(|s| {
                let scaled = base.scale(1.0 + ramp * (s - 1) as f64 / denom);
                vec![scaled; tree.level_len(s - 1)]
            })
            .collect(),
    ))
}

/// Builds a terminal claim (leaf values). Market-dependent families take the
/// market; the others work from tree and kernel alone.
pub fn build_claim(
    cfg: &FamilyConfig,
    tree: &ScenarioTree,
    kernel: &CovarianceKernel,
    maturities: &[Maturity],
    market: Option<&MarketModel>,
) -> Result<Vec<f64>> {
    match cfg.family.as_str() {
        "constant" => {
            let value = cfg.f64_param("claim", "value", Some(1.0))?;
            Ok(vec![value; tree.leaf_count()])
        }
        "attainable-forward" => {
            let market = market.ok_or_else(|| {
                Error::invalid_config(
                    "claim",
                    "attainable-forward requires a market section",
                )
            })?;
            let initial = cfg.f64_param("claim", "initial", Some(0.0))?;
            let holdings = holdings_from_config(cfg, tree, maturities)?;
            Ok(attainable_claim(market, &holdings, initial)
                .terminal()
                .to_vec())
        }
        "unspanned-factor" => {
            let factor = cfg.usize_param("claim", "factor", Some(tree.factors()))?;
            let scale = cfg.f64_param("claim", "scale", Some(1.0))?;
            if factor < 1 || factor > tree.factors() {
                return Err(Error::invalid_config(
                    "claim.factor",
                    format!("must lie in 1..={}", tree.factors()),
                ));
            }
            if factor <= kernel.rank() {
                return Err(Error::invalid_config(
                    "claim.factor",
                    format!(
                        "factor {factor} is loaded by the kernel (rank {}); pick a factor above the rank",
                        kernel.rank()
                    ),
                ));
            }
            // Sum of the unloaded factor's increments along each path.
            let mut values = vec![0.0];
            for s in 1..=tree.steps() {
                let mut next = Vec::with_capacity(tree.level_len(s));
                for c in 0..tree.level_len(s) {
                    let parent = tree.node(s, c).parent;
                    next.push(values[parent] + scale * tree.node(s, c).dw[factor - 1]);
                }
                values = next;
            }
            Ok(values)
        }
        "curve-function" => {
            // xi = scale * shape(sum_i w_i M^{x_i}_S)
            let weights = cfg
                .f64_array_param("claim", "weights")?
                .unwrap_or_else(|| vec![1.0; maturities.len()]);
            if weights.len() > maturities.len() {
                return Err(Error::invalid_config(
                    "claim.weights",
                    "more weights than maturities",
                ));
            }
            let scale = cfg.f64_param("claim", "scale", Some(1.0))?;
            let shape = cfg.str_param("claim", "shape", Some("identity"))?;
            let mut acc = vec![0.0; tree.leaf_count()];
            for (i, &w) in weights.iter().enumerate() {
                let path = martingale_path(tree, kernel, maturities[i])?;
                for (leaf, v) in path.terminal().iter().enumerate() {
                    acc[leaf] += w * v;
                }
            }
            let apply: fn(f64) -> f64 = match shape.as_str() {
                "identity" => |x| x,
                "tanh" => f64::tanh,
                "square" => |x| x * x,
                other => {
                    return Err(Error::invalid_config(
                        "claim.shape",
                        format!("unknown shape `{other}` (identity, tanh, square)"),
                    ))
                }
            };
            Ok(acc.into_iter().map(|x| scale * apply(x)).collect())
        }
        other => Err(Error::invalid_config(
            "claim.family",
            format!("unknown claim family `{other}`"),
        )),
    }
}

/// Whether a claim family is attainable by construction (`Some(true)`),
/// unattainable by construction (`Some(false)`), or undetermined.
pub fn expected_attainability(family: &str) -> Option<bool> {
    match family {
        "constant" | "attainable-forward" => Some(true),
        "unspanned-factor" => Some(false),
        _ => None,
    }
}

/// One catalog entry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FamilyDoc {
    pub section: &'static str,
    pub name: &'static str,
    pub doc: &'static str,
}

/// Stable, sorted catalog of the built-in families with parameter notes.
pub fn list_families() -> Vec<FamilyDoc> {
    let mut entries = vec![
        FamilyDoc {
            section: "kernel",
            name: "constant",
            doc: "Q(x,y) = level; params: level (default 1.0)",
        },
        FamilyDoc {
            section: "kernel",
            name: "rank1-linear",
            doc: "Q(x,y) = scale^2 * x * y; params: scale (default 1.0)",
        },
        FamilyDoc {
            section: "kernel",
            name: "exp-distance",
            doc: "Q(x,y) = exp(-|x-y|/scale) anchored on the maturity list; params: scale (default 1.0), anchors (default maturities)",
        },
        FamilyDoc {
            section: "kernel",
            name: "min-plus",
            doc: "Q(x,y) = min(x,y) + shift anchored on the maturity list; params: shift (default 1.0), anchors (default maturities)",
        },
        FamilyDoc {
            section: "kernel",
            name: "poly",
            doc: "factor k loads g_k(x) = sum_j coeffs[k][j] x^j; params: coeffs (required, rank = outer length)",
        },
        FamilyDoc {
            section: "kernel",
            name: "time-modulated",
            doc: "base kernel scaled by multipliers[s-1] at step s; params: base (kernel config), multipliers (positive, required)",
        },
        FamilyDoc {
            section: "driver",
            name: "zero",
            doc: "f = 0",
        },
        FamilyDoc {
            section: "driver",
            name: "linear-decay",
            doc: "f(y) = -rate * y; params: rate (default 0.5)",
        },
        FamilyDoc {
            section: "driver",
            name: "norm-affine",
            doc: "f(y,h) = y_scale * tanh(y) + h_scale * |h|_{U'}; params: y_scale, h_scale (defaults 0.5)",
        },
        FamilyDoc {
            section: "driver",
            name: "mixing",
            doc: "f(y,h) = -y_rate * y + (h, h_coeff * delta_{h_point})_{U'}; params: y_rate (default 0.5), h_point (required), h_coeff (default 1.0)",
        },
        FamilyDoc {
            section: "lambda",
            name: "zero",
            doc: "lambda = 0 (martingale market)",
        },
        FamilyDoc {
            section: "lambda",
            name: "constant-dirac",
            doc: "lambda_s = coefficient * delta_point; params: point (required), coefficient (default 1.0)",
        },
        FamilyDoc {
            section: "lambda",
            name: "step-varying",
            doc: "lambda_s = (1 + ramp*(s-1)/(S-1)) * sum_i coefficients[i] * delta_{points[i]}; params: points, coefficients (required), ramp (default 0)",
        },
        FamilyDoc {
            section: "claim",
            name: "constant",
            doc: "xi = value; params: value (default 1.0)",
        },
        FamilyDoc {
            section: "claim",
            name: "attainable-forward",
            doc: "xi = initial + forward gains of constant holdings; params: initial (default 0), coefficients (per maturity, required), ramp (default 0)",
        },
        FamilyDoc {
            section: "claim",
            name: "curve-function",
            doc: "xi = scale * shape(sum_i weights[i] * M^{x_i}_S); params: weights (default all 1), shape (identity|tanh|square), scale (default 1.0)",
        },
        FamilyDoc {
            section: "claim",
            name: "unspanned-factor",
            doc: "xi = scale * sum of increments of an unloaded tree factor; params: factor (default = factor count; must exceed the kernel rank), scale (default 1.0)",
        },
    ];
    entries.sort_by(|a, b| (a.section, a.name).cmp(&(b.section, b.name)));
    entries
}

/// The catalog rendered as stable plain text.
pub fn families_text() -> String {
    let mut out = String::new();
    for entry in list_families() {
        out.push_str(&format!("{:7} {:20} {}\n", entry.section, entry.name, entry.doc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{BranchingDesign, Clock, DEFAULT_NODE_CAP};
    use approx::assert_abs_diff_eq;

    fn m(v: f64) -> Maturity {
        Maturity::new(v).unwrap()
    }

    fn tree() -> ScenarioTree {
        ScenarioTree::build(
            Clock::uniform(2, 0.25).unwrap(),
            2,
            BranchingDesign::FullBinary,
            DEFAULT_NODE_CAP,
        )
        .unwrap()
    }

    #[test]
    fn catalog_contains_documented_families() {
        let text = families_text();
        for name in [
            "constant",
            "rank1-linear",
            "exp-distance",
            "time-modulated",
            "attainable-forward",
            "unspanned-factor",
            "constant-dirac",
            "step-varying",
            "zero",
        ] {
            assert!(text.contains(name), "catalog missing {name}");
        }
        // Stable and sorted: regenerating yields the same text.
        assert_eq!(text, families_text());
        let entries = list_families();
        let mut sorted = entries.clone();
        sorted.sort_by(|a, b| (a.section, a.name).cmp(&(b.section, b.name)));
        assert_eq!(
            entries.iter().map(|e| e.name).collect::<Vec<_>>(),
            sorted.iter().map(|e| e.name).collect::<Vec<_>>()
        );
    }

    #[test]
    fn kernel_families_construct() {
        let pts = [m(0.25), m(1.0)];
        for json in [
            r#"{"family": "constant", "level": 2.0}"#,
            r#"{"family": "rank1-linear"}"#,
            r#"{"family": "exp-distance", "scale": 0.5}"#,
            r#"{"family": "min-plus"}"#,
            r#"{"family": "poly", "coeffs": [[1.0, 0.5], [0.0, 1.0]]}"#,
            r#"{"family": "time-modulated", "base": {"family": "constant"}, "multipliers": [1.0, 2.0]}"#,
        ] {
            let cfg: FamilyConfig = serde_json::from_str(json).unwrap();
            build_kernel(&cfg, &pts).unwrap();
        }
        let bad: FamilyConfig = serde_json::from_str(r#"{"family": "bogus"}"#).unwrap();
        assert!(build_kernel(&bad, &pts).is_err());
    }

    #[test]
    fn driver_families_construct_and_evaluate() {
        let tree = tree();
        let kernel = CovarianceKernel::constant(1.0);
        let cfg: FamilyConfig =
            serde_json::from_str(r#"{"family": "linear-decay", "rate": 0.3}"#).unwrap();
        let driver = build_driver(&cfg, &kernel, &tree).unwrap();
        assert_abs_diff_eq!(
            driver.evaluate(1, 0, 2.0, &FiniteMeasure::zero()),
            -0.6,
            epsilon = 1e-15
        );
        assert_eq!(driver.eta(1), 0.3);

        let cfg: FamilyConfig = serde_json::from_str(
            r#"{"family": "mixing", "y_rate": 0.2, "h_point": 0.5, "h_coeff": 2.0}"#,
        )
        .unwrap();
        let driver = build_driver(&cfg, &kernel, &tree).unwrap();
        // theta = |2 delta_{0.5}|_{U'} = 2 for the constant kernel.
        assert_abs_diff_eq!(driver.theta(1), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_families_construct() {
        let zero = build_lambda(&FamilyConfig::named("zero"), 3).unwrap();
        assert!(zero.iter().all(FiniteMeasure::is_zero));

        let cfg: FamilyConfig = serde_json::from_str(
            r#"{"family": "constant-dirac", "point": 0.5, "coefficient": 0.4}"#,
        )
        .unwrap();
        let lam = build_lambda(&cfg, 2).unwrap();
        assert_eq!(lam.len(), 2);
        assert_abs_diff_eq!(lam[0].coefficient(m(0.5)), 0.4, epsilon = 1e-15);

        let cfg: FamilyConfig = serde_json::from_str(
            r#"{"family": "step-varying", "points": [0.25, 0.75], "coefficients": [0.3, -0.1], "ramp": 1.0}"#,
        )
        .unwrap();
        let lam = build_lambda(&cfg, 3).unwrap();
        assert_abs_diff_eq!(lam[0].coefficient(m(0.25)), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(lam[2].coefficient(m(0.25)), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn unspanned_claim_requires_factor_above_rank() {
        let tree = tree();
        let kernel = CovarianceKernel::constant(1.0); // rank 1
        let pts = [m(0.5), m(1.0)];
        let cfg: FamilyConfig =
            serde_json::from_str(r#"{"family": "unspanned-factor", "factor": 1}"#).unwrap();
        assert!(build_claim(&cfg, &tree, &kernel, &pts, None).is_err());
        let cfg: FamilyConfig =
            serde_json::from_str(r#"{"family": "unspanned-factor", "factor": 2}"#).unwrap();
        let xi = build_claim(&cfg, &tree, &kernel, &pts, None).unwrap();
        assert_eq!(xi.len(), tree.leaf_count());
        // Centered by design.
        let mean: f64 = xi
            .iter()
            .enumerate()
            .map(|(leaf, v)| tree.path_prob(2, leaf) * v)
            .sum();
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn curve_function_claim_shapes() {
        let tree = tree();
        let kernel = CovarianceKernel::poly(vec![vec![1.0], vec![0.0, 1.0]]);
        let pts = [m(0.5), m(1.0)];
        let cfg: FamilyConfig = serde_json::from_str(
            r#"{"family": "curve-function", "weights": [1.0, -0.5], "shape": "square", "scale": 2.0}"#,
        )
        .unwrap();
        let xi = build_claim(&cfg, &tree, &kernel, &pts, None).unwrap();
        assert!(xi.iter().all(|&v| v >= 0.0));
    }
}

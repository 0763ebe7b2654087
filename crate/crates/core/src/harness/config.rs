//! Experiment configuration: a single JSON document validated before any
//! computation starts.

use crate::error::{Error, Result};
use crate::measure::Maturity;
use crate::tree::{BranchingDesign, Clock, DEFAULT_NODE_CAP};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    BsdeConvergence,
    PicardDiagnostics,
    HedgingConvergence,
    AttainabilityCheck,
    InvariantSuite,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::BsdeConvergence => "bsde-convergence",
            StudyKind::PicardDiagnostics => "picard-diagnostics",
            StudyKind::HedgingConvergence => "hedging-convergence",
            StudyKind::AttainabilityCheck => "attainability-check",
            StudyKind::InvariantSuite => "invariant-suite",
        }
    }

    /// Studies resting on the contraction hypothesis require `beta > 3`.
    pub fn requires_beta(self) -> bool {
        matches!(
            self,
            StudyKind::BsdeConvergence
                | StudyKind::PicardDiagnostics
                | StudyKind::HedgingConvergence
        )
    }

    pub fn requires_market(self) -> bool {
        matches!(
            self,
            StudyKind::HedgingConvergence | StudyKind::AttainabilityCheck
        )
    }

    pub fn requires_driver(self) -> bool {
        matches!(
            self,
            StudyKind::BsdeConvergence | StudyKind::PicardDiagnostics
        )
    }
}

/// Clock section: either uniform steps or explicit increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClockConfig {
    Uniform { steps: usize, delta: f64 },
    Increments { increments: Vec<f64> },
}

impl ClockConfig {
    pub fn build(&self) -> Result<Clock> {
        match self {
            ClockConfig::Uniform { steps, delta } => Clock::uniform(*steps, *delta),
            ClockConfig::Increments { increments } => Clock::from_increments(increments.clone()),
        }
        .map_err(|e| Error::invalid_config("clock", e.to_string()))
    }
}

/// A named family with free-form parameters, e.g.
/// `{"family": "exp-distance", "scale": 0.5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub family: String,
    #[serde(flatten)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl FamilyConfig {
    pub fn named(family: &str) -> Self {
        FamilyConfig {
            family: family.to_string(),
            params: serde_json::Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: serde_json::Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn f64_param(&self, field_path: &str, key: &str, default: Option<f64>) -> Result<f64> {
        match self.params.get(key) {
            Some(v) => v.as_f64().ok_or_else(|| {
                Error::invalid_config(format!("{field_path}.{key}"), "expected a number")
            }),
            None => default.ok_or_else(|| {
                Error::invalid_config(format!("{field_path}.{key}"), "missing required parameter")
            }),
        }
    }

    pub fn usize_param(
        &self,
        field_path: &str,
        key: &str,
        default: Option<usize>,
    ) -> Result<usize> {
        match self.params.get(key) {
            Some(v) => v
                .as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| {
                    Error::invalid_config(
                        format!("{field_path}.{key}"),
                        "expected a nonnegative integer",
                    )
                }),
            None => default.ok_or_else(|| {
                Error::invalid_config(format!("{field_path}.{key}"), "missing required parameter")
            }),
        }
    }

    pub fn str_param(
        &self,
        field_path: &str,
        key: &str,
        default: Option<&str>,
    ) -> Result<String> {
        match self.params.get(key) {
            Some(v) => v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| {
                    Error::invalid_config(format!("{field_path}.{key}"), "expected a string")
                }),
            None => default.map(str::to_string).ok_or_else(|| {
                Error::invalid_config(format!("{field_path}.{key}"), "missing required parameter")
            }),
        }
    }

    pub fn f64_array_param(&self, field_path: &str, key: &str) -> Result<Option<Vec<f64>>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => {
                let arr = v.as_array().ok_or_else(|| {
                    Error::invalid_config(format!("{field_path}.{key}"), "expected an array")
                })?;
                let mut out = Vec::with_capacity(arr.len());
                for (i, item) in arr.iter().enumerate() {
                    out.push(item.as_f64().ok_or_else(|| {
                        Error::invalid_config(
                            format!("{field_path}.{key}[{i}]"),
                            "expected a number",
                        )
                    })?);
                }
                Ok(Some(out))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub lambda: FamilyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    #[serde(default = "default_picard_iters")]
    pub max_iters: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
}

fn default_picard_iters() -> usize {
    200
}

fn default_picard_tol() -> f64 {
    1e-12
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_iters: default_picard_iters(),
            tol: default_picard_tol(),
        }
    }
}

/// The experiment configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    /// Upper end of the maturity interval.
    pub tstar: f64,
    pub clock: ClockConfig,
    pub factors: usize,
    pub branching: BranchingDesign,
    pub kernel: FamilyConfig,
    /// Base maturity points; small markets take prefixes of this list.
    pub maturities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<FamilyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<FamilyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard: Option<PicardConfig>,
    /// Default output directory; a CLI `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(s)
            .map_err(|e| Error::invalid_config("<document>", e.to_string()))?;
        Ok(config)
    }

    pub fn node_cap(&self) -> u64 {
        self.node_cap.unwrap_or(DEFAULT_NODE_CAP)
    }

    pub fn maturity_points(&self) -> Result<Vec<Maturity>> {
        self.maturities
            .iter()
            .map(|&v| {
                Maturity::new(v).map_err(|e| Error::invalid_config("maturities", e.to_string()))
            })
            .collect()
    }

    /// Semantic validation, run before any computation.
    pub fn validate(&self) -> Result<()> {
        if !(self.tstar > 0.0) || !self.tstar.is_finite() {
            return Err(Error::invalid_config(
                "tstar",
                format!("must be a positive finite number (got {})", self.tstar),
            ));
        }
        self.clock.build()?;
        if self.factors < 1 {
            return Err(Error::invalid_config("factors", "must be at least 1"));
        }
        if self.maturities.is_empty() {
            return Err(Error::invalid_config("maturities", "must be nonempty"));
        }
        let points = self.maturity_points()?;
        crate::measure::require_distinct(&points)
            .map_err(|e| Error::invalid_config("maturities", e.to_string()))?;
        for &v in &self.maturities {
            if !(0.0..=self.tstar).contains(&v) {
                return Err(Error::invalid_config(
                    "maturities",
                    format!("maturity {v} outside [0, {}]", self.tstar),
                ));
            }
        }
        if self.study.requires_beta() {
            match self.beta {
                None => {
                    return Err(Error::invalid_config(
                        "beta",
                        format!("study {} requires beta > 3", self.study.name()),
                    ))
                }
                Some(beta) if !(beta > 3.0) => {
                    return Err(Error::invalid_config(
                        "beta",
                        format!(
                            "study {} requires beta > 3 (got {beta})",
                            self.study.name()
                        ),
                    ))
                }
                _ => {}
            }
        }
        if self.study.requires_driver() && self.driver.is_none() {
            return Err(Error::invalid_config(
                "driver",
                format!("study {} requires a driver family", self.study.name()),
            ));
        }
        if self.study.requires_market() && self.market.is_none() {
            return Err(Error::invalid_config(
                "market",
                format!("study {} requires a market section", self.study.name()),
            ));
        }
        if self.claim.is_none() && self.study != StudyKind::InvariantSuite {
            return Err(Error::invalid_config(
                "claim",
                format!("study {} requires a claim family", self.study.name()),
            ));
        }
        Ok(())
    }
}

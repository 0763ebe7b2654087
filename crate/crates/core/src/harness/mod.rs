//! Configuration ingestion, experiment orchestration and result emission.
//!
//! A run is described by a single JSON document (see [`config`]), selects
//! one of five studies, and emits fixed-layout CSV tables plus a JSON
//! summary carrying the config echo and the pass/fail verdict of every hard
//! invariant. The pipeline contains no randomness, so identical configs
//! byte-reproduce all numeric outputs.

pub mod config;
pub mod families;
pub mod studies;

pub use config::{ExperimentConfig, FamilyConfig, StudyKind};
pub use families::{families_text, list_families};
pub use studies::{fmt_f64, run_study, CheckResult, ResultBundle};

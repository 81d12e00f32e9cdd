//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use labelshift_core::calibration::CalibrationLoss;
use labelshift_core::estimators::{EstimatorConfig, Method};
use labelshift_core::simulation::{ExperimentConfig, ShiftSpec};
use labelshift_core::ProbVector;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: SourceSection,
    pub target: TargetSection,
    pub method: EstimatorConfig,
    pub calibration: CalibrationSection,
    pub diagnostics: DiagnosticsSection,
    pub benchmark: ExperimentConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub path: Option<PathBuf>,
    /// Source label marginal `p_s`; defaults to the label frequencies of
    /// the source file.
    pub marginal: Option<ProbVector>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// BCTS before the likelihood methods.
    pub enabled: bool,
    /// Share of the source file, taken from its end, used to fit BCTS.
    pub validation_fraction: f64,
    pub loss: CalibrationLoss,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { enabled: true, validation_fraction: 0.5, loss: CalibrationLoss::Nll }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub enabled: bool,
    /// Equal-width bins used to estimate calibration error of two-class
    /// predictors.
    pub bins: usize,
    /// Confidence level of the bound terms.
    pub delta: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self { enabled: true, bins: 20, delta: 0.05 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::input(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> CliResult<()> {
        let f = self.calibration.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::input(format!("calibration.validation_fraction must lie in (0, 1), got {f}")));
        }
        if self.diagnostics.bins == 0 {
            return Err(CliError::input("diagnostics.bins must be at least 1"));
        }
        let d = self.diagnostics.delta;
        if !(d > 0.0 && d < 1.0) {
            return Err(CliError::input(format!("diagnostics.delta must lie in (0, 1), got {d}")));
        }
        self.method.validate()?;
        Ok(())
    }
}

/// Two-Gaussian benchmark with `μ = 1`, every method, and a sweep of
/// Dirichlet concentrations from severe (0.1) to almost no shift (100).
pub fn gmm_preset() -> ExperimentConfig {
    ExperimentConfig {
        shifts: [0.1, 0.5, 1.0, 10.0, 100.0].into_iter().map(|alpha| ShiftSpec::Dirichlet { alpha }).collect(),
        methods: Method::ALL.to_vec(),
        sizes: vec![1000],
        ..ExperimentConfig::default()
    }
}

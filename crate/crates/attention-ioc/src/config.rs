//! JSON configuration for the driver problem. Units follow the model:
//! m, m/s, rad, s, 1/m.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Discretization, DriverConfig, PerStep, RewardParams, DEFAULT_STEERING_RATIO};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid config value: {0}")]
    Value(String),
}

/// Scalar or per-step series in the JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrSeries {
    Scalar(f64),
    Series(Vec<f64>),
}

impl From<&ScalarOrSeries> for PerStep {
    fn from(v: &ScalarOrSeries) -> PerStep {
        match v {
            ScalarOrSeries::Scalar(x) => PerStep::Constant(*x),
            ScalarOrSeries::Series(s) => PerStep::Series(s.clone()),
        }
    }
}

fn default_dt() -> f64 {
    0.04
}

fn default_horizon() -> usize {
    175
}

fn default_steering_ratio() -> f64 {
    DEFAULT_STEERING_RATIO
}

/// On-disk schema of a driver problem instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub speed: ScalarOrSeries,
    #[serde(default)]
    pub curvature: Option<ScalarOrSeries>,
    pub theta: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_steering_ratio")]
    pub steering_ratio: f64,
    /// 4x4 covariance; defaults to steering-only noise.
    #[serde(default)]
    pub process_noise: Option<Vec<Vec<f64>>>,
    /// Defaults to the horizon (exact, no saturation approximation).
    #[serde(default)]
    pub d_max: Option<usize>,
    /// "euler" (default) or "zoh".
    #[serde(default)]
    pub discretization: Option<String>,
}

pub fn parse_matrix4(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(ConfigError::Value("process_noise must be a 4x4 matrix".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
    Ok(DMatrix::from_row_slice(4, 4, &flat))
}

impl ProblemConfig {
    pub fn to_driver_config(&self) -> Result<DriverConfig, ConfigError> {
        let mut cfg = DriverConfig::new(1.0, 0.0, self.dt, self.horizon);
        cfg.speed = PerStep::from(&self.speed);
        if let Some(k) = &self.curvature {
            cfg.curvature = PerStep::from(k);
        }
        cfg.steering_ratio = self.steering_ratio;
        if let Some(rows) = &self.process_noise {
            cfg.process_noise = parse_matrix4(rows)?;
        }
        cfg.d_max = self.d_max.unwrap_or(self.horizon);
        cfg.discretization = match self.discretization.as_deref() {
            None | Some("euler") => Discretization::Euler,
            Some("zoh") => Discretization::Zoh,
            Some(other) => return Err(ConfigError::Value(format!("unknown discretization {other:?}"))),
        };
        Ok(cfg)
    }

    pub fn theta_params(&self) -> Result<RewardParams, ConfigError> {
        if self.theta.len() != 6 {
            return Err(ConfigError::Value(format!(
                "theta must have 6 entries (4 continuous, 1 secondary, 1 switching), got {}",
                self.theta.len()
            )));
        }
        let v = DVector::from_vec(self.theta.clone());
        Ok(RewardParams::from_vector(&v, 4, 1))
    }
}

/// Loads and schema-checks a problem config file.
pub fn load_problem_config(path: &Path) -> Result<ProblemConfig, ConfigError> {
    let raw = std::fs::read_to_string(path)?;
    let cfg: ProblemConfig = serde_json::from_str(&raw).map_err(|e| ConfigError::Schema(e.to_string()))?;
    cfg.theta_params()?;
    cfg.to_driver_config()?;
    Ok(cfg)
}

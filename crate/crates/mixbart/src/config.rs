//! Run configuration: priors, schedule, column roles, and the ensemble
//! settings, parsed from flat TOML.

use serde::{Deserialize, Serialize};

use crate::data::ColumnRoles;
use crate::ensemble::BartConfig;
use crate::error::{Error, Result};

/// Priors and schedule for one model fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PriorConfig {
    /// Prior mean shared by every regression coefficient.
    pub beta_mean: f64,
    /// Prior variance shared by every regression coefficient (diagonal
    /// covariance).
    pub beta_variance: f64,
    pub alpha_tau: f64,
    pub beta_tau: f64,
    pub alpha_xi: f64,
    pub beta_xi: f64,
    /// Pins the CAR autocorrelation instead of sampling it (intrinsic-CAR
    /// style when set to 1.0).
    pub rho_fixed: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta_mean: 0.0,
            beta_variance: 100.0,
            alpha_tau: 1.0,
            beta_tau: 1.0,
            alpha_xi: 1.0,
            beta_xi: 1.0,
            rho_fixed: None,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_variance > 0.0) {
            return Err(Error::Config("beta_variance must be positive".to_string()));
        }
        for (name, v) in [
            ("alpha_tau", self.alpha_tau),
            ("beta_tau", self.beta_tau),
            ("alpha_xi", self.alpha_xi),
            ("beta_xi", self.beta_xi),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(rho) = self.rho_fixed {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!(
                    "rho_fixed must lie in [0, 1], got {rho}"
                )));
            }
        }
        Ok(())
    }
}

/// MCMC schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Schedule {
    pub burnin: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            burnin: 5000,
            samples: 1000,
            thin: 10,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn total_iterations(&self) -> usize {
        self.burnin + self.samples * self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Full fit configuration as read from the run TOML.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub data: ColumnRoles,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub bart: BartConfig,
    #[serde(default)]
    pub run: Schedule,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.run.validate()?;
        if self.bart.trees == 0 {
            return Err(Error::Config("bart.trees must be at least 1".to_string()));
        }
        if self.data.exposures.is_empty() {
            return Err(Error::Config(
                "data.exposures must name at least one column".to_string(),
            ));
        }
        Ok(())
    }
}

//! Flat key-value run configuration.
//!
//! Keys reuse the field names of [`TuningConfig`], [`LossConfig`] and
//! [`MtfFilterSpec`]; pretraining settings carry a `pretrain_` prefix.
//!
//! ```toml
//! alpha = 1.5
//! learning_rate = 1e-5
//! rho_max_mode = "estimated"
//! pan_band = [400.0, 700.0]
//! nyquist_gain = 0.3
//! seed = 7
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::MtfFilterSpec;
use crate::loss::{LossConfig, RhoMaxMode};
use crate::rolling::{Direction, PretrainConfig, TuningConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    pub first_band_iterations: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub direction: Direction,
    pub reset_each_band: bool,
    pub carry_optimizer_state: bool,

    pub beta_overlap: f64,
    pub beta_non_overlap: f64,
    pub window: usize,
    pub rho_max_mode: RhoMaxMode,
    pub pan_band: (f64, f64),

    pub ratio: usize,
    pub nyquist_gain: f64,
    pub half_width: usize,

    pub seed: u64,

    pub pretrain_grid: usize,
    pub pretrain_validation_patches: usize,
    pub pretrain_patch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    /// Band of the training cube used for pretraining.
    pub pretrain_band: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_parts(
            &TuningConfig::default(),
            &PretrainConfig::default(),
            0,
            0,
        )
    }
}

impl RunConfig {
    pub fn from_parts(
        tuning: &TuningConfig,
        pretrain: &PretrainConfig,
        pretrain_band: usize,
        seed: u64,
    ) -> Self {
        RunConfig {
            alpha: tuning.alpha,
            first_band_iterations: tuning.first_band_iterations,
            max_iterations: tuning.max_iterations,
            learning_rate: tuning.learning_rate,
            direction: tuning.direction,
            reset_each_band: tuning.reset_each_band,
            carry_optimizer_state: tuning.carry_optimizer_state,
            beta_overlap: tuning.loss.beta_overlap,
            beta_non_overlap: tuning.loss.beta_non_overlap,
            window: tuning.loss.window,
            rho_max_mode: tuning.loss.rho_max_mode,
            pan_band: tuning.loss.pan_band,
            ratio: tuning.mtf.ratio,
            nyquist_gain: tuning.mtf.nyquist_gain,
            half_width: tuning.mtf.half_width,
            seed,
            pretrain_grid: pretrain.grid,
            pretrain_validation_patches: pretrain.validation_patches,
            pretrain_patch_size: pretrain.patch_size,
            pretrain_epochs: pretrain.epochs,
            pretrain_batch_size: pretrain.batch_size,
            pretrain_learning_rate: pretrain.learning_rate,
            pretrain_band,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            beta_overlap: self.beta_overlap,
            beta_non_overlap: self.beta_non_overlap,
            window: self.window,
            rho_max_mode: self.rho_max_mode,
            pan_band: self.pan_band,
        }
    }

    pub fn mtf(&self) -> MtfFilterSpec {
        MtfFilterSpec {
            ratio: self.ratio,
            nyquist_gain: self.nyquist_gain,
            half_width: self.half_width,
        }
    }

    pub fn tuning(&self) -> TuningConfig {
        TuningConfig {
            alpha: self.alpha,
            first_band_iterations: self.first_band_iterations,
            max_iterations: self.max_iterations,
            learning_rate: self.learning_rate,
            direction: self.direction,
            reset_each_band: self.reset_each_band,
            carry_optimizer_state: self.carry_optimizer_state,
            loss: self.loss(),
            mtf: self.mtf(),
        }
    }

    pub fn pretraining(&self) -> PretrainConfig {
        PretrainConfig {
            grid: self.pretrain_grid,
            validation_patches: self.pretrain_validation_patches,
            patch_size: self.pretrain_patch_size,
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tuning().validate()?;
        let p = self.pretraining();
        if p.grid == 0 || p.batch_size == 0 || p.patch_size == 0 {
            return Err(Error::Config(
                "pretrain_grid, pretrain_batch_size and pretrain_patch_size must be positive"
                    .into(),
            ));
        }
        if p.validation_patches == 0 || p.validation_patches >= p.grid * p.grid {
            return Err(Error::Config(format!(
                "pretrain_validation_patches must lie in 1..{}, got {}",
                p.grid * p.grid,
                p.validation_patches
            )));
        }
        if !(p.learning_rate >= 0.0 && p.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "pretrain_learning_rate must be non-negative, got {}",
                p.learning_rate
            )));
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentDist {
    Normal,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub latent_dim: usize,
    /// Feature maps at 4x4 and 8x8; halved per stage after that.
    pub base_channels: usize,
    pub min_channels: usize,
    pub target_resolution: usize,
    pub latent_dist: LatentDist,
    pub gp_lambda: f64,
    pub n_critic: usize,
    pub steps_per_stage: usize,
    /// Optional per-stage override of `steps_per_stage`.
    pub stage_steps: Option<Vec<usize>>,
    pub fade_fraction: f64,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    /// Train on slices without any box as well.
    pub include_empty_slices: bool,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 256,
            base_channels: 32,
            min_channels: 8,
            target_resolution: 64,
            latent_dist: LatentDist::Normal,
            gp_lambda: 10.0,
            n_critic: 5,
            steps_per_stage: 500,
            stage_steps: None,
            fade_fraction: 0.5,
            lr_generator: 1e-3,
            lr_critic: 1e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            batch_size: 16,
            include_empty_slices: false,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.target_resolution < 8 || !self.target_resolution.is_power_of_two() {
            return bad("target_resolution must be a power of two >= 8");
        }
        if !(self.gp_lambda >= 0.0) {
            return bad("gp_lambda must be >= 0");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be >= 1");
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction <= 1.0) {
            return bad("fade_fraction must be in (0, 1]");
        }
        if self.latent_dim == 0 || self.base_channels == 0 || self.min_channels == 0 || self.batch_size == 0 {
            return bad("latent_dim, channels and batch_size must be positive");
        }
        if let Some(steps) = &self.stage_steps {
            if steps.len() != self.n_stages() {
                return bad("stage_steps needs one entry per stage");
            }
        }
        Ok(())
    }

    /// Number of stages from 4x4 up to the target resolution.
    pub fn n_stages(&self) -> usize {
        (self.target_resolution / 4).trailing_zeros() as usize + 1
    }

    pub fn final_stage(&self) -> usize {
        self.n_stages() - 1
    }

    pub fn steps_for_stage(&self, stage: usize) -> usize {
        match &self.stage_steps {
            Some(v) => v[stage],
            None => self.steps_per_stage,
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        let halvings = stage.saturating_sub(1);
        (self.base_channels >> halvings.min(31)).max(self.min_channels)
    }
}

pub fn resolution(stage: usize) -> usize {
    4 << stage
}

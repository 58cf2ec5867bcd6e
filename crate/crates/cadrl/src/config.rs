//! Run configuration: one JSON document covering every pipeline stage.
//! Unknown keys are rejected, and the canonical serialization is hashed to
//! name run directories and stamp output files.

use crate::procgen::PoseRules;
use crate::render::CameraIntrinsics;
use crate::vehicle::{GridSpec, RewardConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config schema error: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Square pinhole camera in config-friendly units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    /// Image side in pixels.
    pub side: usize,
    pub hfov_deg: f64,
}

impl CameraConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::square(self.side, self.hfov_deg.to_radians())
    }
}

/// Observation geometry: image resolution plus the action-bin grid side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Action grid side; odd, at least 3.
    pub m: usize,
    pub camera: CameraConfig,
}

impl ObservationConfig {
    pub fn grid(&self) -> Result<GridSpec, ConfigError> {
        GridSpec::new(self.m, self.camera.intrinsics())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// World generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Training worlds, drawn from the training templates and texture pool.
    pub n_train_worlds: usize,
    /// Evaluation worlds, drawn from the held-out templates and textures.
    pub n_heldout_worlds: usize,
    pub furnish_train: bool,
    pub furnish_heldout: bool,
}

/// Training schedule for both the supervised and rollout phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_pretrain_images: usize,
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub n_rl_iterations: usize,
    pub states_per_iteration: usize,
    /// Regression epochs per rollout iteration.
    pub rl_epochs: usize,
    /// Learning rate for the rollout-target regressions; gentler than the
    /// pretraining rate so each iteration nudges the policy instead of
    /// overwriting it.
    pub rl_lr: f32,
    /// On-policy chain length, kept for experiments; the default state
    /// harvesting samples states independently and does not read it.
    pub k_chain: usize,
    /// Free-space label ray length in meters.
    pub ray_len: f64,
    /// Trunk channel widths for the score network.
    pub channels: Vec<usize>,
    /// Pose triples for the turn-classifier baseline; 0 skips it.
    pub turn_triples: usize,
}

/// Evaluation protocol constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    /// Fixed random start states shared by all controllers.
    pub n_init_points: usize,
    pub max_steps: usize,
    /// Survival curve sampling interval, meters.
    pub curve_spacing_m: f64,
    /// Start states are resampled until the launch heading is clear for
    /// this many meters; 0 accepts every sampled pose.
    pub launch_clear_m: f64,
    /// Views scored by the fseval subcommand.
    pub n_fs_images: usize,
}

/// Everything one run needs. The hash of the canonical JSON identifies the
/// run directory and is stamped into every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
    pub pose_rules: PoseRules,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 7,
            gen: GenConfig {
                n_train_worlds: 24,
                n_heldout_worlds: 3,
                furnish_train: true,
                furnish_heldout: true,
            },
            observation: ObservationConfig {
                m: 9,
                camera: CameraConfig { side: 32, hfov_deg: 115.0 },
            },
            reward: RewardConfig::default(),
            pose_rules: PoseRules::default(),
            train: TrainConfig {
                n_pretrain_images: 5000,
                pretrain_epochs: 10,
                batch: 32,
                lr: 0.2,
                momentum: 0.9,
                n_rl_iterations: 16,
                states_per_iteration: 96,
                rl_epochs: 5,
                rl_lr: 0.05,
                k_chain: 5,
                ray_len: 1.0,
                channels: vec![6, 12, 24],
                turn_triples: 400,
            },
            eval: EvalProtocol {
                n_init_points: 100,
                max_steps: 1000,
                curve_spacing_m: 10.0,
                launch_clear_m: 2.0,
                n_fs_images: 500,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.into()));
        if self.observation.m < 3 || self.observation.m % 2 == 0 {
            return bad("observation.m must be odd and at least 3");
        }
        if self.observation.camera.side < self.observation.m {
            return bad("camera.side must be at least observation.m");
        }
        if !(self.observation.camera.hfov_deg > 0.0 && self.observation.camera.hfov_deg < 180.0) {
            return bad("camera.hfov_deg must lie in (0, 180)");
        }
        if !(self.reward.gamma > 0.0 && self.reward.gamma < 1.0) {
            return bad("reward.gamma must lie in (0, 1)");
        }
        if !(self.reward.radius > 0.0 && self.reward.radius < self.reward.tau_d) {
            return bad("reward.radius must lie in (0, reward.tau_d)");
        }
        if !(self.reward.speed > 0.0) {
            return bad("reward.speed must be positive");
        }
        if !(self.reward.altitude_band.0 < self.reward.altitude_band.1) {
            return bad("reward.altitude_band must be ordered");
        }
        if !(self.pose_rules.clearance > 0.0) {
            return bad("pose_rules.clearance must be positive");
        }
        if self.pose_rules.z_range.0 > self.pose_rules.z_range.1 {
            return bad("pose_rules.z_range must be ordered");
        }
        if self.gen.n_train_worlds == 0 || self.gen.n_heldout_worlds == 0 {
            return bad("gen world counts must be positive");
        }
        if self.train.channels.is_empty() {
            return bad("train.channels must list at least one layer");
        }
        if self.train.batch == 0 {
            return bad("train.batch must be positive");
        }
        if !(self.train.lr > 0.0) || !(self.train.rl_lr > 0.0) {
            return bad("train learning rates must be positive");
        }
        if !(self.train.ray_len > 0.0) {
            return bad("train.ray_len must be positive");
        }
        if self.eval.max_steps == 0 {
            return bad("eval.max_steps must be positive");
        }
        if !(self.eval.launch_clear_m >= 0.0) {
            return bad("eval.launch_clear_m must be non-negative");
        }
        if !(self.eval.curve_spacing_m > 0.0) {
            return bad("eval.curve_spacing_m must be positive");
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical (compact JSON)
    /// serialization.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serialization cannot fail");
        Ok(std::fs::write(path, text)?)
    }
}

// ======================================================================

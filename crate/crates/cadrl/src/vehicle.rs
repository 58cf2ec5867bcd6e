//! Velocity-controlled point-mass vehicle with a swept-sphere collision model.
//!
//! Actions are cells of an M x M grid overlaid on the camera image; each cell
//! maps to the unit ray through its center, flown at constant speed for one
//! step. The clearance-shaped reward feeds the trainer.

use crate::math::{clamp, vec3, Vec3};
use crate::render::{self, CameraIntrinsics, CameraPose, ImageBuf, RenderError};
use crate::scene::{Scene, SceneError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VehicleError {
    #[error("action bin ({row}, {col}) outside {m}x{m} grid")]
    BadAction { row: usize, col: usize, m: usize },
    #[error("grid side must be odd and >= 3, got {0}")]
    BadGrid(usize),
    #[error("cannot step a vehicle that has already collided")]
    AlreadyCollided,
    #[error("scene error: {0}")]
    Scene(#[from] SceneError),
    #[error("render error: {0}")]
    Render(#[from] RenderError),
}

/// Action grid geometry: M x M bins spanning the camera's field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m: usize,
    pub intrinsics: CameraIntrinsics,
}

impl GridSpec {
    pub fn new(m: usize, intrinsics: CameraIntrinsics) -> Result<GridSpec, VehicleError> {
        if m < 3 || m % 2 == 0 {
            return Err(VehicleError::BadGrid(m));
        }
        Ok(GridSpec { m, intrinsics })
    }

    pub fn center(&self) -> BinAction {
        BinAction { row: self.m / 2, col: self.m / 2 }
    }

    pub fn n_bins(&self) -> usize {
        self.m * self.m
    }
}

/// One action: a bin of the image-space grid. Row 0 is the top of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinAction {
    pub row: usize,
    pub col: usize,
}

impl BinAction {
    pub fn index(&self, m: usize) -> usize {
        self.row * m + self.col
    }

    pub fn from_index(i: usize, m: usize) -> BinAction {
        BinAction { row: i / m, col: i % m }
    }
}

/// Reward shaping and motion parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Vehicle (sphere) radius in meters.
    pub radius: f64,
    /// Clearance at or above which the reward saturates at 1.
    pub tau_d: f64,
    /// Step length in meters.
    pub speed: f64,
    pub gamma: f64,
    /// Extra policy steps after the scored action during a rollout.
    pub horizon: usize,
    /// Commanded altitude is clamped into this band before the step.
    pub altitude_band: (f64, f64),
}

impl Default for RewardConfig {
    fn default() -> RewardConfig {
        RewardConfig {
            radius: 0.25,
            tau_d: 1.0,
            speed: 0.3,
            gamma: 0.9,
            horizon: 5,
            altitude_band: (0.5, 2.5),
        }
    }
}

impl RewardConfig {
    /// Clearance-shaped step reward; callers guarantee `d >= radius`.
    pub fn reward_for_clearance(&self, d: f64) -> f64 {
        ((d - self.radius) / (self.tau_d - self.radius)).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec3,
    pub yaw: f64,
    pub collided: bool,
}

impl VehicleState {
    pub fn new(position: Vec3, yaw: f64) -> VehicleState {
        VehicleState { position, yaw, collided: false }
    }

    pub fn camera_pose(&self) -> CameraPose {
        CameraPose { position: self.position, yaw: self.yaw, pitch: 0.0 }
    }
}

/// Camera-frame unit direction (x right, y up, z forward) through the center
/// of the action bin.
pub fn bin_to_direction(action: BinAction, grid: &GridSpec) -> Result<Vec3, VehicleError> {
    if action.row >= grid.m || action.col >= grid.m {
        return Err(VehicleError::BadAction { row: action.row, col: action.col, m: grid.m });
    }
    Ok(render::grid_ray_camera(&grid.intrinsics, grid.m, grid.m, action.row, action.col))
}

/// Result of one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: VehicleState,
    pub reward: f64,
    pub collided: bool,
}

/// Fly one step along the chosen bin's ray. The vertical velocity component is
/// clamped so the altitude stays inside the configured band, with the
/// horizontal part rescaled to preserve the commanded step length. Collision
/// means the swept sphere of radius `cfg.radius` touches a surface along the
/// step, or the end point has less than `cfg.radius` clearance; it zeroes the
/// reward and makes the state terminal.
pub fn step(
    scene: &Scene,
    state: &VehicleState,
    action: BinAction,
    grid: &GridSpec,
    cfg: &RewardConfig,
) -> Result<StepOutcome, VehicleError> {
    if state.collided {
        return Err(VehicleError::AlreadyCollided);
    }
    let dir_cam = bin_to_direction(action, grid)?;
    let (sy, cy) = state.yaw.sin_cos();
    // Vehicle flight holds zero pitch: camera y maps straight to world z.
    let forward = vec3(cy, sy, 0.0);
    let right = vec3(sy, -cy, 0.0);
    let mut v = (right * dir_cam.x + forward * dir_cam.z) * cfg.speed;
    v.z = dir_cam.y * cfg.speed;

    let p = state.position;
    let (band_lo, band_hi) = cfg.altitude_band;
    let target_z = clamp(p.z + v.z, band_lo, band_hi);
    if target_z != p.z + v.z {
        let vz = target_z - p.z;
        let h_old = (v.x * v.x + v.y * v.y).sqrt();
        let h_new = (cfg.speed * cfg.speed - vz * vz).sqrt();
        let scale = h_new / h_old;
        v = vec3(v.x * scale, v.y * scale, vz);
    }
    let new_pos = p + v;

    let swept = scene.segment_clearance(p, new_pos);
    if swept < cfg.radius {
        return Ok(StepOutcome {
            state: VehicleState { position: new_pos, yaw: state.yaw, collided: true },
            reward: 0.0,
            collided: true,
        });
    }
    let d = scene.distance_to_nearest(new_pos)?;
    if d < cfg.radius {
        return Ok(StepOutcome {
            state: VehicleState { position: new_pos, yaw: state.yaw, collided: true },
            reward: 0.0,
            collided: true,
        });
    }
    let yaw = v.y.atan2(v.x);
    Ok(StepOutcome {
        state: VehicleState { position: new_pos, yaw, collided: false },
        reward: cfg.reward_for_clearance(d),
        collided: false,
    })
}

/// Monocular observation from the vehicle: RGB render at its pose, pitch 0.
pub fn observe(scene: &Scene, state: &VehicleState, grid: &GridSpec) -> Result<ImageBuf, VehicleError> {
    Ok(render::render_rgb(scene, &state.camera_pose(), &grid.intrinsics)?)
}

/// One logged trajectory step for CSV export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub position: Vec3,
    pub yaw: f64,
    pub reward: f64,
    pub action: BinAction,
    pub collided: bool,
}

/// Render trajectory rows as CSV, with the config hash on a comment line.
pub fn trajectory_csv(rows: &[TrajectoryRow], config_hash: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config={config_hash}\n"));
    out.push_str("step,x,y,z,yaw,reward,action_row,action_col,collided\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.position.x,
            r.position.y,
            r.position.z,
            r.yaw,
            r.reward,
            r.action.row,
            r.action.col,
            r.collided as u8
        ));
    }
    out
}

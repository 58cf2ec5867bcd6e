//! Software raycasting renderer: RGB images, depth maps and free-space label
//! grids, all derived from one primary ray per pixel (or per action bin).

use crate::math::{vec3, Vec3};
use crate::scene::{MaterialId, Scene, SceneError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Rays are traced no further than this; beyond it depth reads as the sentinel.
pub const MAX_RENDER_RANGE: f64 = 80.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera position is outside the scene bounds")]
    PoseOutOfBounds,
    #[error("scene error: {0}")]
    Scene(#[from] SceneError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pinhole camera: image size in pixels and horizontal field of view (radians).
/// The vertical field of view follows from square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub hfov: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> CameraIntrinsics {
        CameraIntrinsics { width: 64, height: 64, hfov: std::f64::consts::FRAC_PI_2 }
    }
}

impl CameraIntrinsics {
    pub fn square(side: usize, hfov: f64) -> CameraIntrinsics {
        CameraIntrinsics { width: side, height: side, hfov }
    }

    pub fn tan_half_h(&self) -> f64 {
        (self.hfov / 2.0).tan()
    }

    pub fn tan_half_v(&self) -> f64 {
        self.tan_half_h() * self.height as f64 / self.width as f64
    }
}

/// Camera placement: position, heading about +z, then pitch (positive looks up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
}

/// Orthonormal camera frame (right, up, forward) in world coordinates.
pub fn camera_basis(pose: &CameraPose) -> (Vec3, Vec3, Vec3) {
    let (sy, cy) = pose.yaw.sin_cos();
    let (sp, cp) = pose.pitch.sin_cos();
    let forward = vec3(cy * cp, sy * cp, sp);
    let right = vec3(sy, -cy, 0.0);
    let up = right.cross(forward);
    (right, up, forward)
}

/// Camera-frame direction (x right, y up, z forward) through the center of
/// cell (row, col) of a rows x cols grid spanning the camera's field of view.
/// Row 0 is the top of the image. Unit length.
pub fn grid_ray_camera(intr: &CameraIntrinsics, rows: usize, cols: usize, row: usize, col: usize) -> Vec3 {
    let u = ((col as f64 + 0.5) / cols as f64 * 2.0 - 1.0) * intr.tan_half_h();
    let v = -((row as f64 + 0.5) / rows as f64 * 2.0 - 1.0) * intr.tan_half_v();
    vec3(u, v, 1.0).normalized()
}

/// World-space unit direction through pixel (row, col).
pub fn primary_ray(intr: &CameraIntrinsics, pose: &CameraPose, row: usize, col: usize) -> Vec3 {
    let c = grid_ray_camera(intr, intr.height, intr.width, row, col);
    let (right, up, forward) = camera_basis(pose);
    (right * c.x + up * c.y + forward * c.z).normalized()
}

/// RGB image, row-major from the top row, channels interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary PPM (P6), 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        out.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        for v in &self.data {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out
    }

    pub fn write_ppm(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_ppm())
    }
}

/// Per-pixel range along the primary ray, in meters. Pixels whose ray meets
/// nothing within `MAX_RENDER_RANGE` hold `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Raw binary format: magic "DPTH", version u32, width u32, height u32,
    /// then width*height little-endian f32 values (infinity for no hit).
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"DPTH");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn write_raw(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_raw())
    }
}

/// Binary free-space labels over an M x M action-bin grid; 1 means free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeSpaceGrid {
    pub m: usize,
    pub data: Vec<u8>,
}

impl FreeSpaceGrid {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.m + col]
    }

    pub fn free_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

fn shade(scene: &Scene, hit_point: Vec3, normal: Vec3, material: MaterialId) -> [f32; 3] {
    let albedo = scene.materials[material].albedo_at(hit_point);
    let mut irradiance = [scene.ambient, scene.ambient, scene.ambient];
    for light in &scene.lights {
        let to_light = light.position - hit_point;
        let dist2 = to_light.norm2();
        let cos = normal.dot(to_light.normalized()).max(0.0);
        if cos <= 0.0 {
            continue;
        }
        let f = cos * light.intensity / (1.0 + dist2);
        irradiance[0] += f * light.color[0];
        irradiance[1] += f * light.color[1];
        irradiance[2] += f * light.color[2];
    }
    [
        (albedo[0] * irradiance[0]).clamp(0.0, 1.0) as f32,
        (albedo[1] * irradiance[1]).clamp(0.0, 1.0) as f32,
        (albedo[2] * irradiance[2]).clamp(0.0, 1.0) as f32,
    ]
}

/// Color seen along one world-space ray. Black when nothing is hit in range.
pub fn ray_color(scene: &Scene, origin: Vec3, dir_world: Vec3) -> [f32; 3] {
    match scene.raycast_unit(origin, dir_world, MAX_RENDER_RANGE) {
        Some(h) => shade(scene, h.point, h.normal, h.material),
        None => [0.0, 0.0, 0.0],
    }
}

/// Render an RGB observation. One primary ray per pixel, Lambertian shading
/// with inverse-square-plus-one falloff, no shadows or bounces.
pub fn render_rgb(scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<ImageBuf, RenderError> {
    if !scene.contains(pose.position) {
        return Err(RenderError::PoseOutOfBounds);
    }
    let (right, up, forward) = camera_basis(pose);
    let mut data = Vec::with_capacity(intr.width * intr.height * 3);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let c = grid_ray_camera(intr, intr.height, intr.width, row, col);
            let d = (right * c.x + up * c.y + forward * c.z).normalized();
            let rgb = ray_color(scene, pose.position, d);
            data.extend_from_slice(&rgb);
        }
    }
    Ok(ImageBuf { width: intr.width, height: intr.height, data })
}

/// Render a depth map: range along each primary ray, sentinel when no hit.
pub fn render_depth(scene: &Scene, pose: &CameraPose, intr: &CameraIntrinsics) -> Result<DepthMap, RenderError> {
    if !scene.contains(pose.position) {
        return Err(RenderError::PoseOutOfBounds);
    }
    let (right, up, forward) = camera_basis(pose);
    let mut data = Vec::with_capacity(intr.width * intr.height);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let c = grid_ray_camera(intr, intr.height, intr.width, row, col);
            let d = (right * c.x + up * c.y + forward * c.z).normalized();
            data.push(match scene.raycast_unit(pose.position, d, MAX_RENDER_RANGE) {
                Some(h) => h.distance,
                None => f64::INFINITY,
            });
        }
    }
    Ok(DepthMap { width: intr.width, height: intr.height, data })
}

/// Range to the first surface along each bin-center ray, row-major;
/// infinity where nothing lies within `max_len`.
pub fn bin_ray_depths(
    scene: &Scene,
    pose: &CameraPose,
    m: usize,
    intr: &CameraIntrinsics,
    max_len: f64,
) -> Result<Vec<f64>, RenderError> {
    if !scene.contains(pose.position) {
        return Err(RenderError::PoseOutOfBounds);
    }
    let (right, up, forward) = camera_basis(pose);
    let mut data = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let c = grid_ray_camera(intr, m, m, row, col);
            let d = (right * c.x + up * c.y + forward * c.z).normalized();
            let depth = scene
                .raycast_unit(pose.position, d, max_len)
                .map_or(f64::INFINITY, |h| h.distance);
            data.push(depth);
        }
    }
    Ok(data)
}

/// Ground-truth free-space labels: bin (row, col) is 1 iff a ray of length
/// `ray_len` through the bin center hits nothing. Purely geometric, so the
/// labels are invariant to materials and lighting.
pub fn freespace_labels(
    scene: &Scene,
    pose: &CameraPose,
    m: usize,
    intr: &CameraIntrinsics,
    ray_len: f64,
) -> Result<FreeSpaceGrid, RenderError> {
    let depths = bin_ray_depths(scene, pose, m, intr, ray_len)?;
    let data = depths.iter().map(|&d| d.is_infinite() as u8).collect();
    Ok(FreeSpaceGrid { m, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec2;
    use crate::scene::{Light, Material, Wall};

    fn one_wall_scene(albedo: [f64; 3], ambient: f64, lights: Vec<Light>) -> Scene {
        // A single large wall 3 m in front of the origin (facing -x), tall and
        // wide enough to fill a 90 degree view from the test pose.
        let walls = vec![Wall {
            a: vec2(3.0, -50.0),
            b: vec2(3.0, 50.0),
            z0: -50.0,
            z1: 50.0,
            material: 0,
        }];
        Scene::new(-50.0, 50.0, 0, 0, ambient, walls, Vec::new(), vec![Material::solid(albedo)], Vec::new())
            .map(|mut s| {
                s.lights = lights;
                s
            })
            .unwrap()
    }

    fn test_pose() -> CameraPose {
        CameraPose { position: vec3(0.0, 0.0, 0.0), yaw: 0.0, pitch: 0.0 }
    }

    #[test]
    fn no_light_no_ambient_renders_black() {
        let s = one_wall_scene([0.8, 0.8, 0.8], 0.0, Vec::new());
        let img = render_rgb(&s, &test_pose(), &CameraIntrinsics::square(16, 1.2)).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ambient_one_renders_albedo() {
        let s = one_wall_scene([0.3, 0.5, 0.7], 1.0, Vec::new());
        let img = render_rgb(&s, &test_pose(), &CameraIntrinsics::square(16, 1.2)).unwrap();
        for row in 0..16 {
            for col in 0..16 {
                let px = img.get(row, col);
                assert!((px[0] - 0.3).abs() < 1e-6);
                assert!((px[1] - 0.5).abs() < 1e-6);
                assert!((px[2] - 0.7).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pixel_values_are_pure_ray_functions() {
        let s = one_wall_scene(
            [0.6, 0.6, 0.6],
            0.2,
            vec![Light { position: vec3(0.5, 0.5, 1.0), intensity: 2.0, color: [1.0, 0.9, 0.8] }],
        );
        let intr = CameraIntrinsics::square(9, 1.3);
        let pose = test_pose();
        let img = render_rgb(&s, &pose, &intr).unwrap();
        for row in 0..9 {
            for col in 0..9 {
                let d = primary_ray(&intr, &pose, row, col);
                assert_eq!(img.get(row, col), ray_color(&s, pose.position, d));
            }
        }
    }

    #[test]
    fn doubling_resolution_preserves_image_content() {
        let s = one_wall_scene(
            [0.6, 0.4, 0.2],
            0.3,
            vec![Light { position: vec3(1.0, -0.5, 0.5), intensity: 1.5, color: [1.0, 1.0, 1.0] }],
        );
        let pose = test_pose();
        let lo = render_rgb(&s, &pose, &CameraIntrinsics::square(16, 1.2)).unwrap();
        let hi = render_rgb(&s, &pose, &CameraIntrinsics::square(32, 1.2)).unwrap();
        // Box-downsample the fine image; it must track the coarse one closely.
        let mut max_err = 0.0f32;
        for row in 0..16 {
            for col in 0..16 {
                let mut acc = [0.0f32; 3];
                for dr in 0..2 {
                    for dc in 0..2 {
                        let p = hi.get(row * 2 + dr, col * 2 + dc);
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[2];
                    }
                }
                let p = lo.get(row, col);
                for k in 0..3 {
                    max_err = max_err.max((acc[k] / 4.0 - p[k]).abs());
                }
            }
        }
        assert!(max_err < 0.05, "downsampled fine render drifted by {max_err}");
    }

    #[test]
    fn depth_center_pixel_equals_forward_raycast() {
        let s = one_wall_scene([0.5; 3], 0.2, Vec::new());
        let pose = test_pose();
        let intr = CameraIntrinsics::square(9, 1.2);
        let depth = render_depth(&s, &pose, &intr).unwrap();
        let fwd = s.raycast(pose.position, vec3(1.0, 0.0, 0.0), MAX_RENDER_RANGE).unwrap().unwrap();
        assert_eq!(depth.get(4, 4), fwd.distance);
        assert!((depth.get(4, 4) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn depth_sentinel_when_out_of_range() {
        // The only wall sits behind the camera and the floor is far below:
        // every forward ray runs out of range.
        let s = Scene::new(
            -1000.0,
            1000.0,
            0,
            0,
            0.1,
            vec![Wall { a: vec2(-1.0, -1.0), b: vec2(-1.0, 1.0), z0: -1.0, z1: 1.0, material: 0 }],
            Vec::new(),
            vec![Material::solid([0.5; 3])],
            Vec::new(),
        )
        .unwrap();
        let depth = render_depth(&s, &test_pose(), &CameraIntrinsics::square(3, 0.8)).unwrap();
        for row in 0..3 {
            for col in 0..3 {
                assert!(depth.get(row, col).is_infinite());
            }
        }
    }

    #[test]
    fn freespace_labels_match_thresholded_depth() {
        let s = one_wall_scene([0.5; 3], 0.2, Vec::new());
        let mut pose = test_pose();
        pose.pitch = -0.1;
        let intr = CameraIntrinsics::default();
        let m = 7;
        let ray_len = 1.0;
        let labels = freespace_labels(&s, &pose, m, &intr, ray_len).unwrap();
        // Depth measured on the bin grid itself uses identical rays.
        let (right, up, forward) = camera_basis(&pose);
        for row in 0..m {
            for col in 0..m {
                let c = grid_ray_camera(&intr, m, m, row, col);
                let d = (right * c.x + up * c.y + forward * c.z).normalized();
                let depth = match s.raycast_unit(pose.position, d, MAX_RENDER_RANGE) {
                    Some(h) => h.distance,
                    None => f64::INFINITY,
                };
                assert_eq!(labels.get(row, col) == 1, depth > ray_len);
            }
        }
    }

    #[test]
    fn freespace_blocked_by_near_wall_free_down_corridor() {
        let near = one_wall_scene([0.5; 3], 0.2, Vec::new());
        let mut blocked_pose = test_pose();
        blocked_pose.position = vec3(2.5, 0.0, 0.0); // 0.5 m from the wall
        let labels = freespace_labels(&near, &blocked_pose, 5, &CameraIntrinsics::default(), 1.0).unwrap();
        assert_eq!(labels.get(2, 2), 0);
        let open = one_wall_scene([0.5; 3], 0.2, Vec::new());
        let labels = freespace_labels(&open, &test_pose(), 5, &CameraIntrinsics::default(), 1.0).unwrap();
        assert_eq!(labels.get(2, 2), 1); // wall is 3 m out
    }

    #[test]
    fn mirrored_scene_mirrors_image_and_labels() {
        // Mirror about the camera's forward axis (y -> -y for a yaw-0 camera).
        // Solid materials keep albedo mirror-invariant.
        let mk = |sign: f64| {
            let walls = vec![
                Wall { a: vec2(0.0, sign * 1.5), b: vec2(12.0, sign * 1.5), z0: -2.0, z1: 2.0, material: 0 },
                Wall { a: vec2(4.0, sign * -0.2), b: vec2(4.0, sign * 1.5), z0: -2.0, z1: 2.0, material: 1 },
                Wall { a: vec2(12.0, sign * -1.5), b: vec2(12.0, sign * 1.5), z0: -2.0, z1: 2.0, material: 0 },
                Wall { a: vec2(0.0, sign * -1.5), b: vec2(12.0, sign * -1.5), z0: -2.0, z1: 2.0, material: 1 },
            ];
            let lights = vec![Light {
                position: vec3(2.0, sign * 0.7, 1.0),
                intensity: 2.0,
                color: [1.0, 0.8, 0.6],
            }];
            Scene::new(
                -2.0,
                2.0,
                0,
                1,
                0.25,
                walls,
                Vec::new(),
                vec![Material::solid([0.7, 0.6, 0.5]), Material::solid([0.2, 0.3, 0.4])],
                lights,
            )
            .unwrap()
        };
        let (s, s_mirror) = (mk(1.0), mk(-1.0));
        let pose = test_pose();
        let intr = CameraIntrinsics::square(15, 1.4);
        let img = render_rgb(&s, &pose, &intr).unwrap();
        let img_m = render_rgb(&s_mirror, &pose, &intr).unwrap();
        for row in 0..15 {
            for col in 0..15 {
                let a = img.get(row, col);
                let b = img_m.get(row, 14 - col);
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-6, "mirror mismatch at {row},{col}");
                }
            }
        }
        let g = freespace_labels(&s, &pose, 5, &intr, 3.0).unwrap();
        let g_m = freespace_labels(&s_mirror, &pose, 5, &intr, 3.0).unwrap();
        for row in 0..5 {
            for col in 0..5 {
                assert_eq!(g.get(row, col), g_m.get(row, 4 - col));
            }
        }
    }

    #[test]
    fn render_rejects_out_of_bounds_pose() {
        let s = one_wall_scene([0.5; 3], 0.2, Vec::new());
        let pose = CameraPose { position: vec3(500.0, 0.0, 0.0), yaw: 0.0, pitch: 0.0 };
        assert!(matches!(render_rgb(&s, &pose, &CameraIntrinsics::default()), Err(RenderError::PoseOutOfBounds)));
    }

    #[test]
    fn ppm_and_depth_serialization() {
        let img = ImageBuf { width: 2, height: 1, data: vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25] };
        let ppm = img.to_ppm();
        assert_eq!(&ppm[..], b"P6\n2 1\n255\n\x00\x80\xff\xff\x00\x40".as_slice());
        let d = DepthMap { width: 1, height: 1, data: vec![f64::INFINITY] };
        let raw = d.to_raw();
        assert_eq!(&raw[0..4], b"DPTH");
        assert_eq!(f32::from_le_bytes(raw[16..20].try_into().unwrap()), f32::INFINITY);
    }
}

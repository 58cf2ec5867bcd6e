//! Static world geometry and the ray/distance queries everything else is built on.
//!
//! A scene is a set of vertical wall panels, axis-aligned boxes, one floor plane
//! and one ceiling plane. Walls and boxes carry a material id into the scene's
//! material table; point lights provide illumination for the renderer.

use crate::math::{clamp, vec2, vec3, Vec2, Vec3};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// How far outside the geometry's xy extent queries are still considered in bounds.
const BOUNDS_MARGIN: f64 = 25.0;
/// Minimum ray parameter accepted as a hit, to avoid self-intersection at t=0.
const RAY_EPS: f64 = 1e-9;
/// Acceleration grid cell edge in meters.
const ACCEL_CELL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene geometry: {0}")]
    InvalidGeometry(String),
    #[error("query point ({0:.3}, {1:.3}, {2:.3}) is outside the scene bounds")]
    OutOfBounds(f64, f64, f64),
    #[error("ray direction must be finite and nonzero")]
    BadRay,
}

/// Index into `Scene::materials`.
pub type MaterialId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialFamily {
    Solid,
    Stripes,
    Checker,
    Noise,
}

/// Procedural surface color, evaluated from the world-space hit point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub family: MaterialFamily,
    pub base_color: [f64; 3],
    pub accent_color: [f64; 3],
    /// Pattern period in meters.
    pub spatial_scale: f64,
    /// Decorrelates patterns that share a family and scale.
    pub salt: u32,
}

impl Material {
    pub fn solid(color: [f64; 3]) -> Material {
        Material {
            family: MaterialFamily::Solid,
            base_color: color,
            accent_color: color,
            spatial_scale: 1.0,
            salt: 0,
        }
    }

    /// Albedo at a world-space point, each channel in [0, 1].
    pub fn albedo_at(&self, p: Vec3) -> [f64; 3] {
        match self.family {
            MaterialFamily::Solid => self.base_color,
            MaterialFamily::Stripes => {
                let s = (p.x + p.y + p.z) / self.spatial_scale + self.salt as f64 * 0.618_033_99;
                if (s - s.floor()) < 0.5 {
                    self.base_color
                } else {
                    self.accent_color
                }
            }
            MaterialFamily::Checker => {
                let c = (p.x / self.spatial_scale).floor() as i64
                    + (p.y / self.spatial_scale).floor() as i64
                    + (p.z / self.spatial_scale).floor() as i64
                    + self.salt as i64;
                if c.rem_euclid(2) == 0 {
                    self.base_color
                } else {
                    self.accent_color
                }
            }
            MaterialFamily::Noise => {
                let t = value_noise(p / self.spatial_scale, self.salt);
                [
                    self.base_color[0] + (self.accent_color[0] - self.base_color[0]) * t,
                    self.base_color[1] + (self.accent_color[1] - self.base_color[1]) * t,
                    self.base_color[2] + (self.accent_color[2] - self.base_color[2]) * t,
                ]
            }
        }
    }
}

fn lattice_hash(ix: i64, iy: i64, iz: i64, salt: u32) -> f64 {
    let mut h = (ix as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((iy as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add((iz as u64).wrapping_mul(0x94d0_49bb_1331_11eb))
        .wrapping_add(salt as u64);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinearly interpolated lattice noise in [0, 1].
fn value_noise(p: Vec3, salt: u32) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (p.x - fx, p.y - fy, p.z - fz);
    let mut acc = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let w = (if dx == 0 { 1.0 - tx } else { tx })
                    * (if dy == 0 { 1.0 - ty } else { ty })
                    * (if dz == 0 { 1.0 - tz } else { tz });
                acc += w * lattice_hash(ix + dx, iy + dy, iz + dz, salt);
            }
        }
    }
    acc
}

/// Point light. Falloff is 1 / (1 + distance^2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: Vec3,
    pub intensity: f64,
    pub color: [f64; 3],
}

/// Vertical rectangular panel over a 2D footprint segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub a: Vec2,
    pub b: Vec2,
    pub z0: f64,
    pub z1: f64,
    pub material: MaterialId,
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub min: Vec3,
    pub max: Vec3,
    pub material: MaterialId,
}

/// First surface met along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Range along the (unit) ray direction.
    pub distance: f64,
    pub point: Vec3,
    /// Unit normal, oriented against the ray.
    pub normal: Vec3,
    pub material: MaterialId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub floor_z: f64,
    pub ceiling_z: f64,
    pub floor_material: MaterialId,
    pub ceiling_material: MaterialId,
    /// Ambient illumination term added to every surface.
    pub ambient: f64,
    pub walls: Vec<Wall>,
    pub obstacles: Vec<Obstacle>,
    pub materials: Vec<Material>,
    pub lights: Vec<Light>,
    #[serde(skip)]
    accel: OnceLock<GridAccel>,
    #[serde(skip)]
    bounds: OnceLock<(Vec3, Vec3)>,
}

impl PartialEq for Scene {
    fn eq(&self, o: &Scene) -> bool {
        self.floor_z == o.floor_z
            && self.ceiling_z == o.ceiling_z
            && self.floor_material == o.floor_material
            && self.ceiling_material == o.ceiling_material
            && self.ambient == o.ambient
            && self.walls == o.walls
            && self.obstacles == o.obstacles
            && self.materials == o.materials
            && self.lights == o.lights
    }
}

impl Scene {
    pub fn new(
        floor_z: f64,
        ceiling_z: f64,
        floor_material: MaterialId,
        ceiling_material: MaterialId,
        ambient: f64,
        walls: Vec<Wall>,
        obstacles: Vec<Obstacle>,
        materials: Vec<Material>,
        lights: Vec<Light>,
    ) -> Result<Scene, SceneError> {
        let scene = Scene {
            floor_z,
            ceiling_z,
            floor_material,
            ceiling_material,
            ambient,
            walls,
            obstacles,
            materials,
            lights,
            accel: OnceLock::new(),
            bounds: OnceLock::new(),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidGeometry(m));
        if !(self.ceiling_z > self.floor_z) {
            return bad(format!(
                "ceiling ({}) must be above floor ({})",
                self.ceiling_z, self.floor_z
            ));
        }
        if !self.ambient.is_finite() || self.ambient < 0.0 {
            return bad("ambient must be finite and nonnegative".into());
        }
        let n_mat = self.materials.len();
        if self.floor_material >= n_mat || self.ceiling_material >= n_mat {
            return bad("floor/ceiling material id out of range".into());
        }
        for (i, w) in self.walls.iter().enumerate() {
            let finite = w.a.x.is_finite()
                && w.a.y.is_finite()
                && w.b.x.is_finite()
                && w.b.y.is_finite()
                && w.z0.is_finite()
                && w.z1.is_finite();
            if !finite {
                return bad(format!("wall {i} has non-finite coordinates"));
            }
            if (w.b - w.a).norm() == 0.0 {
                return bad(format!("wall {i} has zero footprint length"));
            }
            if !(w.z1 > w.z0) {
                return bad(format!("wall {i} has empty vertical extent"));
            }
            if w.material >= n_mat {
                return bad(format!("wall {i} material id out of range"));
            }
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            if !(b.min.is_finite() && b.max.is_finite()) {
                return bad(format!("obstacle {i} has non-finite coordinates"));
            }
            if !(b.min.x < b.max.x && b.min.y < b.max.y && b.min.z < b.max.z) {
                return bad(format!("obstacle {i} is degenerate"));
            }
            if b.material >= n_mat {
                return bad(format!("obstacle {i} material id out of range"));
            }
        }
        for (i, m) in self.materials.iter().enumerate() {
            let ok = m.spatial_scale.is_finite()
                && m.spatial_scale > 0.0
                && m.base_color.iter().chain(m.accent_color.iter()).all(|c| c.is_finite());
            if !ok {
                return bad(format!("material {i} has invalid fields"));
            }
        }
        for (i, l) in self.lights.iter().enumerate() {
            if !(l.position.is_finite() && l.intensity.is_finite() && l.intensity >= 0.0) {
                return bad(format!("light {i} has invalid fields"));
            }
        }
        Ok(())
    }

    /// World bounding box: geometry extent inflated laterally, clamped to floor/ceiling.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        *self.bounds.get_or_init(|| {
            let mut lo = vec2(f64::INFINITY, f64::INFINITY);
            let mut hi = vec2(f64::NEG_INFINITY, f64::NEG_INFINITY);
            let mut push = |p: Vec2| {
                lo = vec2(lo.x.min(p.x), lo.y.min(p.y));
                hi = vec2(hi.x.max(p.x), hi.y.max(p.y));
            };
            for w in &self.walls {
                push(w.a);
                push(w.b);
            }
            for b in &self.obstacles {
                push(vec2(b.min.x, b.min.y));
                push(vec2(b.max.x, b.max.y));
            }
            if !lo.x.is_finite() {
                lo = vec2(0.0, 0.0);
                hi = vec2(0.0, 0.0);
            }
            (
                vec3(lo.x - BOUNDS_MARGIN, lo.y - BOUNDS_MARGIN, self.floor_z),
                vec3(hi.x + BOUNDS_MARGIN, hi.y + BOUNDS_MARGIN, self.ceiling_z),
            )
        })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = self.bounds();
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    }

    fn accel(&self) -> &GridAccel {
        self.accel.get_or_init(|| GridAccel::build(self))
    }

    /// First hit along `dir` within `max_len` meters, or None. `dir` is
    /// normalized internally; the reported distance is Euclidean range.
    pub fn raycast(&self, origin: Vec3, dir: Vec3, max_len: f64) -> Result<Option<RayHit>, SceneError> {
        if !origin.is_finite() || !dir.is_finite() || dir.norm2() == 0.0 || !max_len.is_finite() {
            return Err(SceneError::BadRay);
        }
        Ok(self.raycast_unit(origin, dir.normalized(), max_len))
    }

    /// Raycast assuming a finite unit direction.
    pub(crate) fn raycast_unit(&self, o: Vec3, d: Vec3, max_len: f64) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut limit = max_len;

        // Floor and ceiling planes.
        for (z_plane, mat) in [
            (self.floor_z, self.floor_material),
            (self.ceiling_z, self.ceiling_material),
        ] {
            if d.z.abs() > 1e-15 {
                let t = (z_plane - o.z) / d.z;
                if t > RAY_EPS && t < limit {
                    let n = if d.z < 0.0 { vec3(0.0, 0.0, 1.0) } else { vec3(0.0, 0.0, -1.0) };
                    best = Some(RayHit {
                        distance: t,
                        point: o + d * t,
                        normal: n,
                        material: mat,
                    });
                    limit = t;
                }
            }
        }

        let accel = self.accel();
        accel.traverse(o, d, limit, |prim_id, limit| {
            let hit = if (prim_id as usize) < self.walls.len() {
                ray_wall(o, d, &self.walls[prim_id as usize], limit)
            } else {
                ray_box(o, d, &self.obstacles[prim_id as usize - self.walls.len()], limit)
            };
            if let Some(h) = hit {
                if best.map_or(true, |b| h.distance < b.distance) {
                    best = Some(h);
                    return Some(h.distance);
                }
            }
            None
        });
        best
    }

    /// Linear-scan raycast used to cross-check the grid traversal.
    #[cfg(test)]
    pub(crate) fn raycast_brute(&self, o: Vec3, d: Vec3, max_len: f64) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut limit = max_len;
        for (z_plane, mat) in [
            (self.floor_z, self.floor_material),
            (self.ceiling_z, self.ceiling_material),
        ] {
            if d.z.abs() > 1e-15 {
                let t = (z_plane - o.z) / d.z;
                if t > RAY_EPS && t < limit {
                    let n = if d.z < 0.0 { vec3(0.0, 0.0, 1.0) } else { vec3(0.0, 0.0, -1.0) };
                    best = Some(RayHit { distance: t, point: o + d * t, normal: n, material: mat });
                    limit = t;
                }
            }
        }
        for w in &self.walls {
            if let Some(h) = ray_wall(o, d, w, limit) {
                best = Some(h);
                limit = h.distance;
            }
        }
        for b in &self.obstacles {
            if let Some(h) = ray_box(o, d, b, limit) {
                best = Some(h);
                limit = h.distance;
            }
        }
        best
    }

    /// Euclidean distance from `p` to the closest surface point.
    pub fn distance_to_nearest(&self, p: Vec3) -> Result<f64, SceneError> {
        if !self.contains(p) {
            return Err(SceneError::OutOfBounds(p.x, p.y, p.z));
        }
        let mut best = (p.z - self.floor_z).min(self.ceiling_z - p.z);
        for w in &self.walls {
            best = best.min(point_wall_distance(p, w));
            if best == 0.0 {
                return Ok(0.0);
            }
        }
        for b in &self.obstacles {
            best = best.min(point_box_distance(p, b));
            if best == 0.0 {
                return Ok(0.0);
            }
        }
        Ok(best.max(0.0))
    }

    /// Minimum distance from the segment a..b to any surface. Used for
    /// swept-sphere collision checks; does not require the segment in bounds.
    pub fn segment_clearance(&self, a: Vec3, b: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        // Floor/ceiling: |z(t) - plane| is piecewise linear in t.
        for z_plane in [self.floor_z, self.ceiling_z] {
            let (da, db) = (a.z - z_plane, b.z - z_plane);
            best = best.min(if da.signum() != db.signum() && da != 0.0 && db != 0.0 {
                0.0
            } else {
                da.abs().min(db.abs())
            });
        }
        let seg_lo = a.min_by_component(b);
        let seg_hi = a.max_by_component(b);
        for w in &self.walls {
            let (wlo, whi) = wall_bbox(w);
            if aabb_gap(seg_lo, seg_hi, wlo, whi) >= best {
                continue;
            }
            best = best.min(segment_min_distance(a, b, |p| point_wall_distance(p, w)));
        }
        for bx in &self.obstacles {
            if aabb_gap(seg_lo, seg_hi, bx.min, bx.max) >= best {
                continue;
            }
            best = best.min(segment_min_distance(a, b, |p| point_box_distance(p, bx)));
        }
        best
    }
}

fn wall_bbox(w: &Wall) -> (Vec3, Vec3) {
    (
        vec3(w.a.x.min(w.b.x), w.a.y.min(w.b.y), w.z0),
        vec3(w.a.x.max(w.b.x), w.a.y.max(w.b.y), w.z1),
    )
}

/// Lower bound on the distance between two boxes (0 if they overlap).
fn aabb_gap(alo: Vec3, ahi: Vec3, blo: Vec3, bhi: Vec3) -> f64 {
    let dx = (blo.x - ahi.x).max(alo.x - bhi.x).max(0.0);
    let dy = (blo.y - ahi.y).max(alo.y - bhi.y).max(0.0);
    let dz = (blo.z - ahi.z).max(alo.z - bhi.z).max(0.0);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Minimize a convex point-distance function along the segment by ternary search.
fn segment_min_distance(a: Vec3, b: Vec3, f: impl Fn(Vec3) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(a + (b - a) * m1) <= f(a + (b - a) * m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let t = 0.5 * (lo + hi);
    f(a).min(f(b)).min(f(a + (b - a) * t))
}

fn point_wall_distance(p: Vec3, w: &Wall) -> f64 {
    let u = w.b - w.a;
    let len2 = u.dot(u);
    let s = clamp((vec2(p.x, p.y) - w.a).dot(u) / len2, 0.0, 1.0);
    let cp = w.a + u * s;
    let cz = clamp(p.z, w.z0, w.z1);
    let d = vec3(p.x - cp.x, p.y - cp.y, p.z - cz);
    d.norm()
}

fn point_box_distance(p: Vec3, b: &Obstacle) -> f64 {
    let dx = (b.min.x - p.x).max(p.x - b.max.x);
    let dy = (b.min.y - p.y).max(p.y - b.max.y);
    let dz = (b.min.z - p.z).max(p.z - b.max.z);
    if dx <= 0.0 && dy <= 0.0 && dz <= 0.0 {
        // On or inside the box counts as contact. This keeps the distance
        // along a segment through the box free of interior humps, so the
        // minimizer in segment_min_distance stays reliable.
        return 0.0;
    }
    let (cx, cy, cz) = (dx.max(0.0), dy.max(0.0), dz.max(0.0));
    (cx * cx + cy * cy + cz * cz).sqrt()
}

fn ray_wall(o: Vec3, d: Vec3, w: &Wall, limit: f64) -> Option<RayHit> {
    let u = w.b - w.a;
    let n2 = vec2(u.y, -u.x);
    let n = vec3(n2.x, n2.y, 0.0).normalized();
    let denom = d.dot(n);
    if denom.abs() < 1e-15 {
        return None;
    }
    let t = (vec3(w.a.x, w.a.y, 0.0) - vec3(o.x, o.y, 0.0)).dot(n) / denom;
    if t <= RAY_EPS || t >= limit {
        return None;
    }
    let p = o + d * t;
    if p.z < w.z0 || p.z > w.z1 {
        return None;
    }
    let s = (vec2(p.x, p.y) - w.a).dot(u) / u.dot(u);
    if !(0.0..=1.0).contains(&s) {
        return None;
    }
    let normal = if denom < 0.0 { n } else { -n };
    Some(RayHit { distance: t, point: p, normal, material: w.material })
}

fn ray_box(o: Vec3, d: Vec3, b: &Obstacle, limit: f64) -> Option<RayHit> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0usize;
    for (i, (lo, hi, oo, dd)) in [
        (b.min.x, b.max.x, o.x, d.x),
        (b.min.y, b.max.y, o.y, d.y),
        (b.min.z, b.max.z, o.z, d.z),
    ]
    .into_iter()
    .enumerate()
    {
        if dd.abs() < 1e-15 {
            if oo < lo || oo > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - oo) / dd, (hi - oo) / dd);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis = i;
        }
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    let t = if tmin > RAY_EPS { tmin } else { tmax };
    if t <= RAY_EPS || t >= limit {
        return None;
    }
    let p = o + d * t;
    let normal = if tmin > RAY_EPS {
        let mut n = Vec3::ZERO;
        let sign = match axis {
            0 => -d.x.signum(),
            1 => -d.y.signum(),
            _ => -d.z.signum(),
        };
        match axis {
            0 => n.x = sign,
            1 => n.y = sign,
            _ => n.z = sign,
        }
        n
    } else {
        // Exiting hit from an interior origin; face the ray.
        (-d).normalized()
    };
    Some(RayHit { distance: t, point: p, normal, material: b.material })
}

// ======================================================================
// Uniform 2D acceleration grid over the footprint of walls and obstacles.
// ======================================================================

#[derive(Debug, Clone)]
struct GridAccel {
    min: Vec2,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl GridAccel {
    fn build(scene: &Scene) -> GridAccel {
        let mut lo = vec2(f64::INFINITY, f64::INFINITY);
        let mut hi = vec2(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut push = |a: Vec2| {
            lo = vec2(lo.x.min(a.x), lo.y.min(a.y));
            hi = vec2(hi.x.max(a.x), hi.y.max(a.y));
        };
        for w in &scene.walls {
            push(w.a);
            push(w.b);
        }
        for b in &scene.obstacles {
            push(vec2(b.min.x, b.min.y));
            push(vec2(b.max.x, b.max.y));
        }
        if !lo.x.is_finite() {
            return GridAccel { min: vec2(0.0, 0.0), nx: 1, ny: 1, cells: vec![Vec::new()] };
        }
        lo = lo - vec2(1e-6, 1e-6);
        hi = hi + vec2(1e-6, 1e-6);
        let nx = (((hi.x - lo.x) / ACCEL_CELL).ceil() as usize).max(1);
        let ny = (((hi.y - lo.y) / ACCEL_CELL).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); nx * ny];
        let mut insert_bbox = |blo: Vec2, bhi: Vec2, id: u32| {
            let x0 = (((blo.x - lo.x) / ACCEL_CELL).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let x1 = (((bhi.x - lo.x) / ACCEL_CELL).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let y0 = (((blo.y - lo.y) / ACCEL_CELL).floor() as isize).clamp(0, ny as isize - 1) as usize;
            let y1 = (((bhi.y - lo.y) / ACCEL_CELL).floor() as isize).clamp(0, ny as isize - 1) as usize;
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    cells[cy * nx + cx].push(id);
                }
            }
        };
        for (i, w) in scene.walls.iter().enumerate() {
            let (blo, bhi) = wall_bbox(w);
            insert_bbox(vec2(blo.x, blo.y), vec2(bhi.x, bhi.y), i as u32);
        }
        let n_walls = scene.walls.len() as u32;
        for (i, b) in scene.obstacles.iter().enumerate() {
            insert_bbox(vec2(b.min.x, b.min.y), vec2(b.max.x, b.max.y), n_walls + i as u32);
        }
        GridAccel { min: lo, nx, ny, cells }
    }

    /// Walk the ray's footprint through the grid in near-to-far order, calling
    /// `test` for each stored primitive id. `test` returns a new upper bound on
    /// the hit distance when it finds a closer hit.
    fn traverse(&self, o: Vec3, d: Vec3, mut limit: f64, mut test: impl FnMut(u32, f64) -> Option<f64>) {
        let inv = |v: f64| if v.abs() < 1e-300 { f64::INFINITY } else { 1.0 / v };
        let size = vec2(self.nx as f64 * ACCEL_CELL, self.ny as f64 * ACCEL_CELL);
        // Clip the 2D ray footprint against the grid rectangle.
        let (mut t0, mut t1) = (0.0f64, limit);
        for (oo, dd, lo, hi) in [
            (o.x, d.x, self.min.x, self.min.x + size.x),
            (o.y, d.y, self.min.y, self.min.y + size.y),
        ] {
            if dd.abs() < 1e-15 {
                if oo < lo || oo > hi {
                    return;
                }
                continue;
            }
            let (mut a, mut b) = ((lo - oo) * inv(dd), (hi - oo) * inv(dd));
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        if t0 > t1 {
            return;
        }
        let start = o + d * t0;
        let mut cx = (((start.x - self.min.x) / ACCEL_CELL).floor() as isize).clamp(0, self.nx as isize - 1);
        let mut cy = (((start.y - self.min.y) / ACCEL_CELL).floor() as isize).clamp(0, self.ny as isize - 1);
        let step_x: isize = if d.x > 0.0 { 1 } else { -1 };
        let step_y: isize = if d.y > 0.0 { 1 } else { -1 };
        let next_boundary = |c: isize, step: isize, min: f64| -> f64 {
            let edge = if step > 0 { c + 1 } else { c };
            min + edge as f64 * ACCEL_CELL
        };
        let mut t_next_x = if d.x.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (next_boundary(cx, step_x, self.min.x) - o.x) * inv(d.x)
        };
        let mut t_next_y = if d.y.abs() < 1e-15 {
            f64::INFINITY
        } else {
            (next_boundary(cy, step_y, self.min.y) - o.y) * inv(d.y)
        };
        let dt_x = (ACCEL_CELL * inv(d.x)).abs();
        let dt_y = (ACCEL_CELL * inv(d.y)).abs();
        loop {
            for &id in &self.cells[cy as usize * self.nx + cx as usize] {
                if let Some(new_limit) = test(id, limit) {
                    limit = limit.min(new_limit);
                }
            }
            let t_exit = t_next_x.min(t_next_y);
            if t_exit > t1 || t_exit > limit {
                return;
            }
            if t_next_x < t_next_y {
                cx += step_x;
                t_next_x += dt_x;
                if cx < 0 || cx >= self.nx as isize {
                    return;
                }
            } else {
                cy += step_y;
                t_next_y += dt_y;
                if cy < 0 || cy >= self.ny as isize {
                    return;
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray() -> Vec<Material> {
        vec![Material::solid([0.5, 0.5, 0.5])]
    }

    /// 4 m x 20 m x 3 m corridor along +x, centered on y = 0... walls at y = +-1
    /// for the 2 m wide variant used in most tests.
    pub(crate) fn corridor(width: f64, length: f64) -> Scene {
        let h = width / 2.0;
        let walls = vec![
            Wall { a: vec2(0.0, -h), b: vec2(length, -h), z0: 0.0, z1: 3.0, material: 0 },
            Wall { a: vec2(0.0, h), b: vec2(length, h), z0: 0.0, z1: 3.0, material: 0 },
            Wall { a: vec2(0.0, -h), b: vec2(0.0, h), z0: 0.0, z1: 3.0, material: 0 },
            Wall { a: vec2(length, -h), b: vec2(length, h), z0: 0.0, z1: 3.0, material: 0 },
        ];
        Scene::new(0.0, 3.0, 0, 0, 0.2, walls, Vec::new(), gray(), Vec::new()).unwrap()
    }

    #[test]
    fn raycast_hits_wall_at_known_range() {
        let s = corridor(2.0, 20.0);
        // From the center toward +y: wall at y = 1, origin y = 0 -> distance 1.
        let hit = s
            .raycast(vec3(10.0, 0.0, 1.5), vec3(0.0, 1.0, 0.0), 50.0)
            .unwrap()
            .expect("must hit side wall");
        assert!((hit.distance - 1.0).abs() < 1e-12);
        assert!((hit.normal.y - -1.0).abs() < 1e-12);
        // Straight down from 1.5 m: floor at range 1.5, normal +z.
        let hit = s
            .raycast(vec3(10.0, 0.0, 1.5), vec3(0.0, 0.0, -1.0), 50.0)
            .unwrap()
            .expect("must hit floor");
        assert!((hit.distance - 1.5).abs() < 1e-12);
        assert_eq!(hit.normal, vec3(0.0, 0.0, 1.0));
    }

    #[test]
    fn raycast_miss_within_max_len() {
        let s = corridor(2.0, 20.0);
        let hit = s.raycast(vec3(1.0, 0.0, 1.5), vec3(1.0, 0.0, 0.0), 1.0).unwrap();
        assert!(hit.is_none());
    }

    #[test]
    fn raycast_rejects_bad_input() {
        let s = corridor(2.0, 20.0);
        assert!(s.raycast(vec3(1.0, 0.0, 1.5), Vec3::ZERO, 1.0).is_err());
        assert!(s.raycast(vec3(f64::NAN, 0.0, 1.5), vec3(1.0, 0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn distance_in_corridor_center() {
        let s = corridor(2.0, 20.0);
        let d = s.distance_to_nearest(vec3(10.0, 0.0, 1.5)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // On a wall: zero.
        let d = s.distance_to_nearest(vec3(10.0, 1.0, 1.5)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn distance_out_of_bounds_errors() {
        let s = corridor(2.0, 20.0);
        assert!(s.distance_to_nearest(vec3(1000.0, 0.0, 1.5)).is_err());
        assert!(s.distance_to_nearest(vec3(1.0, 0.0, 5.0)).is_err());
    }

    #[test]
    fn grid_and_brute_raycasts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut scene = corridor(3.0, 20.0);
        for i in 0..12 {
            let x = rng.gen_range(1.0..19.0);
            let y = rng.gen_range(-1.2..0.9);
            let s = rng.gen_range(0.2..0.6);
            scene.obstacles.push(Obstacle {
                min: vec3(x, y, 0.0),
                max: vec3(x + s, y + s, rng.gen_range(0.5..2.0)),
                material: 0,
            });
            let _ = i;
        }
        let scene = Scene::new(
            scene.floor_z,
            scene.ceiling_z,
            0,
            0,
            scene.ambient,
            scene.walls,
            scene.obstacles,
            scene.materials,
            scene.lights,
        )
        .unwrap();
        for _ in 0..2000 {
            let o = vec3(rng.gen_range(0.5..19.5), rng.gen_range(-1.4..1.4), rng.gen_range(0.1..2.9));
            let d = vec3(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if d.norm() < 1e-3 {
                continue;
            }
            let d = d.normalized();
            let a = scene.raycast_unit(o, d, 40.0);
            let b = scene.raycast_brute(o, d, 40.0);
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => assert!(
                    (x.distance - y.distance).abs() < 1e-9,
                    "grid {} vs brute {}",
                    x.distance,
                    y.distance
                ),
                _ => panic!("grid/brute hit disagreement at o={o:?} d={d:?}"),
            }
        }
    }

    #[test]
    fn raycast_consistent_with_distance_field() {
        // Sphere-trace along each ray: stepping by the distance value can never
        // cross a surface, so the accumulated march must stay short of the
        // analytic hit, and before the hit the field is bounded by the
        // remaining range to the hit point.
        let s = corridor(2.5, 15.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let o = vec3(rng.gen_range(1.0..14.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..2.8));
            let d = vec3(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5));
            if d.norm() < 1e-3 {
                continue;
            }
            let d = d.normalized();
            let hit = s.raycast_unit(o, d, 30.0);
            if let Some(h) = hit {
                let mut t = 0.0;
                for _ in 0..400 {
                    let dist = s.distance_to_nearest(o + d * t).unwrap();
                    assert!(
                        dist <= h.distance - t + 1e-9,
                        "distance field claims more room than the ray has"
                    );
                    t += dist;
                    assert!(t <= h.distance + 1e-9, "sphere trace overshot the analytic hit");
                    if dist < 1e-7 {
                        break;
                    }
                }
                // Non-grazing rays converge onto the analytic hit distance.
                if h.normal.dot(d).abs() > 0.3 {
                    assert!(h.distance - t < 1e-3, "march stalled at {t}, hit {}", h.distance);
                }
            }
        }
    }

    #[test]
    fn distance_is_lipschitz() {
        let s = corridor(2.0, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let p = vec3(rng.gen_range(0.5..19.5), rng.gen_range(-0.9..0.9), rng.gen_range(0.1..2.9));
            let q = vec3(
                p.x + rng.gen_range(-0.3..0.3),
                p.y + rng.gen_range(-0.3..0.3),
                clamp(p.z + rng.gen_range(-0.3..0.3), 0.0, 3.0),
            );
            let dp = s.distance_to_nearest(p).unwrap();
            let dq = s.distance_to_nearest(q).unwrap();
            assert!((dp - dq).abs() <= (p - q).norm() + 1e-9);
        }
    }

    #[test]
    fn segment_clearance_matches_endpoint_case() {
        let s = corridor(2.0, 20.0);
        // Parallel to the wall at constant y = 0.4: clearance = 0.6 against the near wall.
        let c = s.segment_clearance(vec3(5.0, 0.4, 1.5), vec3(6.0, 0.4, 1.5));
        assert!((c - 0.6).abs() < 1e-6);
        // Crossing the wall plane: clearance 0.
        let c = s.segment_clearance(vec3(5.0, 0.5, 1.5), vec3(5.0, 1.5, 1.5));
        assert!(c < 1e-9);
    }

    #[test]
    fn box_distances_inside_and_outside() {
        let b = Obstacle { min: vec3(0.0, 0.0, 0.0), max: vec3(1.0, 2.0, 3.0), material: 0 };
        assert!((point_box_distance(vec3(2.0, 1.0, 1.0), &b) - 1.0).abs() < 1e-12);
        assert_eq!(point_box_distance(vec3(0.5, 1.0, 1.5), &b), 0.0);
        let d = point_box_distance(vec3(2.0, 3.0, 1.0), &b);
        assert!((d - (2.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn segment_through_a_box_has_zero_clearance() {
        let mut s = corridor(10.0, 20.0);
        s.obstacles.push(Obstacle {
            min: vec3(4.0, -0.5, 0.0),
            max: vec3(4.2, 0.5, 2.0),
            material: 0,
        });
        let c = s.segment_clearance(vec3(3.0, 0.0, 1.0), vec3(5.0, 0.0, 1.0));
        assert_eq!(c, 0.0);
        // A segment stopping short keeps its true clearance.
        let c = s.segment_clearance(vec3(3.0, 0.0, 1.0), vec3(3.6, 0.0, 1.0));
        assert!((c - 0.4).abs() < 1e-6);
    }

    #[test]
    fn material_albedo_families() {
        let p = vec3(0.3, 0.4, 0.5);
        let solid = Material::solid([0.2, 0.4, 0.6]);
        assert_eq!(solid.albedo_at(p), [0.2, 0.4, 0.6]);
        let noise = Material {
            family: MaterialFamily::Noise,
            base_color: [0.0, 0.0, 0.0],
            accent_color: [1.0, 1.0, 1.0],
            spatial_scale: 0.7,
            salt: 3,
        };
        let a = noise.albedo_at(p);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        // Deterministic and salt-sensitive.
        assert_eq!(a, noise.albedo_at(p));
        let noise2 = Material { salt: 4, ..noise.clone() };
        assert_ne!(noise.albedo_at(p), noise2.albedo_at(p));
    }

    #[test]
    fn scene_validation_rejects_degenerate_geometry() {
        let r = Scene::new(3.0, 0.0, 0, 0, 0.1, Vec::new(), Vec::new(), gray(), Vec::new());
        assert!(r.is_err());
        let walls = vec![Wall { a: vec2(0.0, 0.0), b: vec2(0.0, 0.0), z0: 0.0, z1: 3.0, material: 0 }];
        let r = Scene::new(0.0, 3.0, 0, 0, 0.1, walls, Vec::new(), gray(), Vec::new());
        assert!(r.is_err());
    }
}

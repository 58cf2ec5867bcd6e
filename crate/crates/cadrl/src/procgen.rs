//! Procedural hallway worlds. A layout template is rasterized onto a coarse
//! cell grid, walls are extracted from the free-space boundary, then the
//! shell is textured, lit, and optionally furnished. Every stage draws from
//! its own seeded stream, so a world is a pure function of (template, seed)
//! and the furnish flag flips obstacles without moving any wall.

use crate::math::{vec2, vec3, Vec2, Vec3};
use crate::scene::{Light, Material, MaterialFamily, Obstacle, Scene, SceneError, Wall};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Rasterization pitch in meters.
pub const CELL: f64 = 0.25;
pub const CEILING: f64 = 3.0;
const DOOR_HEIGHT: f64 = 2.1;
const CANVAS: usize = 200;
const CROP_PAD: usize = 8;
const POSE_ATTEMPTS: usize = 10_000;

pub const TEMPLATE_COUNT: usize = 12;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("template id {0} is out of range")]
    BadTemplate(usize),
    #[error("texture pool is empty")]
    EmptyPool,
    #[error("no pose satisfied the clearance after {0} attempts")]
    PoseSampling(usize),
    #[error("scene assembly failed: {0}")]
    Scene(#[from] SceneError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("world file is not valid: {0}")]
    Json(#[from] serde_json::Error),
}

// ======================================================================
// Templates
// ======================================================================

/// Index into the fixed template family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateId(pub usize);

/// Coarse shape family a template belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayoutKind {
    Straight,
    Turn,
    UShape,
    Loop,
    Junction,
    DeadEnd,
    Rooms,
}

impl TemplateId {
    pub fn kind(self) -> LayoutKind {
        match self.0 {
            0 => LayoutKind::Straight,
            1 | 7 => LayoutKind::Turn,
            2 | 10 => LayoutKind::UShape,
            3 | 9 => LayoutKind::Loop,
            4 | 8 | 11 => LayoutKind::Junction,
            5 => LayoutKind::DeadEnd,
            6 => LayoutKind::Rooms,
            n => panic!("template id {n} out of range"),
        }
    }
}

/// Templates used when generating training worlds.
pub fn training_templates() -> Vec<TemplateId> {
    (0..9).map(TemplateId).collect()
}

/// Templates reserved for held-out evaluation worlds.
pub fn heldout_templates() -> Vec<TemplateId> {
    (9..TEMPLATE_COUNT).map(TemplateId).collect()
}

// ======================================================================
// Floor plan raster
// ======================================================================

/// Occupancy raster of the walkable area. Cell (ix, iy) covers
/// [ix*CELL, (ix+1)*CELL) x [iy*CELL, (iy+1)*CELL) in world meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PlanRepr", into = "PlanRepr")]
pub struct FloorPlan {
    pub nx: usize,
    pub ny: usize,
    free: Vec<bool>,
}

/// Bit-packed wire form of a floor plan.
#[derive(Serialize, Deserialize)]
struct PlanRepr {
    nx: usize,
    ny: usize,
    bits: Vec<u8>,
}

impl From<FloorPlan> for PlanRepr {
    fn from(p: FloorPlan) -> PlanRepr {
        let mut bits = vec![0u8; (p.nx * p.ny + 7) / 8];
        for (i, &f) in p.free.iter().enumerate() {
            if f {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        PlanRepr { nx: p.nx, ny: p.ny, bits }
    }
}

impl From<PlanRepr> for FloorPlan {
    fn from(r: PlanRepr) -> FloorPlan {
        let n = r.nx * r.ny;
        let free = (0..n)
            .map(|i| r.bits.get(i / 8).map_or(false, |b| b & (1 << (i % 8)) != 0))
            .collect();
        FloorPlan { nx: r.nx, ny: r.ny, free }
    }
}

impl FloorPlan {
    fn blocked(nx: usize, ny: usize) -> FloorPlan {
        FloorPlan { nx, ny, free: vec![false; nx * ny] }
    }

    pub fn is_free(&self, ix: isize, iy: isize) -> bool {
        if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
            return false;
        }
        self.free[iy as usize * self.nx + ix as usize]
    }

    pub fn is_free_at(&self, p: Vec2) -> bool {
        self.is_free((p.x / CELL).floor() as isize, (p.y / CELL).floor() as isize)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vec2 {
        vec2((ix as f64 + 0.5) * CELL, (iy as f64 + 0.5) * CELL)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                if self.free[iy * self.nx + ix] {
                    out.push((ix, iy));
                }
            }
        }
        out
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    fn cell_span(x0: f64, x1: f64, n: usize) -> (usize, usize) {
        let a = ((x0 / CELL).round().max(0.0)) as usize;
        let b = ((x1 / CELL).round() as usize).min(n);
        (a, b)
    }

    fn set_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: bool) {
        let (ax, bx) = FloorPlan::cell_span(x0, x1, self.nx);
        let (ay, by) = FloorPlan::cell_span(y0, y1, self.ny);
        for iy in ay..by {
            for ix in ax..bx {
                self.free[iy * self.nx + ix] = value;
            }
        }
    }

    fn carve(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        self.set_rect(x0, y0, x1, y1, true);
    }

    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        self.set_rect(x0, y0, x1, y1, false);
    }

    /// True when every cell touched by the rect is walkable.
    fn rect_free(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.rect_is(x0, y0, x1, y1, true)
    }

    /// True when every cell touched by the rect is solid.
    fn rect_blocked(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.rect_is(x0, y0, x1, y1, false)
    }

    fn rect_is(&self, x0: f64, y0: f64, x1: f64, y1: f64, want: bool) -> bool {
        let ax = ((x0 + 1e-9) / CELL).floor() as isize;
        let bx = ((x1 - 1e-9) / CELL).floor() as isize;
        let ay = ((y0 + 1e-9) / CELL).floor() as isize;
        let by = ((y1 - 1e-9) / CELL).floor() as isize;
        for iy in ay..=by {
            for ix in ax..=bx {
                if self.is_free(ix, iy) != want {
                    return false;
                }
            }
        }
        true
    }
}

// ======================================================================
// Sketching
// ======================================================================

/// Door panel segment in plan meters, already offset off its wall.
type DoorSeg = (Vec2, Vec2);

struct Sketch {
    plan: FloorPlan,
    doors: Vec<DoorSeg>,
}

fn snap(x: f64) -> f64 {
    (x / CELL).round() * CELL
}

fn runif(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    snap(rng.gen_range(lo..hi))
}

fn pick_width(rng: &mut ChaCha8Rng) -> f64 {
    [2.5, 3.0, 3.5][rng.gen_range(0..3)]
}

/// Attach one side room to a horizontal corridor edge. `x0..x1` bounds the
/// usable wall span, `wall_y` is the corridor edge, `dir` is +1.0 to grow the
/// room toward +y. Rooms roll closed about a third of the time; a closed room
/// is never carved and leaves only a door panel on the corridor wall.
fn attach_room_h(
    plan: &mut FloorPlan,
    doors: &mut Vec<DoorSeg>,
    rng: &mut ChaCha8Rng,
    x0: f64,
    x1: f64,
    wall_y: f64,
    dir: f64,
) {
    let span = x1 - x0;
    if span < 3.5 {
        return;
    }
    let hi = span.min(5.0);
    let rw = if hi - 3.0 < 0.25 { 3.0 } else { runif(rng, 3.0, hi) };
    let xs = if span - rw < 0.25 { snap(x0) } else { runif(rng, x0, x0 + span - rw) };
    let rd = runif(rng, 2.5, 4.5);
    let door_w = 1.0;
    let door_x = runif(rng, xs + 0.25, xs + rw - 0.25 - door_w);
    if rng.gen_bool(0.35) {
        let y = wall_y - dir * 0.02;
        doors.push((vec2(door_x, y), vec2(door_x + door_w, y)));
    } else if dir > 0.0 {
        plan.carve(xs, wall_y, xs + rw, wall_y + rd);
        plan.fill(xs, wall_y, xs + rw, wall_y + CELL);
        plan.carve(door_x, wall_y, door_x + door_w, wall_y + CELL);
    } else {
        plan.carve(xs, wall_y - rd, xs + rw, wall_y);
        plan.fill(xs, wall_y - CELL, xs + rw, wall_y);
        plan.carve(door_x, wall_y - CELL, door_x + door_w, wall_y);
    }
}

fn draw_template(template: TemplateId, rng: &mut ChaCha8Rng) -> Sketch {
    let mut plan = FloorPlan::blocked(CANVAS, CANVAS);
    let mut doors = Vec::new();
    let m = CROP_PAD as f64 * CELL + 6.0;
    match template.0 {
        // Single straight corridor.
        0 => {
            let w = pick_width(rng);
            let l = runif(rng, 12.0, 24.0);
            plan.carve(m, m, m + l, m + w);
        }
        // One right-angle turn.
        1 => {
            let w = pick_width(rng);
            let l1 = runif(rng, 8.0, 16.0);
            let l2 = runif(rng, 8.0, 16.0);
            plan.carve(m, m, m + l1 + w, m + w);
            plan.carve(m + l1, m, m + l1 + w, m + w + l2);
        }
        // Two parallel legs joined by a base.
        2 => {
            let w = pick_width(rng);
            let l1 = runif(rng, 8.0, 14.0);
            let l2 = runif(rng, 8.0, 14.0);
            let g = runif(rng, 4.0, 9.0);
            plan.carve(m, m, m + w + g + w, m + w);
            plan.carve(m, m, m + w, m + l1);
            plan.carve(m + w + g, m, m + w + g + w, m + l2);
        }
        // Closed rectangular loop.
        3 => {
            let w = pick_width(rng);
            let lw = runif(rng, 12.0, 20.0);
            let lh = runif(rng, 10.0, 16.0);
            plan.carve(m, m, m + lw, m + lh);
            plan.fill(m + w, m + w, m + lw - w, m + lh - w);
        }
        // Main corridor with a perpendicular branch.
        4 => {
            let w = pick_width(rng);
            let l = runif(rng, 12.0, 20.0);
            plan.carve(m, m, m + l, m + w);
            let xs = runif(rng, 3.0, l - 3.0 - w);
            let ls = runif(rng, 5.0, 10.0);
            plan.carve(m + xs, m + w, m + xs + w, m + w + ls);
        }
        // Straight corridor with two short dead-end pockets.
        5 => {
            let w = pick_width(rng);
            let l = runif(rng, 2.0 * w + 8.0, 20.0);
            plan.carve(m, m, m + l, m + w);
            let xs1 = runif(rng, 2.0, l / 2.0 - w - 1.0);
            let ls1 = runif(rng, 2.0, 4.0);
            plan.carve(m + xs1, m + w, m + xs1 + w, m + w + ls1);
            let xs2 = runif(rng, l / 2.0 + 1.0, l - w - 2.0);
            let ls2 = runif(rng, 2.0, 4.0);
            plan.carve(m + xs2, m - ls2, m + xs2 + w, m);
        }
        // Straight corridor lined with side rooms.
        6 => {
            let w = pick_width(rng);
            let l = runif(rng, 14.0, 22.0);
            plan.carve(m, m, m + l, m + w);
            let k = rng.gen_range(2..=4);
            for i in 0..k {
                let x0 = m + i as f64 * l / k as f64 + 0.5;
                let x1 = m + (i + 1) as f64 * l / k as f64 - 0.5;
                let (wall_y, dir) = if i % 2 == 0 { (m + w, 1.0) } else { (m, -1.0) };
                attach_room_h(&mut plan, &mut doors, rng, x0, x1, wall_y, dir);
            }
        }
        // Three or four alternating legs.
        7 => {
            let w = pick_width(rng);
            let legs = rng.gen_range(3..=4);
            let (mut ox, mut oy) = (m, m);
            for i in 0..legs {
                let l = runif(rng, 6.0, 12.0);
                if i % 2 == 0 {
                    plan.carve(ox, oy, ox + l + w, oy + w);
                    ox += l;
                } else {
                    plan.carve(ox, oy, ox + w, oy + l + w);
                    oy += l;
                }
            }
        }
        // Two corridors crossing at an interior point.
        8 => {
            let w = pick_width(rng);
            let lh = runif(rng, 12.0, 18.0);
            let lv = runif(rng, 12.0, 18.0);
            let yc = runif(rng, 4.0, lv - 4.0 - w);
            let xc = runif(rng, 4.0, lh - 4.0 - w);
            plan.carve(m, m + yc, m + lh, m + yc + w);
            plan.carve(m + xc, m, m + xc + w, m + lv);
        }
        // Held out: loop with rooms hung off the outer edge.
        9 => {
            let w = pick_width(rng);
            let lw = runif(rng, 14.0, 20.0);
            let lh = runif(rng, 12.0, 16.0);
            plan.carve(m, m, m + lw, m + lh);
            plan.fill(m + w, m + w, m + lw - w, m + lh - w);
            attach_room_h(&mut plan, &mut doors, rng, m + 1.0, m + lw / 2.0 - 1.0, m, -1.0);
            attach_room_h(&mut plan, &mut doors, rng, m + lw / 2.0 + 1.0, m + lw - 1.0, m, -1.0);
        }
        // Held out: long wide U.
        10 => {
            let w = [3.0, 3.5][rng.gen_range(0..2)];
            let l1 = runif(rng, 14.0, 20.0);
            let l2 = runif(rng, 14.0, 20.0);
            let g = runif(rng, 6.0, 12.0);
            plan.carve(m, m, m + w + g + w, m + w);
            plan.carve(m, m, m + w, m + l1);
            plan.carve(m + w + g, m, m + w + g + w, m + l2);
        }
        // Held out: crossing corridors with rooms on the horizontal arm.
        11 => {
            let w = pick_width(rng);
            let lh = runif(rng, 14.0, 20.0);
            let lv = runif(rng, 14.0, 20.0);
            let yc = runif(rng, 4.0, lv - 4.0 - w);
            let xc = runif(rng, 4.0, lh - 4.0 - w);
            plan.carve(m, m + yc, m + lh, m + yc + w);
            plan.carve(m + xc, m, m + xc + w, m + lv);
            attach_room_h(&mut plan, &mut doors, rng, m + 1.0, m + xc - 1.0, m + yc, -1.0);
            attach_room_h(
                &mut plan,
                &mut doors,
                rng,
                m + xc + w + 1.0,
                m + lh - 1.0,
                m + yc + w,
                1.0,
            );
        }
        n => panic!("template id {n} out of range"),
    }
    Sketch { plan, doors }
}

/// Trim the canvas to the populated region plus a fixed pad, shifting door
/// panels into the cropped frame.
fn crop(sketch: Sketch) -> (FloorPlan, Vec<DoorSeg>) {
    let p = &sketch.plan;
    let (mut x0, mut y0, mut x1, mut y1) = (p.nx, p.ny, 0usize, 0usize);
    for iy in 0..p.ny {
        for ix in 0..p.nx {
            if p.free[iy * p.nx + ix] {
                x0 = x0.min(ix);
                y0 = y0.min(iy);
                x1 = x1.max(ix);
                y1 = y1.max(iy);
            }
        }
    }
    assert!(x0 <= x1, "template carved no cells");
    let ox = x0.saturating_sub(CROP_PAD);
    let oy = y0.saturating_sub(CROP_PAD);
    let nx = x1 + 1 + CROP_PAD - ox;
    let ny = y1 + 1 + CROP_PAD - oy;
    let mut out = FloorPlan::blocked(nx, ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.free[iy * nx + ix] = p.is_free((ix + ox) as isize, (iy + oy) as isize);
        }
    }
    let shift = vec2(ox as f64 * CELL, oy as f64 * CELL);
    let doors = sketch.doors.iter().map(|(a, b)| (*a - shift, *b - shift)).collect();
    (out, doors)
}

// ======================================================================
// Wall extraction
// ======================================================================

/// Maximal straight wall segments along the free/solid boundary.
fn extract_walls(plan: &FloorPlan) -> Vec<(Vec2, Vec2)> {
    let mut segs = Vec::new();
    for ix in 0..=plan.nx {
        let mut start: Option<usize> = None;
        for iy in 0..=plan.ny {
            let boundary = iy < plan.ny
                && plan.is_free(ix as isize - 1, iy as isize) != plan.is_free(ix as isize, iy as isize);
            match (boundary, start) {
                (true, None) => start = Some(iy),
                (false, Some(s)) => {
                    let x = ix as f64 * CELL;
                    segs.push((vec2(x, s as f64 * CELL), vec2(x, iy as f64 * CELL)));
                    start = None;
                }
                _ => {}
            }
        }
    }
    for iy in 0..=plan.ny {
        let mut start: Option<usize> = None;
        for ix in 0..=plan.nx {
            let boundary = ix < plan.nx
                && plan.is_free(ix as isize, iy as isize - 1) != plan.is_free(ix as isize, iy as isize);
            match (boundary, start) {
                (true, None) => start = Some(ix),
                (false, Some(s)) => {
                    let y = iy as f64 * CELL;
                    segs.push((vec2(s as f64 * CELL, y), vec2(ix as f64 * CELL, y)));
                    start = None;
                }
                _ => {}
            }
        }
    }
    segs
}

// ======================================================================
// Textures and lights
// ======================================================================

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.08..0.95),
        rng.gen_range(0.08..0.95),
        rng.gen_range(0.08..0.95),
    ]
}

/// A pool of `count` procedural materials, deterministic in the seed.
pub fn texture_pool(count: usize, seed: u64) -> Vec<Material> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let family = match rng.gen_range(0..10) {
                0..=2 => MaterialFamily::Solid,
                3..=5 => MaterialFamily::Stripes,
                6..=7 => MaterialFamily::Checker,
                _ => MaterialFamily::Noise,
            };
            Material {
                family,
                base_color: random_color(&mut rng),
                accent_color: random_color(&mut rng),
                spatial_scale: rng.gen_range(0.3..1.8),
                salt: rng.gen(),
            }
        })
        .collect()
}

/// 200 materials for training worlds.
pub fn train_textures(seed: u64) -> Vec<Material> {
    texture_pool(200, seed_stream(seed, "train-textures"))
}

/// 100 materials kept aside for held-out worlds.
pub fn heldout_textures(seed: u64) -> Vec<Material> {
    texture_pool(100, seed_stream(seed, "heldout-textures"))
}

/// Greedy ceiling lights over the walkable area with a minimum spacing, so
/// every corridor shape ends up covered without a per-template layout.
fn place_lights(plan: &FloorPlan, rng: &mut ChaCha8Rng) -> Vec<Light> {
    let mut lights: Vec<Light> = Vec::new();
    for iy in (0..plan.ny).step_by(2) {
        for ix in (0..plan.nx).step_by(2) {
            if !plan.is_free(ix as isize, iy as isize) {
                continue;
            }
            // Stay away from walls so fixtures read as ceiling-mounted.
            let clear = (-2..=2).all(|dy| {
                (-2..=2).all(|dx| plan.is_free(ix as isize + dx, iy as isize + dy))
            });
            if !clear {
                continue;
            }
            let c = plan.cell_center(ix, iy);
            if lights.iter().all(|l| (vec2(l.position.x, l.position.y) - c).norm() >= 3.2) {
                lights.push(Light {
                    position: vec3(c.x, c.y, CEILING - 0.25),
                    intensity: rng.gen_range(3.5..6.5),
                    color: [1.0, rng.gen_range(0.88..0.97), rng.gen_range(0.76..0.9)],
                });
            }
        }
    }
    lights
}

// ======================================================================
// Furniture
// ======================================================================

/// Footprint-along-wall, depth, height in meters before jitter.
const ARCHETYPES: [[f64; 3]; 21] = [
    [1.2, 0.45, 1.8],
    [0.9, 0.4, 0.9],
    [1.5, 0.5, 0.45],
    [0.6, 0.6, 1.1],
    [0.45, 0.45, 0.5],
    [1.8, 0.6, 0.75],
    [0.35, 0.35, 1.5],
    [0.8, 0.5, 1.2],
    [1.2, 0.35, 2.0],
    [0.5, 0.5, 0.85],
    [2.0, 0.45, 0.9],
    [0.7, 0.7, 0.7],
    [1.0, 0.6, 0.5],
    [0.4, 0.3, 1.1],
    [1.4, 0.4, 1.6],
    [0.55, 0.45, 0.95],
    [0.9, 0.9, 0.4],
    [0.3, 0.3, 0.9],
    [1.1, 0.5, 1.4],
    [0.75, 0.4, 0.65],
    [1.6, 0.55, 1.1],
];

const PASSAGE_CLEAR: f64 = 0.9;

fn boxes_overlap_2d(a: &Obstacle, b: &Obstacle, margin: f64) -> bool {
    a.min.x - margin < b.max.x
        && b.min.x - margin < a.max.x
        && a.min.y - margin < b.max.y
        && b.min.y - margin < a.max.y
}

fn rect_hits_boxes(x0: f64, y0: f64, x1: f64, y1: f64, boxes: &[Obstacle]) -> bool {
    boxes.iter().any(|b| x0 < b.max.x && b.min.x < x1 && y0 < b.max.y && b.min.y < y1)
}

/// Boxes hugging the walls. Each placement keeps its own footprint on
/// walkable cells, leaves PASSAGE_CLEAR of open floor in front, sits against
/// solid wall behind, and stays clear of earlier placements.
fn place_furniture(
    plan: &FloorPlan,
    rng: &mut ChaCha8Rng,
    n_materials: usize,
    mat_lo: usize,
) -> Vec<Obstacle> {
    let mut boxes: Vec<Obstacle> = Vec::new();
    let cap = ((plan.free_count() as f64 * CELL * CELL) / 7.0).clamp(6.0, 28.0) as usize;
    for iy in 0..plan.ny {
        for ix in 0..plan.nx {
            if boxes.len() >= cap {
                return boxes;
            }
            if !plan.is_free(ix as isize, iy as isize) {
                continue;
            }
            // dir points from this cell toward the wall behind the box.
            for (dx, dy) in [(0i32, -1i32), (0, 1), (-1, 0), (1, 0)] {
                if plan.is_free(ix as isize + dx as isize, iy as isize + dy as isize) {
                    continue;
                }
                let along = if dy != 0 { ix } else { iy };
                if along % 8 != 4 || !rng.gen_bool(0.5) {
                    continue;
                }
                let a = ARCHETYPES[rng.gen_range(0..ARCHETYPES.len())];
                let fw = a[0] * rng.gen_range(0.8..1.2);
                let fd = a[1] * rng.gen_range(0.8..1.2);
                let fh = a[2] * rng.gen_range(0.8..1.2);
                let c = plan.cell_center(ix, iy);
                // Wall line on the blocked side of this cell.
                let (bx0, by0, bx1, by1) = match (dx, dy) {
                    (0, -1) => {
                        let wy = iy as f64 * CELL;
                        (c.x - fw / 2.0, wy + 0.02, c.x + fw / 2.0, wy + 0.02 + fd)
                    }
                    (0, 1) => {
                        let wy = (iy + 1) as f64 * CELL;
                        (c.x - fw / 2.0, wy - 0.02 - fd, c.x + fw / 2.0, wy - 0.02)
                    }
                    (-1, 0) => {
                        let wx = ix as f64 * CELL;
                        (wx + 0.02, c.y - fw / 2.0, wx + 0.02 + fd, c.y + fw / 2.0)
                    }
                    _ => {
                        let wx = (ix + 1) as f64 * CELL;
                        (wx - 0.02 - fd, c.y - fw / 2.0, wx - 0.02, c.y + fw / 2.0)
                    }
                };
                if !plan.rect_free(bx0, by0, bx1, by1) {
                    continue;
                }
                // Open floor in front of the box, toward the corridor.
                let (fx0, fy0, fx1, fy1) = match (dx, dy) {
                    (0, -1) => (bx0, by1, bx1, by1 + PASSAGE_CLEAR),
                    (0, 1) => (bx0, by0 - PASSAGE_CLEAR, bx1, by0),
                    (-1, 0) => (bx1, by0, bx1 + PASSAGE_CLEAR, by1),
                    _ => (bx0 - PASSAGE_CLEAR, by0, bx0, by1),
                };
                if !plan.rect_free(fx0, fy0, fx1, fy1) || rect_hits_boxes(fx0, fy0, fx1, fy1, &boxes) {
                    continue;
                }
                // Solid wall along the whole back face, so a box never seals
                // a doorway gap. The strip sits just past the wall line,
                // which is 0.02 behind the box's back face.
                let (wx0, wy0, wx1, wy1) = match (dx, dy) {
                    (0, -1) => (bx0, by0 - 0.17, bx1, by0 - 0.03),
                    (0, 1) => (bx0, by1 + 0.03, bx1, by1 + 0.17),
                    (-1, 0) => (bx0 - 0.17, by0, bx0 - 0.03, by1),
                    _ => (bx1 + 0.03, by0, bx1 + 0.17, by1),
                };
                if !plan.rect_blocked(wx0, wy0, wx1, wy1) {
                    continue;
                }
                let candidate = Obstacle {
                    min: vec3(bx0, by0, 0.0),
                    max: vec3(bx1, by1, fh),
                    material: mat_lo + rng.gen_range(0..n_materials),
                };
                if boxes.iter().any(|b| boxes_overlap_2d(b, &candidate, 0.3)) {
                    continue;
                }
                boxes.push(candidate);
            }
        }
    }
    boxes
}

// ======================================================================
// World assembly
// ======================================================================

/// A generated scene together with the raster it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedWorld {
    pub scene: Scene,
    pub plan: FloorPlan,
    pub template: TemplateId,
    pub seed: u64,
    pub furnished: bool,
}

impl GeneratedWorld {
    pub fn save(&self, path: &Path) -> Result<(), GenError> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GeneratedWorld, GenError> {
        let f = std::fs::File::open(path)?;
        let world: GeneratedWorld = serde_json::from_reader(std::io::BufReader::new(f))?;
        world.scene.validate()?;
        Ok(world)
    }
}

/// Independent child seed for an indexed item of a batch.
pub fn seed_index(base: u64, i: u64) -> u64 {
    let mut z = base ^ i.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent child seed for a named stream.
pub fn seed_stream(base: u64, label: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Build one world. Layout, materials, lighting, and furniture each consume
/// their own stream derived from `seed`, so toggling `furnish` changes the
/// obstacles and nothing else.
pub fn generate(
    template: TemplateId,
    furnish: bool,
    pool: &[Material],
    seed: u64,
) -> Result<GeneratedWorld, GenError> {
    if template.0 >= TEMPLATE_COUNT {
        return Err(GenError::BadTemplate(template.0));
    }
    if pool.is_empty() {
        return Err(GenError::EmptyPool);
    }
    let mut rng_layout = ChaCha8Rng::seed_from_u64(seed_stream(seed, "layout"));
    let (plan, doors) = crop(draw_template(template, &mut rng_layout));

    let mut rng_mat = ChaCha8Rng::seed_from_u64(seed_stream(seed, "materials"));
    let n_wall_mats = rng_mat.gen_range(5..=9);
    let n_furn_mats = rng_mat.gen_range(4..=7);
    let pick = |rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())].clone();
    let mut materials = Vec::with_capacity(3 + n_wall_mats + n_furn_mats);
    materials.push(pick(&mut rng_mat)); // 0: floor
    materials.push(pick(&mut rng_mat)); // 1: ceiling
    materials.push(pick(&mut rng_mat)); // 2: door panels
    for _ in 0..n_wall_mats + n_furn_mats {
        materials.push(pick(&mut rng_mat));
    }

    let mut walls: Vec<Wall> = extract_walls(&plan)
        .into_iter()
        .map(|(a, b)| Wall {
            a,
            b,
            z0: 0.0,
            z1: CEILING,
            material: 3 + rng_mat.gen_range(0..n_wall_mats),
        })
        .collect();
    for (a, b) in doors {
        walls.push(Wall { a, b, z0: 0.0, z1: DOOR_HEIGHT, material: 2 });
    }

    let mut rng_light = ChaCha8Rng::seed_from_u64(seed_stream(seed, "lights"));
    let ambient = rng_light.gen_range(0.16..0.28);
    let lights = place_lights(&plan, &mut rng_light);

    let obstacles = if furnish {
        let mut rng_furn = ChaCha8Rng::seed_from_u64(seed_stream(seed, "furniture"));
        place_furniture(&plan, &mut rng_furn, n_furn_mats, 3 + n_wall_mats)
    } else {
        Vec::new()
    };

    let scene = Scene::new(0.0, CEILING, 0, 1, ambient, walls, obstacles, materials, lights)?;
    Ok(GeneratedWorld { scene, plan, template, seed, furnished: furnish })
}

/// Same geometry, new surface appearance: every material slot is redrawn
/// from `pool`.
pub fn reskin(world: &GeneratedWorld, pool: &[Material], seed: u64) -> Result<GeneratedWorld, GenError> {
    if pool.is_empty() {
        return Err(GenError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = world.clone();
    let materials = (0..world.scene.materials.len())
        .map(|_| pool[rng.gen_range(0..pool.len())].clone())
        .collect();
    out.scene = Scene::new(
        world.scene.floor_z,
        world.scene.ceiling_z,
        world.scene.floor_material,
        world.scene.ceiling_material,
        world.scene.ambient,
        world.scene.walls.clone(),
        world.scene.obstacles.clone(),
        materials,
        world.scene.lights.clone(),
    )?;
    Ok(out)
}

// ======================================================================
// Pose sampling
// ======================================================================

/// Camera placement drawn uniformly over the walkable area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
}

/// Acceptance rules for sampled poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRules {
    /// Minimum distance from any surface.
    pub clearance: f64,
    pub z_range: (f64, f64),
    /// Pitch is uniform in +-pitch_limit radians.
    pub pitch_limit: f64,
}

impl Default for PoseRules {
    fn default() -> PoseRules {
        PoseRules { clearance: 0.3, z_range: (0.9, 1.6), pitch_limit: 10f64.to_radians() }
    }
}

/// `n` independent poses in free space, rejection-sampled against the
/// clearance rule. Deterministic in the seed.
pub fn sample_poses(
    world: &GeneratedWorld,
    rules: PoseRules,
    n: usize,
    seed: u64,
) -> Result<Vec<PoseSample>, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = world.plan.free_cells();
    if cells.is_empty() {
        return Err(GenError::PoseSampling(0));
    }
    let jitter = CELL / 2.0 - 0.02;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..POSE_ATTEMPTS {
            let (ix, iy) = cells[rng.gen_range(0..cells.len())];
            let c = world.plan.cell_center(ix, iy);
            let z = if rules.z_range.1 > rules.z_range.0 {
                rng.gen_range(rules.z_range.0..rules.z_range.1)
            } else {
                rules.z_range.0
            };
            let p = vec3(
                c.x + rng.gen_range(-jitter..jitter),
                c.y + rng.gen_range(-jitter..jitter),
                z,
            );
            let d = world.scene.distance_to_nearest(p)?;
            if d < rules.clearance {
                continue;
            }
            let pitch = if rules.pitch_limit > 0.0 {
                rng.gen_range(-rules.pitch_limit..rules.pitch_limit)
            } else {
                0.0
            };
            found = Some(PoseSample { position: p, yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), pitch });
            break;
        }
        match found {
            Some(p) => out.push(p),
            None => return Err(GenError::PoseSampling(POSE_ATTEMPTS)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_pool() -> Vec<Material> {
        texture_pool(24, 7)
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let pool = small_pool();
        let a = generate(TemplateId(1), true, &pool, 33).unwrap();
        let b = generate(TemplateId(1), true, &pool, 33).unwrap();
        assert_eq!(a, b);
        let c = generate(TemplateId(1), true, &pool, 34).unwrap();
        assert_ne!(a.scene.walls, c.scene.walls);
    }

    #[test]
    fn every_template_yields_a_navigable_world() {
        let pool = small_pool();
        for t in 0..TEMPLATE_COUNT {
            let world = generate(TemplateId(t), true, &pool, 100 + t as u64).unwrap();
            assert!(world.scene.walls.len() >= 4, "template {t} has too few walls");
            assert!(
                world.plan.free_count() * 16 >= 24 * 16 * 16,
                "template {t} carved under 24 square meters"
            );
            assert!(!world.scene.lights.is_empty(), "template {t} has no lights");
            let poses = sample_poses(&world, PoseRules::default(), 4, 5).unwrap();
            for p in poses {
                assert!(world.plan.is_free_at(vec2(p.position.x, p.position.y)));
                assert!(world.scene.distance_to_nearest(p.position).unwrap() >= 0.3);
            }
        }
    }

    #[test]
    fn generation_never_fails_across_templates_and_seeds() {
        let pool = small_pool();
        for t in 0..TEMPLATE_COUNT {
            for round in 0..200u64 {
                let seed = seed_index(seed_stream(round, "fuzz"), t as u64);
                let world = generate(TemplateId(t), round % 2 == 0, &pool, seed)
                    .unwrap_or_else(|e| panic!("template {t} seed {seed}: {e}"));
                assert!(world.plan.free_count() > 0);
            }
        }
    }

    #[test]
    fn furnish_flag_toggles_obstacles_without_moving_walls() {
        let pool = small_pool();
        let bare = generate(TemplateId(0), false, &pool, 5).unwrap();
        let full = generate(TemplateId(0), true, &pool, 5).unwrap();
        assert!(bare.scene.obstacles.is_empty());
        assert!(!full.scene.obstacles.is_empty());
        assert_eq!(bare.scene.walls, full.scene.walls);
        assert_eq!(bare.scene.lights, full.scene.lights);
        assert_eq!(bare.plan, full.plan);
    }

    #[test]
    fn furniture_leaves_headroom_and_passage() {
        let pool = small_pool();
        for seed in [11, 12, 13] {
            let world = generate(TemplateId(6), true, &pool, seed).unwrap();
            assert!(!world.scene.obstacles.is_empty());
            for b in &world.scene.obstacles {
                assert!(b.max.z <= 2.5);
                assert!(b.min.z == 0.0);
                // At least one face must keep a PASSAGE_CLEAR strip of open
                // floor, free of cells and of the other boxes.
                let others: Vec<Obstacle> =
                    world.scene.obstacles.iter().filter(|o| *o != b).cloned().collect();
                let (x0, y0, x1, y1) = (b.min.x, b.min.y, b.max.x, b.max.y);
                let strips = [
                    (x0, y1, x1, y1 + PASSAGE_CLEAR),
                    (x0, y0 - PASSAGE_CLEAR, x1, y0),
                    (x1, y0, x1 + PASSAGE_CLEAR, y1),
                    (x0 - PASSAGE_CLEAR, y0, x0, y1),
                ];
                let open = strips.iter().any(|&(a, b0, c, d)| {
                    world.plan.rect_free(a, b0, c, d) && !rect_hits_boxes(a, b0, c, d, &others)
                });
                assert!(open, "box at ({x0:.2}, {y0:.2}) is walled in");
            }
        }
    }

    #[test]
    fn furnished_worlds_stay_connected() {
        // Walkable cells with clearance must form a single region: furniture
        // may narrow corridors but never cut them.
        let pool = small_pool();
        for (t, seed) in [(0usize, 40u64), (3, 41), (6, 42), (8, 43)] {
            let world = generate(TemplateId(t), true, &pool, seed).unwrap();
            let plan = &world.plan;
            let mut nav = vec![false; plan.nx * plan.ny];
            for (ix, iy) in plan.free_cells() {
                let c = plan.cell_center(ix, iy);
                let d = world.scene.distance_to_nearest(vec3(c.x, c.y, 1.2)).unwrap();
                nav[iy * plan.nx + ix] = d >= 0.3;
            }
            let total = nav.iter().filter(|&&v| v).count();
            assert!(total > 0);
            let start = nav.iter().position(|&v| v).unwrap();
            let mut seen = vec![false; nav.len()];
            let mut queue = vec![start];
            seen[start] = true;
            let mut reached = 0;
            while let Some(i) = queue.pop() {
                reached += 1;
                let (ix, iy) = (i % plan.nx, i / plan.nx);
                let mut push = |jx: isize, jy: isize| {
                    if jx >= 0 && jy >= 0 && (jx as usize) < plan.nx && (jy as usize) < plan.ny {
                        let j = jy as usize * plan.nx + jx as usize;
                        if nav[j] && !seen[j] {
                            seen[j] = true;
                            queue.push(j);
                        }
                    }
                };
                push(ix as isize - 1, iy as isize);
                push(ix as isize + 1, iy as isize);
                push(ix as isize, iy as isize - 1);
                push(ix as isize, iy as isize + 1);
            }
            assert_eq!(
                reached, total,
                "template {t} seed {seed}: {reached} of {total} walkable cells reachable"
            );
        }
    }

    #[test]
    fn template_split_is_disjoint_and_covers_all_kinds() {
        let train = training_templates();
        let held = heldout_templates();
        assert_eq!(train.len(), 9);
        assert_eq!(held.len(), 3);
        for t in &held {
            assert!(!train.contains(t));
        }
        let kinds: std::collections::HashSet<_> = train.iter().map(|t| t.kind()).collect();
        assert_eq!(kinds.len(), 7, "training templates must cover every layout kind");
        for t in &held {
            assert!(kinds.contains(&t.kind()), "held-out kind {:?} unseen in training", t.kind());
        }
    }

    #[test]
    fn texture_pools_are_disjoint_and_sized() {
        let train = train_textures(3);
        let held = heldout_textures(3);
        assert_eq!(train.len(), 200);
        assert_eq!(held.len(), 100);
        for m in &held {
            assert!(!train.contains(m));
        }
    }

    #[test]
    fn seed_stream_separates_labels() {
        assert_eq!(seed_stream(9, "a"), seed_stream(9, "a"));
        assert_ne!(seed_stream(9, "a"), seed_stream(9, "b"));
        assert_ne!(seed_stream(9, "a"), seed_stream(10, "a"));
    }

    #[test]
    fn seed_index_separates_items() {
        assert_eq!(seed_index(9, 3), seed_index(9, 3));
        assert_ne!(seed_index(9, 0), seed_index(9, 1));
        assert_ne!(seed_index(9, 0), seed_index(10, 0));
        let mut seen: Vec<u64> = (0..256).map(|i| seed_index(42, i)).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 256);
    }

    #[test]
    fn world_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        let pool = small_pool();
        let world = generate(TemplateId(9), true, &pool, 77).unwrap();
        world.save(&path).unwrap();
        let loaded = GeneratedWorld::load(&path).unwrap();
        assert_eq!(world, loaded);
        // The reloaded scene must still answer queries.
        let poses = sample_poses(&loaded, PoseRules::default(), 2, 3).unwrap();
        assert_eq!(poses.len(), 2);
    }

    #[test]
    fn reskin_changes_materials_only() {
        let pool = small_pool();
        let world = generate(TemplateId(2), true, &pool, 8).unwrap();
        let other = texture_pool(24, 991);
        let skinned = reskin(&world, &other, 55).unwrap();
        assert_eq!(world.scene.walls, skinned.scene.walls);
        assert_eq!(world.scene.obstacles, skinned.scene.obstacles);
        assert_eq!(world.scene.lights, skinned.scene.lights);
        assert_eq!(world.plan, skinned.plan);
        assert_ne!(world.scene.materials, skinned.scene.materials);
    }

    #[test]
    fn closed_rooms_leave_door_panels() {
        // Door panels are short walls: full-height walls all reach the
        // ceiling, panels stop at door height.
        let pool = small_pool();
        let mut panels = 0;
        for seed in 0..20 {
            let world = generate(TemplateId(6), false, &pool, seed).unwrap();
            panels += world.scene.walls.iter().filter(|w| w.z1 < CEILING).count();
        }
        assert!(panels > 0, "no closed door panels in 20 worlds");
    }

    #[test]
    fn pose_sampling_rejects_impossible_clearance() {
        let pool = small_pool();
        let world = generate(TemplateId(0), false, &pool, 2).unwrap();
        let rules = PoseRules { clearance: 10.0, ..PoseRules::default() };
        assert!(matches!(
            sample_poses(&world, rules, 1, 4),
            Err(GenError::PoseSampling(_))
        ));
    }

    #[test]
    fn plan_rasterization_is_exact_on_cell_boundaries() {
        let mut plan = FloorPlan::blocked(40, 40);
        plan.carve(1.0, 1.0, 3.0, 2.0);
        assert!(plan.is_free(4, 4));
        assert!(plan.is_free(11, 7));
        assert!(!plan.is_free(12, 4));
        assert!(!plan.is_free(4, 8));
        assert_eq!(plan.free_count(), 8 * 4);
        plan.fill(1.0, 1.0, 1.5, 2.0);
        assert_eq!(plan.free_count(), 6 * 4);
        assert!(plan.rect_free(1.5, 1.0, 3.0, 2.0));
        assert!(!plan.rect_free(1.25, 1.0, 3.0, 2.0));
        assert!(plan.rect_blocked(0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn wall_extraction_closes_a_rectangle() {
        let mut plan = FloorPlan::blocked(40, 40);
        plan.carve(1.0, 1.0, 5.0, 3.0);
        let segs = extract_walls(&plan);
        // A plain rectangle must extract to exactly four maximal segments.
        assert_eq!(segs.len(), 4);
        let total: f64 = segs.iter().map(|(a, b)| (*b - *a).norm()).sum();
        assert!((total - 12.0).abs() < 1e-12);
    }
}

//! Collision-avoidance flight in procedurally generated indoor hallways.
//!
//! The crate covers the full loop: hallway generation (`procgen`), a
//! raycasting renderer over analytic scenes (`scene`, `render`), a discrete
//! steering vehicle (`vehicle`), a small conv net scoring steering bins
//! (`qnet`), supervised and rollout-based training (`trainer`), baseline
//! controllers (`policies`), and episode evaluation (`eval`).
//!
//! See the `examples/` directory for end-to-end usage of each stage.

pub mod cli;
pub mod config;
pub mod eval;
pub mod math;
pub mod procgen;
pub mod policies;
pub mod qnet;
pub mod render;
pub mod scene;
pub mod trainer;
pub mod vehicle;

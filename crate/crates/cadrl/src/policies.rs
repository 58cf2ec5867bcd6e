//! Steering controllers. All of them emit a bin of the action grid each
//! step; they differ in what they look at. Perceptual controllers see only
//! the rendered image, oracle controllers query scene geometry directly, and
//! the straight-line baseline looks at nothing.

use crate::qnet::{self, NetError, NetParams, ScoreMap};
use crate::render::{self, ImageBuf, RenderError};
use crate::scene::Scene;
use crate::vehicle::{BinAction, GridSpec, VehicleState};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("controller needs an image but none was provided")]
    MissingImage,
    #[error("network failure: {0}")]
    Net(#[from] NetError),
    #[error("render failure: {0}")]
    Render(#[from] RenderError),
}

/// What a controller consumes on one step.
pub struct Observation<'a> {
    /// Present iff the controller reports `needs_image()`.
    pub image: Option<&'a ImageBuf>,
    pub scene: &'a Scene,
    pub state: &'a VehicleState,
    pub grid: &'a GridSpec,
}

impl<'a> Observation<'a> {
    fn image(&self) -> Result<&'a ImageBuf, PolicyError> {
        self.image.ok_or(PolicyError::MissingImage)
    }
}

pub trait Controller: Send + Sync {
    /// Stable name used in output files and on the command line.
    fn name(&self) -> &'static str;

    /// Whether `act` reads `Observation::image`. Controllers that return
    /// false can be run without a renderer in the loop.
    fn needs_image(&self) -> bool {
        true
    }

    fn act(&self, obs: &Observation) -> Result<BinAction, PolicyError>;
}

/// Center-distance of a bin, used to break score ties toward straight ahead.
fn center_dist2(row: usize, col: usize, m: usize) -> usize {
    let c = m / 2;
    let dr = row.abs_diff(c);
    let dc = col.abs_diff(c);
    dr * dr + dc * dc
}

/// Highest-scoring bin. Ties prefer the bin closest to the grid center, then
/// the earliest in row-major order, so the choice is total and deterministic.
pub fn greedy_bin(scores: &ScoreMap) -> BinAction {
    let m = scores.m;
    let mut best = BinAction { row: 0, col: 0 };
    let mut best_score = f32::NEG_INFINITY;
    let mut best_dist = usize::MAX;
    for row in 0..m {
        for col in 0..m {
            let s = scores.get(row, col);
            let d = center_dist2(row, col, m);
            if s > best_score || (s == best_score && d < best_dist) {
                best = BinAction { row, col };
                best_score = s;
                best_dist = d;
            }
        }
    }
    best
}

/// Most central bin for which `free` holds; the exact grid center when
/// nothing is free. Equal center distances prefer the more central row:
/// altitude is clamped to a band, so level dodges beat vertical ones.
fn most_central_free(m: usize, free: impl Fn(usize, usize) -> bool) -> BinAction {
    let c = m / 2;
    let mut best: Option<((usize, usize), BinAction)> = None;
    for row in 0..m {
        for col in 0..m {
            if !free(row, col) {
                continue;
            }
            let key = (center_dist2(row, col, m), row.abs_diff(c));
            if best.map_or(true, |(bk, _)| key < bk) {
                best = Some((key, BinAction { row, col }));
            }
        }
    }
    best.map(|(_, a)| a).unwrap_or(BinAction { row: m / 2, col: m / 2 })
}

// ======================================================================
// Controllers
// ======================================================================

/// Greedy controller over a learned per-bin score map.
pub struct GreedyScore {
    pub net: NetParams,
}

impl Controller for GreedyScore {
    fn name(&self) -> &'static str {
        "cadrl"
    }

    fn act(&self, obs: &Observation) -> Result<BinAction, PolicyError> {
        let scores = qnet::forward(&self.net, obs.image()?)?;
        Ok(greedy_bin(&scores))
    }
}

/// Greedy over the pretrained free-space map. Same argmax machinery as
/// `GreedyScore`; only the training signal behind the checkpoint differs.
pub struct FreeSpacePred {
    pub net: NetParams,
}

impl Controller for FreeSpacePred {
    fn name(&self) -> &'static str {
        "fspred"
    }

    fn act(&self, obs: &Observation) -> Result<BinAction, PolicyError> {
        let scores = qnet::forward(&self.net, obs.image()?)?;
        Ok(greedy_bin(&scores))
    }
}

/// Steers into the most central bin whose true free-space label is set,
/// read from the scene instead of a prediction. An upper bound for what the
/// free-space predictor can achieve.
pub struct OracleFreeSpace {
    pub ray_len: f64,
}

impl Controller for OracleFreeSpace {
    fn name(&self) -> &'static str {
        "fsgt"
    }

    fn needs_image(&self) -> bool {
        false
    }

    fn act(&self, obs: &Observation) -> Result<BinAction, PolicyError> {
        let grid = obs.grid;
        let labels = render::freespace_labels(
            obs.scene,
            &obs.state.camera_pose(),
            grid.m,
            &grid.intrinsics,
            self.ray_len,
        )?;
        Ok(most_central_free(grid.m, |r, c| labels.get(r, c) == 1))
    }
}

/// Always flies through the grid center.
pub struct StraightAhead;

impl Controller for StraightAhead {
    fn name(&self) -> &'static str {
        "straight"
    }

    fn needs_image(&self) -> bool {
        false
    }

    fn act(&self, obs: &Observation) -> Result<BinAction, PolicyError> {
        Ok(obs.grid.center())
    }
}

/// Classes of the three-way turn classifier.
pub const TURN_LEFT: usize = 0;
pub const TURN_STRAIGHT: usize = 1;
pub const TURN_RIGHT: usize = 2;

/// How far (in columns) a left/right command steers off center.
pub fn turn_offset(m: usize) -> usize {
    ((m as f64 / 4.0).round() as usize).max(1)
}

/// Left / straight / right classifier mapped onto the center row of the grid.
pub struct TurnClassifier {
    pub net: NetParams,
}

impl Controller for TurnClassifier {
    fn name(&self) -> &'static str {
        "lrs"
    }

    fn act(&self, obs: &Observation) -> Result<BinAction, PolicyError> {
        let p = qnet::forward_class_probs(&self.net, obs.image()?)?;
        // Straight wins ties so an uninformative classifier flies straight.
        let mut class = TURN_STRAIGHT;
        if p[TURN_LEFT] > p[class] {
            class = TURN_LEFT;
        }
        if p[TURN_RIGHT] > p[class] {
            class = TURN_RIGHT;
        }
        let grid = obs.grid;
        let c = grid.m / 2;
        let col = match class {
            TURN_LEFT => c - turn_offset(grid.m),
            TURN_RIGHT => c + turn_offset(grid.m),
            _ => c,
        };
        Ok(BinAction { row: c, col })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use crate::qnet::{init_params, ArchSpec, ConvSpec, HeadKind};
    use crate::render::CameraIntrinsics;
    use crate::scene;

    fn grid(m: usize, side: usize) -> GridSpec {
        GridSpec::new(m, CameraIntrinsics::square(side, std::f64::consts::FRAC_PI_2)).unwrap()
    }

    fn zeroed(arch: &ArchSpec) -> NetParams {
        let mut p = init_params(arch, 0);
        for t in &mut p.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    fn score_arch(side: usize, m: usize) -> ArchSpec {
        ArchSpec {
            in_h: side,
            in_w: side,
            in_ch: 3,
            convs: vec![ConvSpec { out_ch: 4, kernel: 3, stride: 2 }],
            head: HeadKind::ScoreMap { m },
        }
    }

    fn obs_fixture<'a>(
        scene: &'a Scene,
        state: &'a VehicleState,
        g: &'a GridSpec,
        image: Option<&'a ImageBuf>,
    ) -> Observation<'a> {
        Observation { image, scene, state, grid: g }
    }

    use crate::scene::Scene;

    #[test]
    fn greedy_prefers_strict_maximum() {
        let mut data = vec![0.2f32; 25];
        data[3 * 5 + 4] = 0.9;
        let a = greedy_bin(&ScoreMap { m: 5, data });
        assert_eq!(a, BinAction { row: 3, col: 4 });
    }

    #[test]
    fn greedy_breaks_ties_toward_center_then_row_major() {
        // Equal maxima at a corner and the center: center wins.
        let mut data = vec![0.1f32; 9];
        data[0] = 0.8;
        data[4] = 0.8;
        assert_eq!(greedy_bin(&ScoreMap { m: 3, data }), BinAction { row: 1, col: 1 });
        // Equal maxima equidistant from center: row-major order wins.
        let mut data = vec![0.1f32; 9];
        data[1] = 0.8; // (0, 1)
        data[3] = 0.8; // (1, 0)
        assert_eq!(greedy_bin(&ScoreMap { m: 3, data }), BinAction { row: 0, col: 1 });
    }

    #[test]
    fn most_central_free_falls_back_to_center() {
        assert_eq!(most_central_free(5, |_, _| false), BinAction { row: 2, col: 2 });
        // A free ring around a blocked center picks a distance-1 bin in the
        // center row, leftmost first.
        let a = most_central_free(3, |r, c| !(r == 1 && c == 1));
        assert_eq!(a, BinAction { row: 1, col: 0 });
    }

    #[test]
    fn straight_controller_needs_no_image() {
        let s = scene::tests::corridor(3.0, 20.0);
        let st = VehicleState::new(vec3(5.0, 0.0, 1.5), 0.0);
        let g = grid(5, 16);
        let c = StraightAhead;
        assert!(!c.needs_image());
        let a = c.act(&obs_fixture(&s, &st, &g, None)).unwrap();
        assert_eq!(a, BinAction { row: 2, col: 2 });
    }

    #[test]
    fn zero_weight_score_net_flies_straight() {
        let g = grid(3, 12);
        let net = zeroed(&score_arch(12, 3));
        let s = scene::tests::corridor(3.0, 20.0);
        let st = VehicleState::new(vec3(5.0, 0.0, 1.5), 0.0);
        let img = crate::vehicle::observe(&s, &st, &g).unwrap();
        let c = GreedyScore { net };
        assert!(c.needs_image());
        let a = c.act(&obs_fixture(&s, &st, &g, Some(&img))).unwrap();
        assert_eq!(a, g.center());
        // Without an image the controller refuses to act.
        assert!(matches!(
            c.act(&obs_fixture(&s, &st, &g, None)),
            Err(PolicyError::MissingImage)
        ));
    }

    #[test]
    fn fspred_is_greedy_over_the_score_map() {
        let g = grid(3, 12);
        let mut net = zeroed(&score_arch(12, 3));
        // Bias the head so bin (1, 0) scores highest.
        let nb = net.tensors.last_mut().unwrap();
        nb.data.iter_mut().for_each(|v| *v = -1.0);
        nb.data[3] = 1.0;
        let s = scene::tests::corridor(3.0, 20.0);
        let st = VehicleState::new(vec3(5.0, 0.0, 1.5), 0.0);
        let img = crate::vehicle::observe(&s, &st, &g).unwrap();
        let c = FreeSpacePred { net };
        let a = c.act(&obs_fixture(&s, &st, &g, Some(&img))).unwrap();
        assert_eq!(a, BinAction { row: 1, col: 0 });
    }

    #[test]
    fn central_tie_breaks_prefer_level_flight() {
        // Center blocked; picks a side bin in the center row, not the bin
        // directly above, even though both sit one step from center.
        let a = most_central_free(3, |r, c| !(r == 1 && c == 1) && !(r == 2));
        assert_eq!(a, BinAction { row: 1, col: 0 });
    }

    #[test]
    fn oracle_freespace_flies_center_in_open_corridor_and_dodges_walls() {
        let s = scene::tests::corridor(3.0, 40.0);
        let g = grid(5, 16);
        let c = OracleFreeSpace { ray_len: 1.0 };
        assert!(!c.needs_image());
        // Mid-corridor, looking along it: center is free.
        let open = VehicleState::new(vec3(5.0, 0.0, 1.5), 0.0);
        assert_eq!(c.act(&obs_fixture(&s, &open, &g, None)).unwrap(), g.center());
        // 0.9 m short of the end wall: the center ray hits inside ray_len but
        // the wide-angle bins still clear it.
        let near = VehicleState::new(vec3(39.1, 0.0, 1.5), 0.0);
        let a = c.act(&obs_fixture(&s, &near, &g, None)).unwrap();
        assert_ne!(a, g.center());
        // The pick must agree with the labels it is defined over.
        let labels =
            render::freespace_labels(&s, &near.camera_pose(), g.m, &g.intrinsics, 1.0).unwrap();
        assert_eq!(a, most_central_free(g.m, |r, c| labels.get(r, c) == 1));
        assert_eq!(labels.get(2, 2), 0);
    }

    #[test]
    fn turn_classifier_maps_classes_to_columns() {
        let side = 12;
        let arch = ArchSpec {
            in_h: side,
            in_w: side,
            in_ch: 3,
            convs: vec![ConvSpec { out_ch: 4, kernel: 3, stride: 2 }],
            head: HeadKind::Softmax { classes: 3 },
        };
        let s = scene::tests::corridor(3.0, 20.0);
        let st = VehicleState::new(vec3(5.0, 0.0, 1.5), 0.0);
        let g = grid(9, side);
        let img = crate::vehicle::observe(&s, &st, &g).unwrap();
        // Uniform probabilities: ties resolve to straight.
        let c = TurnClassifier { net: zeroed(&arch) };
        assert_eq!(c.act(&obs_fixture(&s, &st, &g, Some(&img))).unwrap(), g.center());
        // Bias toward the left class: column shifts left by the turn offset.
        let mut net = zeroed(&arch);
        net.tensors.last_mut().unwrap().data[TURN_LEFT] = 2.0;
        let c = TurnClassifier { net };
        let a = c.act(&obs_fixture(&s, &st, &g, Some(&img))).unwrap();
        assert_eq!(a, BinAction { row: 4, col: 4 - turn_offset(9) });
        assert_eq!(turn_offset(9), 2);
        assert_eq!(turn_offset(3), 1);
        assert_eq!(turn_offset(41), 10);
    }
}

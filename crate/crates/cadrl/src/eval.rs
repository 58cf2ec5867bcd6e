//! Episode runner and quantitative metrics: collision-free distances with
//! survival curves, and the free-space prediction scores (threshold sweeps,
//! average precision, pixel accuracy, Jaccard).

use crate::policies::{Controller, Observation, PolicyError};
use crate::math::vec3;
use crate::procgen::{self, GenError, GeneratedWorld, PoseRules};
use crate::qnet::{self, NetError, NetParams};
use crate::render::{self, CameraPose, RenderError, MAX_RENDER_RANGE};
use crate::scene::{Scene, SceneError};
use crate::vehicle::{self, GridSpec, RewardConfig, TrajectoryRow, VehicleError, VehicleState};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("input lengths differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("no positive ground truth; recall is undefined")]
    NoPositives,
    #[error("policy failure: {0}")]
    Policy(#[from] PolicyError),
    #[error("vehicle failure: {0}")]
    Vehicle(#[from] VehicleError),
    #[error("generation failure: {0}")]
    Gen(#[from] GenError),
    #[error("network failure: {0}")]
    Net(#[from] NetError),
    #[error("render failure: {0}")]
    Render(#[from] RenderError),
    #[error("scene failure: {0}")]
    Scene(#[from] SceneError),
}

// ======================================================================
// Episodes
// ======================================================================

/// Result of one evaluation trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialOutcome {
    /// Completed collision-free steps.
    pub steps_survived: usize,
    /// `steps_survived` times the step length.
    pub distance_m: f64,
    pub collided: bool,
}

/// Fly `controller` from `start` until collision or `max_steps` completed
/// steps. The scene is rendered only when the controller reads images.
/// Returns the outcome plus the full trajectory log.
pub fn run_episode(
    scene: &Scene,
    start: &VehicleState,
    controller: &dyn Controller,
    grid: &GridSpec,
    cfg: &RewardConfig,
    max_steps: usize,
) -> Result<(TrialOutcome, Vec<TrajectoryRow>), EvalError> {
    let mut state = *start;
    let mut rows = Vec::new();
    let mut steps_survived = 0usize;
    let mut collided = false;
    for step in 0..max_steps {
        let image =
            if controller.needs_image() { Some(vehicle::observe(scene, &state, grid)?) } else { None };
        let obs = Observation { image: image.as_ref(), scene, state: &state, grid };
        let action = controller.act(&obs)?;
        let out = vehicle::step(scene, &state, action, grid, cfg)?;
        rows.push(TrajectoryRow {
            step,
            position: out.state.position,
            yaw: out.state.yaw,
            reward: out.reward,
            action,
            collided: out.collided,
        });
        state = out.state;
        if out.collided {
            collided = true;
            break;
        }
        steps_survived += 1;
    }
    let outcome =
        TrialOutcome { steps_survived, distance_m: steps_survived as f64 * cfg.speed, collided };
    Ok((outcome, rows))
}

/// Fixed evaluation deck: worlds plus one start state per trial. Scoring
/// every controller on the same deck keeps the comparison direct.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub worlds: Vec<GeneratedWorld>,
    /// (world index, start state) per trial.
    pub trials: Vec<(usize, VehicleState)>,
}

/// Sample `n_trials` start states, cycling through the worlds. Starts are
/// resampled until the level ray along the initial heading is clear for
/// `launch_clear` meters, so no trial begins on a doomed approach; pass
/// 0.0 to accept every pose.
pub fn make_eval_setup(
    worlds: Vec<GeneratedWorld>,
    n_trials: usize,
    rules: PoseRules,
    launch_clear: f64,
    seed: u64,
) -> Result<EvalSetup, EvalError> {
    if worlds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let trials = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            let wi = i % worlds.len();
            let mut pick = None;
            for attempt in 0..400u64 {
                let pose = procgen::sample_poses(
                    &worlds[wi],
                    rules,
                    1,
                    procgen::seed_index(seed, (i as u64) * 1000 + attempt),
                )?[0];
                pick = Some(pose);
                if launch_clear <= 0.0 {
                    break;
                }
                let dir = vec3(pose.yaw.cos(), pose.yaw.sin(), 0.0);
                if worlds[wi].scene.raycast(pose.position, dir, launch_clear)?.is_none() {
                    break;
                }
            }
            let pose = pick.expect("attempt loop always samples at least once");
            Ok::<_, EvalError>((wi, VehicleState::new(pose.position, pose.yaw)))
        })
        .collect::<Result<_, _>>()?;
    Ok(EvalSetup { worlds, trials })
}

/// Run every trial of the deck with one controller; trial order preserved.
pub fn evaluate_policy(
    setup: &EvalSetup,
    controller: &dyn Controller,
    grid: &GridSpec,
    cfg: &RewardConfig,
    max_steps: usize,
) -> Result<Vec<(TrialOutcome, Vec<TrajectoryRow>)>, EvalError> {
    setup
        .trials
        .par_iter()
        .map(|&(wi, start)| {
            run_episode(&setup.worlds[wi].scene, &start, controller, grid, cfg, max_steps)
        })
        .collect()
}

/// Mean collision-free distance over a set of outcomes.
pub fn mean_distance(outcomes: &[TrialOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|o| o.distance_m).sum::<f64>() / outcomes.len() as f64
}

// ======================================================================
// Survival curves
// ======================================================================

/// Fraction of trials whose collision-free distance is at least `d`.
pub fn fraction_reaching(outcomes: &[TrialOutcome], d: f64) -> f64 {
    outcomes.iter().filter(|o| o.distance_m >= d).count() as f64 / outcomes.len() as f64
}

/// (distance, fraction reaching) points every `spacing` meters, from zero up
/// to the longest flight in the set.
pub fn survival_curve(
    outcomes: &[TrialOutcome],
    spacing: f64,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    assert!(spacing > 0.0, "curve spacing must be positive");
    let max_d = outcomes.iter().map(|o| o.distance_m).fold(0.0, f64::max);
    let k_max = (max_d / spacing).ceil() as usize;
    Ok((0..=k_max)
        .map(|k| {
            let d = k as f64 * spacing;
            (d, fraction_reaching(outcomes, d))
        })
        .collect())
}

// ======================================================================
// Free-space prediction metrics
// ======================================================================

/// One row of the probability-threshold sweep: precision and recall averaged
/// over the depth thresholds, with their spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub prob_threshold: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
}

/// Probability thresholds 0 to 1 in steps of 0.05.
pub fn default_prob_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Ground-truth depth thresholds 1.0 to 4.0 meters in steps of 0.3.
pub fn default_depth_thresholds() -> Vec<f64> {
    (0..=10).map(|i| 1.0 + 0.3 * i as f64).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sweep free-space score thresholds against depth-derived ground truth
/// (a bin is truly free when its ray depth exceeds the depth threshold).
/// A threshold that predicts nothing positive counts as precision 1.
pub fn fs_pr_sweep(
    scores: &[f64],
    depths: &[f64],
    prob_thresholds: &[f64],
    depth_thresholds: &[f64],
) -> Result<Vec<PrPoint>, EvalError> {
    if scores.is_empty() || prob_thresholds.is_empty() || depth_thresholds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if scores.len() != depths.len() {
        return Err(EvalError::ShapeMismatch(scores.len(), depths.len()));
    }
    for &dt in depth_thresholds {
        if !depths.iter().any(|&d| d > dt) {
            return Err(EvalError::NoPositives);
        }
    }
    let mut out = Vec::with_capacity(prob_thresholds.len());
    for &pt in prob_thresholds {
        let mut precisions = Vec::with_capacity(depth_thresholds.len());
        let mut recalls = Vec::with_capacity(depth_thresholds.len());
        for &dt in depth_thresholds {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (s, d) in scores.iter().zip(depths) {
                match (*s >= pt, *d > dt) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            precisions.push(if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 });
            recalls.push(tp as f64 / (tp + fn_) as f64);
        }
        let (pm, ps) = mean_std(&precisions);
        let (rm, rs) = mean_std(&recalls);
        out.push(PrPoint {
            prob_threshold: pt,
            precision_mean: pm,
            precision_std: ps,
            recall_mean: rm,
            recall_std: rs,
        });
    }
    Ok(out)
}

/// Area under the precision-recall curve by the rank method: the mean, over
/// positives, of the precision at each positive's rank. Score ties keep
/// input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::ShapeMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut tp = 0usize;
    let mut ap = 0.0f64;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Whole-mask agreement metrics between binary label masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskMetrics {
    /// Fraction of pixels labeled correctly.
    pub pixel_accuracy: f64,
    /// Intersection over union of the free class; an empty union counts as 1.
    pub jaccard_free: f64,
    /// Intersection over union of the obstacle class.
    pub jaccard_obstacle: f64,
}

/// Pixel accuracy plus per-class Jaccard of `pred` against `gt`
/// (true = free, false = obstacle).
pub fn precision_jaccard(pred: &[bool], gt: &[bool]) -> Result<MaskMetrics, EvalError> {
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if pred.len() != gt.len() {
        return Err(EvalError::ShapeMismatch(pred.len(), gt.len()));
    }
    let mut correct = 0usize;
    let (mut i_free, mut u_free, mut i_obs, mut u_obs) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        correct += (p == g) as usize;
        i_free += (p && g) as usize;
        u_free += (p || g) as usize;
        i_obs += (!p && !g) as usize;
        u_obs += (!p || !g) as usize;
    }
    let jac = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(MaskMetrics {
        pixel_accuracy: correct as f64 / pred.len() as f64,
        jaccard_free: jac(i_free, u_free),
        jaccard_obstacle: jac(i_obs, u_obs),
    })
}

/// Aligned per-bin scores and ground-truth ray depths over a batch of
/// rendered views, flattened image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FsEvalSet {
    pub scores: Vec<f64>,
    pub depths: Vec<f64>,
}

impl FsEvalSet {
    /// Binary ground truth at one depth threshold.
    pub fn labels_at(&self, depth_threshold: f64) -> Vec<bool> {
        self.depths.iter().map(|&d| d > depth_threshold).collect()
    }

    /// Binary predictions at one probability threshold.
    pub fn predictions_at(&self, prob_threshold: f64) -> Vec<bool> {
        self.scores.iter().map(|&s| s >= prob_threshold).collect()
    }
}

/// Render views at sampled poses; record the net's per-bin free-space scores
/// next to the true depth along each bin's central ray. Each view is ray-cast
/// once; every depth threshold reuses the same depths.
pub fn collect_fs_eval(
    worlds: &[GeneratedWorld],
    net: &NetParams,
    grid: &GridSpec,
    n_images: usize,
    rules: PoseRules,
    seed: u64,
) -> Result<FsEvalSet, EvalError> {
    if worlds.is_empty() || n_images == 0 {
        return Err(EvalError::EmptyInput);
    }
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let world = &worlds[i % worlds.len()];
            let pose =
                procgen::sample_poses(world, rules, 1, procgen::seed_index(seed, i as u64))?[0];
            let cam = CameraPose { position: pose.position, yaw: pose.yaw, pitch: pose.pitch };
            let image = render::render_rgb(&world.scene, &cam, &grid.intrinsics)?;
            let scores = qnet::forward(net, &image)?;
            let depths =
                render::bin_ray_depths(&world.scene, &cam, grid.m, &grid.intrinsics, MAX_RENDER_RANGE)?;
            Ok::<_, EvalError>((scores.data.iter().map(|&s| s as f64).collect(), depths))
        })
        .collect::<Result<_, _>>()?;
    let nb = grid.n_bins();
    let mut scores = Vec::with_capacity(n_images * nb);
    let mut depths = Vec::with_capacity(n_images * nb);
    for (s, d) in per_image {
        scores.extend(s);
        depths.extend(d);
    }
    Ok(FsEvalSet { scores, depths })
}

// ======================================================================
// CSV emission
// ======================================================================

/// One row per trial.
pub fn outcomes_csv(outcomes: &[TrialOutcome], config_hash: &str) -> String {
    let mut out = format!("# config={config_hash}\n");
    out.push_str("trial,steps_survived,distance_m,collided\n");
    for (i, o) in outcomes.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i, o.steps_survived, o.distance_m, o.collided as u8));
    }
    out
}

/// Survival curve points as CSV.
pub fn survival_csv(curve: &[(f64, f64)], config_hash: &str) -> String {
    let mut out = format!("# config={config_hash}\n");
    out.push_str("distance_m,fraction_reaching\n");
    for (d, f) in curve {
        out.push_str(&format!("{d},{f}\n"));
    }
    out
}

/// Threshold sweep table as CSV.
pub fn pr_csv(points: &[PrPoint], config_hash: &str) -> String {
    let mut out = format!("# config={config_hash}\n");
    out.push_str("prob_threshold,precision_mean,precision_std,recall_mean,recall_std\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.prob_threshold, p.precision_mean, p.precision_std, p.recall_mean, p.recall_std
        ));
    }
    out
}

/// One-line mask metric summary as CSV.
pub fn mask_metrics_csv(m: &MaskMetrics, config_hash: &str) -> String {
    format!(
        "# config={config_hash}\npixel_accuracy,jaccard_free,jaccard_obstacle\n{},{},{}\n",
        m.pixel_accuracy, m.jaccard_free, m.jaccard_obstacle
    )
}

// ======================================================================

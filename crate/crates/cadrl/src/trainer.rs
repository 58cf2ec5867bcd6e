//! Training loops. Supervised pretraining regresses the score map onto
//! ray-cast free-space labels; the main loop then re-targets it with Monte
//! Carlo rollout returns under its own greedy policy. A softmax variant
//! trains the turn classifier baseline.
//!
//! Every batch is evaluated in parallel but reduced in sample order, so the
//! resulting parameters do not depend on the worker count.

use crate::policies::{greedy_bin, TURN_LEFT, TURN_RIGHT, TURN_STRAIGHT};
use crate::procgen::{self, GenError, GeneratedWorld, PoseRules, TemplateId};
use crate::qnet::{self, Grads, NetError, NetParams, Sgd, TrainSample};
use crate::render::{self, CameraPose, ImageBuf, RenderError};
use crate::scene::{Material, Scene};
use crate::vehicle::{self, BinAction, GridSpec, RewardConfig, VehicleError, VehicleState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_6;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyData,
    #[error("loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error("no worlds supplied")]
    NoWorlds,
    #[error("generation error: {0}")]
    Gen(#[from] GenError),
    #[error("network error: {0}")]
    Net(#[from] NetError),
    #[error("render error: {0}")]
    Render(#[from] RenderError),
    #[error("vehicle error: {0}")]
    Vehicle(#[from] VehicleError),
}

/// Generate `count` worlds, cycling through `templates`, with per-world seeds
/// derived from `seed`.
pub fn make_worlds(
    templates: &[TemplateId],
    count: usize,
    furnish: bool,
    pool: &[Material],
    seed: u64,
) -> Result<Vec<GeneratedWorld>, TrainError> {
    if templates.is_empty() {
        return Err(TrainError::NoWorlds);
    }
    (0..count)
        .map(|i| {
            let t = templates[i % templates.len()];
            Ok(procgen::generate(t, furnish, pool, procgen::seed_index(seed, i as u64))?)
        })
        .collect()
}

// ======================================================================
// Supervised datasets
// ======================================================================

/// Rendered views paired with per-bin free-space labels: 1 where the bin's
/// central ray travels at least `ray_len` meters before hitting anything.
/// Sample `i` comes from world `i % worlds.len()` at an independently seeded
/// pose, so the set is reproducible item by item.
pub fn make_pretrain_dataset(
    worlds: &[GeneratedWorld],
    n: usize,
    grid: &GridSpec,
    ray_len: f64,
    rules: PoseRules,
    seed: u64,
) -> Result<Vec<TrainSample>, TrainError> {
    if worlds.is_empty() {
        return Err(TrainError::NoWorlds);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let world = &worlds[i % worlds.len()];
            let pose = procgen::sample_poses(world, rules, 1, procgen::seed_index(seed, i as u64))?[0];
            let cam = CameraPose { position: pose.position, yaw: pose.yaw, pitch: pose.pitch };
            let image = render::render_rgb(&world.scene, &cam, &grid.intrinsics)?;
            let labels = render::freespace_labels(&world.scene, &cam, grid.m, &grid.intrinsics, ray_len)?;
            let target: Vec<f32> = labels.data.iter().map(|&b| b as f32).collect();
            let mask = vec![1.0f32; target.len()];
            Ok(TrainSample { image, target, mask })
        })
        .collect()
}

/// One image with a class label, for the turn classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ImageBuf,
    pub class: usize,
}

/// Labeled turn views. Each kept pose has at least `clear_ahead` meters of
/// open space straight ahead and emits three images: the camera yawed left
/// of that heading (so the corrective turn is right), dead on (straight), and
/// yawed right (turn left). Offsets are 30 degrees.
pub fn make_turn_dataset(
    worlds: &[GeneratedWorld],
    triples: usize,
    grid: &GridSpec,
    clear_ahead: f64,
    rules: PoseRules,
    seed: u64,
) -> Result<Vec<LabeledImage>, TrainError> {
    if worlds.is_empty() {
        return Err(TrainError::NoWorlds);
    }
    let per_triple: Vec<Vec<LabeledImage>> = (0..triples)
        .into_par_iter()
        .map(|i| {
            let world = &worlds[i % worlds.len()];
            let base = procgen::seed_index(seed, i as u64);
            for attempt in 0..64u64 {
                let pose =
                    procgen::sample_poses(world, rules, 1, procgen::seed_index(base, attempt))?[0];
                let cam = CameraPose { position: pose.position, yaw: pose.yaw, pitch: 0.0 };
                let ahead = render::bin_ray_depths(&world.scene, &cam, 1, &grid.intrinsics, clear_ahead)?[0];
                if ahead.is_finite() {
                    continue;
                }
                let mut items = Vec::with_capacity(3);
                for (class, offset) in
                    [(TURN_RIGHT, FRAC_PI_6), (TURN_STRAIGHT, 0.0), (TURN_LEFT, -FRAC_PI_6)]
                {
                    let view = CameraPose { position: pose.position, yaw: pose.yaw + offset, pitch: 0.0 };
                    let image = render::render_rgb(&world.scene, &view, &grid.intrinsics)?;
                    items.push(LabeledImage { image, class });
                }
                return Ok(items);
            }
            Err(TrainError::Gen(GenError::PoseSampling(64)))
        })
        .collect::<Result<_, _>>()?;
    Ok(per_triple.into_iter().flatten().collect())
}

// ======================================================================
// Minibatch SGD
// ======================================================================

/// Minibatch SGD schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
}

fn sgd_epochs<S: Sync>(
    net: &mut NetParams,
    data: &[S],
    cfg: &SgdConfig,
    grad_fn: impl Fn(&NetParams, &S) -> Result<(f64, Grads), TrainError> + Sync,
) -> Result<Vec<EpochStats>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let batch = cfg.batch.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(procgen::seed_stream(cfg.seed, "epoch-shuffle"));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(batch) {
            let frozen: &NetParams = net;
            let results: Vec<(f64, Grads)> = chunk
                .par_iter()
                .map(|&i| grad_fn(frozen, &data[i]))
                .collect::<Result<_, _>>()?;
            let mut total: Option<Grads> = None;
            for (loss, grads) in results {
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => t.add(&grads),
                }
            }
            let mut total = total.expect("chunks are never empty");
            total.scale(1.0 / chunk.len() as f64);
            opt.step(net, &total);
        }
        if !loss_sum.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        stats.push(EpochStats { epoch, loss: loss_sum / data.len() as f64 });
    }
    Ok(stats)
}

/// Minibatch SGD over masked score-map targets. Sample order reshuffles each
/// epoch from `cfg.seed`.
pub fn pretrain(
    net: &mut NetParams,
    data: &[TrainSample],
    cfg: &SgdConfig,
) -> Result<Vec<EpochStats>, TrainError> {
    sgd_epochs(net, data, cfg, |n, s| Ok(qnet::sample_loss_and_grads(n, s)?))
}

/// Minibatch SGD over labeled images with softmax cross-entropy.
pub fn train_classifier(
    net: &mut NetParams,
    data: &[LabeledImage],
    cfg: &SgdConfig,
) -> Result<Vec<EpochStats>, TrainError> {
    sgd_epochs(net, data, cfg, |n, s| Ok(qnet::class_loss_and_grads(n, &s.image, s.class)?))
}

/// Fraction of masked bins whose 0.5-thresholded score matches the
/// 0.5-thresholded target.
pub fn scoremap_accuracy(net: &NetParams, data: &[TrainSample]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .map(|s| {
            let scores = qnet::forward(net, &s.image)?;
            let mut hit = 0usize;
            let mut total = 0usize;
            for row in 0..scores.m {
                for col in 0..scores.m {
                    let i = row * scores.m + col;
                    if s.mask[i] > 0.0 {
                        total += 1;
                        if (scores.get(row, col) >= 0.5) == (s.target[i] >= 0.5) {
                            hit += 1;
                        }
                    }
                }
            }
            Ok::<_, TrainError>((hit, total))
        })
        .collect::<Result<_, _>>()?;
    let (hit, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(TrainError::EmptyData);
    }
    Ok(hit as f64 / total as f64)
}

/// Fraction of labeled images whose highest-probability class matches the
/// label. Ties resolve to the lowest class index.
pub fn classifier_accuracy(net: &NetParams, data: &[LabeledImage]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let hits: Vec<usize> = data
        .par_iter()
        .map(|s| {
            let probs = qnet::forward_class_probs(net, &s.image)?;
            let mut arg = 0usize;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[arg] {
                    arg = i;
                }
            }
            Ok::<_, TrainError>((arg == s.class) as usize)
        })
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

// ======================================================================
// Monte Carlo rollouts
// ======================================================================

/// Outcome of one scored rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOutcome {
    /// Plain discounted return, sum of discounted step rewards.
    pub raw: f64,
    /// `raw` scaled by the return of an always-saturated rollout, so it lies
    /// in [0, 1] and a fully clear rollout scores exactly 1.
    pub value: f64,
    /// Steps flown without collision, at most horizon + 1.
    pub steps_survived: usize,
    pub collided: bool,
}

/// Fly `first`, then follow the greedy policy of `net` for `cfg.horizon`
/// further steps. Collision is absorbing with zero reward for the rest of
/// the rollout; there is no terminal value estimate.
pub fn rollout_return(
    scene: &Scene,
    start: &VehicleState,
    first: BinAction,
    net: &NetParams,
    grid: &GridSpec,
    cfg: &RewardConfig,
) -> Result<RolloutOutcome, TrainError> {
    let mut raw = 0.0f64;
    let mut best = 0.0f64;
    let mut discount = 1.0f64;
    let mut state = *start;
    let mut action = first;
    let mut steps_survived = 0usize;
    let mut collided = false;
    for k in 0..=cfg.horizon {
        if !collided {
            let out = vehicle::step(scene, &state, action, grid, cfg)?;
            raw += discount * out.reward;
            state = out.state;
            collided = out.collided;
            if !collided {
                steps_survived += 1;
                if k < cfg.horizon {
                    let image = vehicle::observe(scene, &state, grid)?;
                    action = greedy_bin(&qnet::forward(net, &image)?);
                }
            }
        }
        best += discount;
        discount *= cfg.gamma;
    }
    Ok(RolloutOutcome { raw, value: raw / best, steps_survived, collided })
}

/// Aggregates over one target-collection pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QTargetStats {
    /// Mean normalized return over all rollouts.
    pub mean_value: f64,
    /// Fraction of rollouts that ended in a collision.
    pub collision_rate: f64,
}

/// Monte Carlo action-value targets at freshly sampled states: for every
/// state, one rollout per first-action bin under the current greedy policy.
/// Targets are dense (mask all ones).
pub fn collect_qtargets(
    worlds: &[GeneratedWorld],
    net: &NetParams,
    grid: &GridSpec,
    cfg: &RewardConfig,
    rules: PoseRules,
    n_states: usize,
    seed: u64,
) -> Result<(Vec<TrainSample>, QTargetStats), TrainError> {
    if worlds.is_empty() {
        return Err(TrainError::NoWorlds);
    }
    let starts: Vec<(VehicleState, ImageBuf)> = (0..n_states)
        .into_par_iter()
        .map(|i| {
            let world = &worlds[i % worlds.len()];
            let pose = procgen::sample_poses(world, rules, 1, procgen::seed_index(seed, i as u64))?[0];
            let state = VehicleState::new(pose.position, pose.yaw);
            let image = vehicle::observe(&world.scene, &state, grid)?;
            Ok::<_, TrainError>((state, image))
        })
        .collect::<Result<_, _>>()?;
    let nb = grid.n_bins();
    let outcomes: Vec<RolloutOutcome> = (0..n_states * nb)
        .into_par_iter()
        .map(|j| {
            let (si, bi) = (j / nb, j % nb);
            let world = &worlds[si % worlds.len()];
            let first = BinAction::from_index(bi, grid.m);
            rollout_return(&world.scene, &starts[si].0, first, net, grid, cfg)
        })
        .collect::<Result<_, _>>()?;

    let mut samples = Vec::with_capacity(n_states);
    let mut value_sum = 0.0f64;
    let mut collisions = 0usize;
    for (si, (_, image)) in starts.into_iter().enumerate() {
        let slice = &outcomes[si * nb..(si + 1) * nb];
        let target: Vec<f32> = slice.iter().map(|o| o.value as f32).collect();
        for o in slice {
            value_sum += o.value;
            collisions += o.collided as usize;
        }
        samples.push(TrainSample { image, target, mask: vec![1.0f32; nb] });
    }
    let n = (n_states * nb).max(1) as f64;
    let stats = QTargetStats { mean_value: value_sum / n, collision_rate: collisions as f64 / n };
    Ok((samples, stats))
}

// ======================================================================
// Main training loop
// ======================================================================

/// Schedule for the Monte Carlo policy-evaluation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub iterations: usize,
    pub states_per_iter: usize,
    /// Regression schedule used within each iteration. Its `seed` is
    /// re-derived from `seed` and the iteration index.
    pub sgd: SgdConfig,
    pub reward: RewardConfig,
    pub rules: PoseRules,
    pub seed: u64,
}

/// One iteration's worth of progress numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterStats {
    pub iteration: usize,
    pub mean_value: f64,
    pub collision_rate: f64,
    /// Mean regression loss of the final epoch.
    pub loss: f64,
}

/// Alternate fresh Monte Carlo targets under the current greedy policy with
/// supervised regression toward them. `net` is updated in place; pass the
/// pretrained free-space net to reproduce the full pipeline.
pub fn cadrl_train(
    net: &mut NetParams,
    worlds: &[GeneratedWorld],
    grid: &GridSpec,
    cfg: &RlConfig,
) -> Result<Vec<IterStats>, TrainError> {
    let mut stats = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let (data, targets) = collect_qtargets(
            worlds,
            net,
            grid,
            &cfg.reward,
            cfg.rules,
            cfg.states_per_iter,
            procgen::seed_index(procgen::seed_stream(cfg.seed, "targets"), iteration as u64),
        )?;
        let sgd = SgdConfig {
            seed: procgen::seed_index(procgen::seed_stream(cfg.seed, "regress"), iteration as u64),
            ..cfg.sgd
        };
        let epochs = pretrain(net, &data, &sgd)?;
        let loss = epochs.last().map_or(f64::NAN, |e| e.loss);
        stats.push(IterStats {
            iteration,
            mean_value: targets.mean_value,
            collision_rate: targets.collision_rate,
            loss,
        });
    }
    Ok(stats)
}

// ======================================================================

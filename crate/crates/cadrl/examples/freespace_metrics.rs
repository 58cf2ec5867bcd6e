//! Score a free-space net against ray-cast ground truth: precision/recall
//! sweep, average precision, and mask metrics at a fixed threshold.
//!
//! Run with: cargo run --release --example freespace_metrics

use cadrl::eval;
use cadrl::procgen::{self, PoseRules};
use cadrl::qnet::{init_params, ArchSpec, HeadKind};
use cadrl::render::CameraIntrinsics;
use cadrl::trainer::{self, SgdConfig};
use cadrl::vehicle::GridSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 17u64;
    let m = 5;
    let side = 24;
    let grid = GridSpec::new(m, CameraIntrinsics::square(side, std::f64::consts::FRAC_PI_2))?;
    let rules = PoseRules::default();

    let worlds = trainer::make_worlds(
        &procgen::training_templates(),
        4,
        true,
        &procgen::train_textures(seed),
        procgen::seed_stream(seed, "worlds"),
    )?;
    let data = trainer::make_pretrain_dataset(
        &worlds,
        200,
        &grid,
        1.0,
        rules,
        procgen::seed_stream(seed, "data"),
    )?;
    let arch = ArchSpec::for_observation(side, &[6, 12], HeadKind::ScoreMap { m });
    let mut net = init_params(&arch, procgen::seed_stream(seed, "init"));
    trainer::pretrain(&mut net, &data, &SgdConfig { epochs: 5, batch: 16, lr: 0.2, momentum: 0.9, seed })?;

    let heldout = trainer::make_worlds(
        &procgen::heldout_templates(),
        2,
        true,
        &procgen::heldout_textures(seed),
        procgen::seed_stream(seed, "heldout"),
    )?;
    let set = eval::collect_fs_eval(&heldout, &net, &grid, 60, rules, procgen::seed_stream(seed, "fs"))?;
    println!("{} scored bins", set.scores.len());

    let points = eval::fs_pr_sweep(
        &set.scores,
        &set.depths,
        &eval::default_prob_thresholds(),
        &eval::default_depth_thresholds(),
    )?;
    println!("threshold  precision          recall");
    for p in points.iter().step_by(4) {
        println!(
            "{:>9.2}  {:.3} +- {:.3}  {:.3} +- {:.3}",
            p.prob_threshold, p.precision_mean, p.precision_std, p.recall_mean, p.recall_std
        );
    }

    let labels = set.labels_at(1.0);
    println!("average precision at 1 m: {:.3}", eval::average_precision(&set.scores, &labels)?);

    let mm = eval::precision_jaccard(&set.predictions_at(0.5), &labels)?;
    println!(
        "at 0.5: pixel accuracy {:.3}, jaccard free {:.3}, jaccard obstacle {:.3}",
        mm.pixel_accuracy, mm.jaccard_free, mm.jaccard_obstacle
    );
    Ok(())
}

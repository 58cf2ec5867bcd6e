//! Supervised pretraining of the free-space score map on ray-cast labels,
//! with held-out accuracy before and after.
//!
//! Run with: cargo run --release --example pretrain_freespace

use cadrl::procgen::{self, PoseRules};
use cadrl::qnet::{init_params, ArchSpec, HeadKind};
use cadrl::render::CameraIntrinsics;
use cadrl::trainer::{self, SgdConfig};
use cadrl::vehicle::GridSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 3u64;
    let m = 5;
    let side = 24;
    let grid = GridSpec::new(m, CameraIntrinsics::square(side, std::f64::consts::FRAC_PI_2))?;
    let rules = PoseRules::default();

    let train_worlds = trainer::make_worlds(
        &procgen::training_templates(),
        4,
        true,
        &procgen::train_textures(seed),
        procgen::seed_stream(seed, "train-worlds"),
    )?;
    let heldout_worlds = trainer::make_worlds(
        &procgen::heldout_templates(),
        2,
        true,
        &procgen::heldout_textures(seed),
        procgen::seed_stream(seed, "heldout-worlds"),
    )?;

    let data = trainer::make_pretrain_dataset(
        &train_worlds,
        240,
        &grid,
        1.0,
        rules,
        procgen::seed_stream(seed, "pretrain-data"),
    )?;
    let heldout = trainer::make_pretrain_dataset(
        &heldout_worlds,
        60,
        &grid,
        1.0,
        rules,
        procgen::seed_stream(seed, "heldout-data"),
    )?;

    let arch = ArchSpec::for_observation(side, &[6, 12], HeadKind::ScoreMap { m });
    let mut net = init_params(&arch, procgen::seed_stream(seed, "init"));
    println!("untrained held-out accuracy: {:.3}", trainer::scoremap_accuracy(&net, &heldout)?);

    let cfg = SgdConfig { epochs: 6, batch: 16, lr: 0.2, momentum: 0.9, seed };
    for s in trainer::pretrain(&mut net, &data, &cfg)? {
        println!("epoch {}  loss {:.4}", s.epoch, s.loss);
    }

    println!("trained held-out accuracy:   {:.3}", trainer::scoremap_accuracy(&net, &heldout)?);
    Ok(())
}

//! The full training loop in miniature: pretrain the score map, then
//! re-target it with Monte Carlo rollout returns under its own greedy policy.
//!
//! Run with: cargo run --release --example train_policy

use cadrl::procgen::{self, PoseRules};
use cadrl::qnet::{init_params, ArchSpec, HeadKind};
use cadrl::render::CameraIntrinsics;
use cadrl::trainer::{self, RlConfig, SgdConfig};
use cadrl::vehicle::{GridSpec, RewardConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 5u64;
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
        160,
        &grid,
        1.0,
        rules,
        procgen::seed_stream(seed, "pretrain-data"),
    )?;
    let arch = ArchSpec::for_observation(side, &[6, 12], HeadKind::ScoreMap { m });
    let mut net = init_params(&arch, procgen::seed_stream(seed, "init"));
    let sgd = SgdConfig { epochs: 4, batch: 16, lr: 0.2, momentum: 0.9, seed };
    let epochs = trainer::pretrain(&mut net, &data, &sgd)?;
    println!("pretrain final loss {:.4}", epochs.last().unwrap().loss);

    let cfg = RlConfig {
        iterations: 3,
        states_per_iter: 12,
        sgd: SgdConfig { epochs: 3, ..sgd },
        reward: RewardConfig::default(),
        rules,
        seed: procgen::seed_stream(seed, "rl"),
    };
    println!("iter  mean_return  collision_rate  loss");
    for s in trainer::cadrl_train(&mut net, &worlds, &grid, &cfg)? {
        println!(
            "{:>4}  {:>11.4}  {:>14.3}  {:.4}",
            s.iteration, s.mean_value, s.collision_rate, s.loss
        );
    }
    Ok(())
}

//! Fly baseline controllers over a shared deck of start states and compare
//! collision-free flight distance.
//!
//! Run with: cargo run --release --example evaluate_policies

use cadrl::eval::{self, TrialOutcome};
use cadrl::policies::{Controller, OracleFreeSpace, StraightAhead};
use cadrl::procgen::{self, PoseRules};
use cadrl::render::CameraIntrinsics;
use cadrl::trainer;
use cadrl::vehicle::{GridSpec, RewardConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 13u64;
    let grid = GridSpec::new(9, CameraIntrinsics::square(24, std::f64::consts::FRAC_PI_2))?;
    let reward = RewardConfig::default();

    let worlds = trainer::make_worlds(
        &procgen::heldout_templates(),
        3,
        true,
        &procgen::heldout_textures(seed),
        procgen::seed_stream(seed, "worlds"),
    )?;
    let setup = eval::make_eval_setup(
        worlds,
        30,
        PoseRules::default(),
        2.0,
        procgen::seed_stream(seed, "deck"),
    )?;

    let policies: Vec<Box<dyn Controller>> =
        vec![Box::new(StraightAhead), Box::new(OracleFreeSpace { ray_len: 1.0 })];

    for p in &policies {
        let results = eval::evaluate_policy(&setup, p.as_ref(), &grid, &reward, 400)?;
        let outcomes: Vec<TrialOutcome> = results.iter().map(|(o, _)| *o).collect();
        let crashes = outcomes.iter().filter(|o| o.collided).count();
        println!(
            "{:<10} mean distance {:>6.1} m, {:>2}/{} crashed, {:.0}% reach 10 m",
            p.name(),
            eval::mean_distance(&outcomes),
            crashes,
            outcomes.len(),
            100.0 * eval::fraction_reaching(&outcomes, 10.0),
        );
        for (d, f) in eval::survival_curve(&outcomes, 5.0)?.iter().take(6) {
            println!("  {:>5.1} m  {:.0}% still flying", d, 100.0 * f);
        }
    }
    Ok(())
}

//! Scratch probe for acceptance constants. Delete before release.

use cadrl::eval::{self, TrialOutcome};
use cadrl::policies::{Controller, FreeSpacePred, GreedyScore, OracleFreeSpace, StraightAhead};
use cadrl::procgen::{self, PoseRules};
use cadrl::qnet::{self, ArchSpec, HeadKind, NetParams};
use cadrl::render::CameraIntrinsics;
use cadrl::trainer::{self, RlConfig, SgdConfig};
use cadrl::vehicle::{GridSpec, RewardConfig};
use std::time::Instant;

fn pretrain_net(
    worlds: &[procgen::GeneratedWorld],
    grid: &GridSpec,
    side: usize,
    m: usize,
    seed: u64,
) -> Result<NetParams, Box<dyn std::error::Error>> {
    let data = trainer::make_pretrain_dataset(
        worlds,
        5000,
        grid,
        1.0,
        PoseRules::default(),
        procgen::seed_stream(seed, "pretrain-data"),
    )?;
    let arch = ArchSpec::for_observation(side, &[6, 12, 24], HeadKind::ScoreMap { m });
    let mut net = qnet::init_params(&arch, procgen::seed_stream(seed, "pretrain-init"));
    let sgd = SgdConfig {
        epochs: 10,
        batch: 32,
        lr: 0.2,
        momentum: 0.9,
        seed: procgen::seed_stream(seed, "pretrain-sgd"),
    };
    trainer::pretrain(&mut net, &data, &sgd)?;
    Ok(net)
}

fn run_deck(
    worlds: &[procgen::GeneratedWorld],
    label: &str,
    policies: &[(&str, &dyn Controller)],
    grid: &GridSpec,
    look: f64,
    seed: u64,
) -> Result<(), Box<dyn std::error::Error>> {
    let reward = RewardConfig::default();
    let setup =
        eval::make_eval_setup(worlds.to_vec(), 100, PoseRules::default(), look, seed)?;
    println!("  -- {label} look {look} --");
    for (name, p) in policies {
        let runs = eval::evaluate_policy(&setup, *p, grid, &reward, 1000)?;
        let outs: Vec<TrialOutcome> = runs.into_iter().map(|(o, _)| o).collect();
        println!(
            "    {name:<9} mean {:>7.2} m  reach10 {:.2}",
            eval::mean_distance(&outs),
            eval::fraction_reaching(&outs, 10.0)
        );
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let (m, side, fov_deg) = (9usize, 32usize, 115f64);
    let grid = GridSpec::new(m, CameraIntrinsics::square(side, fov_deg.to_radians()))?;

    // Part A: texture/template ablation APs at seed 7.
    {
        let seed = 7u64;
        let train_worlds = trainer::make_worlds(
            &procgen::training_templates(),
            24,
            true,
            &procgen::train_textures(seed),
            procgen::seed_stream(seed, "train-worlds"),
        )?;
        let heldout_worlds = trainer::make_worlds(
            &procgen::heldout_templates(),
            3,
            true,
            &procgen::heldout_textures(seed),
            procgen::seed_stream(seed, "heldout-worlds"),
        )?;
        let ap_of = |net: &NetParams| -> Result<f64, Box<dyn std::error::Error>> {
            let set = eval::collect_fs_eval(
                &heldout_worlds,
                net,
                &grid,
                600,
                PoseRules::default(),
                procgen::seed_stream(seed, "fs-eval"),
            )?;
            Ok(eval::average_precision(&set.scores, &set.labels_at(1.0))?)
        };
        let full = pretrain_net(&train_worlds, &grid, side, m, seed)?;
        println!("[{:.0}s] ablation FULL: ap {:.4}", t0.elapsed().as_secs_f64(), ap_of(&full)?);

        let fixed_pool = procgen::texture_pool(3, 99);
        let all = procgen::training_templates();
        let reskin = |keep: &[procgen::TemplateId]| -> Result<Vec<_>, Box<dyn std::error::Error>> {
            train_worlds
                .iter()
                .filter(|w| keep.contains(&w.template))
                .map(|w| Ok(procgen::reskin(w, &fixed_pool, 5)?))
                .collect()
        };
        let ft3_worlds = reskin(&all[..3])?;
        let ft9_worlds = reskin(&all)?;
        println!("ft3 {} worlds, ft9 {} worlds", ft3_worlds.len(), ft9_worlds.len());
        let ft3 = pretrain_net(&ft3_worlds, &grid, side, m, seed)?;
        println!("[{:.0}s] ablation FT3:  ap {:.4}", t0.elapsed().as_secs_f64(), ap_of(&ft3)?);
        let ft9 = pretrain_net(&ft9_worlds, &grid, side, m, seed)?;
        println!("[{:.0}s] ablation FT9:  ap {:.4}", t0.elapsed().as_secs_f64(), ap_of(&ft9)?);
    }

    // Part B: policy orderings across seeds, furnished and unfurnished.
    for seed in [7u64, 21, 99] {
        let train_worlds = trainer::make_worlds(
            &procgen::training_templates(),
            24,
            true,
            &procgen::train_textures(seed),
            procgen::seed_stream(seed, "train-worlds"),
        )?;
        let heldout_worlds = trainer::make_worlds(
            &procgen::heldout_templates(),
            3,
            true,
            &procgen::heldout_textures(seed),
            procgen::seed_stream(seed, "heldout-worlds"),
        )?;
        let bare_worlds = trainer::make_worlds(
            &procgen::heldout_templates(),
            3,
            false,
            &procgen::heldout_textures(seed),
            procgen::seed_stream(seed, "heldout-worlds"),
        )?;
        let net = pretrain_net(&train_worlds, &grid, side, m, seed)?;
        println!("[{:.0}s] seed {seed}: pretrain done", t0.elapsed().as_secs_f64());

        let mut q = net.clone();
        let rl = RlConfig {
            iterations: 16,
            states_per_iter: 96,
            sgd: SgdConfig { epochs: 5, batch: 32, lr: 0.05, momentum: 0.9, seed: 0 },
            reward: RewardConfig::default(),
            rules: PoseRules::default(),
            seed: procgen::seed_stream(seed, "rl"),
        };
        let stats = trainer::cadrl_train(&mut q, &train_worlds, &grid, &rl)?;
        println!(
            "[{:.0}s] seed {seed}: rl done (final collision_rate {:.3})",
            t0.elapsed().as_secs_f64(),
            stats.last().map(|s| s.collision_rate).unwrap_or(f64::NAN)
        );

        let straight = StraightAhead;
        let fsgt = OracleFreeSpace { ray_len: 1.0 };
        let fspred = FreeSpacePred { net: net.clone() };
        let cadrl = GreedyScore { net: q.clone() };
        let policies: Vec<(&str, &dyn Controller)> = vec![
            ("straight", &straight),
            ("fsgt", &fsgt),
            ("fspred", &fspred),
            ("cadrl", &cadrl),
        ];
        run_deck(
            &heldout_worlds,
            &format!("seed {seed} furnished"),
            &policies,
            &grid,
            2.0,
            procgen::seed_stream(seed, "deck"),
        )?;
        run_deck(
            &bare_worlds,
            &format!("seed {seed} unfurnished"),
            &policies,
            &grid,
            2.0,
            procgen::seed_stream(seed, "deck-unf"),
        )?;
    }
    println!("[{:.0}s] probe complete", t0.elapsed().as_secs_f64());
    Ok(())
}

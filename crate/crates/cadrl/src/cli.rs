//! Command-line pipeline: world generation, rendering, the two training
//! stages, and both evaluation protocols, all under one binary. Every
//! subcommand resolves the run configuration, then reads and writes inside a
//! run directory named by the configuration hash, so artifacts from the same
//! settings land together and reruns are byte-identical.

use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, EvalError};
use crate::policies::{
    Controller, FreeSpacePred, GreedyScore, OracleFreeSpace, StraightAhead, TurnClassifier,
};
use crate::procgen::{self, GenError, GeneratedWorld};
use crate::qnet::{self, ArchSpec, HeadKind, NetError, NetParams};
use crate::render::{self, CameraPose, RenderError};
use crate::trainer::{self, RlConfig, SgdConfig, TrainError};
use crate::vehicle;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Missing(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Gen(#[from] GenError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Net(#[from] NetError),
    #[error("{0}")]
    Render(#[from] RenderError),
}

impl CliError {
    /// Usage and schema problems exit 2, runtime failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

// ======================================================================
// Argument grammar
// ======================================================================

#[derive(Debug, Parser)]
#[command(name = "cadrl", version, about = "Hallway flight trainer and evaluator")]
pub struct Cli {
    /// Run configuration file (JSON); omits fall back to built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base directory that holds run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,

    /// Worker threads; 1 is the reproducibility reference and any other
    /// count must produce identical outputs.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and held-out worlds plus a manifest.
    Gen,
    /// Render views from a generated world file.
    Render(RenderArgs),
    /// Train the free-space net (and turn classifier) on rendered labels.
    Pretrain,
    /// Run the rollout-target training loop on top of the pretrained net.
    Train,
    /// Fly a controller over the held-out evaluation deck.
    Eval(EvalArgs),
    /// Score free-space predictions against true ray depths.
    Fseval(FsevalArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// World JSON file; defaults to the run's first held-out world.
    #[arg(long)]
    pub world: Option<PathBuf>,

    /// Explicit camera pose "x,y,z,yaw_deg[,pitch_deg]"; otherwise poses are
    /// sampled.
    #[arg(long)]
    pub at: Option<String>,

    /// Number of sampled views when --at is not given.
    #[arg(long, default_value_t = 1)]
    pub count: usize,

    /// Seed for sampled views.
    #[arg(long, default_value_t = 0)]
    pub pose_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyName {
    Cadrl,
    Fspred,
    Fsgt,
    Straight,
    Lrs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub policy: PolicyName,

    /// Checkpoint path; defaults to the run's checkpoint for the policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Keep trajectory CSVs for this many longest flights.
    #[arg(long, default_value_t = 25)]
    pub trajectories: usize,
}

#[derive(Debug, Args)]
pub struct FsevalArgs {
    /// Checkpoint path; defaults to the run's pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

// ======================================================================
// Run directory plumbing
// ======================================================================

struct RunContext {
    cfg: RunConfig,
    hash: String,
    dir: PathBuf,
}

impl RunContext {
    fn resolve(config: &Option<PathBuf>, out: &Path) -> Result<RunContext, CliError> {
        let cfg = match config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = out.join(format!("run-{hash}"));
        std::fs::create_dir_all(&dir)?;
        let cfg_path = dir.join("config.json");
        if !cfg_path.exists() {
            cfg.save(&cfg_path)?;
        }
        Ok(RunContext { cfg, hash, dir })
    }

    fn worlds_dir(&self) -> PathBuf {
        self.dir.join("worlds")
    }

    fn load_worlds(&self, split: &str) -> Result<Vec<GeneratedWorld>, CliError> {
        let dir = self.worlds_dir();
        let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(split) && n.ends_with(".json"))
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        paths.sort();
        if paths.is_empty() {
            return Err(CliError::Missing(format!(
                "no {split} worlds under {}; run the gen subcommand first",
                dir.display()
            )));
        }
        paths.iter().map(|p| Ok(GeneratedWorld::load(p)?)).collect()
    }

    fn load_net(&self, explicit: &Option<PathBuf>, default_name: &str) -> Result<NetParams, CliError> {
        let path = match explicit {
            Some(p) => p.clone(),
            None => self.dir.join(default_name),
        };
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "checkpoint {} not found; run the earlier pipeline stage or pass --checkpoint",
                path.display()
            )));
        }
        Ok(qnet::load_checkpoint(&path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    split: String,
    template: usize,
    seed: u64,
    furnished: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: String,
    seed: u64,
    worlds: Vec<ManifestEntry>,
}

// ======================================================================
// Subcommands
// ======================================================================

fn cmd_gen(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let dir = ctx.worlds_dir();
    std::fs::create_dir_all(&dir)?;
    let train_pool = procgen::train_textures(cfg.seed);
    let heldout_pool = procgen::heldout_textures(cfg.seed);
    let mut entries = Vec::new();

    let splits = [
        ("train", cfg.gen.n_train_worlds, cfg.gen.furnish_train, procgen::training_templates(), &train_pool, "train-worlds"),
        ("heldout", cfg.gen.n_heldout_worlds, cfg.gen.furnish_heldout, procgen::heldout_templates(), &heldout_pool, "heldout-worlds"),
    ];
    for (split, count, furnish, templates, pool, stream) in splits {
        let seed = procgen::seed_stream(cfg.seed, stream);
        let worlds = trainer::make_worlds(&templates, count, furnish, pool, seed)?;
        for (i, world) in worlds.iter().enumerate() {
            let name = format!("{split}-{i:03}.json");
            world.save(&dir.join(&name))?;
            entries.push(ManifestEntry {
                file: format!("worlds/{name}"),
                split: split.into(),
                template: world.template.0,
                seed: world.seed,
                furnished: world.furnished,
            });
        }
    }
    let manifest = Manifest { config: ctx.hash.clone(), seed: cfg.seed, worlds: entries };
    let f = std::fs::File::create(ctx.dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "gen: {} train + {} heldout worlds under {}",
        cfg.gen.n_train_worlds,
        cfg.gen.n_heldout_worlds,
        dir.display()
    );
    Ok(())
}

fn parse_pose(text: &str) -> Result<CameraPose, CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad --at pose '{text}': {e}")))?;
    if parts.len() != 4 && parts.len() != 5 {
        return Err(CliError::Usage(format!(
            "--at expects x,y,z,yaw_deg[,pitch_deg], got {} numbers",
            parts.len()
        )));
    }
    Ok(CameraPose {
        position: crate::math::vec3(parts[0], parts[1], parts[2]),
        yaw: parts[3].to_radians(),
        pitch: parts.get(4).copied().unwrap_or(0.0).to_radians(),
    })
}

fn cmd_render(ctx: &RunContext, args: &RenderArgs) -> Result<(), CliError> {
    let world = match &args.world {
        Some(path) => GeneratedWorld::load(path)?,
        None => ctx.load_worlds("heldout")?.remove(0),
    };
    let intr = ctx.cfg.observation.camera.intrinsics();
    let out = ctx.dir.join("render");
    std::fs::create_dir_all(&out)?;
    let (prefix, poses): (&str, Vec<CameraPose>) = match &args.at {
        Some(text) => ("view-at", vec![parse_pose(text)?]),
        None => (
            "view",
            procgen::sample_poses(&world, ctx.cfg.pose_rules, args.count, args.pose_seed)?
                .iter()
                .map(|p| CameraPose { position: p.position, yaw: p.yaw, pitch: p.pitch })
                .collect(),
        ),
    };
    for (i, pose) in poses.iter().enumerate() {
        let image = render::render_rgb(&world.scene, pose, &intr)?;
        let depth = render::render_depth(&world.scene, pose, &intr)?;
        image.write_ppm(&out.join(format!("{prefix}-{i:03}.ppm")))?;
        depth.write_raw(&out.join(format!("{prefix}-{i:03}.depth")))?;
    }
    println!("render: {} view(s) under {}", poses.len(), out.display());
    Ok(())
}

fn epoch_csv(stats: &[trainer::EpochStats], hash: &str) -> String {
    let mut out = format!("# config={hash}\nepoch,loss\n");
    for s in stats {
        out.push_str(&format!("{},{}\n", s.epoch, s.loss));
    }
    out
}

fn cmd_pretrain(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let worlds = ctx.load_worlds("train")?;
    let grid = cfg.observation.grid()?;
    let side = cfg.observation.camera.side;

    let data = trainer::make_pretrain_dataset(
        &worlds,
        cfg.train.n_pretrain_images,
        &grid,
        cfg.train.ray_len,
        cfg.pose_rules,
        procgen::seed_stream(cfg.seed, "pretrain-data"),
    )?;
    let arch = ArchSpec::for_observation(side, &cfg.train.channels, HeadKind::ScoreMap { m: grid.m });
    let mut net = qnet::init_params(&arch, procgen::seed_stream(cfg.seed, "pretrain-init"));
    let sgd = SgdConfig {
        epochs: cfg.train.pretrain_epochs,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        momentum: cfg.train.momentum,
        seed: procgen::seed_stream(cfg.seed, "pretrain-sgd"),
    };
    let stats = trainer::pretrain(&mut net, &data, &sgd)?;
    qnet::save_checkpoint(&net, &ctx.dir.join("pretrain.ckpt"))?;
    std::fs::write(ctx.dir.join("pretrain_log.csv"), epoch_csv(&stats, &ctx.hash))?;
    let final_loss = stats.last().map_or(f64::NAN, |s| s.loss);
    println!(
        "pretrain: {} images, {} epochs, final loss {final_loss:.4}",
        data.len(),
        stats.len()
    );

    if cfg.train.turn_triples > 0 {
        let turns = trainer::make_turn_dataset(
            &worlds,
            cfg.train.turn_triples,
            &grid,
            2.5,
            cfg.pose_rules,
            procgen::seed_stream(cfg.seed, "turn-data"),
        )?;
        let arch = ArchSpec::for_observation(side, &cfg.train.channels, HeadKind::Softmax { classes: 3 });
        let mut lrs = qnet::init_params(&arch, procgen::seed_stream(cfg.seed, "lrs-init"));
        let sgd = SgdConfig { seed: procgen::seed_stream(cfg.seed, "lrs-sgd"), ..sgd };
        let stats = trainer::train_classifier(&mut lrs, &turns, &sgd)?;
        qnet::save_checkpoint(&lrs, &ctx.dir.join("lrs.ckpt"))?;
        std::fs::write(ctx.dir.join("lrs_log.csv"), epoch_csv(&stats, &ctx.hash))?;
        let acc = trainer::classifier_accuracy(&lrs, &turns)?;
        println!("pretrain: turn classifier on {} images, train accuracy {acc:.3}", turns.len());
    }
    Ok(())
}

fn cmd_train(ctx: &RunContext) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let worlds = ctx.load_worlds("train")?;
    let grid = cfg.observation.grid()?;
    let mut net = ctx.load_net(&None, "pretrain.ckpt")?;
    qnet::ensure_scoremap_compat(&net, grid.m, grid.intrinsics.width, grid.intrinsics.height)?;

    let rl = RlConfig {
        iterations: cfg.train.n_rl_iterations,
        states_per_iter: cfg.train.states_per_iteration,
        sgd: SgdConfig {
            epochs: cfg.train.rl_epochs,
            batch: cfg.train.batch,
            lr: cfg.train.rl_lr,
            momentum: cfg.train.momentum,
            seed: 0,
        },
        reward: cfg.reward,
        rules: cfg.pose_rules,
        seed: procgen::seed_stream(cfg.seed, "rl"),
    };
    let mut log = format!("# config={}\niteration,mean_return,loss,collision_rate\n", ctx.hash);
    let mut stats = Vec::new();
    for iteration in 0..rl.iterations {
        let one = RlConfig { iterations: 1, seed: procgen::seed_index(rl.seed, iteration as u64), ..rl.clone() };
        let mut iter_stats = trainer::cadrl_train(&mut net, &worlds, &grid, &one)?;
        let mut s = iter_stats.remove(0);
        s.iteration = iteration;
        log.push_str(&format!("{},{},{},{}\n", s.iteration, s.mean_value, s.loss, s.collision_rate));
        qnet::save_checkpoint(&net, &ctx.dir.join(format!("qnet-iter-{iteration:03}.ckpt")))?;
        stats.push(s);
    }
    qnet::save_checkpoint(&net, &ctx.dir.join("qnet.ckpt"))?;
    std::fs::write(ctx.dir.join("train_log.csv"), log)?;
    if let Some(s) = stats.last() {
        println!(
            "train: {} iterations, mean return {:.3}, collision rate {:.3}",
            stats.len(),
            s.mean_value,
            s.collision_rate
        );
    } else {
        println!("train: 0 iterations, checkpoint copied through");
    }
    Ok(())
}

fn build_controller(
    ctx: &RunContext,
    name: PolicyName,
    checkpoint: &Option<PathBuf>,
) -> Result<Box<dyn Controller>, CliError> {
    let grid = ctx.cfg.observation.grid()?;
    let check = |net: &NetParams| {
        qnet::ensure_scoremap_compat(net, grid.m, grid.intrinsics.width, grid.intrinsics.height)
    };
    Ok(match name {
        PolicyName::Cadrl => {
            let net = ctx.load_net(checkpoint, "qnet.ckpt")?;
            check(&net)?;
            Box::new(GreedyScore { net })
        }
        PolicyName::Fspred => {
            let net = ctx.load_net(checkpoint, "pretrain.ckpt")?;
            check(&net)?;
            Box::new(FreeSpacePred { net })
        }
        PolicyName::Fsgt => Box::new(OracleFreeSpace { ray_len: ctx.cfg.train.ray_len }),
        PolicyName::Straight => Box::new(StraightAhead),
        PolicyName::Lrs => Box::new(TurnClassifier { net: ctx.load_net(checkpoint, "lrs.ckpt")? }),
    })
}

fn cmd_eval(ctx: &RunContext, args: &EvalArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let controller = build_controller(ctx, args.policy, &args.checkpoint)?;
    let worlds = ctx.load_worlds("heldout")?;
    let grid = cfg.observation.grid()?;
    let setup = eval::make_eval_setup(
        worlds,
        cfg.eval.n_init_points,
        cfg.pose_rules,
        cfg.eval.launch_clear_m,
        procgen::seed_stream(cfg.seed, "eval-deck"),
    )?;
    let runs = eval::evaluate_policy(&setup, controller.as_ref(), &grid, &cfg.reward, cfg.eval.max_steps)?;
    let outcomes: Vec<eval::TrialOutcome> = runs.iter().map(|(o, _)| *o).collect();
    let curve = eval::survival_curve(&outcomes, cfg.eval.curve_spacing_m)?;

    let out = ctx.dir.join(format!("eval-{}", controller.name()));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("outcomes.csv"), eval::outcomes_csv(&outcomes, &ctx.hash))?;
    std::fs::write(out.join("survival.csv"), eval::survival_csv(&curve, &ctx.hash))?;

    let mut ranked: Vec<usize> = (0..outcomes.len()).collect();
    ranked.sort_by(|&a, &b| {
        outcomes[b]
            .distance_m
            .partial_cmp(&outcomes[a].distance_m)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &trial in ranked.iter().take(args.trajectories) {
        let csv = vehicle::trajectory_csv(&runs[trial].1, &ctx.hash);
        std::fs::write(out.join(format!("traj-{trial:03}.csv")), csv)?;
    }
    let collisions = outcomes.iter().filter(|o| o.collided).count();
    println!(
        "eval {}: {} trials, mean distance {:.1} m, {} collisions, outputs under {}",
        controller.name(),
        outcomes.len(),
        eval::mean_distance(&outcomes),
        collisions,
        out.display()
    );
    Ok(())
}

fn cmd_fseval(ctx: &RunContext, args: &FsevalArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let net = ctx.load_net(&args.checkpoint, "pretrain.ckpt")?;
    let worlds = ctx.load_worlds("heldout")?;
    let grid = cfg.observation.grid()?;
    qnet::ensure_scoremap_compat(&net, grid.m, grid.intrinsics.width, grid.intrinsics.height)?;
    let set = eval::collect_fs_eval(
        &worlds,
        &net,
        &grid,
        cfg.eval.n_fs_images,
        cfg.pose_rules,
        procgen::seed_stream(cfg.seed, "fs-eval"),
    )?;
    let table = eval::fs_pr_sweep(
        &set.scores,
        &set.depths,
        &eval::default_prob_thresholds(),
        &eval::default_depth_thresholds(),
    )?;
    let metrics = eval::precision_jaccard(&set.predictions_at(0.5), &set.labels_at(cfg.train.ray_len))?;

    let out = ctx.dir.join("fseval");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("pr.csv"), eval::pr_csv(&table, &ctx.hash))?;
    std::fs::write(out.join("summary.csv"), eval::mask_metrics_csv(&metrics, &ctx.hash))?;
    println!(
        "fseval: {} bins, pixel accuracy {:.3}, Jaccard free {:.3} / obstacle {:.3}",
        set.scores.len(),
        metrics.pixel_accuracy,
        metrics.jaccard_free,
        metrics.jaccard_obstacle
    );
    Ok(())
}

// ======================================================================
// Entry points
// ======================================================================

/// Execute a parsed command line.
pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if cli.workers > 1 {
        // Ignore the error when a pool already exists (repeat dispatch in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    } else {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let ctx = RunContext::resolve(&cli.config, &cli.out)?;
    match &cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Render(args) => cmd_render(&ctx, args),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Fseval(args) => cmd_fseval(&ctx, args),
    }
}

/// Parse `std::env::args`, run, and report; the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_strings_parse_or_fail_loudly() {
        let pose = parse_pose("1,2,1.5,90").unwrap();
        assert_eq!(pose.position, crate::math::vec3(1.0, 2.0, 1.5));
        assert!((pose.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(pose.pitch, 0.0);
        let pose = parse_pose("0, 0, 1, 180, -10").unwrap();
        assert!(pose.pitch < 0.0);
        assert!(parse_pose("1,2,3").is_err());
        assert!(parse_pose("a,b,c,d").is_err());
    }

    #[test]
    fn exit_codes_separate_usage_from_runtime() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Missing("x".into()).exit_code(), 1);
        let schema: CliError = ConfigError::Invalid("bad".into()).into();
        assert_eq!(schema.exit_code(), 2);
    }

    #[test]
    fn argument_grammar_accepts_the_documented_forms() {
        let cli = Cli::try_parse_from(["cadrl", "gen"]).unwrap();
        assert!(matches!(cli.command, Command::Gen));
        assert_eq!(cli.workers, 1);

        let cli = Cli::try_parse_from([
            "cadrl", "eval", "--policy", "straight", "--workers", "4", "--out", "o",
        ])
        .unwrap();
        assert_eq!(cli.workers, 4);
        match cli.command {
            Command::Eval(args) => assert_eq!(args.policy, PolicyName::Straight),
            _ => panic!("wrong subcommand"),
        }

        assert!(Cli::try_parse_from(["cadrl", "explode"]).is_err());
        assert!(Cli::try_parse_from(["cadrl", "eval", "--policy", "psychic"]).is_err());
    }
}

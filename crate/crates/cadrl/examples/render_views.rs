//! Render camera views from a generated world: color, depth, and the
//! free-space label grid the trainer regresses onto.
//!
//! Run with: cargo run --release --example render_views

use cadrl::procgen::{self, PoseRules, TemplateId};
use cadrl::render::{self, CameraIntrinsics, CameraPose};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 11u64;
    let pool = procgen::train_textures(seed);
    let world = procgen::generate(TemplateId(2), true, &pool, seed)?;

    let intr = CameraIntrinsics::square(96, std::f64::consts::FRAC_PI_2);
    let poses = procgen::sample_poses(&world, PoseRules::default(), 3, seed)?;

    let dir = std::env::temp_dir().join("cadrl-example-views");
    std::fs::create_dir_all(&dir)?;

    for (i, p) in poses.iter().enumerate() {
        let cam = CameraPose { position: p.position, yaw: p.yaw, pitch: p.pitch };
        let image = render::render_rgb(&world.scene, &cam, &intr)?;
        let depth = render::render_depth(&world.scene, &cam, &intr)?;
        let labels = render::freespace_labels(&world.scene, &cam, 9, &intr, 1.0)?;

        image.write_ppm(&dir.join(format!("view-{i}.ppm")))?;
        depth.write_raw(&dir.join(format!("view-{i}.depth")))?;

        println!(
            "view {i}: pos ({:.2}, {:.2}, {:.2}) yaw {:+.0} deg, {:.0}% of bins free",
            p.position.x,
            p.position.y,
            p.position.z,
            p.yaw.to_degrees(),
            100.0 * labels.free_fraction(),
        );
        for r in 0..labels.m {
            let row: String =
                (0..labels.m).map(|c| if labels.get(r, c) == 1 { '.' } else { '#' }).collect();
            println!("  {row}");
        }
    }

    println!("\nwrote ppm and depth files to {}", dir.display());
    Ok(())
}

//! Generate a handful of randomized hallway worlds and print layout stats.
//!
//! Run with: cargo run --release --example generate_worlds

use cadrl::procgen::{self, TemplateId, CELL, TEMPLATE_COUNT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 7u64;
    let pool = procgen::train_textures(seed);

    println!("{} templates, {} textures in the training pool", TEMPLATE_COUNT, pool.len());
    println!("template  kind        walls  obstacles  free m^2");

    for t in 0..TEMPLATE_COUNT {
        let world = procgen::generate(TemplateId(t), true, &pool, procgen::seed_index(seed, t as u64))?;
        let free_area = world.plan.free_count() as f64 * CELL * CELL;
        println!(
            "{:>8}  {:<10?}  {:>5}  {:>9}  {:>8.1}",
            t,
            world.template.kind(),
            world.scene.walls.len(),
            world.scene.obstacles.len(),
            free_area,
        );
    }

    let dir = std::env::temp_dir().join("cadrl-example-worlds");
    std::fs::create_dir_all(&dir)?;
    let world = procgen::generate(TemplateId(0), true, &pool, seed)?;
    let path = dir.join("world.json");
    world.save(&path)?;
    let back = procgen::GeneratedWorld::load(&path)?;
    assert_eq!(world, back);
    println!("\nsaved and reloaded {}", path.display());
    Ok(())
}

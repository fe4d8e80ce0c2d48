//! Write one PGM per class plus a tiled grid from a trained generator.
//!
//! cargo run --example visualize -- out/generator.ckpt out/vis

use std::path::PathBuf;

use vizgen::io::{tile, write_image, SourceRange};

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let generator = PathBuf::from(args.next().unwrap_or_else(|| "out/generator.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/vis".into()));
    std::fs::create_dir_all(&out)?;

    let g = vizgen::cli::load_generator(&generator)?;
    let mut images = Vec::new();
    for class in 0..g.classes() {
        let v = g.generate(class)?;
        write_image(&v, out.join(format!("class_{class}.pgm")), SourceRange::Signed)?;
        images.push(v);
    }
    write_image(&tile(&images, 5, 2, -1.0)?, out.join("grid.pgm"), SourceRange::Signed)?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

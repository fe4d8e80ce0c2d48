//! Perturb one test image with a class visualization and compare labels.
//!
//! cargo run --example attack -- out/classifier.ckpt out/generator.ckpt data/mnist [index] [class] [e]

use std::path::PathBuf;

use vizgen::adversarial::perturb_unit;
use vizgen::io::{LabeledDataset, Split};

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut path = |default: &str| PathBuf::from(args.next().unwrap_or_else(|| default.into()));
    let d = vizgen::cli::load_classifier(&path("out/classifier.ckpt"))?;
    let g = vizgen::cli::load_generator(&path("out/generator.ckpt"))?;
    let data = LabeledDataset::load_idx(path("data/mnist"), Split::Test, 10)?;
    let mut num = |default: f32| args.next().map_or(default, |a| a.parse().expect("number"));
    let (index, class, e) = (num(0.0) as usize, num(3.0) as usize, num(32.0));

    let (image, label) = data.get(index).expect("index in range");
    let v = g.generate(class)?;
    let perturbed = perturb_unit(image, &v, e)?;
    println!(
        "image {index} (label {label}): clean {} -> perturbed {} with V_{class} at e = {e}",
        d.predict_label(image)?,
        d.predict_label(&perturbed)?
    );
    Ok(())
}

//! Fooling rate over a coefficient sweep, next to a random-noise control.
//!
//! cargo run --example sweep -- out/classifier.ckpt out/generator.ckpt data/mnist [limit]

use std::path::PathBuf;

use vizgen::adversarial::{spearman, sweep, VisualizationBank};
use vizgen::io::{LabeledDataset, Split};

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut path = |default: &str| PathBuf::from(args.next().unwrap_or_else(|| default.into()));
    let d = vizgen::cli::load_classifier(&path("out/classifier.ckpt"))?;
    let g = vizgen::cli::load_generator(&path("out/generator.ckpt"))?;
    let data = LabeledDataset::load_idx(path("data/mnist"), Split::Test, 10)?;
    let limit = args.next().map_or(1000, |a| a.parse().expect("limit"));
    let images = data.take(limit);

    let coefficients = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
    let bank = VisualizationBank::from_generator(&g)?;
    let noise = VisualizationBank::random_noise(g.classes(), &d.input_shape(), 7)?;
    let result = sweep(&d, &images, &bank, &coefficients)?;
    let control = sweep(&d, &images, &noise, &coefficients)?;
    println!("e     fooling   targeted  noise");
    for (r, n) in result.rows.iter().zip(&control.rows) {
        println!(
            "{:<5} {:.6}  {:.6}  {:.6}",
            r.coefficient, r.fooling_rate, r.targeted_rate, n.fooling_rate
        );
    }
    let es: Vec<f64> = result.rows[1..].iter().map(|r| r.coefficient as f64).collect();
    let rates: Vec<f64> = result.rows[1..].iter().map(|r| r.fooling_rate).collect();
    println!("spearman {:.3}", spearman(&es, &rates));
    Ok(())
}

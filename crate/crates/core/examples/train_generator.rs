//! Train a class-conditioned generator against a frozen classifier.
//!
//! cargo run --example train_generator -- out/classifier.ckpt out/generator.ckpt [steps]

use std::path::PathBuf;

use vizgen::trainer::{train_generator, TrainConfig};
use vizgen::{Generator, GeneratorConfig};

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let classifier = PathBuf::from(args.next().unwrap_or_else(|| "out/classifier.ckpt".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/generator.ckpt".into()));
    let steps = args.next().map_or(10_000, |a| a.parse().expect("steps"));

    let d = vizgen::cli::load_classifier(&classifier)?;
    let before = d.checksum();
    let config = GeneratorConfig::for_classifier(&d);
    let mut g = Generator::build(config.clone(), 1)?;
    let trace = train_generator(&mut g, &d, &TrainConfig { steps, ..Default::default() })?;
    println!(
        "{} steps, mean loss first 10% {:.4}, last 10% {:.4}",
        trace.len(),
        trace.head_mean(),
        trace.tail_mean()
    );
    assert_eq!(before, d.checksum());

    for class in 0..g.classes() {
        let image = vizgen::generator::rescale(&g.generate(class)?);
        println!("class {class}: classifier says {}", d.predict_label(&image)?);
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    g.save(&out)?;
    std::fs::write(
        vizgen::cli::sidecar(&out),
        serde_json::to_string_pretty(&config).expect("config serializes"),
    )?;
    Ok(())
}

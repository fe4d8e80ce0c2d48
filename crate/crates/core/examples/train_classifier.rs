//! Train the digit classifier on MNIST and save it with its config sidecar.
//!
//! cargo run --example train_classifier -- data/mnist out/classifier.ckpt [epochs]

use std::path::PathBuf;

use vizgen::discriminator::ClassifierTrainConfig;
use vizgen::io::{LabeledDataset, Split};
use vizgen::{Classifier, ClassifierConfig};

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let data = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/classifier.ckpt".into()));
    let epochs = args.next().map_or(5, |a| a.parse().expect("epochs"));

    let train = LabeledDataset::load_idx(&data, Split::Train, 10)?;
    let test = LabeledDataset::load_idx(&data, Split::Test, 10)?;
    let config = ClassifierConfig::desk([1, 28, 28], 10);
    let mut d = Classifier::build(config.clone(), 1)?;
    let report = d.train(
        &train,
        &test,
        &ClassifierTrainConfig {
            epochs,
            target_accuracy: Some(0.97),
            ..Default::default()
        },
    )?;
    for e in &report.epochs {
        println!("epoch {} loss {:.4} held-out {:.4}", e.epoch, e.mean_loss, e.held_out_accuracy);
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    d.save(&out)?;
    std::fs::write(
        vizgen::cli::sidecar(&out),
        serde_json::to_string_pretty(&config).expect("config serializes"),
    )?;
    println!("saved {} (sha256 {})", out.display(), d.checksum());
    Ok(())
}

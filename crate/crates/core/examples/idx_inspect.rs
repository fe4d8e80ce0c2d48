//! Parse the MNIST IDX files and print per-class counts and pixel stats.
//!
//! cargo run --example idx_inspect -- data/mnist

use vizgen::io::{LabeledDataset, Split};

fn main() -> vizgen::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into());
    for split in [Split::Train, Split::Test] {
        let data = LabeledDataset::load_idx(&dir, split, 10)?;
        let mut counts = [0usize; 10];
        let mut mean = 0.0f64;
        for (img, label) in data.iter() {
            counts[label] += 1;
            mean += img.sum() as f64 / img.len() as f64;
        }
        println!(
            "{split:?}: {} images, mean pixel {:.4}, per class {counts:?}",
            data.len(),
            mean / data.len() as f64
        );
    }
    Ok(())
}

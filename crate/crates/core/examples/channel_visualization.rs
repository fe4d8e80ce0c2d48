//! Visualize the channels of one classifier layer and report how strongly
//! each image excites its own channel compared with random noise.
//!
//! cargo run --example channel_visualization -- out/classifier.ckpt [layer] [steps]

use std::path::PathBuf;

use vizgen::tensor::derive_seed;
use vizgen::trainer::{train_channel_generator, TrainConfig};
use vizgen::{Generator, GeneratorConfig, Tensor};

fn main() -> vizgen::Result<()> {
    let mut args = std::env::args().skip(1);
    let classifier = PathBuf::from(args.next().unwrap_or_else(|| "out/classifier.ckpt".into()));
    let layer = args.next().map_or(4, |a| a.parse().expect("layer"));
    let steps = args.next().map_or(10_000, |a| a.parse().expect("steps"));

    let d = vizgen::cli::load_classifier(&classifier)?;
    let head = d.channel_head(layer)?;
    let mut g = Generator::build(GeneratorConfig::desk(head.channels(), d.input_shape()), 3)?;
    train_channel_generator(&mut g, &d, layer, &TrainConfig { steps, ..Default::default() })?;

    let noise: Vec<Tensor> = (0..100)
        .map(|i| Tensor::random_uniform(&d.input_shape(), derive_seed(77, i), 0.0, 1.0))
        .collect::<vizgen::Result<_>>()?;
    let mut baseline = vec![0.0f32; head.channels()];
    for img in &noise {
        for (b, m) in baseline.iter_mut().zip(head.channel_means(img)?.data()) {
            *b += m / noise.len() as f32;
        }
    }
    for c in 0..head.channels() {
        let own = head.channel_means(&vizgen::generator::rescale(&g.generate(c)?))?.data()[c];
        println!("channel {c:>2}: mean {own:.4} vs noise {:.4}", baseline[c]);
    }
    Ok(())
}

//! Label-conditioned deconvolutional generator.
//!
//! A learned constant seed tensor is upsampled by a stack of transposed
//! convolutions. The class id reaches the network only through
//! [`ClassInjectionBlock`]s: each block looks up a dense class embedding,
//! projects it to the stage's channel count and adds it to every spatial
//! position of the stage input. The last stage ends in `tanh`, so images lie
//! in `[-1, 1]`, and is centre-cropped to the target shape if it overshoots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::Classifier;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{derive_seed, ParamSet, Parameter, Tape, Tensor, Var};

/// One transposed-convolution upsampling stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl StageSpec {
    /// 4x4 kernel, stride 2, padding 1: doubles the spatial extent.
    pub fn double(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }

    fn output_extent(&self, extent: usize) -> Option<usize> {
        ((extent - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
            .filter(|&e| e > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub classes: usize,
    /// `[channels, height, width]` of the learned seed tensor.
    pub base: [usize; 3],
    pub stages: Vec<StageSpec>,
    /// Stages whose input receives class information.
    pub inject_at: Vec<usize>,
    pub embedding_width: usize,
    /// Shape of generated images; must equal the classifier's input shape.
    pub output: [usize; 3],
}

impl GeneratorConfig {
    /// 64x4x4 seed, three doubling stages (64 -> 32 -> 16 -> C) to 32x32,
    /// cropped to the target; injection at every stage, embedding width 64.
    pub fn desk(classes: usize, output: [usize; 3]) -> Self {
        Self {
            classes,
            base: [64, 4, 4],
            stages: vec![
                StageSpec::double(32),
                StageSpec::double(16),
                StageSpec::double(output[0]),
            ],
            inject_at: vec![0, 1, 2],
            embedding_width: 64,
            output,
        }
    }

    pub fn for_classifier(classifier: &Classifier) -> Self {
        Self::desk(classifier.classes(), classifier.input_shape())
    }

    /// Input shape of each stage followed by the uncropped output shape.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.base.contains(&0) {
            return Err(Error::Config(format!("seed shape {:?} has a zero extent", self.base)));
        }
        let mut shapes = vec![self.base];
        for (i, s) in self.stages.iter().enumerate() {
            let [_, h, w] = *shapes.last().expect("nonempty");
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("stage {i} has a zero hyperparameter")));
            }
            match (s.output_extent(h), s.output_extent(w)) {
                (Some(oh), Some(ow)) => shapes.push([s.out_channels, oh, ow]),
                _ => {
                    return Err(Error::Config(format!(
                        "stage {i} padding leaves no output"
                    )))
                }
            }
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if self.embedding_width == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.inject_at.is_empty() {
            return Err(Error::Config("the injection set must not be empty".into()));
        }
        let mut seen = vec![false; self.stages.len()];
        for &s in &self.inject_at {
            if s >= self.stages.len() || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Config(format!(
                    "injection stage {s} is out of range or repeated"
                )));
            }
        }
        let out = *self.stage_shapes()?.last().expect("nonempty");
        if out[0] != self.output[0] || out[1] < self.output[1] || out[2] < self.output[2] {
            return Err(Error::Config(format!(
                "stages produce {out:?}, which cannot be cropped to {:?}",
                self.output
            )));
        }
        Ok(())
    }
}

/// Parameter indices of one injection block inside the generator's set.
#[derive(Clone, Debug)]
pub struct ClassInjectionBlock {
    stage: usize,
    classes: usize,
    channels: usize,
    embedding: usize,
    proj_weight: usize,
    proj_bias: usize,
}

impl ClassInjectionBlock {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes {
            return Err(Error::InvalidClass {
                class,
                classes: self.classes,
            });
        }
        Ok(())
    }

    /// Records `features + (W · embedding[class] + b)` broadcast over space.
    pub fn record(&self, tape: &mut Tape, params: &ParamSet, class: usize, features: Var) -> Result<Var> {
        self.check_class(class)?;
        let c = tape.value(features).shape().first().copied().unwrap_or(0);
        if tape.value(features).rank() != 3 || c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "block projects to {} channels, features have shape {:?}",
                self.channels,
                tape.value(features).shape()
            )));
        }
        let table = tape.param(params.get(self.embedding));
        let code = tape.row(table, class)?;
        let w = tape.param(params.get(self.proj_weight));
        let b = tape.param(params.get(self.proj_bias));
        let projected = tape.linear(code, w, b)?;
        tape.add_channel_bias(features, projected)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    spec: StageSpec,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    base: usize,
    stages: Vec<Stage>,
    blocks: Vec<Option<ClassInjectionBlock>>,
}

impl Generator {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.stage_shapes()?;
        let mut params = ParamSet::new();
        let mut stream = 0u64;
        let mut next_seed = || {
            stream += 1;
            derive_seed(seed, stream)
        };

        let base = params.push(Parameter::new(
            "base",
            Tensor::random_normal(&config.base, next_seed(), 1.0)?,
        ))?;
        let mut blocks = vec![None; config.stages.len()];
        let mut stages = Vec::with_capacity(config.stages.len());
        let d = config.embedding_width;
        for (i, spec) in config.stages.iter().enumerate() {
            let c_in = shapes[i][0];
            if config.inject_at.contains(&i) {
                let embedding = params.push(Parameter::new(
                    format!("inject.{i}.embedding"),
                    Tensor::random_normal(&[config.classes, d], next_seed(), 1.0)?,
                ))?;
                let proj_weight = params.push(Parameter::new(
                    format!("inject.{i}.proj.weight"),
                    Tensor::random_normal(&[c_in, d], next_seed(), (1.0 / d as f32).sqrt())?,
                ))?;
                let proj_bias = params.push(Parameter::new(
                    format!("inject.{i}.proj.bias"),
                    Tensor::zeros(&[c_in])?,
                ))?;
                blocks[i] = Some(ClassInjectionBlock {
                    stage: i,
                    classes: config.classes,
                    channels: c_in,
                    embedding,
                    proj_weight,
                    proj_bias,
                });
            }
            // He init with the effective fan-in of a strided transposed conv.
            let fan_in = (c_in * spec.kernel * spec.kernel / (spec.stride * spec.stride)).max(1);
            let weight = params.push(Parameter::new(
                format!("stages.{i}.weight"),
                Tensor::random_normal(
                    &[c_in, spec.out_channels, spec.kernel, spec.kernel],
                    next_seed(),
                    (2.0 / fan_in as f32).sqrt(),
                )?,
            ))?;
            let bias = params.push(Parameter::new(
                format!("stages.{i}.bias"),
                Tensor::zeros(&[spec.out_channels])?,
            ))?;
            stages.push(Stage {
                spec: *spec,
                weight,
                bias,
            });
        }
        Ok(Self {
            config,
            params,
            base,
            stages,
            blocks,
        })
    }

    pub fn load(config: GeneratorConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut g = Self::build(config, 0)?;
        io::restore(&mut g.params, &io::load_checkpoint(path)?)?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_checkpoint(&self.params, path)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        io::param_checksum(&self.params)
    }

    pub fn injection_blocks(&self) -> impl Iterator<Item = &ClassInjectionBlock> {
        self.blocks.iter().flatten()
    }

    pub fn injection_block(&self, stage: usize) -> Option<&ClassInjectionBlock> {
        self.blocks.get(stage).and_then(Option::as_ref)
    }

    /// Fails unless generated images fit `classifier`'s input and the class
    /// counts agree.
    pub fn check_compatible(&self, classifier: &Classifier) -> Result<()> {
        if self.config.output != classifier.input_shape() {
            return Err(Error::Config(format!(
                "generator emits {:?}, classifier expects {:?}",
                self.config.output,
                classifier.input_shape()
            )));
        }
        if self.config.classes != classifier.classes() {
            return Err(Error::Config(format!(
                "generator has {} classes, classifier has {}",
                self.config.classes,
                classifier.classes()
            )));
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.config.classes {
            return Err(Error::InvalidClass {
                class,
                classes: self.config.classes,
            });
        }
        Ok(())
    }

    fn block_at(&self, stage: usize) -> Result<&ClassInjectionBlock> {
        self.injection_block(stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} has no injection block")))
    }

    /// Row `class` of the stage's embedding table.
    pub fn encode_class(&self, stage: usize, class: usize) -> Result<Tensor> {
        let block = self.block_at(stage)?;
        block.check_class(class)?;
        let table = self.params.get(block.embedding).value();
        let d = table.shape()[1];
        Ok(Tensor::from_vec(table.data()[class * d..(class + 1) * d].to_vec()))
    }

    /// Applies the stage's injection block to a standalone feature map.
    pub fn inject(&self, stage: usize, class: usize, features: &Tensor) -> Result<Tensor> {
        let block = self.block_at(stage)?;
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = block.record(&mut tape, &self.params, class, f)?;
        Ok(tape.value(out).clone())
    }

    /// Records the generator for `class` and returns the image node.
    pub fn forward(&self, tape: &mut Tape, class: usize) -> Result<Var> {
        self.forward_with(tape, &self.params, class)
    }

    /// [`Generator::forward`] reading values from `params`, which must have
    /// this generator's layout (e.g. a clone of [`Generator::params`]).
    pub fn forward_with(&self, tape: &mut Tape, params: &ParamSet, class: usize) -> Result<Var> {
        self.check_class(class)?;
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "generator has {} parameters, set has {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut x = tape.param(params.get(self.base));
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(block) = &self.blocks[i] {
                x = block.record(tape, params, class, x)?;
            }
            let w = tape.param(params.get(stage.weight));
            let b = tape.param(params.get(stage.bias));
            x = tape.conv2d_transpose(x, w, stage.spec.stride, stage.spec.padding)?;
            x = tape.add_channel_bias(x, b)?;
            x = if i == last { tape.tanh(x) } else { tape.relu(x) };
        }
        let shape = tape.value(x).shape().to_vec();
        let [_, h, w] = self.config.output;
        if shape[1] != h || shape[2] != w {
            x = tape.crop(x, (shape[1] - h) / 2, (shape[2] - w) / 2, h, w)?;
        }
        Ok(x)
    }

    /// The visualization image for `class`, values in `[-1, 1]`.
    pub fn generate(&self, class: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = self.forward(&mut tape, class)?;
        Ok(tape.value(x).clone())
    }
}

/// Maps generator output from `[-1, 1]` onto the classifier range `[0, 1]`.
pub fn rescale(image: &Tensor) -> Tensor {
    image.map(|v| (v + 1.0) * 0.5)
}

pub(crate) fn record_rescale(tape: &mut Tape, image: Var) -> Var {
    tape.affine(image, 0.5, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            classes: 4,
            base: [6, 2, 2],
            stages: vec![StageSpec::double(4), StageSpec::double(1)],
            inject_at: vec![0, 1],
            embedding_width: 5,
            output: [1, 7, 7],
        }
    }

    #[test]
    fn desk_generator_emits_classifier_shape() {
        let g = Generator::build(GeneratorConfig::desk(10, [1, 28, 28]), 3).unwrap();
        for class in [0, 9] {
            let img = g.generate(class).unwrap();
            assert_eq!(img.shape(), &[1, 28, 28]);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(matches!(g.generate(10), Err(Error::InvalidClass { .. })));
    }

    #[test]
    fn build_is_deterministic_and_trainable() {
        let a = Generator::build(small(), 5).unwrap();
        let b = Generator::build(small(), 5).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.params().iter().all(|p| p.trainable()));
        assert_eq!(a.generate(2).unwrap(), a.generate(2).unwrap());
    }

    #[test]
    fn config_invariants() {
        let mut c = small();
        c.inject_at.clear();
        assert!(matches!(Generator::build(c, 0), Err(Error::Config(_))));
        let mut c = small();
        c.inject_at = vec![2];
        assert!(Generator::build(c, 0).is_err());
        let mut c = small();
        c.output = [1, 9, 9];
        assert!(Generator::build(c, 0).is_err());
        let mut c = small();
        c.output = [3, 7, 7];
        assert!(Generator::build(c, 0).is_err());
    }

    #[test]
    fn encode_class_reads_embedding_rows() {
        let g = Generator::build(small(), 1).unwrap();
        let table = g.params().by_name("inject.0.embedding").unwrap().value().clone();
        assert_eq!(g.encode_class(0, 0).unwrap().data(), &table.data()[..5]);
        assert_ne!(g.encode_class(0, 1).unwrap(), g.encode_class(0, 2).unwrap());
        assert!(matches!(g.encode_class(0, 4), Err(Error::InvalidClass { .. })));
    }

    #[test]
    fn inject_is_broadcast_add_of_projection() {
        let g = Generator::build(small(), 2).unwrap();
        let feats = Tensor::random_normal(&[6, 2, 2], 8, 1.0).unwrap();
        let out = g.inject(0, 3, &feats).unwrap();
        assert_eq!(out.shape(), feats.shape());

        let code = g.encode_class(0, 3).unwrap();
        let w = g.params().by_name("inject.0.proj.weight").unwrap().value();
        let b = g.params().by_name("inject.0.proj.bias").unwrap().value();
        for c in 0..6 {
            let mut proj = b.data()[c];
            for k in 0..5 {
                proj += w.data()[c * 5 + k] * code.data()[k];
            }
            for s in 0..4 {
                let i = c * 4 + s;
                assert!((out.data()[i] - (feats.data()[i] + proj)).abs() < 1e-5);
            }
        }
        let bad = Tensor::zeros(&[5, 2, 2]).unwrap();
        assert!(matches!(g.inject(0, 0, &bad), Err(Error::ShapeMismatch(_))));
    }

    fn zero_injection(g: &mut Generator) {
        for p in g.params_mut().iter_mut() {
            if p.name().starts_with("inject.") {
                let z = p.value().zeros_like();
                p.set_value(z).unwrap();
            }
        }
    }

    #[test]
    fn zeroed_blocks_are_identity_and_remove_the_label() {
        let mut g = Generator::build(small(), 4).unwrap();
        zero_injection(&mut g);
        let feats = Tensor::random_normal(&[6, 2, 2], 1, 1.0).unwrap();
        assert_eq!(g.inject(0, 1, &feats).unwrap(), feats);
        let zero = Tensor::zeros(&[6, 2, 2]).unwrap();
        assert_eq!(g.inject(0, 1, &zero).unwrap(), zero);
        let first = g.generate(0).unwrap();
        for class in 1..4 {
            assert_eq!(g.generate(class).unwrap(), first);
        }
    }

    #[test]
    fn zero_features_give_the_projected_code() {
        let g = Generator::build(small(), 6).unwrap();
        let zero = Tensor::zeros(&[6, 2, 2]).unwrap();
        let out = g.inject(0, 1, &zero).unwrap();
        let code = g.encode_class(0, 1).unwrap();
        let w = g.params().by_name("inject.0.proj.weight").unwrap().value();
        let b = g.params().by_name("inject.0.proj.bias").unwrap().value();
        let proj = ops::fully_connected(&code, w, b).unwrap();
        for c in 0..6 {
            for s in 0..4 {
                assert!((out.data()[c * 4 + s] - proj.data()[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn every_block_receives_gradient_for_the_used_row() {
        let g = Generator::build(small(), 7).unwrap();
        let class = 2;
        let mut tape = Tape::new();
        let img = g.forward(&mut tape, class).unwrap();
        let weights = Tensor::random_normal(&[1, 7, 7], 3, 1.0).unwrap();
        let loss = tape.weighted_sum(img, &weights).unwrap();
        let grads = tape.backward(loss).unwrap();
        for block in g.injection_blocks() {
            let p = g.params().get(block.embedding);
            let grad = grads.for_param(p).expect("embedding reached");
            let row = &grad.data()[class * 5..(class + 1) * 5];
            assert!(row.iter().any(|&v| v != 0.0), "stage {}", block.stage());
            let other = &grad.data()[0..5];
            assert!(other.iter().all(|&v| v == 0.0));
        }
    }
}

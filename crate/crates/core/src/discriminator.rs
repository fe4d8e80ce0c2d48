//! The classifier being visualised: convolutional feature layers, a stack of
//! fully-connected layers ending at the class count, and a softmax head.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, LabeledDataset};
use crate::trainer::one_hot;
use crate::tensor::{derive_seed, Adam, AdamConfig, ParamSet, Parameter, Tape, Tensor, Var};

/// One feature-extraction layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    LeakyRelu {
        slope: f32,
    },
    Tanh,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn pool(window: usize) -> Self {
        LayerSpec::MaxPool {
            window,
            stride: window,
        }
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::Config("conv extents must be positive".into()));
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(Error::Config(format!(
                        "{kernel}x{kernel} conv does not fit {h}x{w}"
                    )));
                }
                Ok([
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool { window, stride } => {
                if window == 0 || stride == 0 || window > h || window > w {
                    return Err(Error::Config(format!(
                        "pool window {window} does not fit {h}x{w}"
                    )));
                }
                Ok([c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh => Ok([c, h, w]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// `[channels, height, width]` of input images.
    pub input: [usize; 3],
    pub features: Vec<LayerSpec>,
    /// Widths of the fully-connected layers. The last must equal `classes`.
    pub dense: Vec<usize>,
    pub classes: usize,
}

impl ClassifierConfig {
    /// conv(16,3x3)-relu-pool, conv(32,3x3)-relu-pool, conv(64,3x3)-relu,
    /// fc(128)-relu, fc(classes).
    pub fn desk(input: [usize; 3], classes: usize) -> Self {
        Self {
            input,
            features: vec![
                LayerSpec::conv(16, 3),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::conv(32, 3),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::conv(64, 3),
                LayerSpec::Relu,
            ],
            dense: vec![128, classes],
            classes,
        }
    }

    /// Output shape of every feature layer, in order.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.input.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        let mut shape = self.input;
        let mut shapes = Vec::with_capacity(self.features.len());
        for (i, layer) in self.features.iter().enumerate() {
            shape = layer
                .output_shape(shape)
                .map_err(|e| Error::Config(format!("feature layer {i}: {e}")))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_shapes()?;
        if self.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        match self.dense.last() {
            None => return Err(Error::Config("at least one fully-connected layer is required".into())),
            Some(&last) if last != self.classes => {
                return Err(Error::Config(format!(
                    "final fully-connected width {last} differs from class count {}",
                    self.classes
                )))
            }
            _ => {}
        }
        if self.dense.contains(&0) {
            return Err(Error::Config("fully-connected widths must be positive".into()));
        }
        Ok(())
    }

    fn flat_len(&self) -> Result<usize> {
        let last = self.feature_shapes()?.last().copied().unwrap_or(self.input);
        Ok(last.iter().product())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    LeakyRelu(f32),
    Tanh,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after the first epoch whose held-out accuracy reaches this.
    #[serde(default)]
    pub target_accuracy: Option<f32>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            seed: 0,
            batch_size: 32,
            adam: AdamConfig::default(),
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f32,
    pub held_out_accuracy: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    /// `epoch,mean_loss,held_out_accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,held_out_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6}\n",
                e.epoch, e.mean_loss, e.held_out_accuracy
            ));
        }
        out
    }
}

/// The network under visualisation.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamSet,
    layers: Vec<Layer>,
    dense: Vec<Dense>,
    frozen: bool,
}

fn he_normal(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    Tensor::random_normal(shape, seed, (2.0 / fan_in as f32).sqrt())
}

impl Classifier {
    /// Builds a classifier with seeded He-normal weights and zero biases.
    pub fn build(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(config.features.len());
        let mut channels = config.input[0];
        let mut stream = 0u64;
        let mut next_seed = || {
            stream += 1;
            derive_seed(seed, stream)
        };
        for (i, spec) in config.features.iter().enumerate() {
            layers.push(match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = channels * kernel * kernel;
                    let w = he_normal(&[out_channels, channels, kernel, kernel], fan_in, next_seed())?;
                    let weight = params.push(Parameter::new(format!("features.{i}.weight"), w))?;
                    let bias = params.push(Parameter::new(
                        format!("features.{i}.bias"),
                        Tensor::zeros(&[out_channels])?,
                    ))?;
                    channels = out_channels;
                    Layer::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    }
                }
                LayerSpec::MaxPool { window, stride } => Layer::MaxPool { window, stride },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(slope),
                LayerSpec::Tanh => Layer::Tanh,
            });
        }
        let mut fan_in = config.flat_len()?;
        let mut dense = Vec::with_capacity(config.dense.len());
        for (j, &width) in config.dense.iter().enumerate() {
            let w = he_normal(&[width, fan_in], fan_in, next_seed())?;
            let weight = params.push(Parameter::new(format!("dense.{j}.weight"), w))?;
            let bias = params.push(Parameter::new(format!("dense.{j}.bias"), Tensor::zeros(&[width])?))?;
            dense.push(Dense { weight, bias });
            fan_in = width;
        }
        Ok(Self {
            config,
            params,
            layers,
            dense,
            frozen: false,
        })
    }

    /// Builds the architecture for `config` and loads weights from a checkpoint.
    pub fn load(config: ClassifierConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::build(config, 0)?;
        io::restore(&mut c.params, &io::load_checkpoint(path)?)?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_checkpoint(&self.params, path)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameters, e.g. for gradient checks. Freezing state is
    /// unaffected.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter non-trainable. Idempotent.
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    /// SHA-256 of the serialised parameters.
    pub fn checksum(&self) -> String {
        io::param_checksum(&self.params)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {:?}, got {:?}",
                self.config.input,
                image.shape()
            )));
        }
        Ok(())
    }

    fn apply_layer(&self, tape: &mut Tape, layer: &Layer, x: Var) -> Result<Var> {
        Ok(match *layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                padding,
            } => {
                let w = tape.param(self.params.get(weight));
                let b = tape.param(self.params.get(bias));
                let y = tape.conv2d(x, w, stride, padding)?;
                tape.add_channel_bias(y, b)?
            }
            Layer::MaxPool { window, stride } => tape.maxpool2d(x, window, stride)?,
            Layer::Relu => tape.relu(x),
            Layer::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Layer::Tanh => tape.tanh(x),
        })
    }

    /// Records feature layers `0..=layer` and returns the output of `layer`.
    pub fn forward_features(&self, tape: &mut Tape, image: Var, layer: usize) -> Result<Var> {
        if layer >= self.layers.len() {
            return Err(Error::InvalidLayer(format!(
                "layer {layer} is not a feature layer (there are {})",
                self.layers.len()
            )));
        }
        self.check_image(tape.value(image))?;
        let mut x = image;
        for l in &self.layers[..=layer] {
            x = self.apply_layer(tape, l, x)?;
        }
        Ok(x)
    }

    /// Records the full network and returns the logits.
    pub fn forward_logits(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        self.check_image(tape.value(image))?;
        let mut x = image;
        for l in &self.layers {
            x = self.apply_layer(tape, l, x)?;
        }
        x = tape.flatten(x);
        let last = self.dense.len() - 1;
        for (j, d) in self.dense.iter().enumerate() {
            let w = tape.param(self.params.get(d.weight));
            let b = tape.param(self.params.get(d.bias));
            x = tape.linear(x, w, b)?;
            if j != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Records the full network and returns class probabilities.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let logits = self.forward_logits(tape, image)?;
        tape.softmax(logits)
    }

    /// Class probabilities for one image.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let p = self.forward(&mut tape, x)?;
        Ok(tape.value(p).clone())
    }

    /// Most probable class; the lowest index wins ties.
    pub fn predict_label(&self, image: &Tensor) -> Result<usize> {
        Ok(self.predict(image)?.argmax())
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let mut correct = 0usize;
        for (image, label) in data.iter() {
            if self.predict_label(image)? == label {
                correct += 1;
            }
        }
        Ok(correct as f32 / data.len() as f32)
    }

    /// Minibatch Adam on cross-entropy. The data order is reshuffled each
    /// epoch from `seed`; gradients are averaged over each minibatch.
    pub fn train(
        &mut self,
        train: &LabeledDataset,
        held_out: &LabeledDataset,
        cfg: &ClassifierTrainConfig,
    ) -> Result<TrainReport> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        for data in [train, held_out] {
            if let Some(&label) = data.labels().iter().find(|&&l| l >= self.classes()) {
                return Err(Error::InvalidLabel {
                    label,
                    classes: self.classes(),
                });
            }
            if let Some(img) = data.images().first() {
                self.check_image(img)?;
            }
        }
        let mut report = TrainReport::default();
        if cfg.epochs == 0 {
            return Ok(report);
        }
        if train.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }

        let mut adam = Adam::new(&self.params, cfg.adam)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let classes = self.classes();

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                for &i in batch {
                    let (image, label) = train.get(i).expect("index in range");
                    let mut tape = Tape::new();
                    let x = tape.constant(image.clone());
                    let probs = self.forward(&mut tape, x)?;
                    let loss = tape.cross_entropy(probs, &one_hot(label, classes)?)?;
                    total += tape.value(loss).data()[0] as f64;
                    let grads = tape.backward(loss)?;
                    self.params.accumulate(&grads);
                }
                self.params.scale_grads(1.0 / batch.len() as f32);
                adam.step(&mut self.params)?;
            }
            let mean_loss = (total / train.len() as f64) as f32;
            let held_out_accuracy = if held_out.is_empty() {
                f32::NAN
            } else {
                self.accuracy(held_out)?
            };
            info!("epoch {epoch}: loss {mean_loss:.4}, held-out accuracy {held_out_accuracy:.4}");
            report.epochs.push(EpochReport {
                epoch,
                mean_loss,
                held_out_accuracy,
            });
            if cfg.target_accuracy.is_some_and(|t| held_out_accuracy >= t) {
                break;
            }
        }
        Ok(report)
    }

    /// A channel-activation head on feature layer `layer`.
    pub fn channel_head(&self, layer: usize) -> Result<ChannelHead<'_>> {
        let shapes = self.config.feature_shapes()?;
        let shape = shapes.get(layer).ok_or_else(|| {
            Error::InvalidLayer(format!(
                "layer {layer} is not a feature layer (there are {})",
                shapes.len()
            ))
        })?;
        Ok(ChannelHead {
            classifier: self,
            layer,
            channels: shape[0],
        })
    }
}

/// Treats the channels of one feature layer as classes: each channel's
/// activation is its spatial mean, followed by a softmax over channels.
#[derive(Clone, Copy, Debug)]
pub struct ChannelHead<'a> {
    classifier: &'a Classifier,
    layer: usize,
    channels: usize,
}

impl<'a> ChannelHead<'a> {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn classifier(&self) -> &'a Classifier {
        self.classifier
    }

    /// Records per-channel spatial means of the layer output.
    pub fn forward_means(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let features = self.classifier.forward_features(tape, image, self.layer)?;
        tape.channel_mean(features)
    }

    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let means = self.forward_means(tape, image)?;
        tape.softmax(means)
    }

    pub fn channel_means(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let m = self.forward_means(&mut tape, x)?;
        Ok(tape.value(m).clone())
    }

    /// Softmax over the channel means for one image.
    pub fn distribution(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let p = self.forward(&mut tape, x)?;
        Ok(tape.value(p).clone())
    }
}

//! Generator optimisation against a frozen classifier.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{ChannelHead, Classifier};
use crate::error::{Error, Result};
use crate::generator::{record_rescale, Generator};
use crate::tensor::{derive_seed, Adam, AdamConfig, Tape, Tensor, Var};

/// One-hot vector of length `classes` with a 1 at `class`.
pub fn one_hot(class: usize, classes: usize) -> Result<Tensor> {
    if class >= classes {
        return Err(Error::InvalidClass { class, classes });
    }
    let mut data = vec![0.0; classes];
    data[class] = 1.0;
    Ok(Tensor::from_vec(data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f32,
    /// Stop once the mean loss over the last `log_interval` steps drops
    /// below this value.
    pub early_stop: Option<f32>,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            seed: 0,
            learning_rate: 1e-3,
            early_stop: None,
            log_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log interval must be positive".into()));
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub class_id: usize,
    pub loss: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn mean(records: &[LossRecord]) -> f32 {
        if records.is_empty() {
            return f32::NAN;
        }
        (records.iter().map(|r| r.loss as f64).sum::<f64>() / records.len() as f64) as f32
    }

    fn tenth(&self) -> usize {
        (self.records.len() / 10).max(1)
    }

    /// Mean loss over the first 10% of steps (at least one step).
    pub fn head_mean(&self) -> f32 {
        Self::mean(&self.records[..self.tenth().min(self.len())])
    }

    /// Mean loss over the last 10% of steps (at least one step).
    pub fn tail_mean(&self) -> f32 {
        let n = self.tenth().min(self.len());
        Self::mean(&self.records[self.len() - n..])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,class_id,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.6}\n", r.step, r.class_id, r.loss));
        }
        out
    }
}

/// Uniform class ids in `[0, classes)` from a seeded stream.
#[derive(Clone, Debug)]
pub struct ClassSampler {
    classes: usize,
    rng: ChaCha8Rng,
}

impl ClassSampler {
    pub fn new(classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("cannot sample from zero classes".into()));
        }
        Ok(Self {
            classes,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> usize {
        self.rng.random_range(0..self.classes)
    }
}

/// What the generated image is scored against.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Class probabilities of the classifier.
    Classes(&'a Classifier),
    /// Softmax over spatial channel means of one feature layer.
    Channels(ChannelHead<'a>),
}

impl<'a> Objective<'a> {
    fn classifier(&self) -> &'a Classifier {
        match self {
            Objective::Classes(d) => d,
            Objective::Channels(h) => h.classifier(),
        }
    }

    pub fn targets(&self) -> usize {
        match self {
            Objective::Classes(d) => d.classes(),
            Objective::Channels(h) => h.channels(),
        }
    }

    fn record(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        match self {
            Objective::Classes(d) => d.forward(tape, image),
            Objective::Channels(h) => h.forward(tape, image),
        }
    }

    fn check(&self, generator: &Generator) -> Result<()> {
        let d = self.classifier();
        if !d.is_frozen() {
            return Err(Error::FrozenModelRequired);
        }
        if generator.config().output != d.input_shape() {
            return Err(Error::Config(format!(
                "generator emits {:?}, classifier expects {:?}",
                generator.config().output,
                d.input_shape()
            )));
        }
        if generator.classes() != self.targets() {
            return Err(Error::Config(format!(
                "generator has {} labels, objective has {} targets",
                generator.classes(),
                self.targets()
            )));
        }
        Ok(())
    }
}

/// Records `CE(objective(rescale(G(class))), one_hot(class))`.
pub fn record_loss(
    tape: &mut Tape,
    generator: &Generator,
    objective: &Objective<'_>,
    class: usize,
) -> Result<Var> {
    let image = generator.forward(tape, class)?;
    let scaled = record_rescale(tape, image);
    let probs = objective.record(tape, scaled)?;
    tape.cross_entropy(probs, &one_hot(class, objective.targets())?)
}

pub struct GeneratorTrainer {
    adam: Adam,
}

impl GeneratorTrainer {
    pub fn new(generator: &Generator, adam: AdamConfig) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(generator.params(), adam)?,
        })
    }

    /// One Adam update of the generator for `class`; returns the loss.
    pub fn train_step(
        &mut self,
        generator: &mut Generator,
        objective: &Objective<'_>,
        class: usize,
    ) -> Result<f32> {
        objective.check(generator)?;
        let mut tape = Tape::new();
        let loss = record_loss(&mut tape, generator, objective, class)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        generator.params_mut().accumulate(&grads);
        self.adam.step(generator.params_mut())?;
        Ok(value)
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }
}

fn run(generator: &mut Generator, objective: Objective<'_>, cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate()?;
    objective.check(generator)?;
    let mut trainer = GeneratorTrainer::new(generator, cfg.adam())?;
    let mut sampler = ClassSampler::new(generator.classes(), derive_seed(cfg.seed, 1))?;
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let class_id = sampler.sample();
        let loss = trainer.train_step(generator, &objective, class_id)?;
        trace.records.push(LossRecord {
            step,
            class_id,
            loss,
        });
        if (step + 1) % cfg.log_interval == 0 {
            let window = &trace.records[trace.len() - cfg.log_interval..];
            let mean = LossTrace::mean(window);
            info!("step {}: mean loss {mean:.4}", step + 1);
            if cfg.early_stop.is_some_and(|t| mean < t) {
                break;
            }
        }
    }
    Ok(trace)
}

/// Trains `generator` so that `classifier` assigns each label its own class.
pub fn train_generator(
    generator: &mut Generator,
    classifier: &Classifier,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    run(generator, Objective::Classes(classifier), cfg)
}

/// Trains `generator` so that label `m` maximises channel `m` of feature
/// layer `layer`. The generator needs one label per channel.
pub fn train_channel_generator(
    generator: &mut Generator,
    classifier: &Classifier,
    layer: usize,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    let head = classifier.channel_head(layer)?;
    run(generator, Objective::Channels(head), cfg)
}

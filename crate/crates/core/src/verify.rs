//! Finite-difference verification of every differentiable op.
//!
//! Each instance draws small random shapes and values, reduces the op output
//! to a scalar with random weights and checks the gradient of every input.
//! Inputs to `relu`/`leaky_relu` are kept away from the kink and pooling
//! windows hold distinct, well separated values. In the composite, probes that
//! still cross a branch are skipped by [`grad_check`] and counted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::discriminator::{Classifier, ClassifierConfig, LayerSpec};
use crate::error::Result;
use crate::generator::{record_rescale, Generator, GeneratorConfig, StageSpec};
use crate::tensor::{derive_seed, grad_check, GradCheck, ParamSet, Parameter, Tape, Tensor, Var};
use crate::trainer::one_hot;

pub const EPSILON: f32 = 1e-2;
pub const COMPOSITE_EPSILON: f32 = 5e-3;
const MAX_COORDINATES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_error: f32,
    /// Coordinates compared, summed over instances and inputs.
    pub coordinates: usize,
    /// Probes skipped because they crossed a relu or pooling branch.
    pub skipped: usize,
}

pub const OPS: &[&str] = &[
    "conv2d",
    "conv2d_transpose",
    "maxpool2d",
    "linear",
    "relu",
    "leaky_relu",
    "tanh",
    "softmax",
    "cross_entropy",
    "channel_bias",
    "channel_mean",
    "affine",
    "crop",
    "row",
    "mul",
    "weighted_sum",
    "generator_classifier_ce",
];

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::random_normal(shape, rng.random(), 1.0).expect("valid shape")
}

/// Values at least 0.1 away from zero.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape).map(|v| v.signum() * (0.1 + v.abs()))
}

#[derive(Default)]
struct Tally {
    max_error: f32,
    coordinates: usize,
    skipped: usize,
}

impl Tally {
    fn add(&mut self, check: GradCheck) {
        self.max_error = self.max_error.max(check.max_error);
        self.coordinates += check.coordinates;
        self.skipped += check.skipped;
    }
}

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    forward: Forward,
}

fn reduce(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::random_normal(tape.value(y).shape(), seed, 1.0)?;
    tape.weighted_sum(y, &w)
}

fn instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    let ws: u64 = rng.random();
    let c = rng.random_range(1..=3);
    let h = rng.random_range(3..=6);
    let w = rng.random_range(3..=6);
    macro_rules! inst {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            Instance {
                inputs: $inputs,
                forward: Box::new(move |$t: &mut Tape, $v: &[Var]| {
                    let y = $body;
                    reduce($t, y, ws)
                }),
            }
        };
    }
    match op {
        "conv2d" => {
            let k = rng.random_range(1..=3.min(h).min(w));
            let cout = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=1);
            inst!(
                vec![normal(rng, &[c, h, w]), normal(rng, &[cout, c, k, k])],
                |t, v| t.conv2d(v[0], v[1], stride, padding)?
            )
        }
        "conv2d_transpose" => {
            let k = rng.random_range(2..=4);
            let cout = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..k / 2 + 1).min(k - 1);
            inst!(
                vec![normal(rng, &[c, h, w]), normal(rng, &[c, cout, k, k])],
                |t, v| t.conv2d_transpose(v[0], v[1], stride, padding)?
            )
        }
        "maxpool2d" => {
            let n = c * h * w;
            let mut values: Vec<f32> = (0..n).map(|i| i as f32 * 0.05).collect();
            values.shuffle(rng);
            let window = rng.random_range(2..=3.min(h).min(w));
            let stride = rng.random_range(1..=window);
            inst!(
                vec![Tensor::new(&[c, h, w], values).expect("sized")],
                |t, v| t.maxpool2d(v[0], window, stride)?
            )
        }
        "linear" => {
            let (k, n) = (rng.random_range(1..=8), rng.random_range(1..=6));
            inst!(
                vec![normal(rng, &[k]), normal(rng, &[n, k]), normal(rng, &[n])],
                |t, v| t.linear(v[0], v[1], v[2])?
            )
        }
        "relu" => inst!(vec![off_kink(rng, &[c, h, w])], |t, v| t.relu(v[0])),
        "leaky_relu" => {
            let slope = rng.random_range(0.01..0.3);
            inst!(vec![off_kink(rng, &[c, h, w])], |t, v| t.leaky_relu(v[0], slope))
        }
        "tanh" => inst!(vec![normal(rng, &[c, h, w])], |t, v| t.tanh(v[0])),
        "softmax" => {
            let n = rng.random_range(2..=10);
            inst!(vec![normal(rng, &[n])], |t, v| t.softmax(v[0])?)
        }
        "cross_entropy" => {
            let n = rng.random_range(2..=10);
            let target = rng.random_range(0..n);
            let mut onehot = vec![0.0; n];
            onehot[target] = 1.0;
            let onehot = Tensor::from_vec(onehot);
            Instance {
                inputs: vec![normal(rng, &[n])],
                forward: Box::new(move |t, v| {
                    let p = t.softmax(v[0])?;
                    t.cross_entropy(p, &onehot)
                }),
            }
        }
        "channel_bias" => inst!(
            vec![normal(rng, &[c, h, w]), normal(rng, &[c])],
            |t, v| t.add_channel_bias(v[0], v[1])?
        ),
        "channel_mean" => inst!(vec![normal(rng, &[c, h, w])], |t, v| t.channel_mean(v[0])?),
        "affine" => {
            let (scale, shift) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            inst!(vec![normal(rng, &[c, h, w])], |t, v| t.affine(v[0], scale, shift))
        }
        "crop" => {
            let (ch, cw) = (rng.random_range(1..=h), rng.random_range(1..=w));
            let (top, left) = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
            inst!(vec![normal(rng, &[c, h, w])], |t, v| t.crop(v[0], top, left, ch, cw)?)
        }
        "row" => {
            let (n, d) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let index = rng.random_range(0..n);
            inst!(vec![normal(rng, &[n, d])], |t, v| t.row(v[0], index)?)
        }
        "mul" => inst!(
            vec![normal(rng, &[c, h, w]), normal(rng, &[c, h, w])],
            |t, v| t.mul(v[0], v[1])?
        ),
        "weighted_sum" => inst!(vec![normal(rng, &[c, h, w])], |t, v| t.sum(v[0])),
        other => panic!("unknown op {other}"),
    }
}

fn check_instance(inst: Instance, seed: u64) -> Result<Tally> {
    let mut params = ParamSet::new();
    for (i, x) in inst.inputs.into_iter().enumerate() {
        params.push(Parameter::new(format!("input.{i}"), x))?;
    }
    let forward = inst.forward;
    let mut tally = Tally::default();
    for index in 0..params.len() {
        let check = grad_check(
            &mut params,
            index,
            EPSILON,
            MAX_COORDINATES,
            derive_seed(seed, index as u64),
            |tape, p| {
                let vars: Vec<Var> = p.iter().map(|q| tape.param(q)).collect();
                forward(tape, &vars)
            },
        )?;
        tally.add(check);
    }
    Ok(tally)
}

/// A tiny generator and frozen classifier with the same layer kinds as the
/// desk models.
pub fn composite_models(seed: u64) -> Result<(Generator, Classifier)> {
    let classes = 3;
    let d_config = ClassifierConfig {
        input: [1, 8, 8],
        features: vec![
            LayerSpec::conv(3, 3),
            LayerSpec::Relu,
            LayerSpec::pool(2),
        ],
        dense: vec![6, classes],
        classes,
    };
    let g_config = GeneratorConfig {
        classes,
        base: [4, 2, 2],
        stages: vec![StageSpec::double(3), StageSpec::double(1)],
        inject_at: vec![0, 1],
        embedding_width: 4,
        output: [1, 8, 8],
    };
    let d = Classifier::build(d_config, derive_seed(seed, 1))?.frozen();
    let g = Generator::build(g_config, derive_seed(seed, 2))?;
    Ok((g, d))
}

fn check_composite(seed: u64) -> Result<Tally> {
    let (g, d) = composite_models(seed)?;
    let class = (seed % d.classes() as u64) as usize;
    let onehot = one_hot(class, d.classes())?;
    let mut params = g.params().clone();
    let mut tally = Tally::default();
    for index in 0..params.len() {
        let check = grad_check(
            &mut params,
            index,
            COMPOSITE_EPSILON,
            MAX_COORDINATES,
            derive_seed(seed, 100 + index as u64),
            |tape, p| {
                let image = g.forward_with(tape, p, class)?;
                let scaled = record_rescale(tape, image);
                let probs = d.forward(tape, scaled)?;
                tape.cross_entropy(probs, &onehot)
            },
        )?;
        tally.add(check);
    }
    Ok(tally)
}

/// Runs `instances` seeded instances of every op in [`OPS`].
pub fn verification_suite(instances: usize, seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut total = Tally::default();
            for i in 0..instances {
                let s = derive_seed(derive_seed(seed, k as u64), i as u64);
                let tally = if op == "generator_classifier_ce" {
                    check_composite(s)?
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    check_instance(instance(op, &mut rng), s)?
                };
                total.max_error = total.max_error.max(tally.max_error);
                total.coordinates += tally.coordinates;
                total.skipped += tally.skipped;
            }
            Ok(OpCheck {
                op,
                instances,
                max_error: total.max_error,
                coordinates: total.coordinates,
                skipped: total.skipped,
            })
        })
        .collect()
}

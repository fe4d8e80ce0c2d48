use std::collections::HashMap;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use super::ops;
use super::{ParamKey, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + Sync;

enum Op {
    Constant,
    Param(ParamKey),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f32>,
    },
    ConvTranspose2d {
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        target: usize,
    },
    ChannelBias {
        features: Var,
        bias: Var,
    },
    ChannelMean(Var),
    Affine {
        input: Var,
        scale: f32,
    },
    Reshape(Var),
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    Row {
        table: Var,
        index: usize,
    },
    Mul(Var, Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
    Custom {
        input: Var,
        backward: Box<BackwardFn>,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ChannelBias { .. } => "channel_bias",
            Op::ChannelMean(_) => "channel_mean",
            Op::Affine { .. } => "affine",
            Op::Reshape(_) => "reshape",
            Op::Crop { .. } => "crop",
            Op::Row { .. } => "row",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar w.r.t. every trainable parameter it depends on.
#[derive(Debug, Default)]
pub struct Gradients {
    by_key: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.by_key.get(&key)
    }

    pub fn for_param(&self, param: &Parameter) -> Option<&Tensor> {
        self.get(param.key())
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

/// Records a forward computation so it can be differentiated once.
///
/// Parameters enter through [`Tape::param`]; only trainable ones require a
/// gradient, so frozen weights pass gradient through to their inputs without
/// accumulating one of their own.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Hash of every branch taken by piecewise ops: the sign of each
    /// `relu`/`leaky_relu` input and each pooling argmax. Two evaluations
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn requires(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, param: &Parameter) -> Var {
        self.nodes.push(Node {
            value: param.shared_value(),
            op: Op::Param(param.key()),
            requires_grad: param.trainable(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, cols) = ops::conv2d_forward(self.value(input), self.value(kernels), stride, padding)?;
        let rg = self.requires(input) || self.requires(kernels);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                cols,
            },
            rg,
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d_transpose(self.value(input), self.value(kernels), stride, padding)?;
        let rg = self.requires(input) || self.requires(kernels);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                kernels,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d_forward(self.value(input), window, stride)?;
        let rg = self.requires(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::fully_connected(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.requires(input) || self.requires(weights) || self.requires(bias);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.requires(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let out = ops::leaky_relu(self.value(input), slope);
        let rg = self.requires(input);
        self.push(out, Op::LeakyRelu(input, slope), rg)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = ops::tanh_act(self.value(input));
        let rg = self.requires(input);
        self.push(out, Op::Tanh(input), rg)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax(self.value(input))?;
        let rg = self.requires(input);
        Ok(self.push(out, Op::Softmax(input), rg))
    }

    /// Cross-entropy of a probability vector against a one-hot target.
    pub fn cross_entropy(&mut self, probs: Var, target_onehot: &Tensor) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(probs), target_onehot)?;
        let target = ops::one_hot_index(target_onehot, self.value(probs).len())?;
        let rg = self.requires(probs);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, target }, rg))
    }

    pub fn add_channel_bias(&mut self, features: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(features), self.value(bias))?;
        let rg = self.requires(features) || self.requires(bias);
        Ok(self.push(out, Op::ChannelBias { features, bias }, rg))
    }

    pub fn channel_mean(&mut self, features: Var) -> Result<Var> {
        let out = ops::channel_means(self.value(features))?;
        let rg = self.requires(features);
        Ok(self.push(out, Op::ChannelMean(features), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(input).map(|v| scale * v + shift);
        let rg = self.requires(input);
        self.push(out, Op::Affine { input, scale }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.requires(input);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let len = self.value(input).len();
        self.reshape(input, &[len]).expect("flatten preserves length")
    }

    pub fn crop(&mut self, input: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let out = ops::crop(self.value(input), top, left, height, width)?;
        let rg = self.requires(input);
        Ok(self.push(out, Op::Crop { input, top, left }, rg))
    }

    /// Row `index` of a rank-2 table, as a rank-1 tensor.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row lookup needs a rank-2 table, got {:?}",
                t.shape()
            )));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        if index >= rows {
            return Err(Error::InvalidClass {
                class: index,
                classes: rows,
            });
        }
        let out = Tensor::from_vec(t.data()[index * width..(index + 1) * width].to_vec());
        let rg = self.requires(table);
        Ok(self.push(out, Op::Row { table, index }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect(),
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.requires(input);
        self.push(out, Op::Sum(input), rg)
    }

    /// `Σ weights ⊙ input` with a constant weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} do not match input {:?}",
                weights.shape(),
                x.shape()
            )));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.requires(input);
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// A user-defined unary op. `backward(input, output, grad_output)` must
    /// return the gradient w.r.t. `input`.
    pub fn custom(
        &mut self,
        input: Var,
        forward: impl FnOnce(&Tensor) -> Tensor,
        backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + Sync + 'static,
    ) -> Var {
        let out = forward(self.value(input));
        let rg = self.requires(input);
        self.push(
            out,
            Op::Custom {
                input,
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the recording: a
    /// second call fails with [`Error::StaleGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let value = |v: Var| -> &Tensor { &nodes[v.0].value };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut send = |v: Var, g: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };

            match &node.op {
                Op::Constant => {}
                Op::Param(key) => match out.by_key.get_mut(key) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        out.by_key.insert(*key, grad);
                    }
                },
                Op::Conv2d {
                    input,
                    kernels,
                    stride,
                    padding,
                    cols,
                } => {
                    let (gi, gk) = ops::conv2d_backward(
                        &grad,
                        value(*input).shape(),
                        value(*kernels),
                        cols,
                        *stride,
                        *padding,
                        needs(*input),
                        needs(*kernels),
                    );
                    if let Some(g) = gi {
                        send(*input, g);
                    }
                    if let Some(g) = gk {
                        send(*kernels, g);
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    kernels,
                    stride,
                    padding,
                } => {
                    let (gi, gk) = ops::conv2d_transpose_backward(
                        &grad,
                        value(*input),
                        value(*kernels),
                        *stride,
                        *padding,
                        needs(*input),
                        needs(*kernels),
                    );
                    if let Some(g) = gi {
                        send(*input, g);
                    }
                    if let Some(g) = gk {
                        send(*kernels, g);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut g = value(*input).zeros_like();
                    let gd = g.data_mut();
                    for (&src, &d) in argmax.iter().zip(grad.data()) {
                        gd[src as usize] += d;
                    }
                    send(*input, g);
                }
                Op::Linear {
                    input,
                    weights,
                    bias,
                } => {
                    let (gi, gw) = ops::fully_connected_backward(
                        &grad,
                        value(*input),
                        value(*weights),
                        needs(*input),
                        needs(*weights),
                    );
                    if let Some(g) = gi {
                        send(*input, g);
                    }
                    if let Some(g) = gw {
                        send(*weights, g);
                    }
                    send(*bias, grad);
                }
                Op::Relu(input) => {
                    let x = value(*input);
                    send(*input, zip_map(&grad, x, |g, v| if v > 0.0 { g } else { 0.0 }));
                }
                Op::LeakyRelu(input, slope) => {
                    let x = value(*input);
                    let s = *slope;
                    send(*input, zip_map(&grad, x, |g, v| if v > 0.0 { g } else { s * g }));
                }
                Op::Tanh(input) => {
                    send(*input, zip_map(&grad, &node.value, |g, y| g * (1.0 - y * y)));
                }
                Op::Softmax(input) => {
                    send(*input, ops::softmax_backward(&grad, &node.value));
                }
                Op::CrossEntropy { probs, target } => {
                    let p = value(*probs);
                    let mut g = p.zeros_like();
                    let pt = p.data()[*target];
                    // The clamp is flat outside [PROB_FLOOR, 1].
                    if pt > ops::PROB_FLOOR && pt <= 1.0 {
                        g.data_mut()[*target] = -grad.data()[0] / pt;
                    }
                    send(*probs, g);
                }
                Op::ChannelBias { features, bias } => {
                    if needs(*bias) {
                        let plane: usize = grad.shape()[1..].iter().product();
                        let gb: Vec<f32> = grad
                            .data()
                            .chunks(plane)
                            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect();
                        send(*bias, Tensor::from_vec(gb));
                    }
                    send(*features, grad);
                }
                Op::ChannelMean(input) => {
                    let shape = value(*input).shape();
                    let plane = shape[1] * shape[2];
                    let inv = 1.0 / plane as f32;
                    let mut data = Vec::with_capacity(shape[0] * plane);
                    for &g in grad.data() {
                        data.extend(std::iter::repeat(g * inv).take(plane));
                    }
                    send(*input, Tensor::from_parts(shape.to_vec(), data));
                }
                Op::Affine { input, scale } => {
                    let s = *scale;
                    send(*input, grad.map(|g| g * s));
                }
                Op::Reshape(input) => {
                    let shape = value(*input).shape().to_vec();
                    send(*input, Tensor::from_parts(shape, grad.into_data()));
                }
                Op::Crop { input, top, left } => {
                    let x = value(*input);
                    let (h, w) = (x.shape()[1], x.shape()[2]);
                    let (ch, cw) = (grad.shape()[1], grad.shape()[2]);
                    let mut g = x.zeros_like();
                    let gd = g.data_mut();
                    for (c, plane) in grad.data().chunks(ch * cw).enumerate() {
                        for i in 0..ch {
                            let dst = c * h * w + (top + i) * w + left;
                            gd[dst..dst + cw].copy_from_slice(&plane[i * cw..(i + 1) * cw]);
                        }
                    }
                    send(*input, g);
                }
                Op::Row { table, index } => {
                    let t = value(*table);
                    let width = t.shape()[1];
                    let mut g = t.zeros_like();
                    g.data_mut()[index * width..(index + 1) * width].copy_from_slice(grad.data());
                    send(*table, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (value(*a), value(*b));
                    if needs(*a) {
                        send(*a, zip_map(&grad, vb, |g, y| g * y));
                    }
                    if needs(*b) {
                        send(*b, zip_map(&grad, va, |g, x| g * x));
                    }
                }
                Op::Sum(input) => {
                    let g = grad.data()[0];
                    send(*input, value(*input).map(|_| g));
                }
                Op::WeightedSum { input, weights } => {
                    let g = grad.data()[0];
                    send(*input, weights.map(|w| w * g));
                }
                Op::Custom { input, backward } => {
                    let gi = backward(value(*input), &node.value, &grad);
                    send(*input, gi);
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(grad: &Tensor, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::from_parts(
        grad.shape().to_vec(),
        grad.data()
            .iter()
            .zip(other.data())
            .map(|(&g, &o)| f(g, o))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let p = Parameter::new("p", Tensor::random_normal(&[2, 3], 1, 1.0).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let loss = tape.sum(v);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.for_param(&p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_p() {
        let p = Parameter::new("p", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.for_param(&p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_stale() {
        let p = Parameter::new("p", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::StaleGraph)));
    }

    #[test]
    fn frozen_parameter_gets_no_gradient_but_passes_it_on() {
        let w = Parameter::new("w", Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
        let mut frozen = Parameter::new("frozen_b", Tensor::from_vec(vec![1.0]));
        frozen.set_trainable(false);
        let x = Parameter::new("x", Tensor::from_vec(vec![1.0, 1.0]));
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.param(&x), tape.param(&w), tape.param(&frozen));
        let y = tape.linear(xv, wv, bv).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.for_param(&frozen).is_none());
        assert_eq!(grads.for_param(&x).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(grads.for_param(&w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = Parameter::new("p", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let v = tape.param(&p);
        assert!(matches!(tape.backward(v), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let p = Parameter::new("p", Tensor::from_vec(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        let s1 = tape.sum(a);
        let s2 = tape.sum(b);
        let both = tape.mul(s1, s2).unwrap();
        let grads = tape.backward(both).unwrap();
        // d/dp (Σp)^2 = 2 Σp = 6
        assert_eq!(grads.for_param(&p).unwrap().data(), &[6.0, 6.0]);
    }
}

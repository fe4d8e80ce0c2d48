use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

static NEXT_KEY: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity of a parameter, used to route gradients back from
/// a tape. Cloning a parameter allocates a fresh key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        Self(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named, learnable tensor with its accumulated gradient.
#[derive(Debug)]
pub struct Parameter {
    key: ParamKey,
    name: String,
    value: Arc<Tensor>,
    grad: Tensor,
    has_grad: bool,
    trainable: bool,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            key: ParamKey::fresh(),
            name: self.name.clone(),
            value: Arc::new((*self.value).clone()),
            grad: self.grad.clone(),
            has_grad: self.has_grad,
            trainable: self.trainable,
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = value.zeros_like();
        Self {
            key: ParamKey::fresh(),
            name: name.into(),
            value: Arc::new(value),
            grad,
            has_grad: false,
            trainable: true,
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access to the value. Copies on write if a live tape still
    /// holds the previous value.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{}` has shape {:?}, new value has {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            )));
        }
        self.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Whether a gradient has been accumulated since the last reset.
    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        self.has_grad = false;
    }

    pub(crate) fn accumulate_grad(&mut self, grad: &Tensor) {
        self.grad.add_assign(grad);
        self.has_grad = true;
    }

    pub(crate) fn scale_grad(&mut self, factor: f32) {
        self.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
    }
}

/// An ordered collection of parameters belonging to one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index. Names must be unique.
    pub fn push(&mut self, param: Parameter) -> Result<usize> {
        if self.index_of(param.name()).is_some() {
            return Err(Error::Config(format!(
                "duplicate parameter name `{}`",
                param.name()
            )));
        }
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Parameter {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter {
        &mut self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name() == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name() == name)
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value().len()).sum()
    }

    /// Adds the gradients recorded for this set's parameters. Returns how
    /// many parameters received a gradient.
    pub fn accumulate(&mut self, grads: &Gradients) -> usize {
        let mut touched = 0;
        for p in &mut self.params {
            if let Some(g) = grads.get(p.key()) {
                p.accumulate_grad(g);
                touched += 1;
            }
        }
        touched
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn scale_grads(&mut self, factor: f32) {
        self.params.iter_mut().for_each(|p| p.scale_grad(factor));
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params
            .iter_mut()
            .for_each(|p| p.set_trainable(trainable));
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable())
    }
}

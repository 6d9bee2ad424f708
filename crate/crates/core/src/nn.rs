//! Parameter storage, per-step binding onto a tape, and convolution layers.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Structure and texture encoders (reduced learning rate).
    Encoder,
    /// Decoders, pose network, adapter and projectors.
    Head,
    /// Never updated.
    Frozen,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Head => "head",
            ParamGroup::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ParamGroup::Encoder),
            "head" => Ok(ParamGroup::Head),
            "frozen" => Ok(ParamGroup::Frozen),
            other => Err(Error::format("manifest", format!("unknown parameter group {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!("parameter {}: {:?} vs {:?}", p.name, p.value.shape(), value.shape())));
        }
        p.value = value;
        Ok(())
    }
}

/// Lazily places parameters on a tape: trainable ones as leaves, frozen
/// ones as constants. Each parameter is placed at most once per tape.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder { tape, store, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = match p.group {
            ParamGroup::Frozen => self.tape.constant(p.value.clone()),
            _ => self.tape.leaf(p.value.clone()),
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Uses `v` for parameter `id` instead of the stored value.
    pub fn bind(&self, id: ParamId, v: Var<'t>) {
        self.bound.borrow_mut()[id.0] = Some(v);
    }

    /// Gradients from the tape's last backward pass, indexed by [`ParamId`];
    /// `None` for parameters that were not used or are frozen.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.bound.borrow().iter().map(|v| v.and_then(|v| v.grad())).collect()
    }
}

/// Uniform initialization with bound `gain · sqrt(3 / fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32 as f64).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Dense layer `y = W x + b` on a flattened input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
    ) -> Self {
        let w = init_uniform(rng, &[out_features, in_features], in_features, 1.0);
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), group);
        Linear { weight, bias }
    }

    /// Flattens `x` and returns the `[out_features]` response.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.value_ref().len();
        let y = b.var(self.weight).matmul(x.reshape(&[n, 1])?)?;
        let m = y.shape()[0];
        y.reshape(&[m])?.add(b.var(self.bias))
    }
}

/// Square convolution with bias and "same" padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init_uniform(rng, &[out_channels, in_channels, kernel, kernel], fan_in, 2f64.sqrt());
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), group);
        Conv2d { weight, bias, stride, padding: kernel / 2 }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(b.var(self.weight), Some(b.var(self.bias)), self.stride, self.padding)
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.shape()[1]
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.shape()[0]
    }
}

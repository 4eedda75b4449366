//! Parameterised layers shared by the network modules.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Conv2dSpec, PoolKind, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named parameters and buffers of a module tree.
pub struct ParamSet<S: Scalar> {
    pub params: Vec<(String, Tensor<S>)>,
    pub buffers: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn param(&mut self, prefix: &str, name: &str, t: &Tensor<S>) {
        self.params.push((join(prefix, name), t.clone()));
    }

    pub fn buffer(&mut self, prefix: &str, name: &str, t: &Tensor<S>) {
        self.buffers.push((join(prefix, name), t.clone()));
    }

    pub fn tensors(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything holding trainable state.
pub trait Module<S: Scalar> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>);

    fn param_set(&self) -> ParamSet<S> {
        let mut set = ParamSet::default();
        self.collect("", &mut set);
        set
    }

    fn parameters(&self) -> Vec<Tensor<S>> {
        self.param_set().tensors()
    }
}

/// Seeded parameter initialiser: fan-in scaled uniform for weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<S> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(self.rng.gen_range(-bound..=bound))).collect();
        Tensor::param(data, shape).expect("shape and data agree")
    }

    pub fn fan_in<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn constant<S: Scalar>(&mut self, shape: &[usize], value: f64) -> Tensor<S> {
        Tensor::full(shape, S::lit(value)).into_param()
    }
}

pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub spec: Conv2dSpec,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec, bias: bool) -> Self {
        let fan_in = cin / spec.groups * kernel * kernel;
        let weight = init.fan_in(&[cout, cin / spec.groups, kernel, kernel], fan_in);
        let bias = bias.then(|| init.fan_in(&[cout], fan_in));
        Self { weight, bias, spec }
    }

    /// Same-padded stride-1 convolution.
    pub fn same(init: &mut Init, cin: usize, cout: usize, kernel: usize, groups: usize) -> Self {
        Self::new(init, cin, cout, kernel, Conv2dSpec::new(1, kernel / 2, groups), true)
    }

    pub fn pointwise(init: &mut Init, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(init, cin, cout, 1, Conv2dSpec::default(), bias)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        set.param(prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            set.param(prefix, "bias", b);
        }
    }
}

/// `x · W + b` on the last axis.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(init: &mut Init, din: usize, dout: usize) -> Self {
        Self {
            weight: init.fan_in(&[din, dout], din),
            bias: init.fan_in(&[dout], din),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        set.param(prefix, "weight", &self.weight);
        set.param(prefix, "bias", &self.bias);
    }
}

/// Layer norm over one axis (1 for `[T, C, H, W]` maps, the last axis for
/// token sequences).
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub axis: usize,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(init: &mut Init, dim: usize, axis: usize) -> Self {
        Self {
            gamma: init.constant(&[dim], 1.0),
            beta: init.constant(&[dim], 0.0),
            axis,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let axis = if self.axis == usize::MAX { x.rank() - 1 } else { self.axis };
        x.layer_norm(axis, &self.gamma, &self.beta, LN_EPS)
    }

    /// Layer norm over the trailing axis whatever the rank.
    pub fn last(init: &mut Init, dim: usize) -> Self {
        Self::new(init, dim, usize::MAX)
    }
}

impl<S: Scalar> Module<S> for LayerNorm<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        set.param(prefix, "weight", &self.gamma);
        set.param(prefix, "bias", &self.beta);
    }
}

/// Batch norm over `[T, C, H, W]` (statistics across T, H, W per channel).
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    training: Cell<bool>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self {
            gamma: init.constant(&[channels], 1.0),
            beta: init.constant(&[channels], 0.0),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            training: Cell::new(true),
        }
    }

    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let c = x.shape()[1];
        let bshape = [1, c, 1, 1];
        if self.training.get() {
            let (mean, var) = crate::tensor::moments(x, &[0, 2, 3]);
            let n = (x.numel() / c) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = S::lit(BN_MOMENTUM);
            self.running_mean.update_data(|rm| {
                for (r, &v) in rm.iter_mut().zip(&mean) {
                    *r = (S::one() - m) * *r + m * v;
                }
            });
            self.running_var.update_data(|rv| {
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (S::one() - m) * *r + m * v * S::lit(unbias);
                }
            });
            x.standardize(&[0, 2, 3], BN_EPS)?
                .mul(&self.gamma.reshape(&bshape)?)?
                .add(&self.beta.reshape(&bshape)?)
        } else {
            let inv: Vec<S> = self
                .running_var
                .data()
                .iter()
                .map(|&v| S::one() / (v + S::lit(BN_EPS)).sqrt())
                .collect();
            let shift: Vec<S> = self
                .running_mean
                .data()
                .iter()
                .zip(&inv)
                .map(|(&m, &i)| -m * i)
                .collect();
            let inv = Tensor::new(inv, &bshape)?;
            let shift = Tensor::new(shift, &bshape)?;
            x.mul(&inv)?
                .add(&shift)?
                .mul(&self.gamma.reshape(&bshape)?)?
                .add(&self.beta.reshape(&bshape)?)
        }
    }
}

impl<S: Scalar> Module<S> for BatchNorm2d<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        set.param(prefix, "weight", &self.gamma);
        set.param(prefix, "bias", &self.beta);
        set.buffer(prefix, "running_mean", &self.running_mean);
        set.buffer(prefix, "running_var", &self.running_var);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Layer,
}

/// Normalisation used after decoder depth-wise convolutions.
pub enum Norm2d<S: Scalar> {
    Batch(BatchNorm2d<S>),
    Layer(LayerNorm<S>),
}

impl<S: Scalar> Norm2d<S> {
    pub fn new(init: &mut Init, kind: NormKind, channels: usize) -> Self {
        match kind {
            NormKind::Batch => Norm2d::Batch(BatchNorm2d::new(init, channels)),
            NormKind::Layer => Norm2d::Layer(LayerNorm::new(init, channels, 1)),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Norm2d::Batch(bn) => bn.forward(x),
            Norm2d::Layer(ln) => ln.forward(x),
        }
    }

    pub fn set_training(&self, on: bool) {
        if let Norm2d::Batch(bn) = self {
            bn.set_training(on);
        }
    }
}

impl<S: Scalar> Module<S> for Norm2d<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        match self {
            Norm2d::Batch(bn) => bn.collect(prefix, set),
            Norm2d::Layer(ln) => ln.collect(prefix, set),
        }
    }
}

/// Squeeze-and-excitation channel re-weighting with bottleneck ratio 4.
pub struct SqueezeExcite<S: Scalar> {
    pub reduce: Conv2d<S>,
    pub expand: Conv2d<S>,
}

impl<S: Scalar> SqueezeExcite<S> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        let hidden = (channels / 4).max(1);
        Self {
            reduce: Conv2d::pointwise(init, channels, hidden, true),
            expand: Conv2d::pointwise(init, hidden, channels, true),
        }
    }

    /// Per-channel weights in (0, 1), shape `[T, C, 1, 1]`.
    pub fn weights(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.global_pool(PoolKind::Avg)?;
        Ok(self.expand.forward(&self.reduce.forward(&s)?.relu())?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.mul(&self.weights(x)?)
    }
}

impl<S: Scalar> Module<S> for SqueezeExcite<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.reduce.collect(&join(prefix, "reduce"), set);
        self.expand.collect(&join(prefix, "expand"), set);
    }
}

/// Pointwise expand / GELU / project on `[T, C, H, W]` maps.
pub struct ConvMlp<S: Scalar> {
    pub fc1: Conv2d<S>,
    pub fc2: Conv2d<S>,
}

impl<S: Scalar> ConvMlp<S> {
    pub fn new(init: &mut Init, dim: usize, ratio: usize) -> Self {
        Self {
            fc1: Conv2d::pointwise(init, dim, dim * ratio, true),
            fc2: Conv2d::pointwise(init, dim * ratio, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<S: Scalar> Module<S> for ConvMlp<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.fc1.collect(&join(prefix, "fc1"), set);
        self.fc2.collect(&join(prefix, "fc2"), set);
    }
}

/// Token feed-forward network on the last axis.
pub struct Mlp<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(init: &mut Init, dim: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(init, dim, dim * ratio),
            fc2: Linear::new(init, dim * ratio, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<S: Scalar> Module<S> for Mlp<S> {
    fn collect(&self, prefix: &str, set: &mut ParamSet<S>) {
        self.fc1.collect(&join(prefix, "fc1"), set);
        self.fc2.collect(&join(prefix, "fc2"), set);
    }
}

pub fn zero_out<S: Scalar>(t: &Tensor<S>) {
    t.update_data(|d| d.iter_mut().for_each(|v| *v = S::zero()));
}

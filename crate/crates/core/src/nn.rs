//! Parameterized layers and the named-tensor registry shared by the
//! optimizer, checkpoints and the model inspector.

use std::sync::RwLock;

use crate::error::Result;
use crate::tensor::init::{xavier_uniform, Rng64};
use crate::tensor::{self, ConvSpec, Tensor};

/// A named tensor owned by a layer: a trainable parameter or a state buffer.
#[derive(Debug)]
pub struct Slot {
    value: RwLock<Tensor>,
    trainable: bool,
}

impl Slot {
    pub fn param(t: Tensor) -> Self {
        Self {
            value: RwLock::new(t.requires_grad()),
            trainable: true,
        }
    }

    pub fn buffer(t: Tensor) -> Self {
        Self {
            value: RwLock::new(t.detach()),
            trainable: false,
        }
    }

    pub fn get(&self) -> Tensor {
        self.value.read().unwrap().clone()
    }

    /// Replaces the value, keeping the slot's trainable flag.
    pub fn set(&self, t: Tensor) {
        let t = if self.trainable { t.detach().requires_grad() } else { t.detach() };
        *self.value.write().unwrap() = t;
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.read().unwrap().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.read().unwrap().numel()
    }
}

/// Anything that owns named tensors.
pub trait Module {
    /// Visits every slot in a fixed order with its canonical dotted path.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot));

    fn slots(&self) -> Vec<(String, &Slot)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, slot| out.push((name, slot)));
        out
    }

    fn num_params(&self) -> usize {
        self.slots()
            .iter()
            .filter(|(_, s)| s.is_trainable())
            .map(|(_, s)| s.numel())
            .sum()
    }

    fn zero_grad(&self) {
        for (_, s) in self.slots() {
            s.get().zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Slot,
    pub bias: Option<Slot>,
}

impl Conv2d {
    pub fn new(spec: ConvSpec, bias: bool, rng: &mut Rng64) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let receptive = shape[2] * shape[3];
        let weight = xavier_uniform(&shape, shape[1] * receptive, shape[0] * receptive, rng);
        Ok(Self {
            spec,
            weight: Slot::param(weight),
            bias: bias.then(|| Slot::param(Tensor::zeros(&[spec.out_channels]))),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(Slot::get);
        tensor::conv2d(x, &self.spec, &self.weight.get(), b.as_ref())
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Depthwise `k x k` then pointwise 1x1 convolution.
pub struct SeparableConv2d {
    pub spec: ConvSpec,
    pub depthwise: Slot,
    pub pointwise: Slot,
    pub bias: Option<Slot>,
}

impl SeparableConv2d {
    pub fn new(spec: ConvSpec, bias: bool, rng: &mut Rng64) -> Result<Self> {
        spec.validate()?;
        let (c, k) = (spec.in_channels, spec.kernel.0 * spec.kernel.1);
        let dw = xavier_uniform(&[c, 1, spec.kernel.0, spec.kernel.1], k, k, rng);
        let pw = xavier_uniform(&[spec.out_channels, c, 1, 1], c, spec.out_channels, rng);
        Ok(Self {
            spec,
            depthwise: Slot::param(dw),
            pointwise: Slot::param(pw),
            bias: bias.then(|| Slot::param(Tensor::zeros(&[spec.out_channels]))),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(Slot::get);
        tensor::separable_conv2d(x, &self.spec, &self.depthwise.get(), &self.pointwise.get(), b.as_ref())
    }
}

impl Module for SeparableConv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        f(join(prefix, "depthwise"), &self.depthwise);
        f(join(prefix, "pointwise"), &self.pointwise);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// `x @ W + b` over the trailing axis; `W` is stored `[in, out]`.
pub struct Linear {
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(inp: usize, out: usize, rng: &mut Rng64) -> Self {
        Self {
            weight: Slot::param(xavier_uniform(&[inp, out], inp, out, rng)),
            bias: Slot::param(Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &self.weight.get(), Some(&self.bias.get()))
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

pub struct LayerNorm {
    pub gamma: Slot,
    pub beta: Slot,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f32) -> Self {
        Self {
            gamma: Slot::param(Tensor::ones(&[dim])),
            beta: Slot::param(Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, &self.gamma.get(), &self.beta.get(), self.eps)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

/// Batch normalization with exponential running statistics.
pub struct BatchNorm2d {
    pub gamma: Slot,
    pub beta: Slot,
    pub running_mean: Slot,
    pub running_var: Slot,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f32) -> Self {
        Self {
            gamma: Slot::param(Tensor::ones(&[channels])),
            beta: Slot::param(Tensor::zeros(&[channels])),
            running_mean: Slot::buffer(Tensor::zeros(&[channels])),
            running_var: Slot::buffer(Tensor::ones(&[channels])),
            momentum: 0.1,
            eps,
        }
    }

    /// Batch statistics (and a running-stat update) when `train`, running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train {
            return tensor::batch_norm_eval(
                x,
                &self.gamma.get(),
                &self.beta.get(),
                self.running_mean.get().data(),
                self.running_var.get().data(),
                self.eps,
            );
        }
        let (y, stats) = tensor::batch_norm_train(x, &self.gamma.get(), &self.beta.get(), self.eps)?;
        let m = self.momentum;
        let blend = |slot: &Slot, batch: &[f32]| -> Result<()> {
            let old = slot.get();
            let new = old.data().iter().zip(batch).map(|(r, b)| (1.0 - m) * r + m * b).collect();
            slot.set(Tensor::new(old.shape(), new)?);
            Ok(())
        };
        blend(&self.running_mean, &stats.mean)?;
        blend(&self.running_var, &stats.var)?;
        Ok(y)
    }
}

impl Module for BatchNorm2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }
}

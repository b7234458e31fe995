//! Trainable layers built on the tape: linear, batch norm, MLPs and
//! convolution units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Normalization, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything holding trainable tensors in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Every tensor needed to restore the module, in checkpoint order:
    /// trainable parameters followed by running statistics.
    fn state(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != state.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("expected {} tensors, found {}", params.len(), state.len()),
            });
        }
        for (p, s) in params.iter_mut().zip(state) {
            p.assign(s)?;
        }
        Ok(())
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Clears gradients ahead of the next backward pass.
    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√in` initialization with zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[inputs, outputs], bound, rng).trainable(),
            bias: Tensor::zeros(&[outputs]).trainable(),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]).trainable(),
            bias: Tensor::zeros(&[outputs]).trainable(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `y = x·W + b` for `x: [B × in]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.inputs() {
            return Err(Error::shape("linear_forward", xs, self.weight.shape()));
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization over axis 1 with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], 1.0).trainable(),
            shift: Tensor::zeros(&[channels]).trainable(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the running ones.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(&self.scale);
        let beta = tape.param(&self.shift);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, Normalization::Batch, BN_EPS)?;
                let stats = stats.expect("batch mode returns statistics");
                let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
                for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let norm = Normalization::Running {
                    mean: self.running_mean.data(),
                    var: self.running_var.data(),
                };
                Ok(tape.batch_norm(x, gamma, beta, norm, BN_EPS)?.0)
            }
        }
    }
}

impl Module for BatchNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.scale, &self.shift]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.scale, &mut self.shift]
    }

    fn state(&self) -> Vec<Tensor> {
        vec![
            self.scale.clone(),
            self.shift.clone(),
            self.running_mean.clone(),
            self.running_var.clone(),
        ]
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        if state.len() != 4 {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("batch norm expects 4 tensors, found {}", state.len()),
            });
        }
        self.scale.assign(&state[0])?;
        self.shift.assign(&state[1])?;
        self.running_mean.assign(&state[2])?;
        self.running_var.assign(&state[3])
    }
}

/// One MLP stage: linear, then optionally batch norm and an activation.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

/// Multi-layer perceptron applied row-wise to `[B × in]`.
///
/// Hidden layers always carry linear, batch norm and activation. The output
/// layer carries them too when built with `normalized_output`, which is how
/// the single-stage PointNet MLPs are expressed.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<MlpLayer>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        normalized_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least two dims, got {dims:?}"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let staged = i < last || normalized_output;
                MlpLayer {
                    linear: Linear::new(w[0], w[1], rng),
                    norm: staged.then(|| BatchNorm::new(w[1])),
                    activation: if staged { hidden } else { Activation::Identity },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].linear.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").linear.outputs()
    }

    /// Zeroes the final linear layer so outputs start at exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.linear.weight.data_mut().fill(0.0);
        last.linear.bias.data_mut().fill(0.0);
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for layer in &mut self.layers {
            h = layer.linear.forward(tape, h)?;
            if let Some(norm) = &mut layer.norm {
                h = norm.forward(tape, h, mode)?;
            }
            h = layer.activation.apply(tape, h);
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.linear.params());
            if let Some(n) = &l.norm {
                out.extend(n.params());
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.linear.params_mut());
            if let Some(n) = &mut l.norm {
                out.extend(n.params_mut());
            }
        }
        out
    }

    fn state(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.linear.state());
            if let Some(n) = &l.norm {
                out.extend(n.state());
            }
        }
        out
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let expected: usize = self
            .layers
            .iter()
            .map(|l| 2 + if l.norm.is_some() { 4 } else { 0 })
            .sum();
        if state.len() != expected {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("MLP expects {expected} tensors, found {}", state.len()),
            });
        }
        let mut rest = state;
        for l in &mut self.layers {
            l.linear.load_state(&rest[..2])?;
            rest = &rest[2..];
            if let Some(n) = &mut l.norm {
                n.load_state(&rest[..4])?;
                rest = &rest[4..];
            }
        }
        Ok(())
    }
}

/// How a convolution unit maps spatial extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Conv {
        stride: usize,
        padding: usize,
    },
    /// Transposed convolution (no padding).
    Deconv {
        stride: usize,
    },
}

/// Conv (or deconv), batch norm and ReLU. The convolution carries no bias
/// since the batch-norm shift subsumes it.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub weight: Tensor,
    pub kind: ConvKind,
    pub norm: BatchNorm,
}

impl ConvUnit {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        kind: ConvKind,
        rng: &mut R,
    ) -> Self {
        let fan_in = (inputs * kernel * kernel).max(1) as f64;
        let shape = match kind {
            ConvKind::Conv { .. } => [outputs, inputs, kernel, kernel],
            ConvKind::Deconv { .. } => [inputs, outputs, kernel, kernel],
        };
        Self {
            weight: Tensor::uniform(&shape, (3.0 / fan_in).sqrt(), rng).trainable(),
            kind,
            norm: BatchNorm::new(outputs),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.norm.channels()
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = match self.kind {
            ConvKind::Conv { stride, padding } => tape.conv2d(x, w, stride, padding)?,
            ConvKind::Deconv { stride } => tape.deconv2d(x, w, stride)?,
        };
        let y = self.norm.forward(tape, y, mode)?;
        Ok(tape.relu(y))
    }
}

impl Module for ConvUnit {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.weight];
        out.extend(self.norm.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.weight];
        out.extend(self.norm.params_mut());
        out
    }

    fn state(&self) -> Vec<Tensor> {
        let mut out = vec![self.weight.clone()];
        out.extend(self.norm.state());
        out
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        if state.len() != 5 {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("conv unit expects 5 tensors, found {}", state.len()),
            });
        }
        self.weight.assign(&state[0])?;
        self.norm.load_state(&state[1..])
    }
}

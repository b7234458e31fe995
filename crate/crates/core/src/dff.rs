//! Deep feature fusion: a shared conv block, a long (down/up-sampled) and a
//! short receptive-field branch, their sum, and residual channel attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_tensors, encode_tensors};
use crate::error::{Error, Result};
use crate::numerics::{ConvKind, ConvUnit, Mode, Module, Tape, Tensor, Var};

pub const DFF_MAGIC: &[u8; 4] = b"DFF1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DffConfig {
    /// `C`
    pub in_channels: usize,
    /// `C′`
    pub out_channels: usize,
    /// Width of the shared block and the branch interiors.
    pub block_channels: usize,
    pub kernel: usize,
    pub down_kernel: usize,
    pub up_kernel: usize,
}

impl Default for DffConfig {
    fn default() -> Self {
        Self {
            in_channels: 16,
            out_channels: 32,
            block_channels: 128,
            kernel: 3,
            down_kernel: 3,
            up_kernel: 2,
        }
    }
}

impl DffConfig {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.block_channels == 0 {
            return Err(Error::Config("DFF channel widths must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) || self.down_kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "stride-1 and down-sampling kernels must be odd".into(),
            ));
        }
        if self.up_kernel != 2 {
            return Err(Error::Config(
                "the stride-2 deconvolution needs kernel 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dff {
    cfg: DffConfig,
    pub conv_block1: Vec<ConvUnit>,
    pub conv_block2: ConvUnit,
    pub conv2: ConvUnit,
    pub deconv2: ConvUnit,
    pub conv3: ConvUnit,
    pub conv4: ConvUnit,
    pub beta: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DffVars {
    pub long: Var,
    pub short: Var,
    pub fused: Var,
    pub output: Var,
}

impl Dff {
    pub fn new<R: Rng + ?Sized>(cfg: &DffConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.block_channels;
        let same = ConvKind::Conv {
            stride: 1,
            padding: cfg.kernel / 2,
        };
        let conv_block1 = (0..4)
            .map(|i| {
                ConvUnit::new(
                    if i == 0 { cfg.in_channels } else { b },
                    b,
                    cfg.kernel,
                    same,
                    rng,
                )
            })
            .collect();
        let down = ConvKind::Conv {
            stride: 2,
            padding: cfg.down_kernel / 2,
        };
        Ok(Self {
            cfg: *cfg,
            conv_block1,
            conv_block2: ConvUnit::new(b, b, cfg.down_kernel, down, rng),
            conv2: ConvUnit::new(b, b, cfg.kernel, same, rng),
            deconv2: ConvUnit::new(
                b,
                cfg.out_channels,
                cfg.up_kernel,
                ConvKind::Deconv { stride: 2 },
                rng,
            ),
            conv3: ConvUnit::new(b, b, cfg.kernel, same, rng),
            conv4: ConvUnit::new(b, cfg.out_channels, cfg.kernel, same, rng),
            beta: Tensor::scalar(0.0).trainable(),
        })
    }

    pub fn config(&self) -> &DffConfig {
        &self.cfg
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        let mut out: Vec<&mut ConvUnit> = self.conv_block1.iter_mut().collect();
        out.extend([
            &mut self.conv_block2,
            &mut self.conv2,
            &mut self.deconv2,
            &mut self.conv3,
            &mut self.conv4,
        ]);
        out
    }

    fn units(&self) -> Vec<&ConvUnit> {
        let mut out: Vec<&ConvUnit> = self.conv_block1.iter().collect();
        out.extend([
            &self.conv_block2,
            &self.conv2,
            &self.deconv2,
            &self.conv3,
            &self.conv4,
        ]);
        out
    }

    /// `(F_L, F_S)`, both `[B, C′, H, W]`.
    pub fn branches(&mut self, tape: &mut Tape, f0: Var, mode: Mode) -> Result<(Var, Var)> {
        let s = tape.shape(f0).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::shape("dff_branches", &s, &[self.cfg.in_channels]));
        }
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) || s[2] == 0 || s[3] == 0 {
            return Err(Error::invalid(
                "dff_branches",
                format!(
                    "spatial dims must be even and positive, got {}×{}",
                    s[2], s[3]
                ),
            ));
        }
        let mut f1 = f0;
        for unit in &mut self.conv_block1 {
            f1 = unit.forward(tape, f1, mode)?;
        }
        let down = self.conv_block2.forward(tape, f1, mode)?;
        let mid = self.conv2.forward(tape, down, mode)?;
        let long = self.deconv2.forward(tape, mid, mode)?;
        let short = self.conv3.forward(tape, f1, mode)?;
        let short = self.conv4.forward(tape, short, mode)?;
        Ok((long, short))
    }

    pub fn forward(&mut self, tape: &mut Tape, f0: Var, mode: Mode) -> Result<DffVars> {
        let (long, short) = self.branches(tape, f0, mode)?;
        let fused = tape.add(long, short)?;
        let beta = tape.param(&self.beta);
        let output = channel_attention_var(tape, fused, beta)?;
        Ok(DffVars {
            long,
            short,
            fused,
            output,
        })
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_tensors(DFF_MAGIC, &self.state())
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        self.load_state(&decode_tensors(DFF_MAGIC, bytes)?)
    }
}

impl Module for Dff {
    fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.units().into_iter().flat_map(|u| u.params()).collect();
        out.push(&self.beta);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            conv_block1,
            conv_block2,
            conv2,
            deconv2,
            conv3,
            conv4,
            beta,
            ..
        } = self;
        let mut out: Vec<&mut Tensor> = Vec::new();
        for u in conv_block1
            .iter_mut()
            .chain([conv_block2, conv2, deconv2, conv3, conv4])
        {
            out.extend(u.params_mut());
        }
        out.push(beta);
        out
    }

    /// Conv_block1 units, Conv_block2, Conv2, Deconv2, Conv3, Conv4 (each:
    /// weight, scale, shift, running mean, running variance), then `β`.
    fn state(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.units().into_iter().flat_map(|u| u.state()).collect();
        out.push(self.beta.clone());
        out
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let n = self.units().len();
        if state.len() != 5 * n + 1 {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("DFF expects {} tensors, found {}", 5 * n + 1, state.len()),
            });
        }
        for (i, u) in self.units_mut().into_iter().enumerate() {
            u.load_state(&state[5 * i..5 * i + 5])?;
        }
        self.beta.assign(&state[5 * n])
    }
}

/// `out_j = β·Σ_i softmax_i(⟨F_i, F_j⟩)·F_i + F_j`, per batch item.
pub fn channel_attention_var(tape: &mut Tape, f: Var, beta: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("channel_attention", &s, &[1, 0, 0, 0]));
    }
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let flat = tape.reshape(f, &[b * c, n])?;
    let mut items = Vec::with_capacity(b);
    for item in 0..b {
        let rows: Vec<usize> = (item * c..(item + 1) * c).collect();
        let x = if b == 1 {
            flat
        } else {
            tape.gather_rows(flat, &rows)?
        };
        let xt = tape.transpose(x)?;
        let gram = tape.matmul(x, xt)?;
        let weights = tape.softmax(gram, 1)?;
        let mixed = tape.matmul(weights, x)?;
        let scaled = tape.mul_scalar(mixed, beta)?;
        items.push(tape.add(scaled, x)?);
    }
    let out = if b == 1 {
        items[0]
    } else {
        tape.concat(&items, 0)?
    };
    tape.reshape(out, &s)
}

/// Row-stochastic channel weights `x_{ji}` for one `[1, C, H, W]` map.
pub fn channel_weights(f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::shape("channel_attention", s, &[1, 0, 0, 0]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone().reshaped(&[s[1], s[2] * s[3]])?);
    let xt = tape.transpose(x)?;
    let gram = tape.matmul(x, xt)?;
    let w = tape.softmax(gram, 1)?;
    Ok(tape.value(w).clone())
}

pub fn channel_attention(f: &Tensor, beta: f64) -> Result<Tensor> {
    if f.rank() != 4 || f.shape()[0] != 1 {
        return Err(Error::shape("channel_attention", f.shape(), &[1, 0, 0, 0]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let b = tape.constant(Tensor::scalar(beta));
    let y = channel_attention_var(&mut tape, x, b)?;
    Ok(tape.value(y).clone())
}

pub fn dff_branches(f0: &Tensor, params: &Dff) -> Result<(Tensor, Tensor)> {
    let mut p = params.clone();
    let mut tape = Tape::new();
    let x = tape.constant(f0.clone());
    let (l, s) = p.branches(&mut tape, x, Mode::Eval)?;
    Ok((tape.value(l).clone(), tape.value(s).clone()))
}

pub fn dff_forward(f0: &Tensor, params: &Dff) -> Result<Tensor> {
    let mut p = params.clone();
    let mut tape = Tape::new();
    let x = tape.constant(f0.clone());
    let v = p.forward(&mut tape, x, Mode::Eval)?;
    Ok(tape.value(v.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_module_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DffConfig {
        DffConfig {
            in_channels: 3,
            out_channels: 4,
            block_channels: 4,
            ..DffConfig::default()
        }
    }

    #[test]
    fn shape_law_and_odd_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dff = Dff::new(&small(), &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 3, 16, 16], 1.0, &mut rng);
        let (l, s) = dff_branches(&x, &dff).unwrap();
        assert_eq!(l.shape(), &[1, 4, 16, 16]);
        assert_eq!(s.shape(), &[1, 4, 16, 16]);
        assert_eq!(dff_forward(&x, &dff).unwrap().shape(), &[1, 4, 16, 16]);
        let odd = Tensor::zeros(&[1, 3, 7, 8]);
        assert!(dff_branches(&odd, &dff).is_err());
    }

    #[test]
    fn zero_beta_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[1, 5, 4, 4], 2.0, &mut rng);
        assert_eq!(channel_attention(&f, 0.0).unwrap().data(), f.data());
    }

    #[test]
    fn identical_channels_scale_by_one_plus_beta() {
        let row = [0.3, -1.0, 0.5, 2.0];
        let data: Vec<f64> = (0..3).flat_map(|_| row).collect();
        let f = Tensor::new(&[1, 3, 2, 2], data).unwrap();
        let w = channel_weights(&f).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let out = channel_attention(&f, 0.7).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 1.7 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn two_channel_hand_case() {
        // F_0 = [1, 0], F_1 = [1, 1]: Gram = [[1, 1], [1, 2]].
        let f = Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let x10 = 1.0 / (1.0 + e);
        let x11 = e / (1.0 + e);
        let beta = 0.5;
        let want = [
            beta * (0.5 * 1.0 + 0.5 * 1.0) + 1.0,
            beta * (0.5 * 0.0 + 0.5 * 1.0) + 0.0,
            beta * (x10 * 1.0 + x11 * 1.0) + 1.0,
            beta * (x10 * 0.0 + x11 * 1.0) + 1.0,
        ];
        let got = channel_attention(&f, beta).unwrap();
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dff = Dff::new(&small(), &mut rng).unwrap();
        for u in dff.units_mut() {
            u.weight.data_mut().fill(0.0);
        }
        let x = Tensor::uniform(&[1, 3, 8, 8], 3.0, &mut rng);
        assert!(dff_forward(&x, &dff)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn long_branch_sees_further() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dff = Dff::new(&small(), &mut rng).unwrap();
        for u in dff.units_mut() {
            u.weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = w.abs() + 0.01);
        }
        let mut x = Tensor::zeros(&[1, 3, 32, 32]);
        x.data_mut()[16 * 32 + 16] = 1.0;
        let (l, s) = dff_branches(&x, &dff).unwrap();
        let footprint = |t: &Tensor| t.data().iter().filter(|&&v| v > 0.0).count();
        assert!(
            footprint(&l) > footprint(&s),
            "{} vs {}",
            footprint(&l),
            footprint(&s)
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dff = Dff::new(&small(), &mut rng).unwrap();
        dff.beta.data_mut()[0] = 0.3;
        let x = Tensor::uniform(&[1, 3, 8, 8], 1.0, &mut rng);
        let probe = Tensor::uniform(&[1, 4, 8, 8], 1.0, &mut rng);
        let err = check_module_gradients(
            &dff,
            |m, tape| {
                let xv = tape.constant(x.clone());
                let v = m.forward(tape, xv, Mode::Train)?;
                let p = tape.constant(probe.clone());
                let prod = tape.mul(v.output, p)?;
                Ok(tape.sum(prod))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Dff::new(&small(), &mut rng).unwrap();
        let bytes = a.to_checkpoint();
        assert_eq!(&bytes[..4], b"DFF1");
        let mut b = Dff::new(&small(), &mut rng).unwrap();
        b.load_checkpoint(&bytes).unwrap();
        assert_eq!(b.to_checkpoint(), bytes);
    }
}

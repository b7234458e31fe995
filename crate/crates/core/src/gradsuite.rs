//! Finite-difference checks of the trainable modules on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aaf::{Aaf, AafConfig, CombineMode};
use crate::dff::{Dff, DffConfig};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::numerics::{
    module_gradient_report, Activation, ConvKind, ConvUnit, GradReport, Linear, Mlp, Mode, Module,
    Tape, Tensor, Var,
};
use crate::semantics::{PaintedPointCloud, SemanticRows};
use crate::voxelizer::{voxelize, VoxelConfig, VoxelGrid};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteTarget {
    Aaf,
    Dff,
    All,
}

impl std::str::FromStr for SuiteTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aaf" => Ok(Self::Aaf),
            "dff" => Ok(Self::Dff),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown gradcheck module {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Coordinates that needed the finer step.
    pub refined: usize,
    pub coordinates: usize,
}

impl GradCase {
    fn new(name: &'static str, r: GradReport) -> Self {
        Self {
            name,
            max_rel_error: r.max_rel_error,
            refined: r.refined,
            coordinates: r.coordinates,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

#[derive(Debug, Clone)]
struct ConvStack(Vec<ConvUnit>);

impl Module for ConvStack {
    fn params(&self) -> Vec<&Tensor> {
        self.0.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.iter_mut().flat_map(Module::params_mut).collect()
    }
}

fn probe_loss(tape: &mut Tape, out: Var, probe: &Tensor) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

fn mlp_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mlp = Mlp::new(&[5, 8, 8, 3], Activation::Relu, false, rng)?;
    let x = Tensor::uniform(&[7, 5], 1.0, rng);
    let probe = Tensor::uniform(&[7, 3], 1.0, rng);
    module_gradient_report(
        &mlp,
        |m, tape| {
            let xv = tape.constant(x.clone());
            let y = m.forward(tape, xv, Mode::Train)?;
            probe_loss(tape, y, &probe)
        },
        FD_STEP,
    )
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let stack = ConvStack(vec![
        ConvUnit::new(
            3,
            6,
            3,
            ConvKind::Conv {
                stride: 1,
                padding: 1,
            },
            rng,
        ),
        ConvUnit::new(
            6,
            8,
            3,
            ConvKind::Conv {
                stride: 2,
                padding: 1,
            },
            rng,
        ),
        ConvUnit::new(8, 4, 2, ConvKind::Deconv { stride: 2 }, rng),
    ]);
    let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, rng);
    let probe = Tensor::uniform(&[2, 4, 8, 8], 1.0, rng);
    module_gradient_report(
        &stack,
        |s, tape| {
            let mut v = tape.constant(x.clone());
            for unit in &mut s.0 {
                v = unit.forward(tape, v, Mode::Train)?;
            }
            probe_loss(tape, v, &probe)
        },
        FD_STEP,
    )
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<VoxelGrid> {
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..3.0),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    let mut probs = || {
        let mut d = Vec::with_capacity(n * m);
        for _ in 0..n {
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            d.extend(raw.iter().map(|v| v / s));
        }
        SemanticRows::new(m, d)
    };
    let (s2, s3) = (probs()?, probs()?);
    let pcc = PaintedPointCloud::new(PointCloud::new(points), s2, s3)?;
    let cfg = VoxelConfig {
        range_min: [0.0; 3],
        range_max: [3.0, 3.0, 1.0],
        voxel_size: [1.0, 1.0, 1.0],
        points_per_voxel: 4,
        seed: 1,
    };
    voxelize(&pcc, &cfg)
}

fn aaf_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let m = 3;
    let grid = random_grid(rng, 30, m)?;
    let cfg = AafConfig {
        local_channels: 8,
        global_channels: 8,
        attention_hidden: 8,
        combine: CombineMode::Add,
    };
    let mut aaf = Aaf::new(m, &cfg, rng)?;
    // A random output layer so that every attention weight receives gradient.
    aaf.mlp_att.layers.last_mut().expect("non-empty").linear = Linear::new(8, 1, rng);
    let target = Tensor::uniform(&[grid.len(), m], 1.0, rng);
    module_gradient_report(
        &aaf,
        |a, tape| {
            let v = a.forward(tape, &grid, Mode::Train)?;
            tape.mse(v.fused, target.data())
        },
        FD_STEP,
    )
}

fn dff_case(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let cfg = DffConfig {
        in_channels: 4,
        out_channels: 6,
        block_channels: 8,
        ..DffConfig::default()
    };
    let mut dff = Dff::new(&cfg, rng)?;
    dff.beta.data_mut()[0] = 0.3;
    let x = Tensor::uniform(&[1, 4, 8, 8], 1.0, rng);
    let probe = Tensor::uniform(&[1, 6, 8, 8], 1.0, rng);
    module_gradient_report(
        &dff,
        |d, tape| {
            let xv = tape.constant(x.clone());
            let v = d.forward(tape, xv, Mode::Train)?;
            probe_loss(tape, v.output, &probe)
        },
        FD_STEP,
    )
}

/// Worst relative error per case. `All` adds the MLP and conv-stack cases.
pub fn gradient_suite(target: SuiteTarget, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if target == SuiteTarget::All {
        out.push(GradCase::new("mlp", mlp_case(&mut rng)?));
        out.push(GradCase::new("conv-stack", conv_case(&mut rng)?));
    }
    if matches!(target, SuiteTarget::Aaf | SuiteTarget::All) {
        out.push(GradCase::new("aaf", aaf_case(&mut rng)?));
    }
    if matches!(target, SuiteTarget::Dff | SuiteTarget::All) {
        out.push(GradCase::new("dff", dff_case(&mut rng)?));
    }
    Ok(out)
}

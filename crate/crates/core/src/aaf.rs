//! Adaptive attention fusion: PointNet-style local and global voxel features
//! drive a per-voxel sigmoid score that weights 2-D against 3-D semantics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_tensors, encode_tensors};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Mlp, Mode, Module, Tape, Tensor, Var};
use crate::voxelizer::VoxelGrid;

pub const AAF_MAGIC: &[u8; 4] = b"AAF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    Concat,
    #[default]
    Add,
}

impl CombineMode {
    /// Width of the fused vector for `m` classes.
    pub fn width(self, m: usize) -> usize {
        match self {
            Self::Add => m,
            Self::Concat => 2 * m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AafConfig {
    pub local_channels: usize,
    pub global_channels: usize,
    pub attention_hidden: usize,
    pub combine: CombineMode,
}

impl Default for AafConfig {
    fn default() -> Self {
        Self {
            local_channels: 64,
            global_channels: 128,
            attention_hidden: 64,
            combine: CombineMode::Add,
        }
    }
}

/// `MLP_l`, `MLP_g` and `MLP_att`.
#[derive(Debug, Clone)]
pub struct Aaf {
    classes: usize,
    pub combine: CombineMode,
    pub mlp_l: Mlp,
    pub mlp_g: Mlp,
    pub mlp_att: Mlp,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AafVars {
    pub local: Var,
    pub global: Var,
    pub logits: Var,
    pub attention: Var,
    pub fused: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AafOutput {
    pub attention: Vec<f64>,
    pub fused_sem: Tensor,
    pub local_feats: Tensor,
    pub global_feat: Vec<f64>,
}

impl Aaf {
    /// Random MLPs with the attention output layer zeroed, so every score
    /// starts at exactly 0.5.
    pub fn new<R: Rng + ?Sized>(classes: usize, cfg: &AafConfig, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let (c1, c2) = (cfg.local_channels, cfg.global_channels);
        if c1 == 0 || c2 == 0 || cfg.attention_hidden == 0 {
            return Err(Error::Config("AAF channel widths must be positive".into()));
        }
        let mlp_l = Mlp::new(&[2 * classes + 3, c1], Activation::Relu, true, rng)?;
        let mlp_g = Mlp::new(&[c1, c2], Activation::Relu, true, rng)?;
        let mut mlp_att = Mlp::new(
            &[c1 + c2, cfg.attention_hidden, 1],
            Activation::Relu,
            false,
            rng,
        )?;
        mlp_att.zero_output_layer();
        Ok(Self {
            classes,
            combine: cfg.combine,
            mlp_l,
            mlp_g,
            mlp_att,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn fused_width(&self) -> usize {
        self.combine.width(self.classes)
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<()> {
        if grid.feature_width() != self.mlp_l.inputs() {
            return Err(Error::shape(
                "aaf_forward",
                &[grid.feature_width()],
                &[self.mlp_l.inputs()],
            ));
        }
        if grid.is_empty() {
            return Err(Error::invalid(
                "aaf_forward",
                "global feature undefined on an empty grid",
            ));
        }
        Ok(())
    }

    /// `max over M of MLP_l(p)`: `[E·M, 2m+3] → [E, C₁]`.
    pub fn local_features(
        &mut self,
        tape: &mut Tape,
        points: Var,
        voxels: usize,
        mode: Mode,
    ) -> Result<Var> {
        let rows = tape.shape(points)[0];
        if voxels == 0 || !rows.is_multiple_of(voxels) {
            return Err(Error::shape(
                "local_features",
                tape.shape(points),
                &[voxels],
            ));
        }
        let h = self.mlp_l.forward(tape, points, mode)?;
        let c1 = tape.shape(h)[1];
        let h = tape.reshape(h, &[voxels, rows / voxels, c1])?;
        Ok(tape.max_axis(h, 1)?.0)
    }

    /// `max over E of MLP_g(V_i)`: `[E, C₁] → [1, C₂]`.
    pub fn global_feature(&mut self, tape: &mut Tape, local: Var, mode: Mode) -> Result<Var> {
        if tape.shape(local)[0] == 0 {
            return Err(Error::invalid("global_feature", "no voxels"));
        }
        let g = self.mlp_g.forward(tape, local, mode)?;
        let c2 = tape.shape(g)[1];
        let (g, _) = tape.max_axis(g, 0)?;
        tape.reshape(g, &[1, c2])
    }

    /// Pre-sigmoid scores `MLP_att([V_i ‖ V_global])`: `[E, 1]`.
    pub fn attention_logits(
        &mut self,
        tape: &mut Tape,
        local: Var,
        global: Var,
        mode: Mode,
    ) -> Result<Var> {
        let e = tape.shape(local)[0];
        let g = tape.repeat_rows(global, e)?;
        let cat = tape.concat(&[local, g], 1)?;
        self.mlp_att.forward(tape, cat, mode)
    }

    /// `s·V_2D` and `(1−s)·V_3D`, then added or concatenated.
    pub fn fuse(&self, tape: &mut Tape, sem2d: Var, sem3d: Var, attention: Var) -> Result<Var> {
        fuse_vars(tape, sem2d, sem3d, attention, self.combine)
    }

    pub fn forward(&mut self, tape: &mut Tape, grid: &VoxelGrid, mode: Mode) -> Result<AafVars> {
        self.check_grid(grid)?;
        let (s2, s3) = grid.semantic_means();
        let points = tape.constant(grid.feature_tensor());
        let sem2d = tape.constant(s2);
        let sem3d = tape.constant(s3);
        self.forward_vars(tape, points, grid.len(), sem2d, sem3d, mode)
    }

    /// Forward pass on inputs already placed on the tape.
    pub fn forward_vars(
        &mut self,
        tape: &mut Tape,
        points: Var,
        voxels: usize,
        sem2d: Var,
        sem3d: Var,
        mode: Mode,
    ) -> Result<AafVars> {
        let local = self.local_features(tape, points, voxels, mode)?;
        let global = self.global_feature(tape, local, mode)?;
        let logits = self.attention_logits(tape, local, global, mode)?;
        let attention = tape.sigmoid(logits);
        let fused = self.fuse(tape, sem2d, sem3d, attention)?;
        Ok(AafVars {
            local,
            global,
            logits,
            attention,
            fused,
        })
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        encode_tensors(AAF_MAGIC, &self.state())
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        self.load_state(&decode_tensors(AAF_MAGIC, bytes)?)
    }
}

pub fn fuse_vars(
    tape: &mut Tape,
    sem2d: Var,
    sem3d: Var,
    attention: Var,
    mode: CombineMode,
) -> Result<Var> {
    let complement = tape.affine(attention, -1.0, 1.0);
    let a = tape.mul_rows(sem2d, attention)?;
    let b = tape.mul_rows(sem3d, complement)?;
    match mode {
        CombineMode::Add => tape.add(a, b),
        CombineMode::Concat => tape.concat(&[a, b], 1),
    }
}

impl Module for Aaf {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.mlp_l.params();
        out.extend(self.mlp_g.params());
        out.extend(self.mlp_att.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.mlp_l.params_mut();
        out.extend(self.mlp_g.params_mut());
        out.extend(self.mlp_att.params_mut());
        out
    }

    /// `MLP_l`, `MLP_g`, `MLP_att`; per layer weight and bias, then scale,
    /// shift, running mean and running variance where normalized.
    fn state(&self) -> Vec<Tensor> {
        let mut out = self.mlp_l.state();
        out.extend(self.mlp_g.state());
        out.extend(self.mlp_att.state());
        out
    }

    fn load_state(&mut self, state: &[Tensor]) -> Result<()> {
        let nl = self.mlp_l.state().len();
        let ng = self.mlp_g.state().len();
        let na = self.mlp_att.state().len();
        if state.len() != nl + ng + na {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!(
                    "AAF expects {} tensors, found {}",
                    nl + ng + na,
                    state.len()
                ),
            });
        }
        self.mlp_l.load_state(&state[..nl])?;
        self.mlp_g.load_state(&state[nl..nl + ng])?;
        self.mlp_att.load_state(&state[nl + ng..])
    }
}

/// Eq.-level helpers evaluated in inference mode on a scratch tape.
pub fn local_features(grid: &VoxelGrid, params: &Aaf) -> Result<Tensor> {
    params.check_grid(grid)?;
    let mut p = params.clone();
    let mut tape = Tape::new();
    let x = tape.constant(grid.feature_tensor());
    let v = p.local_features(&mut tape, x, grid.len(), Mode::Eval)?;
    Ok(tape.value(v).clone())
}

pub fn global_feature(local: &Tensor, params: &Aaf) -> Result<Vec<f64>> {
    let mut p = params.clone();
    let mut tape = Tape::new();
    let x = tape.constant(local.clone());
    let v = p.global_feature(&mut tape, x, Mode::Eval)?;
    Ok(tape.value(v).data().to_vec())
}

pub fn attention_scores(local: &Tensor, global: &[f64], params: &Aaf) -> Result<Vec<f64>> {
    let mut p = params.clone();
    let mut tape = Tape::new();
    let l = tape.constant(local.clone());
    let g = tape.constant(Tensor::new(&[1, global.len()], global.to_vec())?);
    let logits = p.attention_logits(&mut tape, l, g, Mode::Eval)?;
    let s = tape.sigmoid(logits);
    Ok(tape.value(s).data().to_vec())
}

/// Fuses per-voxel mean semantics with the given scores.
pub fn fuse_semantics(grid: &VoxelGrid, scores: &[f64], mode: CombineMode) -> Result<Tensor> {
    let (s2, s3) = grid.semantic_means();
    fuse_tensors(&s2, &s3, scores, mode)
}

pub fn fuse_tensors(
    sem2d: &Tensor,
    sem3d: &Tensor,
    scores: &[f64],
    mode: CombineMode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(sem2d.clone());
    let b = tape.constant(sem3d.clone());
    let s = tape.constant(Tensor::new(&[scores.len(), 1], scores.to_vec())?);
    let f = fuse_vars(&mut tape, a, b, s, mode)?;
    Ok(tape.value(f).clone())
}

pub fn aaf_forward(grid: &VoxelGrid, params: &Aaf) -> Result<AafOutput> {
    let mut p = params.clone();
    let mut tape = Tape::new();
    let v = p.forward(&mut tape, grid, Mode::Eval)?;
    Ok(AafOutput {
        attention: tape.value(v.attention).data().to_vec(),
        fused_sem: tape.value(v.fused).clone(),
        local_feats: tape.value(v.local).clone(),
        global_feat: tape.value(v.global).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::numerics::{check_module_gradients, Linear};
    use crate::semantics::{PaintedPointCloud, SemanticRows};
    use crate::voxelizer::{voxelize, VoxelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> AafConfig {
        AafConfig {
            local_channels: 6,
            global_channels: 5,
            attention_hidden: 4,
            combine: CombineMode::Add,
        }
    }

    fn grid(rng: &mut ChaCha8Rng, n: usize, m: usize) -> VoxelGrid {
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..3.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let mut probs = |k: usize| {
            let mut d = Vec::with_capacity(k * m);
            for _ in 0..k {
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                d.extend(raw.iter().map(|v| v / s));
            }
            SemanticRows::new(m, d).unwrap()
        };
        let (s2, s3) = (probs(n), probs(n));
        let pcc = PaintedPointCloud::new(PointCloud::new(points), s2, s3).unwrap();
        let cfg = VoxelConfig {
            range_min: [0.0; 3],
            range_max: [3.0, 3.0, 1.0],
            voxel_size: [1.0, 1.0, 1.0],
            points_per_voxel: 4,
            seed: 1,
        };
        voxelize(&pcc, &cfg).unwrap()
    }

    #[test]
    fn zero_attention_head_gives_even_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = grid(&mut rng, 30, 3);
        let aaf = Aaf::new(3, &small_cfg(), &mut rng).unwrap();
        let out = aaf_forward(&g, &aaf).unwrap();
        assert!(out.attention.iter().all(|&s| s == 0.5));
        let (s2, s3) = g.semantic_means();
        for i in 0..s2.numel() {
            assert_eq!(
                out.fused_sem.data()[i],
                0.5 * s2.data()[i] + 0.5 * s3.data()[i]
            );
        }
        assert_eq!(out.local_feats.shape(), &[g.len(), 6]);
        assert_eq!(out.global_feat.len(), 5);
    }

    #[test]
    fn worked_fusion_example() {
        let s2 = Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let s3 = Tensor::new(&[1, 4], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let add = fuse_tensors(&s2, &s3, &[0.2], CombineMode::Add).unwrap();
        assert_eq!(add.data(), &[0.0, 0.0, 0.2, 0.8]);
        let cat = fuse_tensors(&s2, &s3, &[0.2], CombineMode::Concat).unwrap();
        assert_eq!(cat.data(), &[0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.8]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = grid(&mut rng, 24, 3);
        let mut aaf = Aaf::new(3, &small_cfg(), &mut rng).unwrap();
        aaf.mlp_att.layers.last_mut().unwrap().linear = Linear::new(4, 1, &mut rng);
        let target = Tensor::uniform(&[g.len(), 3], 1.0, &mut rng);
        let err = check_module_gradients(
            &aaf,
            |m, tape| {
                let v = m.forward(tape, &g, Mode::Train)?;
                tape.mse(v.fused, target.data())
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Aaf::new(3, &small_cfg(), &mut rng).unwrap();
        let bytes = a.to_checkpoint();
        let mut b = Aaf::new(3, &small_cfg(), &mut rng).unwrap();
        b.load_checkpoint(&bytes).unwrap();
        assert_eq!(b.to_checkpoint(), bytes);
        let mut wrong = Aaf::new(4, &small_cfg(), &mut rng).unwrap();
        assert!(wrong.load_checkpoint(&bytes).is_err());
    }

    #[test]
    fn width_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(&mut rng, 10, 3);
        let aaf = Aaf::new(4, &small_cfg(), &mut rng).unwrap();
        assert!(matches!(aaf_forward(&g, &aaf), Err(Error::Shape { .. })));
    }
}

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aaf::{fuse_vars, Aaf, AAF_MAGIC};
use crate::checkpoint::{decode_tensors, encode_tensors};
use crate::dff::{Dff, DffConfig};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Mlp, Mode, Module, Tape, Tensor, Var};
use crate::semantics::argmax;

use super::config::{ExperimentConfig, Strategy};
use super::dataset::Sample;
use super::metrics::VoxelPredictor;

pub const CONFIG_FILE: &str = "config.toml";
pub const FUSION_FILE: &str = "fusion.aaf";
pub const DFF_FILE: &str = "dff.dff";

/// Semantic fusion front end plus a small voxel classification head.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: ExperimentConfig,
    pub aaf: Option<Aaf>,
    pub dff: Option<Dff>,
    pub head: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub attention: Option<Var>,
}

impl FusionModel {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let m = config.classes();
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed ^ 0x5eed_f00d);
        let fused = config.aaf.combine.width(m);
        let aaf = if config.strategy.uses_aaf() {
            Some(Aaf::new(m, &config.aaf, &mut rng)?)
        } else {
            None
        };
        let dff = if config.strategy == Strategy::AafDff {
            let cfg = DffConfig {
                in_channels: fused + 1,
                ..config.dff
            };
            Some(Dff::new(&cfg, &mut rng)?)
        } else {
            None
        };
        let head_in = fused + dff.as_ref().map_or(0, |d| d.config().out_channels);
        let head = Mlp::new(
            &[head_in, config.training.head_hidden, m],
            Activation::Relu,
            false,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            aaf,
            dff,
            head,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.classes() != self.config.classes() {
            return Err(Error::shape(
                "fusion_model",
                &[sample.classes()],
                &[self.config.classes()],
            ));
        }
        if sample.is_empty() {
            return Err(Error::invalid("fusion_model", "empty sample"));
        }
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, sample: &Sample, mode: Mode) -> Result<ForwardVars> {
        self.check_sample(sample)?;
        let e = sample.len();
        let combine = self.config.aaf.combine;
        let sem2d = tape.constant(sample.sem2d.clone());
        let sem3d = tape.constant(sample.sem3d.clone());
        let (fused, attention) = match (&mut self.aaf, self.config.strategy) {
            (Some(aaf), _) => {
                let points = tape.constant(sample.grid.feature_tensor());
                let v = aaf.forward_vars(tape, points, e, sem2d, sem3d, mode)?;
                (v.fused, Some(v.attention))
            }
            (None, strategy) => {
                let gate = if strategy == Strategy::Sem2dOnly {
                    1.0
                } else {
                    0.0
                };
                let s = tape.constant(Tensor::full(&[e, 1], gate));
                (fuse_vars(tape, sem2d, sem3d, s, combine)?, None)
            }
        };
        let mut parts = vec![fused];
        if let Some(dff) = &mut self.dff {
            let (h, w) = sample.bev_dims();
            let occupancy = tape.constant(Tensor::full(&[e, 1], 1.0));
            let per_voxel = tape.concat(&[fused, occupancy], 1)?;
            let c = tape.shape(per_voxel)[1];
            let scale: Vec<f64> = sample.column_size.iter().map(|&n| 1.0 / n as f64).collect();
            let bev = tape.scatter_rows(per_voxel, &sample.bev_cell, &scale, h * w)?;
            let bev = tape.transpose(bev)?;
            let bev = tape.reshape(bev, &[1, c, h, w])?;
            let out = dff.forward(tape, bev, mode)?.output;
            let c_out = tape.shape(out)[1];
            let flat = tape.reshape(out, &[c_out, h * w])?;
            let cells = tape.transpose(flat)?;
            parts.push(tape.gather_rows(cells, &sample.bev_cell)?);
        }
        let head_in = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 1)?
        };
        let logits = self.head.forward(tape, head_in, mode)?;
        Ok(ForwardVars { logits, attention })
    }

    /// Per-voxel 2-D weights in inference mode, when the strategy learns them.
    pub fn attention(&self, sample: &Sample) -> Result<Option<Vec<f64>>> {
        let mut m = self.clone();
        let mut tape = Tape::new();
        let v = m.forward(&mut tape, sample, Mode::Eval)?;
        Ok(v.attention.map(|a| tape.value(a).data().to_vec()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(CONFIG_FILE, self.config.to_toml()?.as_bytes())?;
        let mut tensors = self.aaf.as_ref().map(Module::state).unwrap_or_default();
        tensors.extend(self.head.state());
        write(FUSION_FILE, &encode_tensors(AAF_MAGIC, &tensors))?;
        if let Some(dff) = &self.dff {
            write(DFF_FILE, &dff.to_checkpoint())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let text = String::from_utf8(read(CONFIG_FILE)?).map_err(|e| Error::Format {
            kind: "checkpoint",
            msg: e.to_string(),
        })?;
        let config = ExperimentConfig::from_toml(&text)?;
        let mut model = Self::new(&config)?;
        let tensors = decode_tensors(AAF_MAGIC, &read(FUSION_FILE)?)?;
        let split = model.aaf.as_ref().map_or(0, |a| a.state().len());
        if tensors.len() < split {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: format!("{} tensors is too few for the fusion module", tensors.len()),
            });
        }
        if let Some(aaf) = &mut model.aaf {
            aaf.load_state(&tensors[..split])?;
        }
        model.head.load_state(&tensors[split..])?;
        if let Some(dff) = &mut model.dff {
            dff.load_checkpoint(&read(DFF_FILE)?)?;
        }
        Ok(model)
    }
}

impl VoxelPredictor for FusionModel {
    fn predict(&self, sample: &Sample) -> Result<Vec<usize>> {
        let mut m = self.clone();
        let mut tape = Tape::new();
        let v = m.forward(&mut tape, sample, Mode::Eval)?;
        let logits = tape.value(v.logits);
        let k = logits.shape()[1];
        Ok(logits.data().chunks(k).map(argmax).collect())
    }
}

impl Module for FusionModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.aaf.as_ref().map(Module::params).unwrap_or_default();
        if let Some(d) = &self.dff {
            out.extend(d.params());
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self
            .aaf
            .as_mut()
            .map(Module::params_mut)
            .unwrap_or_default();
        if let Some(d) = &mut self.dff {
            out.extend(d.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

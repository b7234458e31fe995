use serde::{Deserialize, Serialize};

use crate::aaf::{AafConfig, CombineMode};
use crate::dff::DffConfig;
use crate::error::{Error, Result};
use crate::geometry::OutOfViewPolicy;
use crate::semantics::Representation;
use crate::synth::{Confusion, CorruptionConfig, SceneParams, CAR, TRUCK};
use crate::voxelizer::VoxelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "sem3d")]
    Sem3dOnly,
    #[serde(rename = "sem2d")]
    Sem2dOnly,
    #[serde(rename = "aaf")]
    Aaf,
    #[serde(rename = "aaf-dff")]
    AafDff,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::Sem3dOnly, Self::Sem2dOnly, Self::Aaf, Self::AafDff];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sem3dOnly => "sem3d",
            Self::Sem2dOnly => "sem2d",
            Self::Aaf => "aaf",
            Self::AafDff => "aaf-dff",
        }
    }

    pub fn uses_aaf(self) -> bool {
        matches!(self, Self::Aaf | Self::AafDff)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_scenes: usize,
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub head_hidden: usize,
    /// Class weights are `n_c^-power` scaled so the weighted count equals the total.
    pub class_weight_power: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_scenes: 1,
            max_lr: 3e-2,
            warmup_fraction: 0.3,
            weight_decay: 0.01,
            head_hidden: 32,
            class_weight_power: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub policy: OutOfViewPolicy,
    pub scene: SceneParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 96,
            eval_scenes: 20,
            policy: OutOfViewPolicy::Background,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub representation: Representation,
    pub strategy: Strategy,
    pub voxel: VoxelConfig,
    pub corruption: CorruptionConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub aaf: AafConfig,
    pub dff: DffConfig,
}

/// Desk-scale grid matching the default scene: 1 m cells over 24 m × 24 m,
/// one vertical layer.
pub fn desk_voxels() -> VoxelConfig {
    VoxelConfig {
        range_min: [0.0, -12.0, -2.2],
        range_max: [24.0, 12.0, 1.8],
        voxel_size: [1.0, 1.0, 4.0],
        points_per_voxel: 8,
        seed: 0,
    }
}

/// Boundary dilation of 3 px, car/truck swaps at 0.3 and split-score image
/// segmentation for some of those objects.
pub fn standard_corruption(m: usize) -> CorruptionConfig {
    CorruptionConfig {
        dilate_px: 3,
        confusion: Confusion::pair(m, CAR, TRUCK, 0.3),
        ambiguity: 0.3,
        seed: 0,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            representation: Representation::Score,
            strategy: Strategy::Aaf,
            voxel: desk_voxels(),
            corruption: standard_corruption(data.scene.classes),
            training: TrainingConfig::default(),
            aaf: AafConfig {
                combine: CombineMode::Concat,
                ..AafConfig::default()
            },
            dff: DffConfig {
                block_channels: 16,
                ..DffConfig::default()
            },
            data,
        }
    }
}

impl ExperimentConfig {
    pub fn classes(&self) -> usize {
        self.data.scene.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        self.corruption.validate()?;
        self.data.scene.validate()?;
        if self.corruption.confusion.classes() != self.classes() {
            return Err(Error::Config(format!(
                "confusion has {} classes, scenes have {}",
                self.corruption.confusion.classes(),
                self.classes()
            )));
        }
        let t = &self.training;
        if t.steps < 2 || t.batch_scenes == 0 || t.head_hidden == 0 {
            return Err(Error::Config(
                "steps ≥ 2, batch_scenes ≥ 1 and head_hidden ≥ 1 required".into(),
            ));
        }
        if !(t.class_weight_power >= 0.0 && t.class_weight_power.is_finite()) {
            return Err(Error::Config(
                "class_weight_power must be finite and ≥ 0".into(),
            ));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Config("need at least one training scene".into()));
        }
        if self.strategy == Strategy::AafDff {
            let [h, w, _] = self.voxel.grid_dims();
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "BEV grid {h}×{w} must have even sides for DFF"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

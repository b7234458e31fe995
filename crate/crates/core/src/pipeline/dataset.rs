use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{paint_points_2d, OutOfViewPolicy};
use crate::numerics::Tensor;
use crate::semantics::{labels_from_boxes, PaintedPointCloud, Representation};
use crate::synth::{
    generate_scene, simulate_2d_segmentor, simulate_3d_segmentor, CorruptionConfig, SceneBundle,
    SceneParams,
};
use crate::voxelizer::{voxelize, VoxelConfig, VoxelGrid};

use super::config::ExperimentConfig;

/// One voxelized scene ready for the fusion model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub grid: VoxelGrid,
    /// Dominant ground-truth class over each voxel's member points.
    pub labels: Vec<usize>,
    pub sem2d: Tensor,
    pub sem3d: Tensor,
    /// Row-major BEV cell `x · W + y` per voxel.
    pub bev_cell: Vec<usize>,
    /// Voxels sharing each voxel's BEV column.
    pub column_size: Vec<usize>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bev_dims(&self) -> (usize, usize) {
        let d = self.grid.dims();
        (d[0], d[1])
    }

    pub fn classes(&self) -> usize {
        self.grid.classes()
    }
}

/// Majority class among `members`. Background loses ties, so a voxel half
/// covered by an object belongs to it; ties among objects go to the lowest id.
fn dominant(members: &[usize], truth: &[usize], m: usize) -> usize {
    let mut counts = vec![0usize; m];
    for &i in members {
        counts[truth[i]] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > counts[best] || (best == 0 && n == counts[0] && n > 0) {
            best = c;
        }
    }
    best
}

pub fn build_sample(
    bundle: &SceneBundle,
    repr: Representation,
    voxel: &VoxelConfig,
    policy: OutOfViewPolicy,
) -> Result<Sample> {
    let m = bundle.sem2d.classes();
    let truth = labels_from_boxes(&bundle.cloud, &bundle.boxes, m)?.labels();
    let sem2d = paint_points_2d(&bundle.cloud, &bundle.calib, &bundle.sem2d, policy)?;
    let painted =
        PaintedPointCloud::new(bundle.cloud.clone(), sem2d, bundle.sem3d.clone())?.encoded(repr);
    let grid = voxelize(&painted, voxel)?;
    if grid.is_empty() {
        return Err(Error::invalid(
            "build_sample",
            "scene has no points inside the voxel range",
        ));
    }
    let labels = grid
        .members
        .iter()
        .map(|mem| dominant(mem, &truth, m))
        .collect();
    let (sem2d, sem3d) = grid.semantic_means();
    let w = grid.dims()[1];
    let bev_cell: Vec<usize> = grid.coords.iter().map(|c| c[0] * w + c[1]).collect();
    let mut per_cell = std::collections::HashMap::new();
    for &c in &bev_cell {
        *per_cell.entry(c).or_insert(0usize) += 1;
    }
    let column_size = bev_cell.iter().map(|c| per_cell[c]).collect();
    Ok(Sample {
        grid,
        labels,
        sem2d,
        sem3d,
        bev_cell,
        column_size,
    })
}

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scene `index` in the training (`0`) or evaluation (`1`) split.
pub fn scene_seed(seed: u64, split: u64, index: usize) -> u64 {
    mix(seed, split + 1, index as u64)
}

/// Synthesizes a scene and runs both segmentor stand-ins on it.
pub fn generate_bundle(
    params: &SceneParams,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<SceneBundle> {
    let scene = generate_scene(params, seed)?;
    let truth = labels_from_boxes(&scene.cloud, &scene.boxes, params.classes)?;
    let sem2d = simulate_2d_segmentor(&scene, corruption)?;
    let sem3d = simulate_3d_segmentor(&scene, &truth, corruption)?;
    Ok(SceneBundle {
        cloud: scene.cloud,
        calib: scene.calib,
        boxes: scene.boxes,
        sem2d,
        sem3d,
    })
}

pub fn generate_bundles(
    cfg: &ExperimentConfig,
    split: u64,
    count: usize,
) -> Result<Vec<SceneBundle>> {
    (0..count)
        .map(|i| {
            generate_bundle(
                &cfg.data.scene,
                &cfg.corruption,
                scene_seed(cfg.training.seed, split, i),
            )
        })
        .collect()
}

pub fn build_samples(bundles: &[SceneBundle], cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    bundles
        .iter()
        .map(|b| build_sample(b, cfg.representation, &cfg.voxel, cfg.data.policy))
        .collect()
}

/// Training and held-out samples for a config, generated from its seed.
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let train = generate_bundles(cfg, 0, cfg.data.train_scenes)?;
        let eval = generate_bundles(cfg, 1, cfg.data.eval_scenes)?;
        Ok(Self {
            train: build_samples(&train, cfg)?,
            eval: build_samples(&eval, cfg)?,
        })
    }
}

/// Scene directories under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("cloud.bin").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!(
            "no scene bundles under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

pub fn load_bundles(root: &Path) -> Result<Vec<SceneBundle>> {
    scene_dirs(root)?
        .iter()
        .map(|d| SceneBundle::read(d))
        .collect()
}

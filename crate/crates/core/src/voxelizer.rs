//! Regular voxel partition with a fixed number of sampled points per voxel.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::order_invariant_sum;
use crate::numerics::Tensor;
use crate::semantics::PaintedPointCloud;

const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub points_per_voxel: usize,
    pub seed: u64,
}

impl Default for VoxelConfig {
    /// Pillar-style grid over the usual front-camera range.
    fn default() -> Self {
        Self {
            range_min: [0.0, -39.68, -3.0],
            range_max: [69.12, 39.68, 1.0],
            voxel_size: [0.16, 0.16, 4.0],
            points_per_voxel: 32,
            seed: 0,
        }
    }
}

impl VoxelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points_per_voxel == 0 {
            return Err(Error::Config("points_per_voxel must be at least 1".into()));
        }
        for d in 0..3 {
            let extent = self.range_max[d] - self.range_min[d];
            let size = self.voxel_size[d];
            if !(extent > 0.0) || !extent.is_finite() {
                return Err(Error::Config(format!(
                    "range extent on axis {d} must be positive"
                )));
            }
            if !(size > 0.0) {
                return Err(Error::Config(format!(
                    "voxel size on axis {d} must be positive"
                )));
            }
            let cells = extent / size;
            if (cells - cells.round()).abs() > GRID_TOL * cells.max(1.0) {
                return Err(Error::Config(format!(
                    "range extent {extent} on axis {d} is not a multiple of voxel size {size}"
                )));
            }
        }
        Ok(())
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        std::array::from_fn(|d| {
            ((self.range_max[d] - self.range_min[d]) / self.voxel_size[d]).round() as usize
        })
    }

    /// Cell containing `p` under the floor convention; values within 1e-9 of a
    /// cell boundary snap onto it. The upper range bound is exclusive.
    pub fn voxel_index(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let dims = self.grid_dims();
        let mut out = [0usize; 3];
        for d in 0..3 {
            let mut t = (p[d] - self.range_min[d]) / self.voxel_size[d];
            if (t - t.round()).abs() < GRID_TOL {
                t = t.round();
            }
            if !(t >= 0.0) {
                return None;
            }
            let i = t.floor();
            if i >= dims[d] as f64 {
                return None;
            }
            out[d] = i as usize;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    classes: usize,
    points_per_voxel: usize,
    dims: [usize; 3],
    pub coords: Vec<[usize; 3]>,
    /// `E × M × (2m + 3)` row-major.
    pub features: Vec<f64>,
    pub valid_counts: Vec<usize>,
    /// Voxel of each input point, `-1` when out of range.
    pub point_to_voxel: Vec<i64>,
    /// All in-range member point indices per voxel, ascending.
    pub members: Vec<Vec<usize>>,
    /// The sampled subset backing the valid rows, ascending.
    pub sampled: Vec<Vec<usize>>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn points_per_voxel(&self) -> usize {
        self.points_per_voxel
    }

    pub fn feature_width(&self) -> usize {
        2 * self.classes + 3
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_features(&self, e: usize) -> &[f64] {
        let stride = self.points_per_voxel * self.feature_width();
        &self.features[e * stride..(e + 1) * stride]
    }

    pub fn voxel_features_mut(&mut self, e: usize) -> &mut [f64] {
        let stride = self.points_per_voxel * self.feature_width();
        &mut self.features[e * stride..(e + 1) * stride]
    }

    /// Features as an `[E·M, 2m+3]` tensor.
    pub fn feature_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.len() * self.points_per_voxel, self.feature_width()],
            self.features.clone(),
        )
        .expect("grid features are consistent")
    }

    /// Mean over the valid rows of the 2-D and 3-D semantic columns, each
    /// `E × m`. Sums are order-invariant, so shuffling a voxel's rows keeps
    /// the bits.
    pub fn semantic_means(&self) -> (Tensor, Tensor) {
        let (m, w) = (self.classes, self.feature_width());
        let mut s2 = vec![0.0; self.len() * m];
        let mut s3 = vec![0.0; self.len() * m];
        let mut buf = Vec::new();
        for e in 0..self.len() {
            let rows = self.voxel_features(e);
            let n = self.valid_counts[e];
            for (offset, out) in [(3, &mut s2), (3 + m, &mut s3)] {
                for k in 0..m {
                    buf.clear();
                    buf.extend((0..n).map(|r| rows[r * w + offset + k]));
                    out[e * m + k] = order_invariant_sum(&mut buf) / n as f64;
                }
            }
        }
        (
            Tensor::new(&[self.len(), m], s2).expect("consistent"),
            Tensor::new(&[self.len(), m], s3).expect("consistent"),
        )
    }

    /// Reorders voxels so that new voxel `i` is old voxel `order[i]`.
    pub fn permuted_voxels(&self, order: &[usize]) -> Self {
        let mut inverse = vec![0i64; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new as i64;
        }
        let mut features = Vec::with_capacity(self.features.len());
        for &old in order {
            features.extend_from_slice(self.voxel_features(old));
        }
        Self {
            classes: self.classes,
            points_per_voxel: self.points_per_voxel,
            dims: self.dims,
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            features,
            valid_counts: order.iter().map(|&i| self.valid_counts[i]).collect(),
            point_to_voxel: self
                .point_to_voxel
                .iter()
                .map(|&v| if v < 0 { v } else { inverse[v as usize] })
                .collect(),
            members: order.iter().map(|&i| self.members[i].clone()).collect(),
            sampled: order.iter().map(|&i| self.sampled[i].clone()).collect(),
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn voxel_seed(seed: u64, c: [usize; 3]) -> u64 {
    c.iter().fold(mix(seed), |h, &v| mix(h ^ v as u64))
}

pub fn voxelize(pcc: &PaintedPointCloud, cfg: &VoxelConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    let m = pcc.classes();
    let cap = cfg.points_per_voxel;
    let width = 2 * m + 3;

    let mut buckets: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    let mut cell_of = Vec::with_capacity(pcc.len());
    for (i, &p) in pcc.cloud.points.iter().enumerate() {
        let cell = cfg.voxel_index(p);
        if let Some(c) = cell {
            buckets.entry(c).or_default().push(i);
        }
        cell_of.push(cell);
    }

    let e = buckets.len();
    let mut grid = VoxelGrid {
        classes: m,
        points_per_voxel: cap,
        dims: cfg.grid_dims(),
        coords: Vec::with_capacity(e),
        features: Vec::with_capacity(e * cap * width),
        valid_counts: Vec::with_capacity(e),
        point_to_voxel: vec![-1; pcc.len()],
        members: Vec::with_capacity(e),
        sampled: Vec::with_capacity(e),
    };
    let mut index_of = BTreeMap::new();
    for (v, (coord, members)) in buckets.into_iter().enumerate() {
        index_of.insert(coord, v as i64);
        let sampled: Vec<usize> = if members.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(cfg.seed, coord));
            let mut pick = rand::seq::index::sample(&mut rng, members.len(), cap).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| members[k]).collect()
        } else {
            members.clone()
        };
        for k in 0..cap {
            let i = sampled[k % sampled.len()];
            grid.features.extend_from_slice(&pcc.cloud.points[i]);
            grid.features.extend_from_slice(pcc.sem2d.row(i));
            grid.features.extend_from_slice(pcc.sem3d.row(i));
        }
        grid.coords.push(coord);
        grid.valid_counts.push(sampled.len());
        grid.members.push(members);
        grid.sampled.push(sampled);
    }
    for (i, cell) in cell_of.into_iter().enumerate() {
        if let Some(c) = cell {
            grid.point_to_voxel[i] = index_of[&c];
        }
    }
    Ok(grid)
}

/// Broadcasts per-voxel rows `[E × d]` back to points `[N × d]`; points outside
/// the range receive zeros.
pub fn scatter_to_points(grid: &VoxelGrid, per_voxel: &Tensor) -> Result<Tensor> {
    if per_voxel.rank() != 2 || per_voxel.shape()[0] != grid.len() || per_voxel.shape()[1] == 0 {
        return Err(Error::shape(
            "scatter_to_points",
            per_voxel.shape(),
            &[grid.len()],
        ));
    }
    let d = per_voxel.shape()[1];
    let mut out = vec![0.0; grid.point_to_voxel.len() * d];
    for (i, &v) in grid.point_to_voxel.iter().enumerate() {
        if v >= 0 {
            let v = v as usize;
            out[i * d..(i + 1) * d].copy_from_slice(&per_voxel.data()[v * d..(v + 1) * d]);
        }
    }
    Tensor::new(&[grid.point_to_voxel.len(), d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::semantics::SemanticRows;

    fn cfg(m: usize) -> VoxelConfig {
        VoxelConfig {
            range_min: [0.0, 0.0, 0.0],
            range_max: [4.0, 4.0, 2.0],
            voxel_size: [1.0, 1.0, 2.0],
            points_per_voxel: m,
            seed: 5,
        }
    }

    fn painted(points: Vec<[f64; 3]>) -> PaintedPointCloud {
        let n = points.len();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        PaintedPointCloud::new(
            PointCloud::new(points),
            SemanticRows::one_hot(&labels, 2),
            SemanticRows::one_hot(&vec![0; n], 2),
        )
        .unwrap()
    }

    #[test]
    fn single_point_padding() {
        let g = voxelize(&painted(vec![[0.5, 0.5, 0.5]]), &cfg(4)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.valid_counts, vec![1]);
        let rows = g.voxel_features(0);
        let w = g.feature_width();
        for r in 1..4 {
            assert_eq!(&rows[r * w..(r + 1) * w], &rows[..w]);
        }
    }

    #[test]
    fn boundary_uses_floor() {
        let c = cfg(4);
        assert_eq!(c.voxel_index([1.0, 2.0, 0.0]), Some([1, 2, 0]));
        assert_eq!(c.voxel_index([0.1 * 3.0 / 0.3, 0.0, 0.0]), Some([1, 0, 0]));
        assert_eq!(c.voxel_index([4.0, 0.0, 0.0]), None);
        assert_eq!(c.voxel_index([-1e-3, 0.0, 0.0]), None);
    }

    #[test]
    fn oversubscribed_voxel_samples_distinct_points() {
        let pts: Vec<[f64; 3]> = (0..8).map(|i| [0.1 * i as f64, 0.5, 0.5]).collect();
        let pcc = painted(pts);
        let a = voxelize(&pcc, &cfg(4)).unwrap();
        let b = voxelize(&pcc, &cfg(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.valid_counts, vec![4]);
        let mut s = a.sampled[0].clone();
        s.dedup();
        assert_eq!(s.len(), 4);
        assert_eq!(a.members[0], (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_range_dropped_and_scatter() {
        let pcc = painted(vec![[0.5, 0.5, 0.5], [9.0, 0.0, 0.0], [3.5, 3.5, 1.0]]);
        let g = voxelize(&pcc, &cfg(2)).unwrap();
        assert_eq!(g.point_to_voxel, vec![0, -1, 1]);
        let ids = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let back = scatter_to_points(&g, &ids).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(0);
        assert!(c.validate().is_err());
        c.points_per_voxel = 1;
        c.voxel_size[0] = 0.3;
        assert!(c.validate().is_err());
        assert!(VoxelConfig::default().validate().is_ok());
        assert_eq!(VoxelConfig::default().grid_dims(), [432, 496, 1]);
    }
}

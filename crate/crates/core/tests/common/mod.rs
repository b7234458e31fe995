//! Naive reference implementations shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfuse::aaf::{Aaf, AafConfig, CombineMode};
use semfuse::geometry::PointCloud;
use semfuse::numerics::Linear;
use semfuse::semantics::{Box3D, PaintedPointCloud, SemanticRows};
use semfuse::voxelizer::{voxelize, VoxelConfig, VoxelGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `[n, k] · [k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn deconv_hw(&self) -> (usize, usize) {
        (
            (self.h - 1) * self.stride + self.k,
            (self.w - 1) * self.stride + self.k,
        )
    }
}

/// Cross-correlation, `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`, zero padding.
pub fn conv2d(x: &[f64], w: &[f64], c: &Conv) -> Vec<f64> {
    let (oh, ow) = c.out_hw();
    let mut out = vec![0.0; c.batch * c.cout * oh * ow];
    for b in 0..c.batch {
        for o in 0..c.cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..c.cin {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (y * c.stride + ky) as i64 - c.pad as i64;
                                let ix = (xx * c.stride + kx) as i64 - c.pad as i64;
                                if iy < 0 || ix < 0 || iy >= c.h as i64 || ix >= c.w as i64 {
                                    continue;
                                }
                                let xv =
                                    x[((b * c.cin + i) * c.h + iy as usize) * c.w + ix as usize];
                                acc += xv * w[((o * c.cin + i) * c.k + ky) * c.k + kx];
                            }
                        }
                    }
                    out[((b * c.cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Input gradient of [`conv2d`] for upstream `g`, by scattering each output's
/// gradient back through its window.
pub fn conv2d_input_grad(g: &[f64], w: &[f64], c: &Conv) -> Vec<f64> {
    let (oh, ow) = c.out_hw();
    let mut gx = vec![0.0; c.batch * c.cin * c.h * c.w];
    for b in 0..c.batch {
        for o in 0..c.cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = g[((b * c.cout + o) * oh + y) * ow + xx];
                    for i in 0..c.cin {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (y * c.stride + ky) as i64 - c.pad as i64;
                                let ix = (xx * c.stride + kx) as i64 - c.pad as i64;
                                if iy < 0 || ix < 0 || iy >= c.h as i64 || ix >= c.w as i64 {
                                    continue;
                                }
                                gx[((b * c.cin + i) * c.h + iy as usize) * c.w + ix as usize] +=
                                    gv * w[((o * c.cin + i) * c.k + ky) * c.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Transposed convolution without padding, `w: [Cin, Cout, k, k]`.
pub fn deconv2d(x: &[f64], w: &[f64], c: &Conv) -> Vec<f64> {
    let (oh, ow) = c.deconv_hw();
    let mut out = vec![0.0; c.batch * c.cout * oh * ow];
    for b in 0..c.batch {
        for i in 0..c.cin {
            for y in 0..c.h {
                for xx in 0..c.w {
                    let xv = x[((b * c.cin + i) * c.h + y) * c.w + xx];
                    for o in 0..c.cout {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let (py, px) = (y * c.stride + ky, xx * c.stride + kx);
                                out[((b * c.cout + o) * oh + py) * ow + px] +=
                                    xv * w[((i * c.cout + o) * c.k + ky) * c.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Max over `axis` of a row-major tensor; ties resolve to the lowest index.
pub fn maxpool(x: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut values = Vec::new();
    let mut arg = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            for l in 1..len {
                if x[(o * len + l) * inner + i] > x[(o * len + best) * inner + i] {
                    best = l;
                }
            }
            values.push(x[(o * len + best) * inner + i]);
            arg.push(best);
        }
    }
    (values, arg)
}

/// Rotates into each box frame directly with `cos`/`sin` and checks the
/// half extents; overlapping boxes resolve to the smallest volume, then the
/// lowest index.
pub fn brute_force_labels(points: &[[f64; 3]], boxes: &[Box3D]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best: Option<usize> = None;
            for (i, b) in boxes.iter().enumerate() {
                let (dx, dy, dz) = (p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]);
                let (c, s) = (b.yaw.cos(), b.yaw.sin());
                let lx = c * dx + s * dy;
                let ly = -s * dx + c * dy;
                let inside = lx.abs() <= b.size[0] / 2.0
                    && ly.abs() <= b.size[1] / 2.0
                    && dz.abs() <= b.size[2] / 2.0;
                let vol = |b: &Box3D| b.size[0] * b.size[1] * b.size[2];
                if inside && best.is_none_or(|j| vol(b) < vol(&boxes[j])) {
                    best = Some(i);
                }
            }
            best.map_or(0, |i| boxes[i].class_id)
        })
        .collect()
}

/// Random points and up to `max_boxes` rotated boxes, a fraction of the
/// points drawn inside boxes so containment is exercised.
pub fn random_box_scene(
    rng: &mut ChaCha8Rng,
    n: usize,
    max_boxes: usize,
    classes: usize,
) -> (PointCloud, Vec<Box3D>) {
    let nb = rng.random_range(0..=max_boxes);
    let boxes: Vec<Box3D> = (0..nb)
        .map(|_| {
            Box3D::new(
                [
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-1.0..1.0),
                ],
                [
                    rng.random_range(0.5..6.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                ],
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.random_range(1..classes),
            )
            .expect("positive extents")
        })
        .collect();
    let points = (0..n)
        .map(|_| {
            if !boxes.is_empty() && rng.random_bool(0.5) {
                let b = &boxes[rng.random_range(0..boxes.len())];
                let (c, s) = (b.yaw.cos(), b.yaw.sin());
                let l = [
                    rng.random_range(-0.6..0.6) * b.size[0],
                    rng.random_range(-0.6..0.6) * b.size[1],
                    rng.random_range(-0.6..0.6) * b.size[2],
                ];
                [
                    b.center[0] + c * l[0] - s * l[1],
                    b.center[1] + s * l[0] + c * l[1],
                    b.center[2] + l[2],
                ]
            } else {
                [
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-25.0..25.0),
                    rng.random_range(-3.0..3.0),
                ]
            }
        })
        .collect();
    (PointCloud::new(points), boxes)
}

pub fn probabilities(r: &mut ChaCha8Rng, n: usize, m: usize) -> SemanticRows {
    let mut d = Vec::with_capacity(n * m);
    for _ in 0..n {
        let raw: Vec<f64> = (0..m).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        d.extend(raw.iter().map(|v| v / s));
    }
    SemanticRows::new(m, d).unwrap()
}

pub fn random_grid(r: &mut ChaCha8Rng, n: usize, m: usize, cap: usize) -> VoxelGrid {
    let points = (0..n)
        .map(|_| {
            [
                r.random_range(-4.0..4.0),
                r.random_range(-4.0..4.0),
                r.random_range(-2.0..2.0),
            ]
        })
        .collect();
    let (s2, s3) = (probabilities(r, n, m), probabilities(r, n, m));
    let pcc = PaintedPointCloud::new(PointCloud::new(points), s2, s3).unwrap();
    let cfg = VoxelConfig {
        range_min: [-4.0, -4.0, -2.0],
        range_max: [4.0, 4.0, 2.0],
        voxel_size: [2.0, 2.0, 4.0],
        points_per_voxel: cap,
        seed: 5,
    };
    voxelize(&pcc, &cfg).unwrap()
}

pub fn random_aaf(r: &mut ChaCha8Rng, m: usize, combine: CombineMode) -> Aaf {
    let cfg = AafConfig {
        local_channels: 8,
        global_channels: 8,
        attention_hidden: 8,
        combine,
    };
    let mut aaf = Aaf::new(m, &cfg, r).unwrap();
    let last = aaf.mlp_att.layers.last_mut().unwrap();
    last.linear = Linear::new(8, 1, r);
    aaf
}

/// Shuffles each voxel's valid rows and rebuilds the cyclic padding.
pub fn shuffle_rows(grid: &VoxelGrid, r: &mut ChaCha8Rng) -> VoxelGrid {
    let mut out = grid.clone();
    let (cap, w) = (grid.points_per_voxel(), grid.feature_width());
    for e in 0..grid.len() {
        let n = grid.valid_counts[e];
        let src = grid.voxel_features(e);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(r);
        let dst = out.voxel_features_mut(e);
        for k in 0..cap {
            let from = order[k % n];
            dst[k * w..(k + 1) * w].copy_from_slice(&src[from * w..(from + 1) * w]);
        }
    }
    out
}

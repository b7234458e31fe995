//! Synthetic scenes and the two sensor corruption models: image-space
//! boundary dilation and 3-D class confusion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project_points, read_cloud_bin, read_semantic_map, write_cloud_bin, write_semantic_map,
    Calibration, ImageSize, PointCloud, SemanticMap2D,
};
use crate::semantics::{argmax, boxes_to_text, parse_boxes, point_in_box, Box3D, SemanticRows};

pub const CAR: usize = 1;
pub const TRUCK: usize = 2;
pub const PEDESTRIAN: usize = 3;

const PLACEMENT_RETRIES: usize = 200;
const SURFACE_SHRINK: f64 = 1.0 - 1e-4;
const OCCLUSION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShape {
    pub class_id: usize,
    /// Mean `(l, w, h)` in metres.
    pub size: [f64; 3],
    /// Relative uniform jitter applied to each extent.
    pub jitter: f64,
    /// Relative sampling frequency.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub classes: usize,
    pub shapes: Vec<ClassShape>,
    /// Ground extent `[x_min, y_min]` to `[x_max, y_max]`.
    pub ground_min: [f64; 2],
    pub ground_max: [f64; 2],
    pub ground_z: f64,
    /// Box centres are drawn with `x` in this interval.
    pub place_x: [f64; 2],
    /// Points per square metre on the ground and on box faces.
    pub ground_density: f64,
    pub surface_density: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    /// Camera position in the LiDAR frame.
    pub camera_offset: [f64; 3],
    /// Minimum clearance between box footprints.
    pub min_gap: f64,
    /// Keep only points that project inside the image.
    pub crop_to_view: bool,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_boxes: 7,
            max_boxes: 11,
            classes: 4,
            shapes: vec![
                ClassShape {
                    class_id: CAR,
                    size: [4.2, 1.8, 1.6],
                    jitter: 0.1,
                    weight: 1.0,
                },
                ClassShape {
                    class_id: TRUCK,
                    size: [4.8, 2.0, 1.9],
                    jitter: 0.1,
                    weight: 1.0,
                },
                ClassShape {
                    class_id: PEDESTRIAN,
                    size: [0.8, 0.8, 1.8],
                    jitter: 0.15,
                    weight: 0.4,
                },
            ],
            ground_min: [0.0, -12.0],
            ground_max: [24.0, 12.0],
            ground_z: -1.7,
            place_x: [7.0, 21.0],
            ground_density: 0.7,
            surface_density: 1.5,
            image_width: 192,
            image_height: 96,
            focal: 96.0,
            camera_offset: [0.0, 0.0, 0.0],
            min_gap: 0.5,
            crop_to_view: true,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ground_density > 0.0 && self.surface_density > 0.0) {
            return Err(Error::Config("point densities must be positive".into()));
        }
        if self.min_boxes > self.max_boxes {
            return Err(Error::Config("min_boxes exceeds max_boxes".into()));
        }
        if self.max_boxes > 0 && self.shapes.is_empty() {
            return Err(Error::Config(
                "boxes requested but no class shapes given".into(),
            ));
        }
        for s in &self.shapes {
            if s.class_id == 0 || s.class_id >= self.classes {
                return Err(Error::Config(format!(
                    "shape class {} outside 1..{}",
                    s.class_id, self.classes
                )));
            }
            if s.size.iter().any(|&v| !(v > 0.0))
                || !(0.0..1.0).contains(&s.jitter)
                || !(s.weight > 0.0)
            {
                return Err(Error::Config(format!(
                    "invalid shape for class {}",
                    s.class_id
                )));
            }
        }
        if self.image_width == 0 || self.image_height == 0 || !(self.focal > 0.0) {
            return Err(Error::Config(
                "image size and focal length must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Forward-looking pinhole: camera `x` = −LiDAR `y`, `y` = −`z`, `z` = `x`.
    pub fn calibration(&self) -> Calibration {
        let cx = (self.image_width as f64 - 1.0) / 2.0;
        let cy = (self.image_height as f64 - 1.0) / 2.0;
        let o = self.camera_offset;
        let r = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = -(r[i][0] * o[0] + r[i][1] * o[1] + r[i][2] * o[2]);
        }
        Calibration::new(
            [
                [self.focal, 0.0, cx],
                [0.0, self.focal, cy],
                [0.0, 0.0, 1.0],
            ],
            m,
        )
        .expect("constructed calibration is valid")
    }

    pub fn image_size(&self) -> ImageSize {
        ImageSize {
            width: self.image_width,
            height: self.image_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub calib: Calibration,
    pub true_map: SemanticMap2D,
    /// Box index seen through each pixel.
    pub instance_map: Vec<Option<usize>>,
    pub seed: u64,
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Entry parameter of the ray `o + t·d` into the box, if it hits.
fn ray_box_entry(o: [f64; 3], d: [f64; 3], b: &Box3D) -> Option<f64> {
    let lo = b.to_local(o);
    let (s, c) = b.yaw.sin_cos();
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let half = b.size[k] / 2.0;
        if ld[k].abs() < 1e-15 {
            if lo[k].abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - lo[k]) / ld[k];
        let bb = (half - lo[k]) / ld[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t1 > 0.0).then_some(t0)
}

/// Boxes that find no free spot within the retry budget are dropped.
fn place_boxes(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let count = rng.random_range(params.min_boxes..=params.max_boxes);
    let total_weight: f64 = params.shapes.iter().map(|s| s.weight).sum();
    let half_fov = (params.image_width as f64 / 2.0) / params.focal;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random_range(0.0..total_weight);
        let shape = params
            .shapes
            .iter()
            .find(|s| {
                pick -= s.weight;
                pick < 0.0
            })
            .unwrap_or(params.shapes.last().expect("validated"));
        let size: [f64; 3] = std::array::from_fn(|k| {
            shape.size[k] * (1.0 + rng.random_range(-shape.jitter..=shape.jitter))
        });
        let radius = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let x = rng.random_range(params.place_x[0]..params.place_x[1]);
            let y_lim = x * half_fov * 0.85;
            let y = rng.random_range(-y_lim..y_lim);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let candidate = Box3D::new(
                [x, y, params.ground_z + size[2] / 2.0],
                size,
                yaw,
                shape.class_id,
            )?;
            let inside = candidate.footprint().iter().all(|&[cx, cy]| {
                cx > params.ground_min[0]
                    && cx < params.ground_max[0]
                    && cy > params.ground_min[1]
                    && cy < params.ground_max[1]
                    && cx > 0.0
                    && cy.abs() < 0.95 * half_fov * (cx - params.camera_offset[0]).max(0.0)
            });
            let clear = boxes.iter().all(|o| {
                let r = 0.5 * (o.size[0] * o.size[0] + o.size[1] * o.size[1]).sqrt();
                let dx = o.center[0] - x;
                let dy = o.center[1] - y;
                (dx * dx + dy * dy).sqrt() > r + radius + params.min_gap
            });
            if inside && clear {
                placed = Some(candidate);
                break;
            }
        }
        if let Some(b) = placed {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

fn sample_count(density: f64, area: f64, rng: &mut ChaCha8Rng) -> usize {
    let mean = density * area;
    let base = mean.floor();
    base as usize + usize::from(rng.random::<f64>() < mean - base)
}

/// Ground plane plus box faces (top and four sides). Points hidden from the
/// sensor origin behind a box are removed; ground inside footprints is never
/// sampled.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = place_boxes(params, &mut rng)?;

    let mut raw: Vec<([f64; 3], Option<usize>)> = Vec::new();
    let [x0, y0] = params.ground_min;
    let [x1, y1] = params.ground_max;
    let n_ground = sample_count(params.ground_density, (x1 - x0) * (y1 - y0), &mut rng);
    for _ in 0..n_ground {
        let p = [
            quantize(rng.random_range(x0..x1)),
            quantize(rng.random_range(y0..y1)),
            quantize(params.ground_z),
        ];
        if !boxes.iter().any(|b| point_in_box(p, b)) {
            raw.push((p, None));
        }
    }
    for (bi, b) in boxes.iter().enumerate() {
        let [l, w, h] = b.size;
        // (normal axis, sign, extents of the two in-plane axes)
        let faces = [
            (2, 1.0, l * w),
            (0, 1.0, w * h),
            (0, -1.0, w * h),
            (1, 1.0, l * h),
            (1, -1.0, l * h),
        ];
        for (axis, sign, area) in faces {
            for _ in 0..sample_count(params.surface_density, area, &mut rng) {
                let mut local = [0.0; 3];
                for (k, slot) in local.iter_mut().enumerate() {
                    *slot = if k == axis {
                        sign * b.size[k] / 2.0
                    } else {
                        rng.random_range(-b.size[k] / 2.0..b.size[k] / 2.0)
                    };
                    *slot *= SURFACE_SHRINK;
                }
                let p = b.to_world(local).map(quantize);
                if point_in_box(p, b) {
                    raw.push((p, Some(bi)));
                }
            }
        }
    }

    let origin = [0.0; 3];
    let points: Vec<[f64; 3]> = raw
        .into_iter()
        .filter(|&(p, _)| {
            !boxes.iter().any(|b| {
                ray_box_entry(origin, p, b).is_some_and(|t| t > 0.0 && t < 1.0 - OCCLUSION_TOL)
            })
        })
        .map(|(p, _)| p)
        .collect();

    let calib = params.calibration();
    let points = if params.crop_to_view {
        let size = params.image_size();
        let cloud = PointCloud::new(points);
        let proj = project_points(&cloud, &calib, size);
        cloud
            .points
            .into_iter()
            .zip(proj.in_view)
            .filter(|p| p.1)
            .map(|p| p.0)
            .collect()
    } else {
        points
    };
    let (true_map, instance_map) = render_truth(&boxes, &calib, params);
    let n = points.len();
    Ok(Scene {
        cloud: PointCloud {
            points,
            intensity: Some(vec![0.0; n]),
        },
        boxes,
        calib,
        true_map,
        instance_map,
        seed,
    })
}

/// Ray-casts every pixel centre against the boxes; nearest hit wins.
fn render_truth(
    boxes: &[Box3D],
    calib: &Calibration,
    params: &SceneParams,
) -> (SemanticMap2D, Vec<Option<usize>>) {
    let (w, h, m) = (params.image_width, params.image_height, params.classes);
    let mut map = SemanticMap2D::uniform(w, h, m, 0);
    let mut instances = vec![None; w * h];
    let o = calib.camera_center();
    let mut onehot = vec![0.0; m];
    for row in 0..h {
        for col in 0..w {
            let d = calib.pixel_ray(col as f64, row as f64);
            let mut best: Option<(f64, usize)> = None;
            for (bi, b) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_entry(o, d, b) {
                    if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, bi));
                    }
                }
            }
            if let Some((_, bi)) = best {
                onehot.fill(0.0);
                onehot[boxes[bi].class_id] = 1.0;
                map.set_pixel(row, col, &onehot);
                instances[row * w + col] = Some(bi);
            }
        }
    }
    (map, instances)
}

/// `m × m` row-stochastic class swap probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Confusion(pub Vec<Vec<f64>>);

impl Confusion {
    pub fn identity(m: usize) -> Self {
        Self(
            (0..m)
                .map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        )
    }

    /// Identity except that classes `a` and `b` swap with probability `p`.
    pub fn pair(m: usize, a: usize, b: usize, p: f64) -> Self {
        let mut c = Self::identity(m);
        c.0[a][a] = 1.0 - p;
        c.0[a][b] = p;
        c.0[b][b] = 1.0 - p;
        c.0[b][a] = p;
        c
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.0.len();
        for (i, row) in self.0.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Config(format!(
                    "confusion row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "confusion row {i} is not stochastic (sum {total})"
                )));
            }
        }
        Ok(())
    }

    /// Most likely wrong class for `class`, if any.
    pub fn partner(&self, class: usize) -> Option<usize> {
        let row = &self.0[class];
        (0..row.len()).filter(|&j| j != class && row[j] > 0.0).fold(
            None,
            |best: Option<usize>, j| match best {
                Some(b) if row[b] >= row[j] => Some(b),
                _ => Some(j),
            },
        )
    }

    /// Whitespace-separated rows, one per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line: idx + 1,
                        msg: format!("cannot parse {t:?} as a probability"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let c = Self(rows);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub dilate_px: usize,
    pub confusion: Confusion,
    /// Chance that an object of a confusable class is segmented in the image
    /// with a split score between its class and its confusion partner.
    #[serde(default)]
    pub ambiguity: f64,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn clean(m: usize) -> Self {
        Self {
            dilate_px: 0,
            confusion: Confusion::identity(m),
            ambiguity: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.confusion.validate()?;
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config(format!(
                "ambiguity must lie in [0, 1], got {}",
                self.ambiguity
            )));
        }
        Ok(())
    }
}

fn stream_seed(seed: u64, scene: u64, stream: u64) -> u64 {
    let mut z = seed ^ scene.rotate_left(21) ^ stream.rotate_left(42);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z ^ (z >> 33)
}

/// Grows every foreground region by `dilate_px` pixels (square structuring
/// element). Background pixels take the score vector of the nearest
/// foreground pixel in Chebyshev distance, ties to the first in row-major
/// order; foreground pixels are left alone.
pub fn corrupt_2d(map: &SemanticMap2D, cfg: &CorruptionConfig) -> SemanticMap2D {
    let r = cfg.dilate_px as isize;
    if r == 0 {
        return map.clone();
    }
    let (w, h) = (map.width() as isize, map.height() as isize);
    let fg: Vec<bool> = (0..h)
        .flat_map(|row| (0..w).map(move |col| (row, col)))
        .map(|(row, col)| map.label(row as usize, col as usize) != 0)
        .collect();
    let mut out = map.clone();
    for row in 0..h {
        for col in 0..w {
            if fg[(row * w + col) as usize] {
                continue;
            }
            let mut best: Option<(isize, isize, isize)> = None;
            for rr in (row - r).max(0)..=(row + r).min(h - 1) {
                for cc in (col - r).max(0)..=(col + r).min(w - 1) {
                    if fg[(rr * w + cc) as usize] {
                        let d = (rr - row).abs().max((cc - col).abs());
                        if best.is_none_or(|(bd, _, _)| d < bd) {
                            best = Some((d, rr, cc));
                        }
                    }
                }
            }
            if let Some((_, rr, cc)) = best {
                let src = map.pixel(rr as usize, cc as usize).to_vec();
                out.set_pixel(row as usize, col as usize, &src);
            }
        }
    }
    out
}

/// Resamples each point's class from its confusion row.
pub fn corrupt_3d(labels: &SemanticRows, cfg: &CorruptionConfig) -> Result<SemanticRows> {
    cfg.confusion.validate()?;
    let m = labels.classes();
    if cfg.confusion.classes() != m {
        return Err(Error::Config(format!(
            "confusion is {}×{0}, labels have {m} classes",
            cfg.confusion.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out: Vec<usize> = labels
        .labels()
        .into_iter()
        .map(|c| {
            let row = &cfg.confusion.0[c];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            row.iter().rposition(|&p| p > 0.0).unwrap_or(c)
        })
        .collect();
    Ok(SemanticRows::one_hot(&out, m))
}

/// The image segmentor stand-in: ambiguous objects first, then boundary
/// dilation. `scene_seed` decorrelates scenes sharing one corruption seed.
pub fn simulate_2d_segmentor(scene: &Scene, cfg: &CorruptionConfig) -> Result<SemanticMap2D> {
    cfg.validate()?;
    let m = scene.true_map.classes();
    let mut map = scene.true_map.clone();
    if cfg.ambiguity > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, scene.seed, 2));
        let twins: Vec<Option<(usize, usize, f64)>> = scene
            .boxes
            .iter()
            .map(|b| {
                let draw: f64 = rng.random();
                let t: f64 = rng.random_range(0.3..0.7);
                let partner = cfg.confusion.partner(b.class_id)?;
                (draw < cfg.ambiguity).then_some((b.class_id, partner, quantize(t)))
            })
            .collect();
        let mut scores = vec![0.0; m];
        for row in 0..map.height() {
            for col in 0..map.width() {
                if let Some(bi) = scene.instance_map[row * map.width() + col] {
                    if let Some((own, partner, t)) = twins[bi] {
                        scores.fill(0.0);
                        scores[partner] = t;
                        scores[own] = quantize(1.0 - t);
                        map.set_pixel(row, col, &scores);
                    }
                }
            }
        }
    }
    Ok(corrupt_2d(&map, cfg))
}

/// 3-D segmentor stand-in: box ground truth passed through the confusion.
pub fn simulate_3d_segmentor(
    scene: &Scene,
    truth: &SemanticRows,
    cfg: &CorruptionConfig,
) -> Result<SemanticRows> {
    let cfg = CorruptionConfig {
        seed: stream_seed(cfg.seed, scene.seed, 3),
        ..cfg.clone()
    };
    corrupt_3d(truth, &cfg)
}

/// Scene plus segmentor outputs as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub cloud: PointCloud,
    pub calib: Calibration,
    pub boxes: Vec<Box3D>,
    pub sem2d: SemanticMap2D,
    pub sem3d: SemanticRows,
}

impl SceneBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_cloud_bin(&dir.join("cloud.bin"), &self.cloud)?;
        let calib = dir.join("calib.txt");
        std::fs::write(&calib, self.calib.to_text()).map_err(|e| Error::io(&calib, e))?;
        let boxes = dir.join("boxes.txt");
        std::fs::write(&boxes, boxes_to_text(&self.boxes)).map_err(|e| Error::io(&boxes, e))?;
        write_semantic_map(&dir.join("sem2d.sem"), &self.sem2d)?;
        let rows = SemanticMap2D::new(
            1,
            self.sem3d.len(),
            self.sem3d.classes(),
            self.sem3d.data().to_vec(),
        )?;
        write_semantic_map(&dir.join("sem3d.sem"), &rows)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let cloud = read_cloud_bin(&dir.join("cloud.bin"))?;
        let read_text = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let calib = Calibration::parse(&read_text("calib.txt")?)?;
        let boxes = parse_boxes(&read_text("boxes.txt")?)?;
        let sem2d = read_semantic_map(&dir.join("sem2d.sem"))?;
        let rows = read_semantic_map(&dir.join("sem3d.sem"))?;
        if rows.width() != 1 || rows.height() != cloud.len() {
            return Err(Error::Format {
                kind: "scene bundle",
                msg: format!(
                    "sem3d.sem holds {}×{} rows for {} points",
                    rows.height(),
                    rows.width(),
                    cloud.len()
                ),
            });
        }
        let sem3d = SemanticRows::new(rows.classes(), rows.scores().to_vec())?;
        Ok(Self {
            cloud,
            calib,
            boxes,
            sem2d,
            sem3d,
        })
    }
}

/// Count of points whose painted 2-D label is foreground while the truth is
/// background.
pub fn false_positive_points(painted: &SemanticRows, truth: &SemanticRows) -> usize {
    (0..painted.len())
        .filter(|&i| argmax(painted.row(i)) != 0 && argmax(truth.row(i)) == 0)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{paint_points_2d, OutOfViewPolicy};
    use crate::semantics::{assign_boxes, labels_from_boxes};

    #[test]
    fn deterministic_per_seed() {
        let p = SceneParams::default();
        let a = generate_scene(&p, 7).unwrap();
        let b = generate_scene(&p, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cloud, generate_scene(&p, 8).unwrap().cloud);
    }

    #[test]
    fn empty_scene_is_background() {
        let p = SceneParams {
            min_boxes: 0,
            max_boxes: 0,
            ..SceneParams::default()
        };
        let s = generate_scene(&p, 1).unwrap();
        assert!(s.boxes.is_empty());
        let truth = labels_from_boxes(&s.cloud, &s.boxes, 4).unwrap();
        assert!(truth.labels().iter().all(|&c| c == 0));
        let painted =
            paint_points_2d(&s.cloud, &s.calib, &s.true_map, OutOfViewPolicy::Background).unwrap();
        assert!(painted.labels().iter().all(|&c| c == 0));
    }

    #[test]
    fn box_points_lie_in_boxes() {
        let s = generate_scene(&SceneParams::default(), 3).unwrap();
        let owners = assign_boxes(&s.cloud, &s.boxes);
        assert!(owners.iter().any(Option::is_some));
        for (p, o) in s.cloud.points.iter().zip(&owners) {
            if (p[2] - quantize(-1.7)).abs() > 1e-9 {
                let b = o.expect("non-ground points belong to a box");
                assert!(point_in_box(*p, &s.boxes[b]));
            }
        }
    }

    #[test]
    fn clean_painting_errors_are_boundary_pixels() {
        let (mut wrong, mut total) = (0, 0);
        for seed in 0..10 {
            let s = generate_scene(&SceneParams::default(), seed).unwrap();
            let truth = labels_from_boxes(&s.cloud, &s.boxes, 4).unwrap().labels();
            let painted =
                paint_points_2d(&s.cloud, &s.calib, &s.true_map, OutOfViewPolicy::Background)
                    .unwrap()
                    .labels();
            let size = s.true_map.size();
            let proj = project_points(&s.cloud, &s.calib, size);
            total += truth.len();
            for i in 0..truth.len() {
                if truth[i] == painted[i] {
                    continue;
                }
                wrong += 1;
                let (r, c) = proj.nearest_pixel(i, size).expect("cropped to view");
                let near_truth = (r.saturating_sub(1)..=(r + 1).min(size.height - 1))
                    .flat_map(|rr| {
                        (c.saturating_sub(1)..=(c + 1).min(size.width - 1)).map(move |cc| (rr, cc))
                    })
                    .any(|(rr, cc)| s.true_map.label(rr, cc) == truth[i]);
                assert!(
                    near_truth,
                    "seed {seed}: point {i} is far from its class in the map"
                );
            }
        }
        assert!((wrong as f64) < 0.05 * total as f64, "{wrong} of {total}");
    }

    #[test]
    fn dilation_examples() {
        let mut map = SemanticMap2D::uniform(5, 5, 3, 0);
        map.set_pixel(2, 2, &[0.0, 1.0, 0.0]);
        let cfg = |d| CorruptionConfig {
            dilate_px: d,
            ..CorruptionConfig::clean(3)
        };
        assert_eq!(corrupt_2d(&map, &cfg(0)), map);
        let out = corrupt_2d(&map, &cfg(1));
        for row in 0..5 {
            for col in 0..5 {
                let inside = (1..=3).contains(&row) && (1..=3).contains(&col);
                assert_eq!(out.label(row, col), usize::from(inside), "({row}, {col})");
            }
        }
    }

    #[test]
    fn confusion_degenerate_and_rate() {
        let labels = SemanticRows::one_hot(&vec![CAR; 100_000], 4);
        let mut cfg = CorruptionConfig::clean(4);
        assert_eq!(corrupt_3d(&labels, &cfg).unwrap(), labels);
        cfg.confusion = Confusion::pair(4, CAR, TRUCK, 1.0);
        assert!(corrupt_3d(&labels, &cfg)
            .unwrap()
            .labels()
            .iter()
            .all(|&c| c == TRUCK));
        cfg.confusion = Confusion::pair(4, CAR, TRUCK, 0.3);
        cfg.seed = 17;
        let swapped = corrupt_3d(&labels, &cfg)
            .unwrap()
            .labels()
            .iter()
            .filter(|&&c| c == TRUCK)
            .count();
        let n = 100_000.0_f64;
        let sigma = (n * 0.3 * 0.7).sqrt();
        assert!((swapped as f64 - 0.3 * n).abs() < 3.0 * sigma, "{swapped}");
        cfg.confusion.0[1][1] = 0.5;
        assert!(corrupt_3d(&labels, &cfg).is_err());
    }

    #[test]
    fn confusion_text_and_partner() {
        let c = Confusion::parse("1 0 0\n0 0.6 0.4\n0 0.3 0.7\n").unwrap();
        assert_eq!(c.partner(1), Some(2));
        assert_eq!(c.partner(0), None);
        assert!(Confusion::parse("1 0\n0.5 0.4\n").is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let s = generate_scene(&SceneParams::default(), 5).unwrap();
        let cfg = CorruptionConfig {
            dilate_px: 2,
            confusion: Confusion::pair(4, CAR, TRUCK, 0.3),
            ambiguity: 0.5,
            seed: 1,
        };
        let truth = labels_from_boxes(&s.cloud, &s.boxes, 4).unwrap();
        let bundle = SceneBundle {
            cloud: s.cloud.clone(),
            calib: s.calib.clone(),
            boxes: s.boxes.clone(),
            sem2d: simulate_2d_segmentor(&s, &cfg).unwrap(),
            sem3d: simulate_3d_segmentor(&s, &truth, &cfg).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        bundle.write(dir.path()).unwrap();
        let back = SceneBundle::read(dir.path()).unwrap();
        assert_eq!(back.cloud, bundle.cloud);
        assert_eq!(back.calib, bundle.calib);
        assert_eq!(back.boxes, bundle.boxes);
        assert_eq!(back.sem2d, bundle.sem2d);
        assert_eq!(back.sem3d, bundle.sem3d);
    }
}

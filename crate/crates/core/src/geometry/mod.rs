//! Camera calibration, LiDAR-to-image projection and 2-D semantic painting.

mod formats;

pub use formats::{
    decode_cloud, decode_semantic_map, encode_cloud, encode_semantic_map, read_cloud_bin,
    read_semantic_map, write_cloud_bin, write_semantic_map,
};

use crate::error::{Error, Result};
use crate::semantics::SemanticRows;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Pinhole intrinsics `K` and LiDAR-to-camera extrinsics `M = [R | t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    intrinsic: [[f64; 3]; 3],
    extrinsic: [[f64; 4]; 3],
}

impl Calibration {
    pub fn new(intrinsic: [[f64; 3]; 3], extrinsic: [[f64; 4]; 3]) -> Result<Self> {
        validate_intrinsic(&intrinsic).map_err(|msg| Error::Config(format!("K: {msg}")))?;
        validate_rotation(&extrinsic).map_err(|msg| Error::Config(format!("M: {msg}")))?;
        Ok(Self {
            intrinsic,
            extrinsic,
        })
    }

    pub fn intrinsic(&self) -> &[[f64; 3]; 3] {
        &self.intrinsic
    }

    pub fn extrinsic(&self) -> &[[f64; 4]; 3] {
        &self.extrinsic
    }

    /// Parses the `K: …` / `M: …` text format. Blank lines, `#` comments and
    /// unrecognised keys are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut k: Option<(usize, Vec<f64>)> = None;
        let mut m: Option<(usize, Vec<f64>)> = None;
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            last_line = line_no;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, rest)) = line.split_once(':') else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `KEY: values`, got {line:?}"),
                });
            };
            let (slot, expected) = match key.trim() {
                "K" => (&mut k, 9),
                "M" => (&mut m, 12),
                _ => continue,
            };
            if slot.is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate {} line", key.trim()),
                });
            }
            let values = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("{}: cannot parse {tok:?} as a number", key.trim()),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != expected {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "{} expects {expected} values, found {}",
                        key.trim(),
                        values.len()
                    ),
                });
            }
            *slot = Some((line_no, values));
        }
        let missing = |name: &str| Error::Parse {
            line: last_line,
            msg: format!("missing {name} line"),
        };
        let (k_line, kv) = k.ok_or_else(|| missing("K"))?;
        let (m_line, mv) = m.ok_or_else(|| missing("M"))?;
        let mut intrinsic = [[0.0; 3]; 3];
        let mut extrinsic = [[0.0; 4]; 3];
        for r in 0..3 {
            intrinsic[r].copy_from_slice(&kv[r * 3..r * 3 + 3]);
            extrinsic[r].copy_from_slice(&mv[r * 4..r * 4 + 4]);
        }
        validate_intrinsic(&intrinsic).map_err(|msg| Error::Parse {
            line: k_line,
            msg: format!("K: {msg}"),
        })?;
        validate_rotation(&extrinsic).map_err(|msg| Error::Parse {
            line: m_line,
            msg: format!("M: {msg}"),
        })?;
        Ok(Self {
            intrinsic,
            extrinsic,
        })
    }

    pub fn to_text(&self) -> String {
        let join = |vals: &mut dyn Iterator<Item = f64>| {
            vals.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        };
        format!(
            "K: {}\nM: {}\n",
            join(&mut self.intrinsic.iter().flatten().copied()),
            join(&mut self.extrinsic.iter().flatten().copied())
        )
    }

    /// `M · [x y z 1]ᵀ`
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.extrinsic;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
        }
        out
    }

    /// Perspective projection of a camera-frame point to `(u, v)`.
    pub fn to_pixel(&self, cam: [f64; 3]) -> [f64; 2] {
        let k = &self.intrinsic;
        let x = k[0][0] * cam[0] + k[0][1] * cam[1] + k[0][2] * cam[2];
        let y = k[1][1] * cam[1] + k[1][2] * cam[2];
        [x / cam[2], y / cam[2]]
    }

    /// Inverse of the extrinsic rigid transform: camera frame to LiDAR frame.
    pub fn camera_to_lidar(&self, cam: [f64; 3]) -> [f64; 3] {
        let m = &self.extrinsic;
        let d = [cam[0] - m[0][3], cam[1] - m[1][3], cam[2] - m[2][3]];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = m[0][c] * d[0] + m[1][c] * d[1] + m[2][c] * d[2];
        }
        out
    }

    /// Camera centre expressed in the LiDAR frame.
    pub fn camera_center(&self) -> [f64; 3] {
        self.camera_to_lidar([0.0; 3])
    }

    /// Direction (LiDAR frame, unnormalised) of the ray through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsic;
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        let m = &self.extrinsic;
        let cam = [x, y, 1.0];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = m[0][c] * cam[0] + m[1][c] * cam[1] + m[2][c] * cam[2];
        }
        out
    }
}

fn validate_intrinsic(k: &[[f64; 3]; 3]) -> std::result::Result<(), String> {
    if k.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite entry".into());
    }
    if k[2][2] != 1.0 {
        return Err(format!("K[2][2] must be 1, got {}", k[2][2]));
    }
    if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
        return Err("must be upper triangular".into());
    }
    if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
        return Err("focal lengths must be positive".into());
    }
    Ok(())
}

fn validate_rotation(m: &[[f64; 4]; 3]) -> std::result::Result<(), String> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite entry".into());
    }
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|c| m[i][c] * m[j][c]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > ORTHONORMAL_TOL {
                return Err(format!(
                    "rotation is not orthonormal (row {i}·row {j} = {dot}, expected {want})"
                ));
            }
        }
    }
    Ok(())
}

/// LiDAR points in metres with optional per-point intensity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reorders points (and intensities) so that new index `i` holds old
    /// point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| order.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

/// Per-pixel class probabilities, row-major with the class index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap2D {
    width: usize,
    height: usize,
    classes: usize,
    scores: Vec<f64>,
}

pub const PROBABILITY_TOL: f64 = 1e-6;

impl SemanticMap2D {
    pub fn new(width: usize, height: usize, classes: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != width * height * classes {
            return Err(Error::shape(
                "SemanticMap2D",
                &[height, width, classes],
                &[scores.len()],
            ));
        }
        if classes == 0 {
            return Err(Error::Config(
                "semantic map needs at least one class".into(),
            ));
        }
        for (p, px) in scores.chunks(classes).enumerate() {
            let total: f64 = px.iter().sum();
            if px.iter().any(|&s| !(s >= 0.0)) || (total - 1.0).abs() > PROBABILITY_TOL {
                return Err(Error::Format {
                    kind: "semantic map",
                    msg: format!(
                        "pixel ({}, {}) is not a probability vector (sum {total})",
                        p / width.max(1),
                        p % width.max(1)
                    ),
                });
            }
        }
        Ok(Self {
            width,
            height,
            classes,
            scores,
        })
    }

    /// Every pixel set to the one-hot vector of `class`.
    pub fn uniform(width: usize, height: usize, classes: usize, class: usize) -> Self {
        let mut scores = vec![0.0; width * height * classes];
        for px in scores.chunks_mut(classes) {
            px[class] = 1.0;
        }
        Self {
            width,
            height,
            classes,
            scores,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn size(&self) -> ImageSize {
        ImageSize {
            width: self.width,
            height: self.height,
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.classes;
        &self.scores[at..at + self.classes]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, values: &[f64]) {
        let at = (row * self.width + col) * self.classes;
        self.scores[at..at + self.classes].copy_from_slice(values);
    }

    /// Arg-max class of a pixel, ties to the lowest class id.
    pub fn label(&self, row: usize, col: usize) -> usize {
        crate::semantics::argmax(self.pixel(row, col))
    }
}

/// Per-point projection into the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub in_view: Vec<bool>,
}

impl ProjectionResult {
    /// Nearest pixel `(row, col)` for an in-view point: coordinates rounded
    /// half-up, clamped to the last row/column.
    pub fn nearest_pixel(&self, i: usize, size: ImageSize) -> Option<(usize, usize)> {
        if !self.in_view[i] {
            return None;
        }
        let [u, v] = self.pixels[i];
        let col = ((u + 0.5).floor() as usize).min(size.width - 1);
        let row = ((v + 0.5).floor() as usize).min(size.height - 1);
        Some((row, col))
    }
}

/// Projects every point through `M` then `K`. A point is in view when its
/// camera depth is positive and `(u, v)` lies in `[0, w) × [0, h)`.
pub fn project_points(
    cloud: &PointCloud,
    calib: &Calibration,
    size: ImageSize,
) -> ProjectionResult {
    let n = cloud.len();
    let mut out = ProjectionResult {
        pixels: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        in_view: Vec::with_capacity(n),
    };
    for &p in &cloud.points {
        let cam = calib.to_camera(p);
        let depth = cam[2];
        let pixel = if depth != 0.0 {
            calib.to_pixel(cam)
        } else {
            [f64::NAN, f64::NAN]
        };
        let visible = depth > 0.0
            && pixel[0] >= 0.0
            && pixel[0] < size.width as f64
            && pixel[1] >= 0.0
            && pixel[1] < size.height as f64;
        out.pixels.push(pixel);
        out.depth.push(depth);
        out.in_view.push(visible);
    }
    out
}

/// What points outside the camera frustum are painted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutOfViewPolicy {
    /// One-hot class 0.
    #[default]
    Background,
    /// All-zero vector.
    Zero,
}

impl std::str::FromStr for OutOfViewPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(Self::Background),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!(
                "unknown out-of-view policy {other:?}"
            ))),
        }
    }
}

/// Point painting: every in-view point copies the score vector of its nearest
/// pixel. No depth test is made, so points behind an object inherit its label.
pub fn paint_points_2d(
    cloud: &PointCloud,
    calib: &Calibration,
    map: &SemanticMap2D,
    policy: OutOfViewPolicy,
) -> Result<SemanticRows> {
    let m = map.classes();
    if m < 2 {
        return Err(Error::Config(format!(
            "painting needs background plus at least one class, map has {m}"
        )));
    }
    let proj = project_points(cloud, calib, map.size());
    let mut fallback = vec![0.0; m];
    if policy == OutOfViewPolicy::Background {
        fallback[0] = 1.0;
    }
    let mut data = Vec::with_capacity(cloud.len() * m);
    for i in 0..cloud.len() {
        match proj.nearest_pixel(i, map.size()) {
            Some((row, col)) => data.extend_from_slice(map.pixel(row, col)),
            None => data.extend_from_slice(&fallback),
        }
    }
    Ok(SemanticRows::from_raw(m, data))
}

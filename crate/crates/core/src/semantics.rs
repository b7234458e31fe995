//! Per-point semantic vectors, box ground truth and the ID / one-hot / score
//! representations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, PROBABILITY_TOL};

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `N × m` row-major matrix of per-point class vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRows {
    classes: usize,
    data: Vec<f64>,
}

impl SemanticRows {
    /// Checked constructor: every row must be a probability vector.
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self> {
        let rows = Self::from_raw(classes, data);
        rows.validate()?;
        Ok(rows)
    }

    pub(crate) fn from_raw(classes: usize, data: Vec<f64>) -> Self {
        assert!(classes > 0 && data.len().is_multiple_of(classes));
        Self { classes, data }
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Self {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &c) in labels.iter().enumerate() {
            data[i * classes + c] = 1.0;
        }
        Self { classes, data }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.data.chunks(self.classes).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > PROBABILITY_TOL {
                return Err(Error::Format {
                    kind: "semantic rows",
                    msg: format!("row {i} is not a probability vector (sum {total})"),
                });
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.chunks(self.classes).map(argmax).collect()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.classes);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self {
            classes: self.classes,
            data,
        }
    }
}

/// Oriented box; `yaw` rotates about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "box size must be positive, got {:?}",
                self.size
            )));
        }
        if self
            .center
            .iter()
            .chain([&self.yaw])
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("box pose must be finite".into()));
        }
        if self.class_id == 0 {
            return Err(Error::Config("class 0 is reserved for background".into()));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Point expressed in the box frame (heading along +x).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }

    /// Footprint corners in the x–y plane, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[a, b]| {
            let w = self.to_world([a, b, 0.0]);
            [w[0], w[1]]
        })
    }
}

/// Boundary-inclusive containment test.
pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    let l = b.to_local(p);
    (0..3).all(|d| l[d].abs() <= b.size[d] / 2.0)
}

/// Index of the containing box per point; overlaps go to the smallest volume,
/// then the lowest index.
pub fn assign_boxes(cloud: &PointCloud, boxes: &[Box3D]) -> Vec<Option<usize>> {
    cloud
        .points
        .iter()
        .map(|&p| {
            let mut best: Option<usize> = None;
            for (i, b) in boxes.iter().enumerate() {
                if point_in_box(p, b) && best.is_none_or(|j| b.volume() < boxes[j].volume()) {
                    best = Some(i);
                }
            }
            best
        })
        .collect()
}

/// One-hot ground truth: containing box class, else background.
pub fn labels_from_boxes(
    cloud: &PointCloud,
    boxes: &[Box3D],
    classes: usize,
) -> Result<SemanticRows> {
    if let Some(b) = boxes.iter().find(|b| b.class_id >= classes) {
        return Err(Error::Config(format!(
            "box class {} does not fit {classes} classes",
            b.class_id
        )));
    }
    let labels: Vec<usize> = assign_boxes(cloud, boxes)
        .into_iter()
        .map(|a| a.map_or(0, |i| boxes[i].class_id))
        .collect();
    Ok(SemanticRows::one_hot(&labels, classes))
}

/// `cx cy cz l w h yaw class_id` per line.
pub fn parse_boxes(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: idx + 1, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(err(format!("box expects 8 fields, found {}", toks.len())));
        }
        let mut v = [0.0; 7];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = tok
                .parse()
                .map_err(|_| err(format!("cannot parse {tok:?} as a number")))?;
        }
        let class_id = toks[7]
            .parse()
            .map_err(|_| err(format!("cannot parse {:?} as a class id", toks[7])))?;
        let b = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], class_id)
            .map_err(|e| err(e.to_string()))?;
        out.push(b);
    }
    Ok(out)
}

pub fn boxes_to_text(boxes: &[Box3D]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, z] = b.center;
        let [l, w, h] = b.size;
        s.push_str(&format!(
            "{x} {y} {z} {l} {w} {h} {} {}\n",
            b.yaw, b.class_id
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Id,
    OneHot,
    #[default]
    Score,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Self::Id, Self::OneHot, Self::Score];

    pub fn name(self) -> &'static str {
        match self {
            Self::Id => "id",
            Self::OneHot => "onehot",
            Self::Score => "score",
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown representation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoded {
    Ids { classes: usize, ids: Vec<usize> },
    Vectors(SemanticRows),
}

impl Encoded {
    /// Vector form; integer ids become one-hot rows.
    pub fn expand(&self) -> SemanticRows {
        match self {
            Self::Ids { classes, ids } => SemanticRows::one_hot(ids, *classes),
            Self::Vectors(rows) => rows.clone(),
        }
    }
}

pub fn encode(rows: &SemanticRows, repr: Representation) -> Encoded {
    match repr {
        Representation::Score => Encoded::Vectors(rows.clone()),
        Representation::OneHot => {
            Encoded::Vectors(SemanticRows::one_hot(&rows.labels(), rows.classes()))
        }
        Representation::Id => Encoded::Ids {
            classes: rows.classes(),
            ids: rows.labels(),
        },
    }
}

/// Points with a 2-D and a 3-D semantic vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintedPointCloud {
    pub cloud: PointCloud,
    pub sem2d: SemanticRows,
    pub sem3d: SemanticRows,
}

impl PaintedPointCloud {
    pub fn new(cloud: PointCloud, sem2d: SemanticRows, sem3d: SemanticRows) -> Result<Self> {
        if sem2d.len() != cloud.len() || sem3d.len() != cloud.len() {
            return Err(Error::shape(
                "PaintedPointCloud",
                &[cloud.len(), sem2d.len()],
                &[sem3d.len()],
            ));
        }
        if sem2d.classes() != sem3d.classes() {
            return Err(Error::shape(
                "PaintedPointCloud",
                &[sem2d.classes()],
                &[sem3d.classes()],
            ));
        }
        Ok(Self {
            cloud,
            sem2d,
            sem3d,
        })
    }

    pub fn classes(&self) -> usize {
        self.sem2d.classes()
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Both semantic channels re-encoded, IDs expanded to one-hot.
    pub fn encoded(&self, repr: Representation) -> Self {
        Self {
            cloud: self.cloud.clone(),
            sem2d: encode(&self.sem2d, repr).expand(),
            sem3d: encode(&self.sem3d, repr).expand(),
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            cloud: self.cloud.permuted(order),
            sem2d: self.sem2d.permuted(order),
            sem3d: self.sem3d.permuted(order),
        }
    }
}

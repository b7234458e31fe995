use std::path::Path;

use super::{PointCloud, SemanticMap2D};
use crate::error::{Error, Result};

const SEM_MAGIC: &[u8; 4] = b"SEM2";

/// KITTI-style `N × 4` little-endian `f32` records `(x, y, z, intensity)`.
pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let intensity = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format {
            kind: "point cloud",
            msg: format!(
                "{} bytes is not a multiple of the 16-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[k * 4..k * 4 + 4].try_into().unwrap()) as f64;
        let p = [f(0), f(1), f(2)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                kind: "point cloud",
                msg: format!("non-finite coordinate in record {}", points.len()),
            });
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

pub fn encode_semantic_map(map: &SemanticMap2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + map.scores().len() * 4);
    out.extend_from_slice(SEM_MAGIC);
    for d in [map.height(), map.width(), map.classes()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in map.scores() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_semantic_map(bytes: &[u8]) -> Result<SemanticMap2D> {
    let bad = |msg: String| Error::Format {
        kind: "semantic map",
        msg,
    };
    if bytes.len() < 16 || &bytes[..4] != SEM_MAGIC {
        return Err(bad("missing SEM2 header".into()));
    }
    let u = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    let (h, w, m) = (u(4), u(8), u(12));
    let want = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(m))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if bytes.len() - 16 != want {
        return Err(bad(format!(
            "payload is {} bytes, header {h}×{w}×{m} needs {want}",
            bytes.len() - 16
        )));
    }
    let scores = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SemanticMap2D::new(w, h, m, scores)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cloud_bin(path: &Path) -> Result<PointCloud> {
    decode_cloud(&read(path)?)
}

pub fn write_cloud_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    write(path, &encode_cloud(cloud))
}

pub fn read_semantic_map(path: &Path) -> Result<SemanticMap2D> {
    decode_semantic_map(&read(path)?)
}

pub fn write_semantic_map(path: &Path, map: &SemanticMap2D) -> Result<()> {
    write(path, &encode_semantic_map(map))
}

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const POINT_CLOUD_MAGIC: &[u8; 4] = b"CMPC";
pub const MASK_MAGIC: &[u8; 4] = b"CMPM";

/// `n` points with `l` channels each; channels 0..3 are x, y, z in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub data: Array2<f64>,
}

impl PointCloud {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (n, l) = data.dim();
        if n == 0 {
            return Err(Error::Validation("point cloud must hold at least one point".into()));
        }
        if l < 3 {
            return Err(Error::Validation(format!(
                "point cloud needs at least 3 channels, got {l}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("point cloud contains non-finite values".into()));
        }
        Ok(PointCloud {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let row = self.data.row(i);
        [row[0], row[1], row[2]]
    }
}

/// Dense per-pixel label grid standing in for a foundation model's mask output.
/// Each set of pixels sharing a label is one mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticMaskSet {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u16>,
}

impl SemanticMaskSet {
    pub fn new(h: usize, w: usize, labels: Vec<u16>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "mask dimensions must be positive, got {h}x{w}"
            )));
        }
        if labels.len() != h * w {
            return Err(Error::Validation(format!(
                "mask {h}x{w} needs {} labels, got {}",
                h * w,
                labels.len()
            )));
        }
        Ok(SemanticMaskSet { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, label: u16) -> Self {
        SemanticMaskSet {
            h,
            w,
            labels: vec![label; h * w],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.w + col]
    }

    /// Distinct labels in ascending order.
    pub fn label_set(&self) -> Vec<u16> {
        let mut labels = self.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

fn header(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<(usize, usize)> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "{what}: truncated header ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "{what}: magic mismatch, expected {:?} found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let a = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let b = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((a, b))
}

pub fn encode_point_cloud(pc: &PointCloud) -> Vec<u8> {
    let (n, l) = pc.data.dim();
    let mut out = Vec::with_capacity(12 + 8 * n * l);
    out.extend_from_slice(POINT_CLOUD_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    for v in pc.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let (n, l) = header(bytes, POINT_CLOUD_MAGIC, "point cloud")?;
    let expected = n
        .checked_mul(l)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("point cloud: size overflow".into()))?;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "point cloud: payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("point cloud: non-finite value in payload".into()));
    }
    let data = Array2::from_shape_vec((n, l), values).expect("shape checked above");
    PointCloud::new(data)
}

pub fn encode_mask(mask: &SemanticMaskSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * mask.labels.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.h as u32).to_le_bytes());
    out.extend_from_slice(&(mask.w as u32).to_le_bytes());
    for v in &mask.labels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SemanticMaskSet> {
    let (h, w) = header(bytes, MASK_MAGIC, "mask")?;
    let payload = &bytes[12..];
    let expected = h
        .checked_mul(w)
        .and_then(|c| c.checked_mul(2))
        .ok_or_else(|| Error::Format("mask: size overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "mask: payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let labels = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    SemanticMaskSet::new(h, w, labels).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&bytes)
}

pub fn write_point_cloud(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_point_cloud(pc)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SemanticMaskSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn write_mask(mask: &SemanticMaskSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

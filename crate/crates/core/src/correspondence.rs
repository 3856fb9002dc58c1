//! 2D-3D correspondence: pinhole projection, point groups derived from image
//! masks, grouped average pooling and mask-set mIoU.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::normalize_backward_row;
use crate::scene::{Calibration, PointCloud, SemanticMaskSet};

/// Where each point lands. Points visible in several cameras are assigned to
/// the lowest camera id; `pixel_uv` is NaN for points assigned to no camera.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub camera_ids: Vec<String>,
    pub image_size: (usize, usize),
    pub pixel_uv: Array2<f64>,
    pub camera_index: Vec<Option<usize>>,
    pub depth: Vec<f64>,
}

impl ProjectionResult {
    pub fn is_valid(&self, i: usize) -> bool {
        self.camera_index[i].is_some()
    }

    pub fn valid_count(&self) -> usize {
        self.camera_index.iter().filter(|c| c.is_some()).count()
    }

    /// Rounded pixel `(row, col)` of a valid point. Rounding is half away
    /// from zero; the far image edge is clamped so `[w - 0.5, w)` maps to `w - 1`.
    pub fn pixel(&self, i: usize) -> Option<(usize, usize)> {
        self.camera_index[i]?;
        let (h, w) = self.image_size;
        let u = (self.pixel_uv[[i, 0]].round() as usize).min(w - 1);
        let v = (self.pixel_uv[[i, 1]].round() as usize).min(h - 1);
        Some((v, u))
    }
}

pub fn project_points(pc: &PointCloud, calib: &Calibration, image_size: (usize, usize)) -> Result<ProjectionResult> {
    let (h, w) = image_size;
    if h == 0 || w == 0 {
        return Err(Error::Contract(format!("image size must be positive, got {h}x{w}")));
    }
    calib.validate()?;
    let n = pc.len();
    let mut pixel_uv = Array2::from_elem((n, 2), f64::NAN);
    let mut camera_index = vec![None; n];
    let mut depth = vec![f64::NAN; n];
    let cams: Vec<_> = calib.cameras.values().collect();
    for i in 0..n {
        let p = pc.xyz(i);
        for (c, cam) in cams.iter().enumerate() {
            let [x, y, z] = cam.to_camera(p);
            if z <= 0.0 {
                continue;
            }
            let u = cam.fx * x / z + cam.cx;
            let v = cam.fy * y / z + cam.cy;
            if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
                pixel_uv[[i, 0]] = u;
                pixel_uv[[i, 1]] = v;
                camera_index[i] = Some(c);
                depth[i] = z;
                break;
            }
        }
    }
    Ok(ProjectionResult {
        camera_ids: calib.cameras.keys().cloned().collect(),
        image_size,
        pixel_uv,
        camera_index,
        depth,
    })
}

/// One superpoint: the points of one camera that fall on one mask label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointGroup {
    pub camera: usize,
    pub label: u16,
    /// Ascending point indices.
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointGroupSet {
    /// Ordered by camera, then label.
    pub groups: Vec<PointGroup>,
}

impl PointGroupSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn labels(&self) -> Vec<u16> {
        self.groups.iter().map(|g| g.label).collect()
    }

    pub fn members(&self) -> Vec<&[usize]> {
        self.groups.iter().map(|g| g.members.as_slice()).collect()
    }
}

/// Groups valid points by the mask label under their rounded pixel.
/// `masks[c]` is the mask of camera `c` in `proj.camera_ids` order.
pub fn points_to_groups(proj: &ProjectionResult, masks: &[&SemanticMaskSet]) -> Result<PointGroupSet> {
    if masks.len() != proj.camera_ids.len() {
        return Err(Error::Contract(format!(
            "{} masks supplied for {} cameras",
            masks.len(),
            proj.camera_ids.len()
        )));
    }
    let (h, w) = proj.image_size;
    for (c, m) in masks.iter().enumerate() {
        if (m.h, m.w) != (h, w) {
            return Err(Error::Contract(format!(
                "mask for camera {} is {}x{} but projection used {h}x{w}",
                proj.camera_ids[c], m.h, m.w
            )));
        }
    }
    let mut buckets: BTreeMap<(usize, u16), Vec<usize>> = BTreeMap::new();
    for i in 0..proj.camera_index.len() {
        if let (Some(cam), Some((row, col))) = (proj.camera_index[i], proj.pixel(i)) {
            let label = masks[cam].get(row, col);
            buckets.entry((cam, label)).or_default().push(i);
        }
    }
    Ok(PointGroupSet {
        groups: buckets
            .into_iter()
            .map(|((camera, label), members)| PointGroup { camera, label, members })
            .collect(),
    })
}

/// Pixel index groups of a mask, one per distinct label in ascending label
/// order. Pixel index is `row * w + col`.
pub fn mask_groups(mask: &SemanticMaskSet) -> (Vec<u16>, Vec<Vec<usize>>) {
    let mut buckets: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in mask.labels.iter().enumerate() {
        buckets.entry(l).or_default().push(i);
    }
    buckets.into_iter().unzip()
}

/// Label-tagged unit-norm pooled features (one row per group).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedEmbeddings {
    pub features: Array2<f64>,
    pub labels: Vec<u16>,
}

impl GroupedEmbeddings {
    pub fn new(features: Array2<f64>, labels: Vec<u16>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(GroupedEmbeddings { features, labels })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Pooled embeddings plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct PooledGroups {
    pub embeddings: GroupedEmbeddings,
    /// Pre-normalization group means.
    pub norms: Array1<f64>,
}

/// Averages member rows of each group, then l2-normalizes each mean.
/// Members are summed in ascending index order regardless of the order given.
pub fn pool_groups(features: ArrayView2<f64>, groups: &[&[usize]], labels: &[u16]) -> Result<PooledGroups> {
    if groups.len() != labels.len() {
        return Err(Error::Contract("one label per group required".into()));
    }
    let (n, d) = features.dim();
    let mut out = Array2::zeros((groups.len(), d));
    let mut norms = Array1::zeros(groups.len());
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Contract(format!("group {g} is empty")));
        }
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        let mut row = out.row_mut(g);
        for &i in &sorted {
            if i >= n {
                return Err(Error::Contract(format!("member index {i} out of range for {n} rows")));
            }
            row += &features.row(i);
        }
        row /= sorted.len() as f64;
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateGroup {
                index: g,
                label: labels[g],
            });
        }
        row /= norm;
        norms[g] = norm;
    }
    Ok(PooledGroups {
        embeddings: GroupedEmbeddings {
            features: out,
            labels: labels.to_vec(),
        },
        norms,
    })
}

/// Gradient of a loss w.r.t. the pooled input rows, given its gradient w.r.t.
/// the pooled embeddings. Rows belonging to no group receive zero.
pub fn pool_groups_backward(
    pooled: &PooledGroups,
    groups: &[&[usize]],
    grad_pooled: ArrayView2<f64>,
    n_rows: usize,
) -> Array2<f64> {
    let d = grad_pooled.ncols();
    let mut grad = Array2::zeros((n_rows, d));
    let mut grad_mean = Array1::zeros(d);
    for (g, members) in groups.iter().enumerate() {
        normalize_backward_row(
            pooled.embeddings.features.row(g),
            pooled.norms[g],
            grad_pooled.row(g),
            grad_mean.view_mut(),
        );
        let scale = 1.0 / members.len() as f64;
        for &i in members.iter() {
            grad.row_mut(i).scaled_add(scale, &grad_mean);
        }
    }
    grad
}

/// Per-label intersection and union pixel counts between two masks, over the
/// labels present in either mask, ascending by label.
pub fn miou_breakdown(a: &SemanticMaskSet, b: &SemanticMaskSet) -> Result<Vec<(u16, u64, u64)>> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Contract(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let mut counts: BTreeMap<u16, (u64, u64, u64)> = BTreeMap::new();
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        if la == lb {
            counts.entry(la).or_default().0 += 1;
        } else {
            counts.entry(la).or_default().1 += 1;
            counts.entry(lb).or_default().2 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(label, (both, only_a, only_b))| (label, both, both + only_a + only_b))
        .collect())
}

/// Mean IoU over the union of labels present in either mask.
pub fn mask_miou(a: &SemanticMaskSet, b: &SemanticMaskSet) -> Result<f64> {
    let per_label = miou_breakdown(a, b)?;
    let sum: f64 = per_label
        .iter()
        .map(|&(_, inter, union)| inter as f64 / union as f64)
        .sum();
    Ok(sum / per_label.len() as f64)
}

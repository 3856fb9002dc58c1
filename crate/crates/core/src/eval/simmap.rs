use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};

use super::Embedder;
use crate::error::{Error, Result};
use crate::pretrain::{Checkpoint, World};
use crate::vse::pair_lidar_to_images;

/// Cosine similarity of one query point's embedding to every point of its
/// frame and to every pixel of the paired images.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub frame_id: String,
    pub query: usize,
    pub points: Array1<f64>,
    /// `h x w` grid per camera.
    pub pixels: BTreeMap<String, Array2<f64>>,
}

impl SimilarityMap {
    /// Rows `modality,camera,row,col,similarity`. Point rows carry the point
    /// index in `row` and leave `camera` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,camera,row,col,similarity\n");
        for (i, v) in self.points.iter().enumerate() {
            writeln!(out, "point,,{i},0,{v}").unwrap();
        }
        for (cam, grid) in &self.pixels {
            for ((r, c), v) in grid.indexed_iter() {
                writeln!(out, "pixel,{cam},{r},{c},{v}").unwrap();
            }
        }
        out
    }

    /// Binary PPM with the camera grids side by side; blue is -1, red is +1.
    pub fn to_ppm(&self) -> Vec<u8> {
        let h = self.pixels.values().map(|g| g.nrows()).max().unwrap_or(0);
        let w: usize = self.pixels.values().map(|g| g.ncols()).sum();
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for r in 0..h {
            for grid in self.pixels.values() {
                for c in 0..grid.ncols() {
                    let v = if r < grid.nrows() { grid[[r, c]] } else { 0.0 };
                    let t = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
                    out.extend([t, 0, 255 - t]);
                }
            }
        }
        out
    }
}

pub fn similarity_map(checkpoint: &Checkpoint, world: &World, frame_id: &str, query: usize) -> Result<SimilarityMap> {
    let embedder = Embedder::new(checkpoint, world)?;
    let (scene, frame) = world
        .find_frame(frame_id)
        .filter(|(s, f)| s.index.lidar_frames.iter().any(|l| l.frame_id == f.frame_id))
        .ok_or_else(|| Error::Validation(format!("no LiDAR frame {frame_id} in world")))?;
    let pc = scene.point_cloud(frame)?;
    if query >= pc.len() {
        return Err(Error::Validation(format!(
            "query {query} out of range for {} points",
            pc.len()
        )));
    }
    let emb = embedder.point_embeddings(&pc);
    let q = emb.row(query).to_owned();
    let points = emb.dot(&q);

    let pair = pair_lidar_to_images(frame, &scene.index.camera_streams)?;
    let (h, w) = world.image_size();
    let mut pixels = BTreeMap::new();
    for (c, cam) in scene.index.camera_ids().enumerate() {
        let image = &pair.images[cam];
        let mask = scene.mask(image)?;
        let feats = embedder.encoder.encode(&mask, c, &image.frame_id);
        let sims = embedder.pixel_embeddings(&feats).dot(&q);
        pixels.insert(cam.to_string(), sims.into_shape_with_order((h, w)).expect("h*w pixels"));
    }
    Ok(SimilarityMap {
        frame_id: frame_id.to_string(),
        query,
        points,
        pixels,
    })
}

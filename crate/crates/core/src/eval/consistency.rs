use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Embedder;
use crate::correspondence::pool_groups;
use crate::error::{Error, Result};
use crate::pretrain::train::prepare_sample;
use crate::pretrain::{Checkpoint, World};
use crate::vse::SweepPair;

/// Mean cosine similarity of grouped point embeddings taken from different
/// frames, split by whether the two groups share a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub intra: f64,
    pub inter: f64,
    pub gap: f64,
    pub intra_pairs: u64,
    pub inter_pairs: u64,
    pub classes: usize,
    pub frames: usize,
}

/// `embeddings` rows are unit-norm; `frames[i]` identifies the frame of row `i`.
pub fn consistency_from_groups(
    embeddings: ArrayView2<f64>,
    labels: &[u16],
    frames: &[usize],
) -> Result<ConsistencyReport> {
    let n = embeddings.nrows();
    if labels.len() != n || frames.len() != n {
        return Err(Error::Contract(
            "one label and one frame per embedding row required".into(),
        ));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Validation(format!(
            "consistency needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let mut distinct_frames = frames.to_vec();
    distinct_frames.sort_unstable();
    distinct_frames.dedup();
    if distinct_frames.len() < 2 {
        return Err(Error::Validation(
            "consistency needs groups from at least 2 frames".into(),
        ));
    }
    let sim = embeddings.dot(&embeddings.t());
    let (mut intra, mut inter) = ((0.0, 0u64), (0.0, 0u64));
    for i in 0..n {
        for j in i + 1..n {
            if frames[i] == frames[j] {
                continue;
            }
            let acc = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            acc.0 += sim[[i, j]];
            acc.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::Validation(
            "no cross-frame pairs for one of the two similarity means".into(),
        ));
    }
    let (mi, me) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
    Ok(ConsistencyReport {
        intra: mi,
        inter: me,
        gap: mi - me,
        intra_pairs: intra.1,
        inter_pairs: inter.1,
        classes: classes.len(),
        frames: distinct_frames.len(),
    })
}

/// Pools point head outputs into (camera, label) groups for every keyframe of
/// the world and compares them across frames.
pub fn consistency_report(checkpoint: &Checkpoint, world: &World) -> Result<ConsistencyReport> {
    let embedder = Embedder::new(checkpoint, world)?;
    let d = checkpoint.meta.model.embed_dim;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut frames = Vec::new();
    let mut frame_no = 0;
    for (s, scene) in world.scenes.iter().enumerate() {
        let n_key = scene.index.lidar_keyframes().count();
        for k in 0..n_key {
            let pair = SweepPair::keyframe(&scene.index, k)?;
            let sample = prepare_sample(world, s, &pair, &embedder.encoder)?;
            if sample.group_count() == 0 {
                continue;
            }
            let emb = embedder.point_embeddings(&crate::scene::PointCloud::new(sample.points.clone())?);
            let groups: Vec<&[usize]> = sample.point_groups.iter().map(Vec::as_slice).collect();
            let pooled = pool_groups(emb.view(), &groups, &sample.labels)?;
            rows.extend(pooled.embeddings.features.iter());
            labels.extend_from_slice(&sample.labels);
            frames.extend(std::iter::repeat_n(frame_no, sample.group_count()));
            frame_no += 1;
        }
    }
    let emb = Array2::from_shape_vec((labels.len(), d), rows).expect("rows of width d");
    consistency_from_groups(emb.view(), &labels, &frames)
}

//! Evaluation of pretrained checkpoints: linear probing, similarity maps
//! and cross-frame semantic consistency.

mod consistency;
mod probe;
mod simmap;

pub use consistency::{consistency_from_groups, consistency_report, ConsistencyReport};
pub use probe::{fit_linear_probe, linear_probe, probe_split, ProbeConfig, ProbeFeatures, ProbeResult};
pub use simmap::{similarity_map, SimilarityMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretrain::model::{encode_points, project};
use crate::pretrain::{Checkpoint, FrozenImageEncoder, World};
use crate::scene::PointCloud;

/// Frozen view of a checkpoint bound to a world.
pub struct Embedder<'a> {
    pub checkpoint: &'a Checkpoint,
    pub encoder: FrozenImageEncoder,
}

impl<'a> Embedder<'a> {
    /// Fails when the checkpoint was trained against different point channels
    /// or a different frozen image encoder.
    pub fn new(checkpoint: &'a Checkpoint, world: &World) -> Result<Self> {
        let encoder = FrozenImageEncoder::new(world.config().image_encoder.clone(), world.config().n_cam);
        let m = &checkpoint.meta.model;
        if m.input_channels != world.manifest.point_channels {
            return Err(Error::Validation(format!(
                "checkpoint expects {} point channels, world has {}",
                m.input_channels, world.manifest.point_channels
            )));
        }
        if m.image_features != encoder.channels() || checkpoint.meta.image_encoder != encoder.fingerprint() {
            return Err(Error::Validation(
                "checkpoint was trained against a different frozen image encoder".into(),
            ));
        }
        Ok(Embedder { checkpoint, encoder })
    }

    pub fn point_features(&self, pc: &PointCloud) -> Array2<f64> {
        encode_points(&self.checkpoint.model, &self.checkpoint.meta.model, pc.data.view()).features
    }

    /// Unit-norm point head outputs.
    pub fn point_embeddings(&self, pc: &PointCloud) -> Array2<f64> {
        let model = &self.checkpoint.model;
        let f = self.point_features(pc);
        project(f.view(), &model.point_w, &model.point_b).embeddings
    }

    /// Unit-norm image head outputs for a grid of frozen image features.
    pub fn pixel_embeddings(&self, image_features: &Array2<f64>) -> Array2<f64> {
        let model = &self.checkpoint.model;
        project(image_features.view(), &model.image_w, &model.image_b).embeddings
    }
}

/// Side-by-side comparison of two checkpoints on one world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub config_hash: String,
    pub method: String,
    pub use_vse: bool,
    pub probe: ProbeResult,
    pub consistency: ConsistencyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: CheckpointSummary,
    pub b: CheckpointSummary,
    /// `a - b` overall probe accuracy.
    pub accuracy_delta: f64,
    /// `a - b` consistency gap.
    pub gap_delta: f64,
}

pub fn summarize(checkpoint: &Checkpoint, world: &World, probe: &ProbeConfig) -> Result<CheckpointSummary> {
    Ok(CheckpointSummary {
        config_hash: checkpoint.config_hash(),
        method: checkpoint.meta.method.to_string(),
        use_vse: checkpoint.meta.use_vse,
        probe: linear_probe(checkpoint, world, probe)?,
        consistency: consistency_report(checkpoint, world)?,
    })
}

pub fn compare(a: &Checkpoint, b: &Checkpoint, world: &World, probe: &ProbeConfig) -> Result<ComparisonReport> {
    let a = summarize(a, world, probe)?;
    let b = summarize(b, world, probe)?;
    Ok(ComparisonReport {
        accuracy_delta: a.probe.overall - b.probe.overall,
        gap_delta: a.consistency.gap - b.consistency.gap,
        a,
        b,
    })
}

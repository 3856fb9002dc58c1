//! The pretraining loop.
//!
//! Each training frame contributes one point group and one pixel group per
//! (camera, mask label) pair that received at least one point. Pools are
//! batch-wide: every group of every frame in a batch is a candidate
//! negative (or, for the conflict-aware objective, positive) for every
//! anchor.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::image_encoder::FrozenImageEncoder;
use super::model::{encode_points, encode_points_backward, project, project_backward, Model, ModelConfig};
use super::optim::{cosine_lr, Sgd};
use super::world::World;
use crate::correspondence::{points_to_groups, pool_groups, pool_groups_backward, project_points, GroupedEmbeddings};
use crate::error::{Error, Result};
use crate::losses::{Aggregation, Contrast, LossWeights, DEFAULT_TEMPERATURE};
use crate::seed::derive_seed;
use crate::vse::{run_vse, DirMaskStore, SelectionReport, SweepPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Index-aligned InfoNCE; same-class groups from other frames are negatives.
    Nce,
    /// Cross-modal plus intra-modal conflict-aware losses.
    ConflictAware,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nce" => Ok(Method::Nce),
            "conflict" | "conflict_aware" => Ok(Method::ConflictAware),
            other => Err(Error::Validation(format!(
                "unknown method {other:?} (expected nce or conflict)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Nce => "nce",
            Method::ConflictAware => "conflict_aware",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frames per batch.
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub weights: LossWeights,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub hidden: usize,
    pub point_features: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr0: 1.6,
            momentum: 0.9,
            weight_decay: 1e-4,
            tau: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            aggregation: Aggregation::Mean,
            seed: 0,
            hidden: 32,
            point_features: 32,
            embed_dim: 16,
        }
    }
}

impl TrainConfig {
    /// Settings used on the synthetic reference world. The default lr0 of
    /// 1.6 assumes much larger batches.
    pub fn reference() -> Self {
        TrainConfig {
            lr0: 0.2,
            epochs: 200,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.tau].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation(format!(
                "epochs, batch size, lr0 and tau must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Validation(
                "momentum must lie in [0, 1) and weight decay be >= 0".into(),
            ));
        }
        if self.hidden == 0 || self.point_features == 0 || self.embed_dim == 0 {
            return Err(Error::Validation("model widths must be positive".into()));
        }
        self.weights.validate().map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn contrast(&self) -> Contrast {
        Contrast {
            tau: self.tau,
            aggregation: self.aggregation,
        }
    }

    pub fn model_config(&self, point_channels: usize, image_channels: usize) -> ModelConfig {
        let mut input_scale = vec![1.0; point_channels];
        for s in input_scale.iter_mut().take(3) {
            *s = 1.0 / 20.0;
        }
        ModelConfig {
            input_channels: point_channels,
            hidden: self.hidden,
            point_features: self.point_features,
            image_features: image_channels,
            embed_dim: self.embed_dim,
            input_scale,
        }
    }
}

/// One training frame reduced to what the objective needs.
///
/// `points` holds only points that fall into some group; `pixels` holds the
/// frozen image features of every pixel belonging to some group. Group `g`
/// of both modalities shares `labels[g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub frame_id: String,
    pub points: Array2<f64>,
    pub point_groups: Vec<Vec<usize>>,
    pub pixels: Array2<f64>,
    pub pixel_groups: Vec<Vec<usize>>,
    pub labels: Vec<u16>,
}

impl FrameSample {
    pub fn group_count(&self) -> usize {
        self.labels.len()
    }
}

/// Builds the sample for one LiDAR frame and its paired images.
pub fn prepare_sample(
    world: &World,
    scene: usize,
    pair: &SweepPair,
    encoder: &FrozenImageEncoder,
) -> Result<FrameSample> {
    let ws = &world.scenes[scene];
    let pc = ws.point_cloud(&pair.lidar)?;
    let proj = project_points(&pc, &ws.calibration, world.image_size())?;
    let masks = proj
        .camera_ids
        .iter()
        .map(|cam| {
            let frame = pair
                .images
                .get(cam)
                .ok_or_else(|| Error::Contract(format!("pair for {} lacks camera {cam}", pair.lidar.frame_id)))?;
            Ok((frame.frame_id.clone(), ws.mask(frame)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mask_refs: Vec<_> = masks.iter().map(|(_, m)| m).collect();
    let groups = points_to_groups(&proj, &mask_refs)?;

    let mut kept = Vec::new();
    let mut remap = BTreeMap::new();
    for g in &groups.groups {
        for &i in &g.members {
            remap.entry(i).or_insert_with(|| {
                kept.push(i);
                kept.len() - 1
            });
        }
    }
    let points = pc.data.select(Axis(0), &kept);
    let point_groups: Vec<Vec<usize>> = groups
        .groups
        .iter()
        .map(|g| g.members.iter().map(|i| remap[i]).collect())
        .collect();

    let c = encoder.channels();
    let mut pixel_rows: Vec<f64> = Vec::new();
    let mut pixel_groups = Vec::with_capacity(groups.len());
    let mut encoded: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    let mut next = 0;
    for g in &groups.groups {
        let (frame_id, mask) = &masks[g.camera];
        let feats = encoded
            .entry(g.camera)
            .or_insert_with(|| encoder.encode(mask, g.camera, frame_id));
        let mut members = Vec::new();
        for (p, &l) in mask.labels.iter().enumerate() {
            if l == g.label {
                pixel_rows.extend(feats.row(p).iter());
                members.push(next);
                next += 1;
            }
        }
        pixel_groups.push(members);
    }
    let pixels = Array2::from_shape_vec((next, c), pixel_rows).expect("rows of width c");
    Ok(FrameSample {
        frame_id: pair.lidar.frame_id.clone(),
        points,
        point_groups,
        pixels,
        pixel_groups,
        labels: groups.labels(),
    })
}

/// Loss and parameter gradients of one batch.
pub struct BatchResult {
    pub loss: f64,
    pub grads: Model,
}

fn as_slices(groups: &[Vec<usize>]) -> Vec<&[usize]> {
    groups.iter().map(Vec::as_slice).collect()
}

/// Evaluates the selected objective over the batch-wide group pools and
/// backpropagates into every trainable parameter.
pub fn batch_objective(
    model: &Model,
    mcfg: &ModelConfig,
    samples: &[&FrameSample],
    method: Method,
    contrast: &Contrast,
    weights: LossWeights,
) -> Result<BatchResult> {
    let total: usize = samples.iter().map(|s| s.group_count()).sum();
    if total == 0 {
        return Err(Error::Contract("batch contains no groups".into()));
    }
    let d = mcfg.embed_dim;
    let mut k = Array2::zeros((total, d));
    let mut q = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut caches = Vec::with_capacity(samples.len());
    let mut offset = 0;
    for s in samples {
        let n = s.group_count();
        let enc = encode_points(model, mcfg, s.points.view());
        let head_p = project(enc.features.view(), &model.point_w, &model.point_b);
        let pooled_k = pool_groups(head_p.embeddings.view(), &as_slices(&s.point_groups), &s.labels)?;
        let head_i = project(s.pixels.view(), &model.image_w, &model.image_b);
        let pooled_q = pool_groups(head_i.embeddings.view(), &as_slices(&s.pixel_groups), &s.labels)?;
        k.slice_mut(s![offset..offset + n, ..])
            .assign(&pooled_k.embeddings.features);
        q.slice_mut(s![offset..offset + n, ..])
            .assign(&pooled_q.embeddings.features);
        labels.extend_from_slice(&s.labels);
        caches.push((enc, head_p, pooled_k, head_i, pooled_q));
        offset += n;
    }
    let k = GroupedEmbeddings::new(k, labels.clone())?;
    let q = GroupedEmbeddings::new(q, labels)?;
    let report = match method {
        Method::Nce => contrast.nce(&q, &k)?,
        Method::ConflictAware => contrast.combined(&q, &k, weights)?,
    };

    let mut grads = Model::zeros_like(model);
    let mut offset = 0;
    for (s, (enc, head_p, pooled_k, head_i, pooled_q)) in samples.iter().zip(&caches) {
        let n = s.group_count();
        let gk = report.grad_k.slice(s![offset..offset + n, ..]);
        let g_emb = pool_groups_backward(pooled_k, &as_slices(&s.point_groups), gk, s.points.nrows());
        let (_, g_feat) = project_backward(
            enc.features.view(),
            &model.point_w,
            head_p,
            g_emb.view(),
            &mut grads.point_w,
            &mut grads.point_b,
        );
        encode_points_backward(model, enc, g_feat.view(), &mut grads);
        if report.grad_q.nrows() == total {
            let gq = report.grad_q.slice(s![offset..offset + n, ..]);
            let g_pix = pool_groups_backward(pooled_q, &as_slices(&s.pixel_groups), gq, s.pixels.nrows());
            project_backward(
                s.pixels.view(),
                &model.image_w,
                head_i,
                g_pix.view(),
                &mut grads.image_w,
                &mut grads.image_b,
            );
        }
        offset += n;
    }
    Ok(BatchResult {
        loss: report.value,
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.loss, p.lr));
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Ids of the LiDAR frames trained on, keyframes first.
    pub frames: Vec<String>,
    pub selections: Vec<SelectionReport>,
}

/// Keyframe pairs of every scene, followed by the VSE selections when enabled.
pub fn training_pairs(world: &World, use_vse: bool) -> Result<(Vec<(usize, SweepPair)>, Vec<SelectionReport>)> {
    let mut pairs = Vec::new();
    for (s, scene) in world.scenes.iter().enumerate() {
        let n_key = scene.index.lidar_keyframes().count();
        for k in 0..n_key {
            pairs.push((s, SweepPair::keyframe(&scene.index, k)?));
        }
    }
    let mut reports = Vec::new();
    if use_vse {
        for (s, scene) in world.scenes.iter().enumerate() {
            let report = run_vse(&scene.index, &DirMaskStore::new(scene.mask_dir()))?;
            pairs.extend(report.selections().cloned().map(|p| (s, p)));
            reports.push(report);
        }
    }
    Ok((pairs, reports))
}

pub fn train(world: &World, cfg: &TrainConfig, method: Method, use_vse: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let encoder = FrozenImageEncoder::new(world.config().image_encoder.clone(), world.config().n_cam);
    let (pairs, selections) = training_pairs(world, use_vse)?;
    let samples = pairs
        .iter()
        .map(|(s, p)| prepare_sample(world, *s, p, &encoder))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<FrameSample> = samples.into_iter().filter(|s| s.group_count() > 0).collect();
    if samples.is_empty() {
        return Err(Error::Validation(
            "no training frame has any point-pixel correspondence".into(),
        ));
    }
    let mcfg = cfg.model_config(world.manifest.point_channels, encoder.channels());
    let mut model = Model::init(&mcfg, derive_seed(cfg.seed, "init"));
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let contrast = cfg.contrast();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first_lr = cosine_lr(step, total_steps, cfg.lr0)?;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrameSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let lr = cosine_lr(step, total_steps, cfg.lr0)?;
            let result = match batch_objective(&model, &mcfg, &batch, method, &contrast, cfg.weights) {
                // After the first update a degenerate pool means the forward
                // pass overflowed.
                Err(Error::DegenerateGroup { .. }) if step > 0 => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
            if !result.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: result.loss,
                });
            }
            opt.step(model.params_mut(), result.grads.params(), lr)?;
            if !model.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: result.loss,
                });
            }
            loss_sum += result.loss;
            step += 1;
        }
        curve.push(CurvePoint {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lr: first_lr,
        });
    }

    let meta = CheckpointMeta {
        method,
        use_vse,
        train: cfg.clone(),
        model: mcfg,
        image_encoder: encoder.fingerprint(),
        world_seed: world.config().seed,
        frames: samples.len(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { meta, model },
        curve,
        frames: samples.iter().map(|s| s.frame_id.clone()).collect(),
        selections,
    })
}

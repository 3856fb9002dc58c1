//! Trainable parameters: a two-layer tanh point encoder and the two
//! projection heads (linear map followed by l2 normalization).
//!
//! Backpropagation is written out by hand; every `*_backward` consumes the
//! cache its forward pass produced.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{normalize_rows, normalize_rows_backward};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub hidden: usize,
    /// Point feature width C_p.
    pub point_features: usize,
    /// Image feature width C_i.
    pub image_features: usize,
    /// Shared embedding width D.
    pub embed_dim: usize,
    /// Fixed per-channel input scaling applied before the first layer.
    pub input_scale: Vec<f64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.input_channels,
            self.hidden,
            self.point_features,
            self.image_features,
            self.embed_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Validation(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.input_scale.len() != self.input_channels {
            return Err(Error::Validation("input_scale needs one entry per channel".into()));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "point_head.w",
    "point_head.b",
    "image_head.w",
    "image_head.b",
];

/// All trainable parameters. Biases are stored as `1 x n` matrices. The same
/// type doubles as a gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array2<f64>,
    pub enc_w2: Array2<f64>,
    pub enc_b2: Array2<f64>,
    pub point_w: Array2<f64>,
    pub point_b: Array2<f64>,
    pub image_w: Array2<f64>,
    pub image_b: Array2<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, h, cp, ci, d) = (
            cfg.input_channels,
            cfg.hidden,
            cfg.point_features,
            cfg.image_features,
            cfg.embed_dim,
        );
        Model {
            enc_w1: uniform(&mut rng, h, l, l, h),
            enc_b1: Array2::zeros((1, h)),
            enc_w2: uniform(&mut rng, cp, h, h, cp),
            enc_b2: Array2::zeros((1, cp)),
            point_w: uniform(&mut rng, d, cp, cp, d),
            point_b: Array2::zeros((1, d)),
            image_w: uniform(&mut rng, d, ci, ci, d),
            image_b: Array2::zeros((1, d)),
        }
    }

    pub fn zeros_like(other: &Model) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Model {
            enc_w1: z(&other.enc_w1),
            enc_b1: z(&other.enc_b1),
            enc_w2: z(&other.enc_w2),
            enc_b2: z(&other.enc_b2),
            point_w: z(&other.point_w),
            point_b: z(&other.point_b),
            image_w: z(&other.image_w),
            image_b: z(&other.image_b),
        }
    }

    pub fn params(&self) -> [&Array2<f64>; 8] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w2,
            &self.enc_b2,
            &self.point_w,
            &self.point_b,
            &self.image_w,
            &self.image_b,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 8] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.point_w,
            &mut self.point_b,
            &mut self.image_w,
            &mut self.image_b,
        ]
    }

    /// Rebuilds a model from named blocks, checking shapes against `cfg`.
    pub fn from_blocks(cfg: &ModelConfig, blocks: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut model = Model::init(cfg, 0);
        if blocks.len() != PARAM_NAMES.len() {
            return Err(Error::Format(format!(
                "expected {} parameter blocks, got {}",
                PARAM_NAMES.len(),
                blocks.len()
            )));
        }
        for ((name, dst), (got_name, src)) in PARAM_NAMES.iter().zip(model.params_mut()).zip(blocks) {
            if name != got_name || dst.dim() != src.dim() {
                return Err(Error::Format(format!(
                    "parameter block {got_name} {:?} does not match {name} {:?}",
                    src.dim(),
                    dst.dim()
                )));
            }
            dst.assign(src);
        }
        Ok(model)
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

pub struct EncoderCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    pub features: Array2<f64>,
}

fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

/// Per-point MLP `R^{n x L} -> R^{n x C_p}`.
pub fn encode_points(model: &Model, cfg: &ModelConfig, points: ArrayView2<f64>) -> EncoderCache {
    let scale = Array1::from(cfg.input_scale.clone());
    let input = &points * &scale;
    let hidden = affine(input.view(), &model.enc_w1, &model.enc_b1).mapv_into(f64::tanh);
    let features = affine(hidden.view(), &model.enc_w2, &model.enc_b2).mapv_into(f64::tanh);
    EncoderCache {
        input,
        hidden,
        features,
    }
}

pub fn encode_points_backward(model: &Model, cache: &EncoderCache, grad_features: ArrayView2<f64>, grads: &mut Model) {
    let d_a2 = &grad_features * &cache.features.mapv(|f| 1.0 - f * f);
    grads.enc_w2 += &d_a2.t().dot(&cache.hidden);
    grads.enc_b2 += &d_a2.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_h1 = d_a2.dot(&model.enc_w2);
    let d_a1 = d_h1 * cache.hidden.mapv(|h| 1.0 - h * h);
    grads.enc_w1 += &d_a1.t().dot(&cache.input);
    grads.enc_b1 += &d_a1.sum_axis(Axis(0)).insert_axis(Axis(0));
}

/// Output of a projection head: unit rows plus the pre-normalization norms.
pub struct HeadCache {
    pub embeddings: Array2<f64>,
    norms: Array1<f64>,
}

pub fn project(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> HeadCache {
    let pre = affine(x, w, b);
    let (embeddings, norms) = normalize_rows(pre.view());
    HeadCache { embeddings, norms }
}

/// Returns `(dL/dpre, dL/dx)` and accumulates weight gradients.
pub fn project_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    cache: &HeadCache,
    grad_embeddings: ArrayView2<f64>,
    grad_w: &mut Array2<f64>,
    grad_b: &mut Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d_pre = normalize_rows_backward(cache.embeddings.view(), cache.norms.view(), grad_embeddings);
    *grad_w += &d_pre.t().dot(&x);
    *grad_b += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_x = d_pre.dot(w);
    (d_pre, d_x)
}

//! Stand-in for a frozen image backbone: per-pixel features built from the
//! mask label, the pixel's viewing direction and seeded noise.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scene::SemanticMaskSet;
use crate::seed::{derive_seed, short_hash};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub channels: usize,
    pub seed: u64,
    /// Weight of the semantic (label) component.
    pub class_scale: f64,
    /// Weight of the view-position component.
    pub position_scale: f64,
    pub noise_scale: f64,
    /// Bandwidth of the random Fourier position features.
    pub position_frequency: f64,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            channels: 24,
            seed: 7,
            class_scale: 1.0,
            position_scale: 1.0,
            noise_scale: 0.3,
            position_frequency: 2.0,
        }
    }
}

/// Frozen feature extractor. Holds no trainable state; everything derives
/// from its config.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenImageEncoder {
    cfg: ImageEncoderConfig,
    n_cam: usize,
    frequencies: Array2<f64>,
    phases: Array1<f64>,
}

impl FrozenImageEncoder {
    pub fn new(cfg: ImageEncoderConfig, n_cam: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "position"));
        let c = cfg.channels;
        let frequencies = Array2::from_shape_fn((c, 4), |_| {
            cfg.position_frequency * rng.sample::<f64, _>(StandardNormal)
        });
        let phases = Array1::from_shape_fn(c, |_| rng.random_range(0.0..2.0 * PI));
        FrozenImageEncoder {
            cfg,
            n_cam,
            frequencies,
            phases,
        }
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    fn label_embedding(&self, label: u16) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("label{label}")));
        let scale = 1.0 / (self.cfg.channels as f64).sqrt();
        Array1::from_shape_fn(self.cfg.channels, |_| scale * rng.sample::<f64, _>(StandardNormal))
    }

    /// Row-major `(h*w) x channels` feature grid for one image.
    pub fn encode(&self, mask: &SemanticMaskSet, camera: usize, frame_id: &str) -> Array2<f64> {
        let c = self.cfg.channels;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, frame_id));
        let yaw = 2.0 * PI * camera as f64 / self.n_cam.max(1) as f64;
        let labels = mask.label_set();
        let embeddings: Vec<Array1<f64>> = labels.iter().map(|&l| self.label_embedding(l)).collect();
        let pe_scale = (2.0 / c as f64).sqrt();
        let noise_scale = self.cfg.noise_scale / (c as f64).sqrt();
        let mut out = Array2::zeros((mask.h * mask.w, c));
        for row in 0..mask.h {
            for col in 0..mask.w {
                let pos = [
                    yaw.cos(),
                    yaw.sin(),
                    2.0 * (col as f64 + 0.5) / mask.w as f64 - 1.0,
                    2.0 * (row as f64 + 0.5) / mask.h as f64 - 1.0,
                ];
                let label = mask.get(row, col);
                let e = &embeddings[labels.binary_search(&label).unwrap()];
                let mut f = out.row_mut(row * mask.w + col);
                for j in 0..c {
                    let w = self.frequencies.row(j);
                    let arg = w[0] * pos[0] + w[1] * pos[1] + w[2] * pos[2] + w[3] * pos[3] + self.phases[j];
                    f[j] = self.cfg.class_scale * e[j]
                        + self.cfg.position_scale * pe_scale * arg.cos()
                        + noise_scale * noise_rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        out
    }

    /// Hash of every fixed parameter.
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.cfg).unwrap();
        bytes.extend((self.n_cam as u64).to_le_bytes());
        for v in self.frequencies.iter().chain(self.phases.iter()) {
            bytes.extend(v.to_le_bytes());
        }
        short_hash(&bytes)
    }
}

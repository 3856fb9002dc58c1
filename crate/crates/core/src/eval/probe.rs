use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Embedder;
use crate::error::{Error, Result};
use crate::pretrain::{Checkpoint, World};
use crate::seed::derive_seed;

/// Which frozen representation the classifier reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeatures {
    /// Point encoder output (the backbone).
    #[default]
    Encoder,
    /// Unit-norm point head output.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub features: ProbeFeatures,
    /// Keyframe `k` of each scene is held out when `k % test_stride == test_stride - 1`.
    pub test_stride: usize,
    /// Fraction of training points whose labels the probe may use. The
    /// default mirrors a 1% annotation budget.
    pub label_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            batch_size: 256,
            seed: 0,
            features: ProbeFeatures::Encoder,
            test_stride: 4,
            label_fraction: 0.01,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let fraction_ok = self.label_fraction > 0.0 && self.label_fraction <= 1.0;
        if self.epochs == 0
            || self.batch_size == 0
            || self.test_stride < 2
            || !(self.lr > 0.0 && self.lr.is_finite())
            || !fraction_ok
        {
            return Err(Error::Validation(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Recall per class; `None` for classes absent from the test split.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
    /// Mean of the defined per-class accuracies.
    pub mean_class: f64,
    /// `confusion[true][predicted]` on the test split.
    pub confusion: Vec<Vec<u64>>,
    pub test_points: usize,
    pub config_hash: String,
}

/// Trains a softmax classifier `W x + b` with minibatch SGD and scores it on
/// the test split. `config_hash` is left empty.
pub fn fit_linear_probe(
    train_x: ArrayView2<f64>,
    train_y: &[u16],
    test_x: ArrayView2<f64>,
    test_y: &[u16],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(Error::Contract("feature rows and labels disagree".into()));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::Validation(format!(
            "train features have {} dims, test features {}",
            train_x.ncols(),
            test_x.ncols()
        )));
    }
    if train_y.is_empty() || test_y.is_empty() {
        return Err(Error::Validation("probe needs non-empty train and test splits".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y as usize >= n_classes) {
        return Err(Error::Validation(format!("label {bad} outside {n_classes} classes")));
    }
    let d = train_x.ncols();
    let mut w = Array2::<f64>::zeros((d, n_classes));
    let mut b = Array1::<f64>::zeros(n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "probe"));
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_x.select(Axis(0), chunk);
            let mut p = x.dot(&w) + &b;
            for mut row in p.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            for (r, &i) in chunk.iter().enumerate() {
                p[[r, train_y[i] as usize]] -= 1.0;
            }
            p /= chunk.len() as f64;
            w.scaled_add(-cfg.lr, &x.t().dot(&p));
            b.scaled_add(-cfg.lr, &p.sum_axis(Axis(0)));
        }
    }

    let logits = test_x.dot(&w) + &b;
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (row, &y) in logits.rows().into_iter().zip(test_y) {
        let mut best = 0;
        for c in 1..n_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        confusion[y as usize][best] += 1;
    }
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then(|| row[c] as f64 / support as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(ProbeResult {
        mean_class: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
        overall: correct as f64 / test_y.len() as f64,
        confusion,
        test_points: test_y.len(),
        config_hash: String::new(),
    })
}

/// Frozen features and ground-truth labels of every LiDAR keyframe, split
/// into `(train_x, train_y, test_x, test_y)`.
pub fn probe_split(
    checkpoint: &Checkpoint,
    world: &World,
    cfg: &ProbeConfig,
) -> Result<(Array2<f64>, Vec<u16>, Array2<f64>, Vec<u16>)> {
    let embedder = Embedder::new(checkpoint, world)?;
    let width = match cfg.features {
        ProbeFeatures::Encoder => checkpoint.meta.model.point_features,
        ProbeFeatures::Head => checkpoint.meta.model.embed_dim,
    };
    let mut parts: [(Vec<f64>, Vec<u16>); 2] = Default::default();
    for scene in &world.scenes {
        for (k, frame) in scene.index.lidar_keyframes().enumerate() {
            let pc = scene.point_cloud(frame)?;
            let labels = scene.ground_truth(frame)?;
            if labels.len() != pc.len() {
                return Err(Error::Validation(format!(
                    "ground truth of {} has the wrong length",
                    frame.frame_id
                )));
            }
            let feats = match cfg.features {
                ProbeFeatures::Encoder => embedder.point_features(&pc),
                ProbeFeatures::Head => embedder.point_embeddings(&pc),
            };
            let split = usize::from(k % cfg.test_stride == cfg.test_stride - 1);
            parts[split].0.extend(feats.iter());
            parts[split].1.extend(labels);
        }
    }
    let [(train_x, train_y), (test_x, test_y)] = parts;
    let to_matrix = |v: Vec<f64>, n: usize| Array2::from_shape_vec((n, width), v).expect("rows of fixed width");
    let train_x = to_matrix(train_x, train_y.len());
    let (train_x, train_y) = if cfg.label_fraction < 1.0 {
        let keep = ((train_y.len() as f64 * cfg.label_fraction).ceil() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "labels"));
        let mut rows = rand::seq::index::sample(&mut rng, train_y.len(), keep).into_vec();
        rows.sort_unstable();
        let y = rows.iter().map(|&i| train_y[i]).collect();
        (train_x.select(Axis(0), &rows), y)
    } else {
        (train_x, train_y)
    };
    Ok((train_x, train_y, to_matrix(test_x, test_y.len()), test_y))
}

/// Linear probe on frozen per-point features of a checkpoint.
pub fn linear_probe(checkpoint: &Checkpoint, world: &World, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let (train_x, train_y, test_x, test_y) = probe_split(checkpoint, world, cfg)?;
    let mut result = fit_linear_probe(
        train_x.view(),
        &train_y,
        test_x.view(),
        &test_y,
        world.config().n_classes,
        cfg,
    )?;
    result.config_hash = checkpoint.config_hash();
    Ok(result)
}

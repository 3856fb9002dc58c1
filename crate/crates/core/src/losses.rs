//! Contrastive objectives over grouped embeddings, with analytic gradients.
//!
//! All three losses share one core, [`loss_from_similarity`]: each row of a
//! similarity matrix is an anchor, its softmax over the non-excluded columns
//! is scored against that anchor's positive set, and the per-anchor terms are
//! averaged (or summed). Gradients w.r.t. the embeddings follow from the
//! bilinear form `S = A B^T`.
//!
//! * [`nce_loss`]: each point group's only positive is its own pixel group;
//!   every other pixel group in the pool is a negative, including ones that
//!   share its label.
//! * [`cccl_loss`]: cross-modal, every pixel group with the anchor's label is
//!   a positive.
//! * [`iccl_loss`]: intra-modal over point groups; the anchor is removed from
//!   both its positives and the denominator.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::correspondence::GroupedEmbeddings;
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// How per-anchor terms are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over contributing anchors.
    #[default]
    Mean,
    /// Plain sum over anchors.
    Sum,
}

/// Scalar products between two embedding sets, with the temperature they are
/// scaled by.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub tau: f64,
}

impl SimilarityMatrix {
    /// `values[i][j] = <a_i, b_j>`.
    pub fn between(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if a.ncols() != b.ncols() {
            return Err(Error::Contract(format!(
                "embedding dimensions differ: {} vs {}",
                a.ncols(),
                b.ncols()
            )));
        }
        Ok(SimilarityMatrix {
            values: a.dot(&b.t()),
            tau,
        })
    }
}

/// Positive columns per anchor row, and optionally one column per row that is
/// removed from the softmax entirely.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositiveSet {
    pub positives: Vec<Vec<usize>>,
    pub excluded: Vec<Option<usize>>,
}

impl PositiveSet {
    /// Row `i`'s only positive is column `i`.
    pub fn diagonal(m: usize) -> Self {
        PositiveSet {
            positives: (0..m).map(|i| vec![i]).collect(),
            excluded: vec![None; m],
        }
    }

    /// Columns whose label equals the row's label.
    pub fn cross_modal(anchor_labels: &[u16], column_labels: &[u16]) -> Self {
        PositiveSet {
            positives: anchor_labels
                .iter()
                .map(|&l| {
                    column_labels
                        .iter()
                        .enumerate()
                        .filter(|&(_, &c)| c == l)
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect(),
            excluded: vec![None; anchor_labels.len()],
        }
    }

    /// Other members sharing the row's label; the row itself is excluded.
    pub fn intra_modal(labels: &[u16]) -> Self {
        PositiveSet {
            positives: labels
                .iter()
                .enumerate()
                .map(|(j, &l)| {
                    labels
                        .iter()
                        .enumerate()
                        .filter(|&(x, &c)| x != j && c == l)
                        .map(|(x, _)| x)
                        .collect()
                })
                .collect(),
            excluded: (0..labels.len()).map(Some).collect(),
        }
    }
}

/// Loss value and its gradient w.r.t. the similarity entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityLoss {
    pub value: f64,
    pub grad: Array2<f64>,
    pub contributing: usize,
}

/// Supervised softmax cross-entropy over rows of `sim`.
///
/// Row `r` with positives `P` contributes `lse_c(s_rc / tau) - mean_{p in P} s_rp / tau`,
/// where `c` ranges over columns other than the row's excluded one. Rows with
/// no positives are skipped.
pub fn loss_from_similarity(
    sim: &SimilarityMatrix,
    positives: &PositiveSet,
    aggregation: Aggregation,
) -> Result<SimilarityLoss> {
    check_tau(sim.tau)?;
    let (rows, cols) = sim.values.dim();
    if positives.positives.len() != rows || positives.excluded.len() != rows {
        return Err(Error::Contract(format!(
            "positive set covers {} rows, similarity has {rows}",
            positives.positives.len()
        )));
    }
    let inv_tau = 1.0 / sim.tau;
    let mut grad = Array2::zeros((rows, cols));
    let mut terms = Vec::with_capacity(rows);
    let mut anchors = Vec::with_capacity(rows);
    for r in 0..rows {
        let pos = &positives.positives[r];
        let excl = positives.excluded[r];
        if let Some(e) = excl {
            if e >= cols {
                return Err(Error::Contract(format!("excluded column {e} out of range")));
            }
        }
        for &p in pos {
            if p >= cols || Some(p) == excl {
                return Err(Error::Contract(format!(
                    "positive column {p} invalid for row {r} ({cols} columns)"
                )));
            }
        }
        if pos.is_empty() {
            continue;
        }
        let row = sim.values.row(r);
        let logits = || {
            row.iter()
                .enumerate()
                .filter(move |&(c, _)| Some(c) != excl)
                .map(move |(_, &s)| s * inv_tau)
        };
        let lse = log_sum_exp(logits());
        let pos_mean = pos.iter().map(|&p| row[p] * inv_tau).sum::<f64>() / pos.len() as f64;
        terms.push(lse - pos_mean);
        anchors.push(r);
        let mut g = grad.row_mut(r);
        for (c, &s) in row.iter().enumerate() {
            if Some(c) != excl {
                g[c] = (s * inv_tau - lse).exp() * inv_tau;
            }
        }
        let share = inv_tau / pos.len() as f64;
        for &p in pos {
            g[p] -= share;
        }
    }
    let contributing = terms.len();
    if contributing == 0 {
        return Ok(SimilarityLoss {
            value: 0.0,
            grad,
            contributing,
        });
    }
    let scale = match aggregation {
        Aggregation::Mean => 1.0 / contributing as f64,
        Aggregation::Sum => 1.0,
    };
    // Fixed-order reduction.
    let value = terms.iter().sum::<f64>() * scale;
    if scale != 1.0 {
        for &r in &anchors {
            grad.row_mut(r).mapv_inplace(|v| v * scale);
        }
    }
    Ok(SimilarityLoss {
        value,
        grad,
        contributing,
    })
}

/// Loss value plus gradients w.r.t. every input embedding row.
///
/// `grad_q` has zero rows for objectives that take no pixel groups.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_q: Array2<f64>,
    pub grad_k: Array2<f64>,
    pub contributing_anchors: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "temperature must be positive and finite, got {tau}"
        )))
    }
}

fn check_nonempty(set: &GroupedEmbeddings, name: &str) -> Result<()> {
    if set.count() == 0 {
        Err(Error::Contract(format!("{name} has no groups")))
    } else {
        Ok(())
    }
}

/// Loss settings shared by the three objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub tau: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl Default for Contrast {
    fn default() -> Self {
        Contrast {
            tau: DEFAULT_TEMPERATURE,
            aggregation: Aggregation::Mean,
        }
    }
}

impl Contrast {
    pub fn new(tau: f64) -> Self {
        Contrast {
            tau,
            ..Default::default()
        }
    }

    fn cross(&self, k: &GroupedEmbeddings, q: &GroupedEmbeddings, positives: &PositiveSet) -> Result<LossReport> {
        let sim = SimilarityMatrix::between(k.features.view(), q.features.view(), self.tau)?;
        let core = loss_from_similarity(&sim, positives, self.aggregation)?;
        Ok(LossReport {
            value: core.value,
            grad_k: core.grad.dot(&q.features),
            grad_q: core.grad.t().dot(&k.features),
            contributing_anchors: core.contributing,
        })
    }

    /// Index-aligned InfoNCE: point group `i` must pick pixel group `i` out of
    /// all pixel groups.
    pub fn nce(&self, q: &GroupedEmbeddings, k: &GroupedEmbeddings) -> Result<LossReport> {
        check_nonempty(q, "pixel groups")?;
        if q.count() != k.count() {
            return Err(Error::Contract(format!(
                "nce needs aligned sets, got {} pixel and {} point groups",
                q.count(),
                k.count()
            )));
        }
        self.cross(k, q, &PositiveSet::diagonal(q.count()))
    }

    /// Cross-modal conflict-aware loss anchored on point groups.
    pub fn cccl(&self, k: &GroupedEmbeddings, q: &GroupedEmbeddings) -> Result<LossReport> {
        check_nonempty(k, "point groups")?;
        check_nonempty(q, "pixel groups")?;
        self.cross(k, q, &PositiveSet::cross_modal(&k.labels, &q.labels))
    }

    /// Intra-modal conflict-aware loss over point groups.
    pub fn iccl(&self, k: &GroupedEmbeddings) -> Result<LossReport> {
        let sim = SimilarityMatrix::between(k.features.view(), k.features.view(), self.tau)?;
        let core = loss_from_similarity(&sim, &PositiveSet::intra_modal(&k.labels), self.aggregation)?;
        let sym = &core.grad + &core.grad.t();
        Ok(LossReport {
            value: core.value,
            grad_k: sym.dot(&k.features),
            grad_q: Array2::zeros((0, k.dim())),
            contributing_anchors: core.contributing,
        })
    }

    /// `w_cross * cccl + w_intra * iccl`. `contributing_anchors` is the sum of
    /// both objectives' counts.
    pub fn combined(&self, q: &GroupedEmbeddings, k: &GroupedEmbeddings, weights: LossWeights) -> Result<LossReport> {
        weights.validate()?;
        let mut grad_q = Array2::zeros(q.features.raw_dim());
        let mut grad_k = Array2::zeros(k.features.raw_dim());
        let mut value = 0.0;
        let mut contributing = 0;
        if weights.cross > 0.0 {
            let c = self.cccl(k, q)?;
            value += weights.cross * c.value;
            grad_q.scaled_add(weights.cross, &c.grad_q);
            grad_k.scaled_add(weights.cross, &c.grad_k);
            contributing += c.contributing_anchors;
        }
        if weights.intra > 0.0 {
            let i = self.iccl(k)?;
            value += weights.intra * i.value;
            grad_k.scaled_add(weights.intra, &i.grad_k);
            contributing += i.contributing_anchors;
        }
        Ok(LossReport {
            value,
            grad_q,
            grad_k,
            contributing_anchors: contributing,
        })
    }
}

/// Weights of the cross- and intra-modal terms in the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cross: f64,
    pub intra: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cross: 1.0, intra: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.cross) || !ok(self.intra) {
            return Err(Error::Contract(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        if self.cross == 0.0 && self.intra == 0.0 {
            return Err(Error::Contract("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

pub fn nce_loss(q: &GroupedEmbeddings, k: &GroupedEmbeddings, tau: f64) -> Result<LossReport> {
    Contrast::new(tau).nce(q, k)
}

pub fn cccl_loss(k: &GroupedEmbeddings, q: &GroupedEmbeddings, tau: f64) -> Result<LossReport> {
    Contrast::new(tau).cccl(k, q)
}

pub fn iccl_loss(k: &GroupedEmbeddings, tau: f64) -> Result<LossReport> {
    Contrast::new(tau).iccl(k)
}

pub fn combined_objective(
    q: &GroupedEmbeddings,
    k: &GroupedEmbeddings,
    weights: LossWeights,
    tau: f64,
) -> Result<LossReport> {
    Contrast::new(tau).combined(q, k, weights)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, m: usize, d: usize, classes: u16) -> (GroupedEmbeddings, GroupedEmbeddings) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = |rng: &mut ChaCha8Rng| {
            let mut x = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0));
            for mut row in x.rows_mut() {
                let n: f64 = row.dot(&row);
                row /= n.sqrt();
            }
            x
        };
        let labels: Vec<u16> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let q = GroupedEmbeddings::new(unit(&mut rng), labels.clone()).unwrap();
        let k = GroupedEmbeddings::new(unit(&mut rng), labels).unwrap();
        (q, k)
    }

    fn permuted(g: &GroupedEmbeddings, order: &[usize]) -> GroupedEmbeddings {
        GroupedEmbeddings::new(
            g.features.select(ndarray::Axis(0), order),
            order.iter().map(|&i| g.labels[i]).collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn conflict_losses_are_permutation_equivariant(seed in any::<u64>(), m in 2usize..10, tau in 0.05f64..1.0) {
            let (q, k) = instance(seed, m, 4, 3);
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let c = Contrast::new(tau);
            let base = c.combined(&q, &k, LossWeights::default()).unwrap();
            let perm = c.combined(&permuted(&q, &order), &permuted(&k, &order), LossWeights::default()).unwrap();
            prop_assert!((base.value - perm.value).abs() < 1e-12);
            for (new, &old) in order.iter().enumerate() {
                for j in 0..4 {
                    prop_assert!((perm.grad_k[[new, j]] - base.grad_k[[old, j]]).abs() < 1e-12);
                    prop_assert!((perm.grad_q[[new, j]] - base.grad_q[[old, j]]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn unique_labels_reduce_to_nce(seed in any::<u64>(), m in 1usize..12, tau in 0.05f64..1.0) {
            let (q, k) = instance(seed, m, 8, 1);
            let labels: Vec<u16> = (0..m as u16).collect();
            let q = GroupedEmbeddings::new(q.features, labels.clone()).unwrap();
            let k = GroupedEmbeddings::new(k.features, labels).unwrap();
            let a = cccl_loss(&k, &q, tau).unwrap();
            let b = nce_loss(&q, &k, tau).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12);
            prop_assert!(a.grad_k.iter().zip(&b.grad_k).all(|(x, y)| (x - y).abs() <= 1e-12));
        }

        #[test]
        fn losses_are_nonnegative_and_finite(seed in any::<u64>(), m in 1usize..12, tau in 0.05f64..1.0) {
            let (q, k) = instance(seed, m, 4, 3);
            for r in [nce_loss(&q, &k, tau).unwrap(), cccl_loss(&k, &q, tau).unwrap(), iccl_loss(&k, tau).unwrap()] {
                prop_assert!(r.value.is_finite() && r.value >= -1e-12);
                prop_assert!(r.grad_k.iter().chain(&r.grad_q).all(|v| v.is_finite()));
            }
        }
    }
}

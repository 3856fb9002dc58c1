//! Sweep selection: pair every LiDAR sweep with its nearest image per camera,
//! keep pairs whose mean timestamp gap beats the keyframe statistics, and pick
//! the pair per keyframe interval whose masks overlap least with the two
//! flanking keyframes.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::correspondence::mask_miou;
use crate::error::{Error, Result};
use crate::scene::{read_mask, Micros, SceneIndex, SemanticMaskSet, SensorFrame};

/// One LiDAR frame bound to one image per camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPair {
    pub lidar: SensorFrame,
    pub images: BTreeMap<String, SensorFrame>,
    /// Absolute LiDAR-to-image gap per camera, microseconds.
    pub delta_t: BTreeMap<String, Micros>,
    /// Mean of `delta_t` over cameras.
    pub sigma_sw: f64,
}

impl SweepPair {
    fn from_images(lidar: SensorFrame, images: BTreeMap<String, SensorFrame>) -> Self {
        let delta_t: BTreeMap<String, Micros> = images
            .iter()
            .map(|(cam, img)| (cam.clone(), img.timestamp.abs_diff(lidar.timestamp)))
            .collect();
        let sigma_sw = mean(delta_t.values().map(|&d| d as f64));
        SweepPair {
            lidar,
            images,
            delta_t,
            sigma_sw,
        }
    }

    /// The pair formed by the `k`-th keyframe and its keyframe images.
    pub fn keyframe(scene: &SceneIndex, k: usize) -> Result<Self> {
        let lidar = scene
            .lidar_keyframes()
            .nth(k)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("scene has no keyframe {k}")))?;
        let images = scene
            .keyframe_images(k)
            .ok_or_else(|| Error::Contract(format!("keyframe {k} lacks images")))?;
        Ok(Self::from_images(lidar, images))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let m = mean(values.iter().copied());
    let var = mean(values.iter().map(|v| (v - m) * (v - m)));
    (m, var.sqrt())
}

/// Pairs `lidar` with the image closest in time from each stream. Ties go to
/// the earlier image.
pub fn pair_lidar_to_images(lidar: &SensorFrame, streams: &BTreeMap<String, Vec<SensorFrame>>) -> Result<SweepPair> {
    let mut images = BTreeMap::new();
    for (cam, stream) in streams {
        if stream.is_empty() {
            return Err(Error::Contract(format!("camera stream {cam} is empty")));
        }
        let t = lidar.timestamp;
        // first image at or after t
        let after = stream.partition_point(|f| f.timestamp < t);
        let best = match (after.checked_sub(1), stream.get(after)) {
            (Some(b), Some(a)) => {
                if t - stream[b].timestamp <= a.timestamp - t {
                    b
                } else {
                    after
                }
            }
            (Some(b), None) => b,
            (None, _) => after,
        };
        images.insert(cam.clone(), stream[best].clone());
    }
    Ok(SweepPair::from_images(lidar.clone(), images))
}

/// Mean and population standard deviation of per-keyframe timestamp gaps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncStats {
    pub sigma: f64,
    pub delta: f64,
    pub count: usize,
}

impl SyncStats {
    pub fn from_gaps(gaps: &[f64]) -> Result<Self> {
        if gaps.is_empty() {
            return Err(Error::Contract("no keyframes to measure".into()));
        }
        let (sigma, delta) = mean_std(gaps);
        Ok(SyncStats {
            sigma,
            delta,
            count: gaps.len(),
        })
    }

    pub fn threshold(&self) -> f64 {
        self.sigma + self.delta
    }
}

/// Per-keyframe mean camera gaps of one scene.
pub fn keyframe_gaps(scene: &SceneIndex) -> Result<Vec<f64>> {
    (0..scene.lidar_keyframes().count())
        .map(|k| SweepPair::keyframe(scene, k).map(|p| p.sigma_sw))
        .collect()
}

pub fn keyframe_sync_stats(scene: &SceneIndex) -> Result<SyncStats> {
    SyncStats::from_gaps(&keyframe_gaps(scene)?)
}

/// Statistics pooled over the keyframes of several scenes.
pub fn global_sync_stats<'a>(scenes: impl IntoIterator<Item = &'a SceneIndex>) -> Result<SyncStats> {
    let mut gaps = Vec::new();
    for scene in scenes {
        gaps.extend(keyframe_gaps(scene)?);
    }
    SyncStats::from_gaps(&gaps)
}

#[inline]
pub fn passes_sync_filter(pair: &SweepPair, stats: &SyncStats) -> bool {
    pair.sigma_sw < stats.threshold()
}

pub fn filter_sweeps(pairs: Vec<SweepPair>, stats: &SyncStats) -> Vec<SweepPair> {
    pairs.into_iter().filter(|p| passes_sync_filter(p, stats)).collect()
}

/// Source of semantic masks for camera frames.
pub trait MaskStore {
    fn mask(&self, frame: &SensorFrame) -> Result<SemanticMaskSet>;
}

/// Masks stored as `<dir>/<frame_id>.cmpm`.
#[derive(Clone, Debug)]
pub struct DirMaskStore {
    pub dir: PathBuf,
}

impl DirMaskStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirMaskStore { dir: dir.into() }
    }
}

impl MaskStore for DirMaskStore {
    fn mask(&self, frame: &SensorFrame) -> Result<SemanticMaskSet> {
        read_mask(self.dir.join(format!("{}.cmpm", frame.frame_id)))
    }
}

impl MaskStore for HashMap<String, SemanticMaskSet> {
    fn mask(&self, frame: &SensorFrame) -> Result<SemanticMaskSet> {
        self.get(&frame.frame_id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("no mask for frame {}", frame.frame_id)))
    }
}

/// Average mask mIoU of a pair's images against the same cameras' images in
/// both flanking keyframes.
pub fn distinctness_score(
    candidate: &SweepPair,
    kf_prev: &SweepPair,
    kf_next: &SweepPair,
    masks: &dyn MaskStore,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (cam, img) in &candidate.images {
        let m = masks.mask(img)?;
        for kf in [kf_prev, kf_next] {
            let kimg = kf
                .images
                .get(cam)
                .ok_or_else(|| Error::Contract(format!("keyframe {} lacks camera {cam}", kf.lidar.frame_id)))?;
            total += mask_miou(&m, &masks.mask(kimg)?)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Index and score of the candidate with the lowest score; ties go to the
/// earliest LiDAR timestamp. `None` when there are no candidates.
pub fn argmin_score(candidates: &[SweepPair], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..candidates.len() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let better = scores[i] < scores[b]
                    || (scores[i] == scores[b] && candidates[i].lidar.timestamp < candidates[b].lidar.timestamp);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

pub fn select_distinct_sweep(
    candidates: &[SweepPair],
    kf_prev: &SweepPair,
    kf_next: &SweepPair,
    masks: &dyn MaskStore,
) -> Result<Option<(SweepPair, f64)>> {
    let scores = candidates
        .iter()
        .map(|c| distinctness_score(c, kf_prev, kf_next, masks))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin_score(candidates, &scores).map(|i| (candidates[i].clone(), scores[i])))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub frame_id: String,
    pub t_us: Micros,
    pub sigma_sw: f64,
    pub retained: bool,
    /// Average mIoU to the flanking keyframes; only scored when retained.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub start_keyframe: String,
    pub end_keyframe: String,
    pub candidates: Vec<CandidateReport>,
    pub selected: Option<SweepPair>,
    pub selected_score: Option<f64>,
}

/// Mean and standard deviation of `sigma_sw` over one set of pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub mean_dt: f64,
    pub std_dt: f64,
    pub count: usize,
}

impl SetStats {
    fn of(values: &[f64]) -> Self {
        let (mean_dt, std_dt) = mean_std(values);
        SetStats {
            mean_dt,
            std_dt,
            count: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTotals {
    pub keyframes: SetStats,
    pub sweeps: SetStats,
    pub filtered: SetStats,
    pub selected: SetStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub scene_id: String,
    pub stats: SyncStats,
    pub threshold: f64,
    pub intervals: Vec<IntervalReport>,
    pub totals: SelectionTotals,
}

impl SelectionReport {
    pub fn selections(&self) -> impl Iterator<Item = &SweepPair> {
        self.intervals.iter().filter_map(|i| i.selected.as_ref())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs pairing, filtering and selection over every keyframe interval of a
/// scene using that scene's own keyframe statistics.
pub fn run_vse(scene: &SceneIndex, masks: &dyn MaskStore) -> Result<SelectionReport> {
    let stats = keyframe_sync_stats(scene)?;
    run_vse_with_stats(scene, masks, stats)
}

/// As [`run_vse`], with externally supplied (e.g. dataset-wide) statistics.
pub fn run_vse_with_stats(scene: &SceneIndex, masks: &dyn MaskStore, stats: SyncStats) -> Result<SelectionReport> {
    let n_key = scene.lidar_keyframes().count();
    let keyframes = (0..n_key)
        .map(|k| SweepPair::keyframe(scene, k))
        .collect::<Result<Vec<_>>>()?;

    let mut intervals = Vec::new();
    let mut all_sweeps = Vec::new();
    let mut filtered = Vec::new();
    let mut selected = Vec::new();
    for window in keyframes.windows(2) {
        let (prev, next) = (&window[0], &window[1]);
        let pairs = scene
            .lidar_frames
            .iter()
            .filter(|f| !f.is_keyframe && f.timestamp > prev.lidar.timestamp && f.timestamp < next.lidar.timestamp)
            .map(|f| pair_lidar_to_images(f, &scene.camera_streams))
            .collect::<Result<Vec<_>>>()?;
        all_sweeps.extend(pairs.iter().map(|p| p.sigma_sw));

        let mut candidates = Vec::with_capacity(pairs.len());
        let mut retained = Vec::new();
        for p in &pairs {
            let keep = passes_sync_filter(p, &stats);
            candidates.push(CandidateReport {
                frame_id: p.lidar.frame_id.clone(),
                t_us: p.lidar.timestamp,
                sigma_sw: p.sigma_sw,
                retained: keep,
                score: None,
            });
            if keep {
                retained.push(p.clone());
            }
        }
        filtered.extend(retained.iter().map(|p| p.sigma_sw));

        let scores = retained
            .iter()
            .map(|c| distinctness_score(c, prev, next, masks))
            .collect::<Result<Vec<_>>>()?;
        let mut scored = scores.iter();
        for c in candidates.iter_mut().filter(|c| c.retained) {
            c.score = scored.next().copied();
        }
        let pick = argmin_score(&retained, &scores);
        if let Some(i) = pick {
            selected.push(retained[i].sigma_sw);
        }
        intervals.push(IntervalReport {
            start_keyframe: prev.lidar.frame_id.clone(),
            end_keyframe: next.lidar.frame_id.clone(),
            candidates,
            selected: pick.map(|i| retained[i].clone()),
            selected_score: pick.map(|i| scores[i]),
        });
    }

    let kf_gaps: Vec<f64> = keyframes.iter().map(|k| k.sigma_sw).collect();
    Ok(SelectionReport {
        scene_id: scene.scene_id.clone(),
        stats,
        threshold: stats.threshold(),
        intervals,
        totals: SelectionTotals {
            keyframes: SetStats::of(&kf_gaps),
            sweeps: SetStats::of(&all_sweeps),
            filtered: SetStats::of(&filtered),
            selected: SetStats::of(&selected),
        },
    })
}

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ccl_core::pretrain::{generate_world, SyntheticWorldConfig, World};
use ccl_core::scene::SemanticMaskSet;
use num_rational::Ratio;

/// Generates a world into a fresh temp dir and opens it.
pub fn world(cfg: &SyntheticWorldConfig) -> (tempfile::TempDir, World) {
    let dir = tempfile::tempdir().unwrap();
    generate_world(cfg, dir.path()).unwrap();
    let world = World::open(dir.path()).unwrap();
    (dir, world)
}

pub fn planted_config(seed: u64) -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        seed,
        n_scenes: 1,
        keyframes_per_scene: 3,
        n_cam: 3,
        objects_per_scene: 6,
        image_h: 8,
        image_w: 16,
        lidar_beams: 4,
        lidar_azimuths: 48,
        lidar_rate_hz: 10.0,
        camera_rate_hz: 10.0,
        planted: true,
        ..Default::default()
    }
}

/// Every file below `root`, keyed by relative path.
pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Mean IoU by enumerating every label and every pixel, in exact arithmetic.
pub fn brute_miou(a: &SemanticMaskSet, b: &SemanticMaskSet) -> (Vec<(u16, u64, u64)>, Ratio<i128>) {
    let mut labels: Vec<u16> = a.labels.iter().chain(&b.labels).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let mut per = Vec::new();
    let mut sum = Ratio::from_integer(0i128);
    for &l in &labels {
        let mut inter = 0u64;
        let mut union = 0u64;
        for r in 0..a.h {
            for c in 0..a.w {
                let (x, y) = (a.get(r, c) == l, b.get(r, c) == l);
                inter += u64::from(x && y);
                union += u64::from(x || y);
            }
        }
        per.push((l, inter, union));
        sum += Ratio::new(inter as i128, union as i128);
    }
    let n = labels.len() as i128;
    (per, sum / n)
}

pub fn ratio_to_f64(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `||a - b|| / max(||a||, ||b||, tiny)` over flattened arrays.
pub fn rel_err<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        d += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    d.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

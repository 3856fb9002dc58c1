//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use ccl_core::correspondence::{mask_miou, miou_breakdown, GroupedEmbeddings};
use ccl_core::eval::{consistency_report, linear_probe, ProbeConfig};
use ccl_core::losses::{
    cccl_loss, iccl_loss, loss_from_similarity, nce_loss, Aggregation, Contrast, LossWeights, PositiveSet,
    SimilarityMatrix,
};
use ccl_core::pretrain::model::Model;
use ccl_core::pretrain::train::{batch_objective, FrameSample};
use ccl_core::pretrain::{train, Method, ModelConfig, SyntheticWorldConfig, TrainConfig, World};
use ccl_core::scene::{SceneIndex, SemanticMaskSet, SensorFrame};
use ccl_core::vse::{run_vse, DirMaskStore, SelectionReport};
use common::{brute_miou, planted_config, rel_err, tree_bytes, world};
use ndarray::Array2;
use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn run(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Outcome {
        name,
        passed,
        detail,
        elapsed,
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0));
    for mut row in a.rows_mut() {
        let n: f64 = row.dot(&row);
        let n = n.sqrt();
        row /= n;
    }
    a
}

fn fd_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let at = [idx / x.ncols(), idx % x.ncols()];
        let mut p = x.clone();
        p[at] += h;
        let mut m = x.clone();
        m[at] -= h;
        g[at] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn set(x: &Array2<f64>, labels: &[u16]) -> GroupedEmbeddings {
    GroupedEmbeddings::new(x.clone(), labels.to_vec()).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, id: usize, n_labels: u16, l: usize, ci: usize) -> FrameSample {
    let n_groups = rng.random_range(1..4);
    let (mut points, mut pixels) = (Vec::new(), Vec::new());
    let (mut pg, mut xg, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_groups {
        let np = rng.random_range(1..5);
        pg.push((points.len() / l..points.len() / l + np).collect());
        points.extend((0..np * l).map(|_| rng.random_range(-15.0..15.0)));
        let nx = rng.random_range(1..5);
        xg.push((pixels.len() / ci..pixels.len() / ci + nx).collect());
        pixels.extend((0..nx * ci).map(|_| rng.random_range(-1.0..1.0)));
        labels.push(rng.random_range(0..n_labels));
    }
    FrameSample {
        frame_id: format!("f{id}"),
        points: Array2::from_shape_vec((points.len() / l, l), points).unwrap(),
        point_groups: pg,
        pixels: Array2::from_shape_vec((pixels.len() / ci, ci), pixels).unwrap(),
        pixel_groups: xg,
        labels,
    }
}

fn gradient_suite() -> Result<String, String> {
    const INSTANCES: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 4];
    for _ in 0..INSTANCES {
        let m = rng.random_range(2..=12);
        let d = if rng.random_bool(0.5) { 4 } else { 16 };
        let tau = rng.random_range(0.05..1.0);
        let labels: Vec<u16> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let q = unit_rows(&mut rng, m, d);
        let k = unit_rows(&mut rng, m, d);

        let r = nce_loss(&set(&q, &labels), &set(&k, &labels), tau).unwrap();
        let gq = fd_grad(&q, |x| {
            nce_loss(&set(x, &labels), &set(&k, &labels), tau).unwrap().value
        });
        let gk = fd_grad(&k, |x| {
            nce_loss(&set(&q, &labels), &set(x, &labels), tau).unwrap().value
        });
        worst[0] = worst[0].max(rel_err(r.grad_q.iter().chain(&r.grad_k), gq.iter().chain(&gk)));

        let r = cccl_loss(&set(&k, &labels), &set(&q, &labels), tau).unwrap();
        let gq = fd_grad(&q, |x| {
            cccl_loss(&set(&k, &labels), &set(x, &labels), tau).unwrap().value
        });
        let gk = fd_grad(&k, |x| {
            cccl_loss(&set(x, &labels), &set(&q, &labels), tau).unwrap().value
        });
        worst[1] = worst[1].max(rel_err(r.grad_q.iter().chain(&r.grad_k), gq.iter().chain(&gk)));

        let r = iccl_loss(&set(&k, &labels), tau).unwrap();
        let gk = fd_grad(&k, |x| iccl_loss(&set(x, &labels), tau).unwrap().value);
        if r.contributing_anchors > 0 {
            worst[2] = worst[2].max(rel_err(r.grad_k.iter(), gk.iter()));
        } else {
            ensure(gk.iter().all(|v| *v == 0.0), || {
                "ICCL without positives has a gradient".into()
            })?;
        }
    }

    let (l, ci) = (3, 4);
    for i in 0..INSTANCES {
        let mcfg = ModelConfig {
            input_channels: l,
            hidden: 5,
            point_features: 4,
            image_features: ci,
            embed_dim: 3,
            input_scale: vec![0.05; l],
        };
        let samples: Vec<FrameSample> = (0..rng.random_range(1..4))
            .map(|f| random_sample(&mut rng, f, 3, l, ci))
            .collect();
        let refs: Vec<&FrameSample> = samples.iter().collect();
        let model = Model::init(&mcfg, i as u64);
        let method = if i % 2 == 0 { Method::ConflictAware } else { Method::Nce };
        let contrast = Contrast::new(rng.random_range(0.1..1.0));
        let weights = LossWeights {
            cross: rng.random_range(0.5..1.5),
            intra: rng.random_range(0.5..1.5),
        };
        let eval = |m: &Model| batch_objective(m, &mcfg, &refs, method, &contrast, weights).unwrap();
        let analytic = eval(&model).grads;
        let h = 1e-6;
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for p in 0..8 {
            for idx in 0..model.params()[p].len() {
                let cols = model.params()[p].ncols();
                let at = [idx / cols, idx % cols];
                let mut plus = model.clone();
                plus.params_mut()[p][at] += h;
                let mut minus = model.clone();
                minus.params_mut()[p][at] -= h;
                fd.push((eval(&plus).loss - eval(&minus).loss) / (2.0 * h));
                an.push(analytic.params()[p][at]);
            }
        }
        worst[3] = worst[3].max(rel_err(&an, &fd));
    }
    let detail = format!(
        "{INSTANCES} instances each; worst relative error nce {:.1e}, cccl {:.1e}, iccl {:.1e}, end-to-end {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    ensure(worst[..3].iter().all(|&e| e <= 1e-6) && worst[3] <= 1e-5, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn reduction_identity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(1..12);
        let d = rng.random_range(2..8);
        let tau = rng.random_range(0.05..1.0);
        let mut labels: Vec<u16> = (0..m as u16).map(|l| l * 3 + 1).collect();
        for i in (1..m).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let q = unit_rows(&mut rng, m, d);
        let k = unit_rows(&mut rng, m, d);
        let a = cccl_loss(&set(&k, &labels), &set(&q, &labels), tau).unwrap().value;
        let b = nce_loss(&set(&q, &labels), &set(&k, &labels), tau).unwrap().value;
        worst = worst.max((a - b).abs());
    }
    let detail = format!("50 unique-label instances, max |cccl - nce| = {worst:.1e}");
    ensure(worst <= 1e-12, || detail.clone())?;
    Ok(detail)
}

fn iccl_forced_zeros() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let k = unit_rows(&mut rng, 2, 4);
        let tau = rng.random_range(0.05..1.0);
        let v = iccl_loss(&set(&k, &[5, 5]), tau).unwrap().value;
        ensure(v == 0.0, || format!("two-group shared-label ICCL = {v}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(2..9);
        let labels: Vec<u16> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let k = unit_rows(&mut rng, m, 3);
        let tau = rng.random_range(0.05..1.0);
        let sim = SimilarityMatrix::between(k.view(), k.view(), tau).unwrap();
        let pos = PositiveSet::intra_modal(&labels);
        let base = loss_from_similarity(&sim, &pos, Aggregation::Mean).unwrap();
        let mut perturbed = sim.clone();
        for i in 0..m {
            perturbed.values[[i, i]] += rng.random_range(-50.0..50.0);
        }
        let other = loss_from_similarity(&perturbed, &pos, Aggregation::Mean).unwrap();
        worst = worst.max((base.value - other.value).abs());
        worst = worst.max(
            base.grad
                .iter()
                .zip(&other.grad)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    let detail = format!("two-group instances exactly 0; max change under self-similarity perturbation {worst:.1e}");
    ensure(worst <= 1e-12, || detail.clone())?;
    Ok(detail)
}

fn miou_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let n_labels = rng.random_range(1..6);
        let mut draw =
            || SemanticMaskSet::new(h, w, (0..h * w).map(|_| rng.random_range(0..n_labels)).collect()).unwrap();
        let (a, b) = (draw(), draw());
        let (per, exact) = brute_miou(&a, &b);
        let got = miou_breakdown(&a, &b).unwrap();
        ensure(got == per, || format!("grid {i}: per-label counts differ"))?;
        let from_counts = got
            .iter()
            .map(|&(_, i, u)| Ratio::new(i as i128, u as i128))
            .sum::<Ratio<i128>>()
            / got.len() as i128;
        ensure(from_counts == exact, || format!("grid {i}: rational mIoU differs"))?;
        let f = mask_miou(&a, &b).unwrap();
        worst = worst.max((f - common::ratio_to_f64(exact)).abs());
    }
    let a = SemanticMaskSet::new(2, 2, vec![1, 1, 2, 2]).unwrap();
    let b = SemanticMaskSet::new(2, 2, vec![1, 2, 2, 2]).unwrap();
    let (_, hand) = brute_miou(&a, &b);
    ensure(hand == Ratio::new(7, 12), || format!("hand case gives {hand}"))?;
    ensure((mask_miou(&a, &b).unwrap() - 7.0 / 12.0).abs() <= f64::EPSILON, || {
        "hand case float".into()
    })?;
    let detail =
        format!("200 grids: counts and rational means identical, float rendering within {worst:.1e}; 2x2 case = 7/12");
    ensure(worst <= 4.0 * f64::EPSILON, || detail.clone())?;
    Ok(detail)
}

fn nearest(stream: &[SensorFrame], t: u64) -> &SensorFrame {
    let mut best = &stream[0];
    for f in stream {
        if f.timestamp.abs_diff(t) < best.timestamp.abs_diff(t) {
            best = f;
        }
    }
    best
}

fn mean_gap(scene: &SceneIndex, lidar: &SensorFrame, images: &BTreeMap<String, &SensorFrame>) -> f64 {
    let gaps: Vec<f64> = scene
        .camera_ids()
        .map(|c| images[c].timestamp.abs_diff(lidar.timestamp) as f64)
        .collect();
    gaps.iter().sum::<f64>() / gaps.len() as f64
}

/// Independent re-derivation of one scene's selections.
fn check_selection(w: &World, s: usize, report: &SelectionReport) -> Result<(usize, usize), String> {
    let scene = &w.scenes[s].index;
    let keys: Vec<&SensorFrame> = scene.lidar_keyframes().collect();
    let key_images: Vec<BTreeMap<String, &SensorFrame>> = (0..keys.len())
        .map(|k| {
            scene
                .camera_streams
                .iter()
                .map(|(c, frames)| (c.clone(), frames.iter().filter(|f| f.is_keyframe).nth(k).unwrap()))
                .collect()
        })
        .collect();
    let sigmas: Vec<f64> = keys
        .iter()
        .zip(&key_images)
        .map(|(l, im)| mean_gap(scene, l, im))
        .collect();
    let mu = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    let sd = (sigmas.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / sigmas.len() as f64).sqrt();
    let threshold = mu + sd;
    ensure(
        (report.threshold - threshold).abs() <= 1e-9 * threshold.max(1.0),
        || format!("threshold {} vs oracle {threshold}", report.threshold),
    )?;
    let ws = &w.scenes[s];
    let (mut retained, mut qualifying) = (0, 0);
    for (k, interval) in report.intervals.iter().enumerate() {
        let (t0, t1) = (keys[k].timestamp, keys[k + 1].timestamp);
        let mut best: Option<(BigRational, &str)> = None;
        let sweeps = scene
            .lidar_frames
            .iter()
            .filter(|f| f.timestamp > t0 && f.timestamp < t1);
        for sweep in sweeps {
            let images: BTreeMap<String, &SensorFrame> = scene
                .camera_streams
                .iter()
                .map(|(c, frames)| (c.clone(), nearest(frames, sweep.timestamp)))
                .collect();
            let sigma = mean_gap(scene, sweep, &images);
            let cand = interval
                .candidates
                .iter()
                .find(|c| c.frame_id == sweep.frame_id)
                .ok_or_else(|| format!("{} missing from report", sweep.frame_id))?;
            let passes = sigma < threshold;
            ensure(cand.retained == passes, || {
                format!("{} retained={} oracle={passes}", sweep.frame_id, cand.retained)
            })?;
            if !passes {
                continue;
            }
            retained += 1;
            let mut total = BigRational::from_integer(BigInt::from(0));
            let mut n = 0;
            for (c, img) in &images {
                let m = ws.mask(img).unwrap();
                for key in [&key_images[k][c], &key_images[k + 1][c]] {
                    let r = brute_miou(&m, &ws.mask(key).unwrap()).1;
                    total += BigRational::new(BigInt::from(*r.numer()), BigInt::from(*r.denom()));
                    n += 1;
                }
            }
            let score = total / BigInt::from(n);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, &sweep.frame_id));
            }
        }
        let selected = interval.selected.as_ref().map(|p| p.lidar.frame_id.as_str());
        ensure(selected == best.as_ref().map(|b| b.1), || {
            format!(
                "interval {k}: selected {selected:?}, oracle {:?}",
                best.as_ref().map(|b| b.1)
            )
        })?;
        qualifying += usize::from(best.is_some());
    }
    ensure(report.selections().count() == qualifying, || {
        "selection count differs from qualifying intervals".into()
    })?;
    Ok((retained, qualifying))
}

fn vse_correctness() -> Result<String, String> {
    let (mut retained, mut qualifying, mut intervals) = (0, 0, 0);
    for seed in 0..3 {
        let (_dir, w) = world(&SyntheticWorldConfig {
            seed,
            n_scenes: 2,
            ..Default::default()
        });
        for (s, scene) in w.scenes.iter().enumerate() {
            let report = run_vse(&scene.index, &DirMaskStore::new(scene.mask_dir())).map_err(|e| e.to_string())?;
            let (r, q) = check_selection(&w, s, &report)?;
            retained += r;
            qualifying += q;
            intervals += report.intervals.len();
        }
    }
    let mut recovered = 0;
    for seed in 0..100 {
        let (_dir, w) = world(&planted_config(seed));
        let scene = &w.scenes[0];
        let report = run_vse(&scene.index, &DirMaskStore::new(scene.mask_dir())).map_err(|e| e.to_string())?;
        let got: Vec<String> = report.selections().map(|p| p.lidar.frame_id.clone()).collect();
        let keyframes = scene.index.lidar_keyframes().count();
        ensure(got.len() == keyframes - 1, || {
            format!("planted seed {seed}: {} selections", got.len())
        })?;
        if got == w.manifest.planted_sweeps[&scene.index.scene_id] {
            recovered += 1;
        }
    }
    let detail = format!(
        "{retained} retained pairs strictly under threshold, {qualifying}/{intervals} intervals match brute-force argmin; planted recovered {recovered}/100"
    );
    ensure(recovered == 100, || detail.clone())?;
    Ok(detail)
}

struct RunStats {
    acc: f64,
    gap: f64,
}

fn evaluate(world: &World, seed: u64, method: Method, use_vse: bool) -> RunStats {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::reference()
    };
    let out = train(world, &cfg, method, use_vse).unwrap();
    let probe = ProbeConfig {
        seed,
        ..Default::default()
    };
    RunStats {
        acc: linear_probe(&out.checkpoint, world, &probe).unwrap().overall,
        gap: consistency_report(&out.checkpoint, world).unwrap().gap,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs nce, conflict-aware and conflict-aware + VSE on five reference worlds.
fn reference_runs() -> Vec<[RunStats; 3]> {
    (0..5)
        .map(|seed| {
            let (_dir, w) = world(&SyntheticWorldConfig {
                seed,
                ..Default::default()
            });
            assert_eq!(
                w.scenes
                    .iter()
                    .map(|s| s.index.lidar_keyframes().count())
                    .sum::<usize>(),
                20
            );
            [
                evaluate(&w, seed, Method::Nce, false),
                evaluate(&w, seed, Method::ConflictAware, false),
                evaluate(&w, seed, Method::ConflictAware, true),
            ]
        })
        .collect()
}

fn proxy_direction(runs: &[[RunStats; 3]], elapsed: Duration) -> Result<String, String> {
    let nce: Vec<f64> = runs.iter().map(|r| r[0].acc).collect();
    let conflict: Vec<f64> = runs.iter().map(|r| r[1].acc).collect();
    let gap_nce = mean(&runs.iter().map(|r| r[0].gap).collect::<Vec<_>>());
    let gap_conflict = mean(&runs.iter().map(|r| r[1].gap).collect::<Vec<_>>());
    let delta = mean(&conflict) - mean(&nce);
    let detail = format!(
        "probe accuracy conflict {:.3} vs nce {:.3} (+{:.1} points); gap {gap_conflict:.3} vs {gap_nce:.3}; {:.0}s for all reference runs",
        mean(&conflict),
        mean(&nce),
        100.0 * delta,
        elapsed.as_secs_f64()
    );
    ensure(
        delta >= 0.05 && gap_conflict > gap_nce && elapsed <= Duration::from_secs(300),
        || detail.clone(),
    )?;
    Ok(detail)
}

fn vse_ablation(runs: &[[RunStats; 3]]) -> Result<String, String> {
    let off = mean(&runs.iter().map(|r| r[1].acc).collect::<Vec<_>>());
    let on = mean(&runs.iter().map(|r| r[2].acc).collect::<Vec<_>>());
    let detail = format!(
        "probe accuracy with VSE {on:.3} vs without {off:.3} ({:+.1} points)",
        100.0 * (on - off)
    );
    ensure(on - off >= -0.01, || detail.clone())?;
    Ok(detail)
}

fn determinism() -> Result<String, String> {
    let cfg = SyntheticWorldConfig {
        n_scenes: 2,
        keyframes_per_scene: 4,
        ..Default::default()
    };
    let (a, wa) = world(&cfg);
    let (b, wb) = world(&cfg);
    ensure(tree_bytes(a.path()) == tree_bytes(b.path()), || {
        "world files differ".into()
    })?;
    for (sa, sb) in wa.scenes.iter().zip(&wb.scenes) {
        let ra = run_vse(&sa.index, &DirMaskStore::new(sa.mask_dir())).unwrap().to_json();
        let rb = run_vse(&sb.index, &DirMaskStore::new(sb.mask_dir())).unwrap().to_json();
        ensure(ra == rb, || "selection reports differ".into())?;
    }
    let tcfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::reference()
    };
    for method in [Method::Nce, Method::ConflictAware] {
        let ca = train(&wa, &tcfg, method, true).unwrap().checkpoint.encode();
        let cb = train(&wb, &tcfg, method, true).unwrap().checkpoint.encode();
        ensure(ca == cb, || format!("{method} checkpoints differ"))?;
    }
    Ok("worlds, selection reports and checkpoints byte-identical across repeated runs".into())
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = vec![
        run("gradient suite", gradient_suite),
        run("reduction identity", reduction_identity),
        run("ICCL forced zeros", iccl_forced_zeros),
        run("mIoU oracle", miou_oracle),
        run("VSE correctness", vse_correctness),
    ];
    let start = Instant::now();
    let runs = reference_runs();
    let elapsed = start.elapsed();
    outcomes.push(run("proxy-experiment direction", || proxy_direction(&runs, elapsed)));
    outcomes.push(run("VSE ablation direction", || vse_ablation(&runs)));
    outcomes.push(run("determinism", determinism));

    let gradient_time = outcomes[0].elapsed;
    if gradient_time > Duration::from_secs(60) {
        outcomes[0].passed = false;
        outcomes[0].detail += &format!(" (took {:.0}s, budget 60s)", gradient_time.as_secs_f64());
    }
    // Written to the raw stdout handle so the report survives libtest's capture.
    let mut out = std::io::stdout().lock();
    for o in &outcomes {
        writeln!(
            out,
            "{} {}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.elapsed.as_secs_f64()
        )
        .unwrap();
    }
    drop(out);
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

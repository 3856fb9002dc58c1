//! Deterministic synthetic drives: labeled spheres on a ground plane, seen by
//! a ray-cast LiDAR and a ring of pinhole cameras whose masks are rendered
//! from the same geometry.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::image_encoder::ImageEncoderConfig;
use crate::error::{Error, Result};
use crate::scene::{
    load_calibration, load_scene_index, read_mask, read_point_cloud, save_calibration, save_scene_index, write_mask,
    write_point_cloud, Calibration, CameraCalibration, Micros, PointCloud, SceneIndex, SemanticMaskSet, SensorFrame,
};
use crate::seed::derive_seed;

pub const WORLD_MANIFEST: &str = "world.json";
const LIDAR_HEIGHT: f64 = 1.8;
const MAX_RANGE: f64 = 40.0;
const SCENE_T0: Micros = 1_000_000;
/// Per-camera trigger offset relative to the LiDAR clock.
const CAMERA_OFFSET_STEP_US: Micros = 1_500;
/// Number of non-coordinate channels per point: intensity, echo.
const EXTRA_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub keyframes_per_scene: usize,
    /// Class 0 is the ground; classes `1..n_classes` are objects.
    pub n_classes: usize,
    pub objects_per_scene: usize,
    pub n_cam: usize,
    pub keyframe_period_us: Micros,
    pub lidar_rate_hz: f64,
    pub camera_rate_hz: f64,
    /// Uniform jitter (+/-) on camera timestamps.
    pub timestamp_jitter_us: Micros,
    pub image_h: usize,
    pub image_w: usize,
    pub lidar_beams: usize,
    pub lidar_azimuths: usize,
    /// Fraction of ground returns kept.
    pub ground_keep: f64,
    pub ground: bool,
    /// Standard deviation of per-point channel noise.
    pub noise_scale: f64,
    pub ego_speed_mps: f64,
    pub object_speed_mps: f64,
    /// Plants one maximally distinct, perfectly synchronized sweep per
    /// keyframe interval (for testing selection). Implies a static world.
    pub planted: bool,
    pub image_encoder: ImageEncoderConfig,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            seed: 0,
            n_scenes: 4,
            keyframes_per_scene: 5,
            n_classes: 8,
            objects_per_scene: 14,
            n_cam: 6,
            keyframe_period_us: 500_000,
            lidar_rate_hz: 10.0,
            camera_rate_hz: 20.0,
            timestamp_jitter_us: 4_000,
            image_h: 12,
            image_w: 24,
            lidar_beams: 12,
            lidar_azimuths: 120,
            ground_keep: 0.25,
            ground: true,
            noise_scale: 0.05,
            ego_speed_mps: 8.0,
            object_speed_mps: 2.0,
            planted: false,
            image_encoder: ImageEncoderConfig::default(),
        }
    }
}

impl SyntheticWorldConfig {
    /// A nuScenes-like layout: six cameras, 10 LiDAR frames and 60 images per
    /// 0.5 s keyframe interval.
    pub fn nuscenes_like() -> Self {
        SyntheticWorldConfig {
            n_scenes: 1,
            keyframes_per_scene: 3,
            lidar_rate_hz: 20.0,
            camera_rate_hz: 20.0,
            ..Default::default()
        }
    }

    pub fn lidar_period_us(&self) -> Micros {
        (1e6 / self.lidar_rate_hz).round() as Micros
    }

    pub fn camera_period_us(&self) -> Micros {
        (1e6 / self.camera_rate_hz).round() as Micros
    }

    pub fn sky_label(&self) -> u16 {
        self.n_classes as u16
    }

    pub fn point_channels(&self) -> usize {
        3 + EXTRA_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.n_classes < 2 {
            return bad(format!(
                "need the ground class plus at least one object class, got {} classes",
                self.n_classes
            ));
        }
        if self.n_classes >= u16::MAX as usize {
            return bad("too many classes".into());
        }
        if self.n_scenes == 0 || self.keyframes_per_scene == 0 || self.n_cam == 0 {
            return bad("scenes, keyframes and cameras must all be positive".into());
        }
        if self.image_h == 0 || self.image_w == 0 || self.lidar_beams == 0 || self.lidar_azimuths == 0 {
            return bad("image and beam dimensions must be positive".into());
        }
        if !(self.lidar_rate_hz > 0.0 && self.camera_rate_hz > 0.0) {
            return bad("sensor rates must be positive".into());
        }
        let lp = self.lidar_period_us();
        if lp == 0 || !self.keyframe_period_us.is_multiple_of(lp) || self.keyframe_period_us / lp < 2 {
            return bad(format!(
                "keyframe period {} us must be a multiple (>= 2) of the LiDAR period {lp} us so sweeps exist",
                self.keyframe_period_us
            ));
        }
        let cp = self.camera_period_us();
        if 2 * self.timestamp_jitter_us + CAMERA_OFFSET_STEP_US * self.n_cam as u64 >= cp {
            return bad("camera jitter and offsets must stay below one camera period".into());
        }
        if self.planted && cp != lp {
            return bad("planted worlds need equal camera and LiDAR rates".into());
        }
        if !(0.0..=1.0).contains(&self.ground_keep) || self.noise_scale < 0.0 {
            return bad("ground_keep must lie in [0, 1] and noise_scale must be non-negative".into());
        }
        if self.objects_per_scene == 0 && !self.ground {
            return bad("world would contain no geometry".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub version: u32,
    pub config: SyntheticWorldConfig,
    pub scenes: Vec<String>,
    pub point_channels: usize,
    pub sky_label: u16,
    /// Planted sweep frame id per scene, one per interval (planted worlds only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub planted_sweeps: BTreeMap<String, Vec<String>>,
}

/// Per-class physical signature shared by all scenes.
#[derive(Clone, Debug)]
struct ClassProfile {
    radius: f64,
    reflectance: f64,
    echo: f64,
}

#[derive(Clone, Debug)]
struct Sphere {
    class: u16,
    center: [f64; 3],
    velocity: [f64; 3],
    radius: f64,
    reflectance: f64,
    /// Active interval, inclusive; `None` means always present.
    window: Option<(Micros, Micros)>,
}

impl Sphere {
    fn at(&self, t: Micros, ego: [f64; 3]) -> Option<([f64; 3], f64)> {
        if let Some((a, b)) = self.window {
            if t < a || t > b {
                return None;
            }
        }
        let dt = since_start(t);
        Some((
            [
                self.center[0] + self.velocity[0] * dt - ego[0],
                self.center[1] + self.velocity[1] * dt - ego[1],
                self.center[2] + self.velocity[2] * dt - ego[2],
            ],
            self.radius,
        ))
    }
}

/// Seconds since the scene's first LiDAR sweep; negative for earlier images.
fn since_start(t: Micros) -> f64 {
    (t as i64 - SCENE_T0 as i64) as f64 * 1e-6
}

struct SceneGeometry {
    spheres: Vec<Sphere>,
    ego_speed: f64,
}

enum Hit {
    Object { sphere: usize, t: f64 },
    Ground { t: f64 },
}

impl SceneGeometry {
    fn ego(&self, t: Micros) -> [f64; 3] {
        [self.ego_speed * since_start(t), 0.0, 0.0]
    }

    fn active(&self, t: Micros) -> Vec<(usize, [f64; 3], f64)> {
        let ego = self.ego(t);
        self.spheres
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.at(t, ego).map(|(c, r)| (i, c, r)))
            .collect()
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Nearest positive intersection of the ray `o + t d` (|d| = 1) with a sphere.
fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let b = dot(oc, d);
    let disc = b * b - (dot(oc, oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 1e-9)
}

fn ground_hit(o: [f64; 3], d: [f64; 3], enabled: bool) -> Option<f64> {
    if !enabled || d[2] >= 0.0 {
        return None;
    }
    let t = (-LIDAR_HEIGHT - o[2]) / d[2];
    let x = o[0] + t * d[0];
    let y = o[1] + t * d[1];
    (t > 0.0 && (x * x + y * y).sqrt() <= MAX_RANGE).then_some(t)
}

fn cast(o: [f64; 3], d: [f64; 3], active: &[(usize, [f64; 3], f64)], ground: bool) -> Option<Hit> {
    let mut best: Option<Hit> = ground_hit(o, d, ground).map(|t| Hit::Ground { t });
    for &(i, c, r) in active {
        if let Some(t) = ray_sphere(o, d, c, r) {
            let closer = match &best {
                None => true,
                Some(Hit::Ground { t: g }) | Some(Hit::Object { t: g, .. }) => t < *g,
            };
            if closer && t <= MAX_RANGE {
                best = Some(Hit::Object { sphere: i, t });
            }
        }
    }
    best
}

fn camera_calibration(cfg: &SyntheticWorldConfig, c: usize) -> CameraCalibration {
    let yaw = 2.0 * PI * c as f64 / cfg.n_cam as f64;
    let hfov = (2.0 * PI / cfg.n_cam as f64 * 1.1).min(100f64.to_radians());
    let fx = (cfg.image_w as f64 / 2.0) / (hfov / 2.0).tan();
    let (s, co) = yaw.sin_cos();
    CameraCalibration {
        fx,
        fy: fx,
        cx: (cfg.image_w as f64 - 1.0) / 2.0,
        cy: (cfg.image_h as f64 - 1.0) / 2.0,
        rotation: [s, -co, 0.0, 0.0, 0.0, -1.0, co, s, 0.0],
        translation: [0.0; 3],
    }
}

pub fn camera_id(c: usize) -> String {
    format!("CAM_{c:02}")
}

fn render_mask(cfg: &SyntheticWorldConfig, cam: &CameraCalibration, geo: &SceneGeometry, t: Micros) -> SemanticMaskSet {
    let active = geo.active(t);
    let origin = cam.center();
    // Silhouettes are dilated by ~0.75 px so that every point lying on an
    // object rounds onto a pixel carrying that object's label.
    let pad = 0.75 / cam.fx;
    let inflated: Vec<(usize, [f64; 3], f64)> = active
        .iter()
        .map(|&(i, c, r)| {
            let dist = norm([c[0] - origin[0], c[1] - origin[1], c[2] - origin[2]]);
            let r2 = if dist <= r {
                r
            } else {
                let ang = (r / dist).asin() + pad;
                if ang >= PI / 2.0 {
                    dist
                } else {
                    dist * ang.sin()
                }
            };
            (i, c, r2)
        })
        .collect();
    let mut labels = Vec::with_capacity(cfg.image_h * cfg.image_w);
    for row in 0..cfg.image_h {
        for col in 0..cfg.image_w {
            let mut d = cam.pixel_ray(col as f64, row as f64);
            let n = norm(d);
            d = [d[0] / n, d[1] / n, d[2] / n];
            let label = match cast(origin, d, &active, cfg.ground) {
                Some(Hit::Object { sphere, .. }) => geo.spheres[sphere].class,
                other => {
                    let limit = match other {
                        Some(Hit::Ground { t }) => t,
                        _ => f64::INFINITY,
                    };
                    let near = inflated
                        .iter()
                        .filter_map(|&(i, c, r)| ray_sphere(origin, d, c, r).map(|t| (t, i)))
                        .filter(|&(t, _)| t < limit)
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    match (near, other) {
                        (Some((_, i)), _) => geo.spheres[i].class,
                        (None, Some(Hit::Ground { .. })) => 0,
                        _ => cfg.sky_label(),
                    }
                }
            };
            labels.push(label);
        }
    }
    SemanticMaskSet::new(cfg.image_h, cfg.image_w, labels).expect("sized by construction")
}

fn scan_lidar(
    cfg: &SyntheticWorldConfig,
    classes: &[ClassProfile],
    geo: &SceneGeometry,
    t: Micros,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<u16>) {
    let active = geo.active(t);
    let (lo, hi) = ((-20f64).to_radians(), 6f64.to_radians());
    let mut rows: Vec<f64> = Vec::new();
    let mut gt = Vec::new();
    let origin = [0.0; 3];
    for b in 0..cfg.lidar_beams {
        let el = if cfg.lidar_beams == 1 {
            0.0
        } else {
            lo + (hi - lo) * b as f64 / (cfg.lidar_beams - 1) as f64
        };
        for a in 0..cfg.lidar_azimuths {
            let az = 2.0 * PI * (a as f64 + 0.5) / cfg.lidar_azimuths as f64;
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some(hit) = cast(origin, d, &active, cfg.ground) else {
                continue;
            };
            let (t_hit, class, reflectance, normal) = match hit {
                Hit::Ground { t } => {
                    if rng.random::<f64>() >= cfg.ground_keep {
                        continue;
                    }
                    (t, 0u16, classes[0].reflectance, [0.0, 0.0, 1.0])
                }
                Hit::Object { sphere, t } => {
                    let (_, c, r) = *active.iter().find(|(i, ..)| *i == sphere).unwrap();
                    let p = [d[0] * t, d[1] * t, d[2] * t];
                    let n = [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r];
                    let s = &geo.spheres[sphere];
                    (t, s.class, s.reflectance, n)
                }
            };
            let incidence = (-dot(d, normal)).clamp(0.0, 1.0);
            let falloff = 1.0 / (1.0 + (t_hit / 15.0).powi(2));
            let noise = |rng: &mut ChaCha8Rng| cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
            let intensity = reflectance * (0.3 + 0.7 * incidence) * falloff + noise(rng);
            let echo = classes[class as usize].echo + noise(rng);
            rows.extend_from_slice(&[d[0] * t_hit, d[1] * t_hit, d[2] * t_hit, intensity, echo]);
            gt.push(class);
        }
    }
    let n = gt.len();
    (Array2::from_shape_vec((n, 3 + EXTRA_CHANNELS), rows).unwrap(), gt)
}

fn class_profiles(cfg: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> Vec<ClassProfile> {
    let n_obj = cfg.n_classes - 1;
    let mut refl: Vec<f64> = (0..cfg.n_classes)
        .map(|i| 0.15 + 0.8 * i as f64 / (cfg.n_classes - 1).max(1) as f64)
        .collect();
    refl.shuffle(rng);
    (0..cfg.n_classes)
        .map(|c| ClassProfile {
            radius: if c == 0 {
                0.0
            } else {
                0.6 + 1.6 * ((c - 1) as f64 / n_obj.max(1) as f64) + rng.random_range(-0.1..0.1)
            },
            reflectance: refl[c],
            echo: rng.random_range(-1.0..1.0),
        })
        .collect()
}

struct SceneTiming {
    lidar: Vec<Micros>,
    keyframe_every: usize,
    end: Micros,
}

fn scene_timing(cfg: &SyntheticWorldConfig) -> SceneTiming {
    let lp = cfg.lidar_period_us();
    let keyframe_every = (cfg.keyframe_period_us / lp) as usize;
    let n_lidar = (cfg.keyframes_per_scene - 1) * keyframe_every + 1;
    let lidar: Vec<Micros> = (0..n_lidar).map(|i| SCENE_T0 + i as Micros * lp).collect();
    let end = *lidar.last().unwrap();
    SceneTiming {
        lidar,
        keyframe_every,
        end,
    }
}

/// Generates a world under `out`. Returns the manifest that was written.
pub fn generate_world(cfg: &SyntheticWorldConfig, out: impl AsRef<Path>) -> Result<WorldManifest> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "classes"));
    let classes = class_profiles(cfg, &mut world_rng);
    let calib = Calibration {
        cameras: (0..cfg.n_cam)
            .map(|c| (camera_id(c), camera_calibration(cfg, c)))
            .collect(),
    };

    let mut scenes = Vec::new();
    let mut planted_sweeps = BTreeMap::new();
    for s in 0..cfg.n_scenes {
        let scene_id = format!("scene_{s:03}");
        let planted = generate_scene(cfg, &classes, &calib, &scene_id, &out.join(&scene_id))?;
        if cfg.planted {
            planted_sweeps.insert(scene_id.clone(), planted);
        }
        scenes.push(scene_id);
    }
    let manifest = WorldManifest {
        version: 1,
        config: cfg.clone(),
        scenes,
        point_channels: cfg.point_channels(),
        sky_label: cfg.sky_label(),
        planted_sweeps,
    };
    let path = out.join(WORLD_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn generate_scene(
    cfg: &SyntheticWorldConfig,
    classes: &[ClassProfile],
    calib: &Calibration,
    scene_id: &str,
    dir: &Path,
) -> Result<Vec<String>> {
    for sub in ["lidar", "masks", "gt"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, scene_id));
    let timing = scene_timing(cfg);
    let (ego_speed, object_speed) = if cfg.planted {
        (0.0, 0.0)
    } else {
        (cfg.ego_speed_mps, cfg.object_speed_mps)
    };
    let travel = ego_speed * (timing.end - SCENE_T0) as f64 * 1e-6;

    let mut spheres = Vec::new();
    let n_obj_classes = cfg.n_classes - 1;
    let class_offset = rng.random_range(0..n_obj_classes);
    for i in 0..cfg.objects_per_scene {
        let class = 1 + ((i + class_offset) % n_obj_classes) as u16;
        let prof = &classes[class as usize];
        let radius = prof.radius * rng.random_range(0.9..1.1);
        let center = loop {
            let x = rng.random_range(-18.0..18.0 + travel);
            let y: f64 = rng.random_range(-18.0..18.0);
            let clear_of_path = y.abs() > radius + 2.5 || x < -radius - 3.0 || x > travel + radius + 3.0;
            let clear_of_others = spheres
                .iter()
                .all(|o: &Sphere| norm([o.center[0] - x, o.center[1] - y, 0.0]) > o.radius + radius + 0.5);
            if clear_of_path && clear_of_others {
                break [x, y, -LIDAR_HEIGHT + radius];
            }
        };
        let heading = rng.random_range(0.0..2.0 * PI);
        let speed = object_speed * rng.random_range(0.0..1.0);
        spheres.push(Sphere {
            class,
            center,
            velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
            radius,
            reflectance: (prof.reflectance * (1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))).max(0.01),
            window: None,
        });
    }

    let lp = cfg.lidar_period_us();
    let mut planted_times = Vec::new();
    if cfg.planted {
        for k in 0..cfg.keyframes_per_scene - 1 {
            let j = rng.random_range(1..timing.keyframe_every);
            let tp = timing.lidar[k * timing.keyframe_every + j];
            planted_times.push(tp);
            for c in 0..cfg.n_cam {
                let yaw = 2.0 * PI * c as f64 / cfg.n_cam as f64;
                let class = 1 + rng.random_range(0..n_obj_classes) as u16;
                spheres.push(Sphere {
                    class,
                    center: [6.0 * yaw.cos(), 6.0 * yaw.sin(), -LIDAR_HEIGHT + 2.2],
                    velocity: [0.0; 3],
                    radius: 2.2,
                    reflectance: classes[class as usize].reflectance,
                    window: Some((tp - lp / 4, tp + lp / 4)),
                });
            }
        }
    }
    let geo = SceneGeometry { spheres, ego_speed };

    let mut lidar_frames = Vec::new();
    let mut planted_ids = Vec::new();
    for (i, &t) in timing.lidar.iter().enumerate() {
        let frame_id = format!("{scene_id}_LIDAR_{i:04}");
        let (data, gt) = scan_lidar(cfg, classes, &geo, t, &mut rng);
        if gt.is_empty() {
            return Err(Error::Validation(format!("frame {frame_id} has no LiDAR returns")));
        }
        let rel = PathBuf::from("lidar").join(format!("{frame_id}.cmpc"));
        write_point_cloud(&PointCloud::new(data)?, dir.join(&rel))?;
        let gt_mask = SemanticMaskSet::new(1, gt.len(), gt)?;
        write_mask(&gt_mask, dir.join("gt").join(format!("{frame_id}.cmpm")))?;
        if planted_times.contains(&t) {
            planted_ids.push(frame_id.clone());
        }
        lidar_frames.push(SensorFrame {
            frame_id,
            timestamp: t,
            is_keyframe: i % timing.keyframe_every == 0,
            payload_path: rel,
        });
    }

    let cp = cfg.camera_period_us() as i64;
    let key_times: Vec<Micros> = lidar_frames
        .iter()
        .filter(|f| f.is_keyframe)
        .map(|f| f.timestamp)
        .collect();
    let mut camera_streams = BTreeMap::new();
    for (c, (cam_id, cam)) in calib.cameras.iter().enumerate() {
        let jitter = cfg.timestamp_jitter_us as i64;
        // Offsets clear the jitter window so no image crosses a sweep boundary.
        let offset = jitter + CAMERA_OFFSET_STEP_US as i64 * (c as i64 + 1);
        let mut times: Vec<Micros> = Vec::new();
        let mut j = -1i64;
        loop {
            let base = SCENE_T0 as i64 + offset + j * cp;
            if base > timing.end as i64 + cp {
                break;
            }
            let jit = if jitter > 0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0
            };
            times.push((base + jit) as Micros);
            j += 1;
        }
        for &tp in &planted_times {
            let nearest = nearest_index(&times, tp);
            times[nearest] = tp;
        }
        let key_idx: Vec<usize> = key_times.iter().map(|&t| nearest_index(&times, t)).collect();
        let mut stream = Vec::new();
        for (j, &t) in times.iter().enumerate() {
            let frame_id = format!("{scene_id}_{cam_id}_{j:04}");
            let rel = PathBuf::from("masks").join(format!("{frame_id}.cmpm"));
            write_mask(&render_mask(cfg, cam, &geo, t), dir.join(&rel))?;
            stream.push(SensorFrame {
                frame_id,
                timestamp: t,
                is_keyframe: key_idx.contains(&j),
                payload_path: rel,
            });
        }
        camera_streams.insert(cam_id.clone(), stream);
    }

    let index = SceneIndex::new(scene_id, lidar_frames, camera_streams, dir)?;
    save_scene_index(&index, dir.join("index.json"))?;
    save_calibration(calib, dir.join("calibration.json"))?;
    Ok(planted_ids)
}

fn nearest_index(times: &[Micros], t: Micros) -> usize {
    let mut best = 0;
    for (i, &x) in times.iter().enumerate() {
        if x.abs_diff(t) < times[best].abs_diff(t) {
            best = i;
        }
    }
    best
}

/// One scene of a generated world, loaded from disk.
#[derive(Clone, Debug)]
pub struct WorldScene {
    pub index: SceneIndex,
    pub calibration: Calibration,
}

impl WorldScene {
    pub fn dir(&self) -> &Path {
        &self.index.base_dir
    }

    pub fn mask_dir(&self) -> PathBuf {
        self.dir().join("masks")
    }

    pub fn point_cloud(&self, frame: &SensorFrame) -> Result<PointCloud> {
        read_point_cloud(self.index.resolve(frame))
    }

    pub fn mask(&self, frame: &SensorFrame) -> Result<SemanticMaskSet> {
        read_mask(self.index.resolve(frame))
    }

    /// Ground-truth class per point of a LiDAR frame.
    pub fn ground_truth(&self, frame: &SensorFrame) -> Result<Vec<u16>> {
        Ok(read_mask(self.dir().join("gt").join(format!("{}.cmpm", frame.frame_id)))?.labels)
    }
}

/// A generated world opened from disk.
#[derive(Clone, Debug)]
pub struct World {
    pub root: PathBuf,
    pub manifest: WorldManifest,
    pub scenes: Vec<WorldScene>,
}

impl World {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(WORLD_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: WorldManifest = serde_json::from_str(&text).map_err(Error::json)?;
        let scenes = manifest
            .scenes
            .iter()
            .map(|id| {
                let dir = root.join(id);
                Ok(WorldScene {
                    index: load_scene_index(dir.join("index.json"))?,
                    calibration: load_calibration(dir.join("calibration.json"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(World { root, manifest, scenes })
    }

    pub fn config(&self) -> &SyntheticWorldConfig {
        &self.manifest.config
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.config().image_h, self.config().image_w)
    }

    /// Locates a frame by id across scenes.
    pub fn find_frame(&self, frame_id: &str) -> Option<(&WorldScene, &SensorFrame)> {
        self.scenes
            .iter()
            .find_map(|s| s.index.find_frame(frame_id).map(|f| (s, f)))
    }
}

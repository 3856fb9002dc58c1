use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Micros;
use crate::error::{Error, Result};

/// One timestamped capture from a single sensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub frame_id: String,
    #[serde(rename = "t_us")]
    pub timestamp: Micros,
    #[serde(rename = "keyframe")]
    pub is_keyframe: bool,
    #[serde(rename = "path")]
    pub payload_path: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIndex {
    scene_id: String,
    n_cam: usize,
    lidar: Vec<SensorFrame>,
    cameras: BTreeMap<String, Vec<SensorFrame>>,
}

/// A validated drive: one LiDAR stream and `n_cam` camera streams.
///
/// Camera ids are ordered lexicographically; "lowest camera id" anywhere in
/// the crate means first in this order. The k-th LiDAR keyframe is matched
/// with the k-th keyframe image of every camera stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneIndex {
    pub scene_id: String,
    pub n_cam: usize,
    pub lidar_frames: Vec<SensorFrame>,
    pub camera_streams: BTreeMap<String, Vec<SensorFrame>>,
    /// Directory that relative payload paths are resolved against.
    pub base_dir: PathBuf,
}

impl SceneIndex {
    /// Builds and validates an index from its parts.
    pub fn new(
        scene_id: impl Into<String>,
        lidar_frames: Vec<SensorFrame>,
        camera_streams: BTreeMap<String, Vec<SensorFrame>>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let index = SceneIndex {
            scene_id: scene_id.into(),
            n_cam: camera_streams.len(),
            lidar_frames,
            camera_streams,
            base_dir: base_dir.into(),
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cam == 0 {
            return Err(Error::Validation("n_cam must be at least 1".into()));
        }
        if self.camera_streams.len() != self.n_cam {
            return Err(Error::Validation(format!(
                "n_cam is {} but {} camera streams are listed",
                self.n_cam,
                self.camera_streams.len()
            )));
        }
        check_monotone("lidar", &self.lidar_frames)?;
        for (cam, stream) in &self.camera_streams {
            check_monotone(&format!("camera {cam}"), stream)?;
        }

        let mut seen = HashSet::new();
        for frame in self.all_frames() {
            if !seen.insert(frame.frame_id.as_str()) {
                return Err(Error::Validation(format!("duplicate frame id {:?}", frame.frame_id)));
            }
        }

        let n_key = self.lidar_keyframes().count();
        for (cam, stream) in &self.camera_streams {
            let k = stream.iter().filter(|f| f.is_keyframe).count();
            if k != n_key {
                return Err(Error::Validation(format!(
                    "camera {cam} has {k} keyframe images but the lidar stream has {n_key} keyframes"
                )));
            }
        }
        Ok(())
    }

    fn all_frames(&self) -> impl Iterator<Item = &SensorFrame> {
        self.lidar_frames.iter().chain(self.camera_streams.values().flatten())
    }

    pub fn lidar_keyframes(&self) -> impl Iterator<Item = &SensorFrame> {
        self.lidar_frames.iter().filter(|f| f.is_keyframe)
    }

    pub fn camera_ids(&self) -> impl Iterator<Item = &str> {
        self.camera_streams.keys().map(String::as_str)
    }

    /// Keyframe images matched with the `k`-th LiDAR keyframe, keyed by camera.
    pub fn keyframe_images(&self, k: usize) -> Option<BTreeMap<String, SensorFrame>> {
        self.camera_streams
            .iter()
            .map(|(cam, stream)| {
                stream
                    .iter()
                    .filter(|f| f.is_keyframe)
                    .nth(k)
                    .map(|f| (cam.clone(), f.clone()))
            })
            .collect()
    }

    pub fn resolve(&self, frame: &SensorFrame) -> PathBuf {
        self.base_dir.join(&frame.payload_path)
    }

    pub fn find_frame(&self, frame_id: &str) -> Option<&SensorFrame> {
        self.all_frames().find(|f| f.frame_id == frame_id)
    }

    pub fn to_json(&self) -> String {
        let raw = RawIndex {
            scene_id: self.scene_id.clone(),
            n_cam: self.n_cam,
            lidar: self.lidar_frames.clone(),
            cameras: self.camera_streams.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("index serialization is infallible")
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawIndex = serde_json::from_str(text).map_err(Error::json)?;
        let index = SceneIndex {
            scene_id: raw.scene_id,
            n_cam: raw.n_cam,
            lidar_frames: raw.lidar,
            camera_streams: raw.cameras,
            base_dir: base_dir.into(),
        };
        index.validate()?;
        Ok(index)
    }
}

fn check_monotone(name: &str, frames: &[SensorFrame]) -> Result<()> {
    for pair in frames.windows(2) {
        if pair[1].timestamp <= pair[0].timestamp {
            return Err(Error::Validation(format!(
                "stream {name}: timestamps not strictly increasing at frame {:?} ({} after {})",
                pair[1].frame_id, pair[1].timestamp, pair[0].timestamp
            )));
        }
    }
    Ok(())
}

pub fn load_scene_index(path: impl AsRef<Path>) -> Result<SceneIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    SceneIndex::from_json(&text, base)
}

pub fn save_scene_index(index: &SceneIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, index.to_json()).map_err(|e| Error::io(path, e))
}

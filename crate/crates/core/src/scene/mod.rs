//! Drives, frames, masks and calibration, plus the on-disk formats every other
//! module reads.
//!
//! A scene directory holds an `index.json` (see [`SceneIndex`]), a
//! `calibration.json`, one `CMPC` point cloud per LiDAR frame and one `CMPM`
//! label grid per camera frame. Frame payload paths inside the index are
//! relative to the index file.

mod binary;
mod calib;
mod index;

pub use binary::{
    decode_mask, decode_point_cloud, encode_mask, encode_point_cloud, read_mask, read_point_cloud, write_mask,
    write_point_cloud, PointCloud, SemanticMaskSet, MASK_MAGIC, POINT_CLOUD_MAGIC,
};
pub use calib::{load_calibration, save_calibration, Calibration, CameraCalibration};
pub use index::{load_scene_index, save_scene_index, SceneIndex, SensorFrame};

/// Timestamps are integer microseconds.
pub type Micros = u64;

//! Conflict-aware LiDAR-camera contrastive pretraining lab.
//!
//! The crate is organised bottom-up: [`scene`] holds the on-disk formats,
//! [`correspondence`] projects points into cameras and pools groups,
//! [`vse`] selects distinct LiDAR sweeps between keyframes, [`losses`]
//! implements the contrastive objectives with analytic gradients,
//! [`pretrain`] trains toy encoders on synthetic worlds and [`eval`] probes
//! the result.

pub mod correspondence;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod pretrain;
pub mod scene;
pub mod seed;
pub mod vse;

pub use correspondence::{
    mask_miou, points_to_groups, pool_groups, project_points, GroupedEmbeddings, PointGroupSet, ProjectionResult,
};
pub use error::{Error, Result};
pub use losses::{cccl_loss, combined_objective, iccl_loss, nce_loss, Aggregation, Contrast, LossReport, LossWeights};
pub use scene::{Calibration, CameraCalibration, PointCloud, SceneIndex, SemanticMaskSet, SensorFrame};
pub use vse::{run_vse, DirMaskStore, MaskStore, SelectionReport, SweepPair};

//! Synthetic worlds, toy encoders and the SGD training loop.

pub mod checkpoint;
pub mod image_encoder;
pub mod model;
pub mod optim;
pub mod train;
pub mod world;

pub use checkpoint::Checkpoint;
pub use image_encoder::{FrozenImageEncoder, ImageEncoderConfig};
pub use model::{Model, ModelConfig};
pub use optim::{cosine_lr, Sgd};
pub use train::{train, Method, TrainConfig, TrainOutcome};
pub use world::{generate_world, SyntheticWorldConfig, World, WorldScene};

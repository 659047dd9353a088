//! Synthetic data, dataset files, keypoint ingestion and the observation
//! encoder that turns keypoints into per-frame features.

pub mod dataset;
pub mod generator;
pub mod keypoints;
pub mod observation;

pub use dataset::{read_dataset, write_dataset};
pub use generator::{generate_dataset, generate_sequence, GeneratorConfig, SyntheticSequence};
pub use keypoints::{ingest_keypoints, parse_keypoints, Crop, KeypointFile, Observations};
pub use observation::{observation_tensor, ObservationEncoder};

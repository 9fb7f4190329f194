//! Speech-based classification of Parkinson's-disease medication state (ON vs. OFF).
//!
//! The crate covers the whole processing chain: energy-based speech/non-speech
//! segmentation, GMM-UBM therapist removal, acoustic feature extraction,
//! per-speaker feedforward classifiers and the task-partitioned evaluation
//! protocol. A parametric corpus generator ([`synthcorpus`]) provides recordings
//! with known ground truth for end-to-end verification.

pub mod error;
pub mod experiment;
pub mod features;
pub mod neuralnet;
pub mod pipeline;
pub mod seed;
pub mod segmentation;
pub mod signalio;
pub mod speakerid;
pub mod synthcorpus;

pub use error::{Error, Result};
pub use signalio::{AudioClip, MedState, RecordingMeta, TaskKind};

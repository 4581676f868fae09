//! Unsupervised character re-identification on precomputed embeddings.
//!
//! Faces and bodies are clustered into pseudo-identities, the two label sets
//! are fused through the face-body pairing, and a linear-plus-normalization
//! head per part is fine-tuned with a classification loss and a triplet loss
//! whose mining is biased by frame position. A synthetic world generator
//! provides ground truth for evaluation.

pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod matrix;
pub mod stmetric;
pub mod synth;
pub mod trainer;

pub use cluster::{dbscan, kmeans, ClusterAssignment, DbscanParams, SoftLabel};
pub use config::{EvalOptions, PipelineConfig};
pub use data::{load_samples, DatasetSplit, FaceBodyGraph, GraphPair, Part, Sample, SampleSet};
pub use error::{FsacError, Result};
pub use eval::{evaluate, MetricsReport, Ranking};
pub use experiment::{ablation_suite, sweep, AblationTable, SweepCurve, SweepParam, Variant};
pub use fusion::{fuse_labels, FusedLabels};
pub use matrix::Matrix;
pub use stmetric::{st_distance, MiningMode, StParams};
pub use synth::{generate_world, World, WorldConfig, WorldStats};
pub use trainer::{run_fsac, ClusterConfig, EmbeddingHead, TrainConfig, TrainOutcome};

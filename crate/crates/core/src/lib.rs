//! Evaluation harness for GUI agents on engineering-design software
//! screenshots: dataset ingestion, model backends, the dual-strategy click
//! router, scoring, statistics and resumable runs.

pub mod analytics;
pub mod backends;
pub mod bundle;
pub mod config;
pub mod ingestion;
pub mod model;
pub mod report;
pub mod router;
pub mod runner;
pub mod scoring;
pub mod synthetic;

pub use analytics::{FeatureVector, HeatGrid, Phase};
pub use backends::{BackendError, BackendId, Dispatcher, ModelBackend, RetryPolicy, Role, SharedBackend};
pub use config::{Config, ConfigError};
pub use ingestion::{Dataset, IngestError, Sample, SampleView};
pub use model::{
    BBox, ComboTag, CropSpec, DifficultyTag, FieldTag, ImageMeta, ModelError, NormPoint, PixelPoint, SoftwareTag,
    ViewLabel,
};
pub use router::{RouterConfig, RouterFailure, Strategy, StrategyOutcome};
pub use runner::{ItemKey, ResultRecord, RunError, RunManifest, RunOptions, RunSummary};
pub use scoring::{ActionScore, AggregateRow, AnswerScore, ScoreRecord};

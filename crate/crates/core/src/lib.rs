pub mod alignment;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod experiments;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod output;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};

pub use alignment::LinearAligner;
pub use config::{Preset, RunConfig, Variant};
pub use data::{Dataset, ImageGrid, ImageSample, Split};
pub use experiments::{CrossSubjectTable, ResultTable, SweepResult};
pub use losses::{LossConfig, LossVariant};
pub use metrics::MetricsReport;
pub use pipeline::{Checkpoint, Foundation, Stage};

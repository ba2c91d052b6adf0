//! Dataset manifests, corrupted streams, evaluation and the benchmark grid.

mod benchmark;
mod evaluate;
mod manifest;
mod report;
mod stream;

pub use benchmark::{
    replay, run_benchmark, BenchmarkConfig, BenchmarkPlan, CalibrationSetup, CellReport, Method, RunReport,
    TemplateSource,
};
pub use evaluate::{evaluate, Evaluation};
pub use manifest::{load_manifest, parse_manifest, write_dataset, DatasetManifest, ManifestEntry};
pub use report::{method_mean, render, ReportFormat};
pub use stream::{corrupt_stream, CorruptStream, CorruptionChain, ItemError, Sample, StreamItem};

//! Workload generation, the end-to-end pipeline and its report.

pub mod pipeline;
pub mod report;
pub mod workload;

pub use pipeline::{run_pipeline, FifoOptions, PipelineError, PipelineOptions, PipelineOutput};
pub use report::{compute_compression, ReportError, TraceReport};
pub use workload::{generate_workload, loop_workload, serialize_lanes, Workload, WorkloadError, WorkloadParams};

//! Benchmark harness: workloads, the discrete-event driver, metrics and
//! fits, interference, and the rate sweep that emits CSV.

mod bench;
mod interference;
mod metrics;
mod sim;
mod workload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bench::{run_bench, run_invariants, timings, workload_for, write_csv, BenchOptions, BenchReport, BenchRow, CSV_HEADER};
pub use interference::{inject_interference, InterferenceConfig, InterferenceMode, Interferer, HOG_BUFFER_BYTES};
pub use metrics::{
    average_by_load, compute_metrics, fit_saturation, percentile, ratios, serviceable_load, summarize_range,
    Aggregate, RangeSummary, RatePoint, Ratios, RequestTiming, Summary,
};
pub use sim::{simulate, SimOutcome};
pub use workload::{generate, load_trace, parse_trace, ArrivalProcess, LengthDist, WorkItem, WorkloadSpec};

use crate::engine::EngineError;
use crate::frontend::FrontendError;
use crate::ring::RingError;
use crate::scheduler::SchedulerError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("trace file: {0}")]
    Trace(String),
    #[error("no request records")]
    NoRecords,
    #[error("need at least 4 distinct loads, got {0}")]
    InsufficientPoints(usize),
    #[error("throughput curve has no plateau")]
    DegenerateCurve,
    #[error("simulation stalled with {finished}/{total} requests finished")]
    Stalled { finished: usize, total: usize },
    #[error("submission failed: {0}")]
    Submit(String),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
}

/// Thirteen offered loads from 1 to 32 req/s, before load scaling.
pub const DEFAULT_RATES: [f64; 13] = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 20.0, 24.0, 28.0, 32.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub rates: Vec<f64>,
    /// Multiplies every rate so a sweep straddles this machine's knee.
    pub load_scale: f64,
    pub requests_per_rate: Option<usize>,
    pub duration_s: Option<f64>,
    /// Requests arriving before this are excluded from metrics.
    pub warmup_seconds: f64,
    pub arrival: ArrivalProcess,
    pub input: LengthDist,
    pub output: LengthDist,
    pub trace_file: Option<String>,
    pub seed: u64,
    pub repeats: usize,
    /// Delay before resubmitting a request the ring had no room for.
    pub retry_ms: f64,
    /// Host overhead scale under interference on the virtual clock.
    pub interference_multiplier: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            rates: DEFAULT_RATES.to_vec(),
            load_scale: 0.25,
            requests_per_rate: Some(200),
            duration_s: None,
            warmup_seconds: 0.0,
            arrival: ArrivalProcess::Poisson,
            input: LengthDist::chat_input(),
            output: LengthDist::chat_output(),
            trace_file: None,
            seed: 1,
            repeats: 1,
            retry_ms: 1.0,
            interference_multiplier: 3.0,
        }
    }
}

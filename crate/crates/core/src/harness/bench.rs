use std::io::Write;

use serde::Serialize;

use super::interference::{inject_interference, InterferenceConfig, InterferenceMode};
use super::metrics::{compute_metrics, fit_saturation, serviceable_load, summarize_range, Aggregate, RangeSummary, RatePoint, RequestTiming};
use super::sim::{simulate, SimOutcome};
use super::workload::{generate, load_trace, WorkloadSpec};
use super::HarnessError;
use crate::config::SystemConfig;
use crate::frontend::RequestStatus;
use crate::scheduler::{HostOverheadModel, SchedulerMode};

pub const CSV_HEADER: &str = "rate,mode,interference,throughput_rps,throughput_tps,ttft_p50,ttft_p95,ttft_p99,ttft_p999,ttft_mean,tpot_p50,tpot_p95,tpot_p99,tpot_p999,tpot_mean,itl_p50,itl_p99,itl_p999";

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub mode: SchedulerMode,
    pub interference_threads: usize,
    /// Overrides the configured sweep (before load scaling).
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    /// Offered load after scaling, requests per second.
    pub rate: f64,
    pub mode: SchedulerMode,
    pub interference: usize,
    pub repeat: usize,
    pub seed: u64,
    pub aggregate: Aggregate,
    pub retries: u64,
    pub decode_steps: u64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let a = &self.aggregate;
        let f = |v: f64| format!("{v:.6}");
        [
            f(self.rate),
            self.mode.to_string(),
            self.interference.to_string(),
            f(a.throughput_rps),
            f(a.throughput_tps),
            f(a.ttft.p50),
            f(a.ttft.p95),
            f(a.ttft.p99),
            f(a.ttft.p999),
            f(a.ttft.mean),
            f(a.tpot.p50),
            f(a.tpot.p95),
            f(a.tpot.p99),
            f(a.tpot.p999),
            f(a.tpot.mean),
            f(a.itl.p50),
            f(a.itl.p99),
            f(a.itl.p999),
        ]
        .join(",")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub lambda_star: Option<f64>,
    pub range: Option<RangeSummary>,
    pub serviceable_load: f64,
    pub invariant_failures: Vec<String>,
}

pub fn write_csv(rows: &[BenchRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Workload for one offered load, from the harness section.
pub fn workload_for(cfg: &SystemConfig, rate: f64) -> Result<WorkloadSpec, HarnessError> {
    let h = &cfg.harness;
    let trace = match &h.trace_file {
        Some(p) => Some(load_trace(std::path::Path::new(p))?),
        None => None,
    };
    Ok(WorkloadSpec {
        arrival: h.arrival,
        rate,
        count: h.requests_per_rate,
        duration_s: h.duration_s,
        input: h.input.clone(),
        output: h.output.clone(),
        trace,
        vocab_size: cfg.engine.vocab_size,
    })
}

/// Client-side timings of a finished run.
pub fn timings(out: &SimOutcome, warmup_s: f64) -> Vec<RequestTiming> {
    out.records
        .iter()
        .filter(|r| r.arrival.as_secs_f64() >= warmup_s)
        .map(|r| RequestTiming {
            arrival: r.arrival,
            submitted: r.submitted,
            first_token: r.first_token,
            last_token: r.last_token,
            token_times: r.token_times.clone(),
        })
        .collect()
}

/// Structural checks on a finished run; empty when everything holds.
pub fn run_invariants(out: &SimOutcome) -> Vec<String> {
    let mut bad = Vec::new();
    if out.one_sided_audit != 0 {
        bad.push(format!("{} transfers invoked device code", out.one_sided_audit));
    }
    if out.rejected_transitions != 0 {
        bad.push(format!("{} illegal state transitions", out.rejected_transitions));
    }
    if let Some(leak) = &out.kv_leak {
        bad.push(format!("kv pool: {leak}"));
    }
    let failed = out.records.iter().filter(|r| r.status != RequestStatus::Done).count();
    if failed > 0 {
        bad.push(format!("{failed} requests did not finish"));
    }
    let mut by_id: std::collections::HashMap<u64, &[u32]> = std::collections::HashMap::new();
    for c in &out.completions {
        by_id.insert(c.request_id, &c.tokens);
    }
    let mismatched = out
        .records
        .iter()
        .filter(|r| by_id.get(&r.request_id).is_none_or(|t| *t != r.tokens.as_slice()))
        .count();
    if mismatched > 0 {
        bad.push(format!("{mismatched} requests streamed tokens differing from the device's"));
    }
    bad
}

/// Sweeps the configured rates for one mode, optionally under interference.
pub fn run_bench(cfg: &SystemConfig, opts: &BenchOptions) -> Result<BenchReport, HarnessError> {
    let h = &cfg.harness;
    let rates: Vec<f64> = opts
        .rates
        .clone()
        .unwrap_or_else(|| h.rates.clone())
        .into_iter()
        .map(|r| r * h.load_scale)
        .collect();
    if rates.is_empty() {
        return Err(HarnessError::InvalidSpec("no rates to sweep".into()));
    }
    let mut cfg = cfg.clone();
    cfg.scheduler.mode = opts.mode;

    let interferer = if opts.interference_threads > 0 {
        let mode = match cfg.host.overhead_model {
            HostOverheadModel::Measured { .. } => InterferenceMode::Wall,
            _ => InterferenceMode::Virtual {
                multiplier: h.interference_multiplier,
            },
        };
        Some(inject_interference(InterferenceConfig {
            threads: opts.interference_threads,
            mode,
        })?)
    } else {
        None
    };
    if let Some(i) = &interferer {
        cfg.host = i.apply(&cfg.host);
    }

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (ri, &rate) in rates.iter().enumerate() {
        for repeat in 0..h.repeats.max(1) {
            let seed = h.seed ^ ((ri as u64) << 32) ^ repeat as u64;
            let work = generate(&workload_for(&cfg, rate)?, seed)?;
            if work.is_empty() {
                continue;
            }
            let out = simulate(&cfg, &work)?;
            for f in run_invariants(&out) {
                failures.push(format!("rate {rate}: {f}"));
            }
            let agg = compute_metrics(&timings(&out, h.warmup_seconds))?;
            if let Err(e) = agg.check() {
                failures.push(format!("rate {rate}: {e}"));
            }
            rows.push(BenchRow {
                rate,
                mode: opts.mode,
                interference: opts.interference_threads,
                repeat,
                seed,
                aggregate: agg,
                retries: out.retries,
                decode_steps: out.sched.decode_steps,
            });
        }
    }
    drop(interferer);

    let curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.rate, r.aggregate.throughput_rps)).collect();
    let lambda_star = fit_saturation(&curve).ok();
    let points: Vec<RatePoint> = rows
        .iter()
        .map(|r| RatePoint {
            rate: r.rate,
            p99_ttft_ms: r.aggregate.ttft.p99,
            p99_tpot_ms: r.aggregate.tpot.p99,
            throughput_rps: r.aggregate.throughput_rps,
        })
        .collect();
    let range = lambda_star.and_then(|l| summarize_range(&points, l).ok());
    Ok(BenchReport {
        serviceable_load: serviceable_load(&super::metrics::average_by_load(&curve)),
        rows,
        lambda_star,
        range,
        invariant_failures: failures,
    })
}

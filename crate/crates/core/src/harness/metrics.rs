use std::time::Duration;

use serde::Serialize;

use super::HarnessError;
use crate::clock::millis_f64;

/// Client-observed timing of one request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestTiming {
    pub arrival: Duration,
    pub submitted: Option<Duration>,
    pub first_token: Option<Duration>,
    pub last_token: Option<Duration>,
    /// Delivery time of every output token, in order.
    pub token_times: Vec<Duration>,
}

impl RequestTiming {
    pub fn output_tokens(&self) -> usize {
        self.token_times.len()
    }
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `ceil(p/100 * n)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Percentile summary in milliseconds. All fields are NaN when `count == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub p999: f64,
    pub mean: f64,
    /// Geometric mean over the strictly positive values.
    pub geo_mean: f64,
}

impl Summary {
    pub fn of(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
        let geo_mean = if pos.is_empty() {
            f64::NAN
        } else {
            (pos.iter().map(|v| v.ln()).sum::<f64>() / pos.len() as f64).exp()
        };
        Self {
            count: n,
            p50: percentile(&values, 50.0),
            p95: percentile(&values, 95.0),
            p99: percentile(&values, 99.0),
            p999: percentile(&values, 99.9),
            mean,
            geo_mean,
        }
    }

    /// Percentiles nondecreasing in p, and geometric <= arithmetic mean
    /// (up to rounding) over the positive values.
    pub fn check(&self) -> Result<(), String> {
        if self.count == 0 {
            return Ok(());
        }
        let seq = [self.p50, self.p95, self.p99, self.p999];
        if seq.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("percentiles not monotone: {seq:?}"));
        }
        if self.geo_mean.is_finite() && self.geo_mean > self.mean * (1.0 + 1e-9) {
            return Err(format!("geometric mean {} exceeds mean {}", self.geo_mean, self.mean));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub requests: usize,
    pub output_tokens: usize,
    /// First arrival to last delivered token, seconds.
    pub span_s: f64,
    pub throughput_rps: f64,
    pub throughput_tps: f64,
    pub ttft: Summary,
    pub tpot: Summary,
    pub itl: Summary,
}

impl Aggregate {
    pub fn check(&self) -> Result<(), String> {
        self.ttft.check().map_err(|e| format!("ttft: {e}"))?;
        self.tpot.check().map_err(|e| format!("tpot: {e}"))?;
        self.itl.check().map_err(|e| format!("itl: {e}"))
    }
}

/// TTFT = first_token - arrival; TPOT = (last - first) / (n - 1) for n >= 2;
/// ITL = gaps between consecutive tokens. Requests with no tokens count
/// toward neither latency nor throughput.
pub fn compute_metrics(records: &[RequestTiming]) -> Result<Aggregate, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let mut ttft = Vec::with_capacity(records.len());
    let mut tpot = Vec::new();
    let mut itl = Vec::new();
    let mut done = 0;
    let mut tokens = 0;
    let start = records.iter().map(|r| r.arrival).min().unwrap();
    let mut end = start;
    for r in records {
        let (Some(first), Some(last)) = (r.first_token, r.last_token) else { continue };
        let n = r.output_tokens();
        done += 1;
        tokens += n;
        end = end.max(last);
        ttft.push(millis_f64(first.saturating_sub(r.arrival)));
        if n >= 2 {
            tpot.push(millis_f64(last.saturating_sub(first)) / (n - 1) as f64);
        }
        itl.extend(r.token_times.windows(2).map(|w| millis_f64(w[1].saturating_sub(w[0]))));
    }
    let span_s = (end - start).as_secs_f64();
    let rate = |x: usize| if span_s > 0.0 { x as f64 / span_s } else { 0.0 };
    Ok(Aggregate {
        requests: done,
        output_tokens: tokens,
        span_s,
        throughput_rps: rate(done),
        throughput_tps: rate(tokens),
        ttft: Summary::of(ttft),
        tpot: Summary::of(tpot),
        itl: Summary::of(itl),
    })
}

/// Knee of a throughput curve by two-segment least squares: a line through
/// the origin up to the breakpoint, then a plateau at the line's value there
/// (`y = a * min(x, b)`). Each swept load below the largest is a candidate
/// `b`. Repeated loads are averaged first. Ties go to the larger breakpoint.
///
/// Pinning the plateau to the line keeps a couple of noisy points just past
/// the knee from pulling the breakpoint two levels early, which a free
/// plateau level allows.
pub fn fit_saturation(points: &[(f64, f64)]) -> Result<f64, HarnessError> {
    let curve = average_by_load(points);
    if curve.len() < 4 {
        return Err(HarnessError::InsufficientPoints(curve.len()));
    }
    let sxy: f64 = curve.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = curve.iter().map(|(x, _)| x * x).sum();
    let a = sxy / sxx;
    let max_y = curve.iter().map(|(_, y)| y.abs()).fold(0.0, f64::max);
    if curve.iter().all(|(x, y)| (y - a * x).abs() <= 1e-9 * max_y.max(1e-300)) {
        return Err(HarnessError::DegenerateCurve);
    }
    let scale = curve.iter().map(|(_, y)| y * y).sum::<f64>().max(f64::MIN_POSITIVE);
    let eps = 1e-12 * scale;
    let mut best = (f64::INFINITY, 0.0);
    for &(b, _) in &curve[..curve.len() - 1] {
        let m = |x: f64| x.min(b);
        let num: f64 = curve.iter().map(|&(x, y)| m(x) * y).sum();
        let den: f64 = curve.iter().map(|&(x, _)| m(x) * m(x)).sum();
        let a = num / den;
        let sse: f64 = curve.iter().map(|&(x, y)| (y - a * m(x)).powi(2)).sum();
        if sse < best.0 - eps || (sse - best.0).abs() <= eps {
            best = (sse, b);
        }
    }
    Ok(best.1)
}

/// Mean `y` per distinct `x`, ascending in `x`.
pub fn average_by_load(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for (x, y) in sorted {
        match out.last_mut() {
            Some(last) if last.0 == x => {
                last.1 += y;
                last.2 += 1;
            }
            _ => out.push((x, y, 1)),
        }
    }
    out.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect()
}

/// Largest offered load whose achieved throughput is at least 95% of it;
/// 0 if none.
pub fn serviceable_load(curve: &[(f64, f64)]) -> f64 {
    curve
        .iter()
        .filter(|(x, y)| *y >= 0.95 * x)
        .map(|(x, _)| *x)
        .fold(0.0, f64::max)
}

/// One rate's headline numbers (possibly one of several repeats).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub rate: f64,
    pub p99_ttft_ms: f64,
    pub p99_tpot_ms: f64,
    pub throughput_rps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangeSummary {
    pub lambda_star: f64,
    pub geo_p99_ttft_ms: f64,
    pub geo_p99_tpot_ms: f64,
    pub throughput_at_star: f64,
}

fn geo_mean(v: &[f64]) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// Geometric means of the rate-averaged P99 curves over loads up to
/// `lambda_star`, plus the averaged throughput at the largest such load.
pub fn summarize_range(points: &[RatePoint], lambda_star: f64) -> Result<RangeSummary, HarnessError> {
    let pick = |f: fn(&RatePoint) -> f64| {
        average_by_load(&points.iter().map(|p| (p.rate, f(p))).collect::<Vec<_>>())
            .into_iter()
            .filter(|(x, _)| *x <= lambda_star * (1.0 + 1e-12))
            .collect::<Vec<_>>()
    };
    let ttft = pick(|p| p.p99_ttft_ms);
    if ttft.is_empty() {
        return Err(HarnessError::InvalidSpec(format!("no rates at or below {lambda_star}")));
    }
    let tpot = pick(|p| p.p99_tpot_ms);
    let thr = pick(|p| p.throughput_rps);
    let vals = |c: &[(f64, f64)]| c.iter().map(|(_, y)| *y).filter(|y| y.is_finite()).collect::<Vec<_>>();
    Ok(RangeSummary {
        lambda_star,
        geo_p99_ttft_ms: geo_mean(&vals(&ttft)),
        geo_p99_tpot_ms: geo_mean(&vals(&tpot)),
        throughput_at_star: thr.last().unwrap().1,
    })
}

/// Interference over isolation, per headline metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ratios {
    pub p99_ttft: f64,
    pub p99_tpot: f64,
    pub throughput: f64,
}

pub fn ratios(isolated: &RangeSummary, interfered: &RangeSummary) -> Ratios {
    Ratios {
        p99_ttft: interfered.geo_p99_ttft_ms / isolated.geo_p99_ttft_ms,
        p99_tpot: interfered.geo_p99_tpot_ms / isolated.geo_p99_tpot_ms,
        throughput: interfered.throughput_at_star / isolated.throughput_at_star,
    }
}

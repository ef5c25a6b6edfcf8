use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    FixedInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { value: u32 },
    Uniform { min: u32, max: u32 },
    /// Log-normal with the given mean, clipped to `[1, max]`.
    LogNormal { mean: f64, sigma: f64, max: u32 },
}

impl LengthDist {
    /// Synthetic stand-in for chat-trace prompt lengths (mean about 1019).
    pub fn chat_input() -> Self {
        LengthDist::LogNormal {
            mean: 1019.0,
            sigma: 1.0,
            max: 4096,
        }
    }

    /// Synthetic stand-in for chat-trace output lengths (mean about 463).
    pub fn chat_output() -> Self {
        LengthDist::LogNormal {
            mean: 463.0,
            sigma: 1.0,
            max: 2048,
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let ok = match *self {
            LengthDist::Fixed { value } => value >= 1,
            LengthDist::Uniform { min, max } => min >= 1 && min <= max,
            LengthDist::LogNormal { mean, sigma, max } => mean >= 1.0 && sigma >= 0.0 && max >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::InvalidSpec(format!("bad length distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
            LengthDist::LogNormal { mean, sigma, max } => {
                let mu = mean.ln() - sigma * sigma / 2.0;
                let d = LogNormal::new(mu, sigma).expect("valid lognormal");
                (d.sample(rng).round() as u32).clamp(1, max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    /// Requests per second.
    pub rate: f64,
    /// Number of requests; takes precedence over `duration_s`.
    pub count: Option<usize>,
    pub duration_s: Option<f64>,
    pub input: LengthDist,
    pub output: LengthDist,
    /// `(input_len, output_len)` pairs used in order, cycling, instead of
    /// the distributions.
    pub trace: Option<Vec<(u32, u32)>>,
    /// Token ids are drawn from `[3, vocab_size)`.
    pub vocab_size: u32,
}

impl WorkloadSpec {
    pub fn fixed(count: usize, rate: f64, input: u32, output: u32) -> Self {
        Self {
            arrival: ArrivalProcess::Poisson,
            rate,
            count: Some(count),
            duration_s: None,
            input: LengthDist::Fixed { value: input },
            output: LengthDist::Fixed { value: output },
            trace: None,
            vocab_size: 32000,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!("rate must be > 0, got {}", self.rate)));
        }
        if self.count.is_none() && !self.duration_s.is_some_and(|d| d > 0.0) {
            return Err(HarnessError::InvalidSpec("need a request count or a positive duration".into()));
        }
        if self.vocab_size <= 3 {
            return Err(HarnessError::InvalidSpec("vocab_size must exceed 3".into()));
        }
        match &self.trace {
            Some(t) if t.is_empty() => return Err(HarnessError::InvalidSpec("trace is empty".into())),
            Some(t) if t.iter().any(|&(i, o)| i == 0 || o == 0) => {
                return Err(HarnessError::InvalidSpec("trace lengths must be >= 1".into()))
            }
            Some(_) => {}
            None => {
                self.input.validate()?;
                self.output.validate()?;
            }
        }
        Ok(())
    }
}

/// One scheduled request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkItem {
    pub arrival: Duration,
    pub prompt: Vec<u32>,
    pub max_output: u32,
    pub seed: u64,
}

/// Deterministic arrival schedule for `spec`.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Result<Vec<WorkItem>, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(spec.rate).expect("rate validated");
    let limit = spec.count.unwrap_or(usize::MAX);
    let horizon = spec.duration_s.unwrap_or(f64::INFINITY);
    let mut out = Vec::new();
    let mut t = 0.0f64;
    while out.len() < limit {
        t = match spec.arrival {
            ArrivalProcess::Poisson => t + gap.sample(&mut rng),
            ArrivalProcess::FixedInterval => (out.len() + 1) as f64 / spec.rate,
        };
        if spec.count.is_none() && t >= horizon {
            break;
        }
        let (input, output) = match &spec.trace {
            Some(tr) => tr[out.len() % tr.len()],
            None => (spec.input.sample(&mut rng), spec.output.sample(&mut rng)),
        };
        let prompt = (0..input).map(|_| rng.random_range(3..spec.vocab_size)).collect();
        out.push(WorkItem {
            arrival: Duration::from_secs_f64(t),
            prompt,
            max_output: output,
            seed: rng.random(),
        });
    }
    Ok(out)
}

/// Parses a trace of `input_len,output_len` lines. A non-numeric first line
/// is treated as a header; blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<(u32, u32)>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (a, b) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        match (a.parse::<u32>(), b.parse::<u32>()) {
            (Ok(x), Ok(y)) => out.push((x, y)),
            _ if out.is_empty() && i == 0 => continue,
            _ => return Err(HarnessError::Trace(format!("line {}: expected input_len,output_len", i + 1))),
        }
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<(u32, u32)>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Trace(format!("{}: {e}", path.display())))?;
    parse_trace(&text)
}

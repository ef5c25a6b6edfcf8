//! Host round trip used by the host-mediated scheduling mode.

use std::sync::mpsc;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{from_micros_f64, from_millis_f64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HostOverheadModel {
    Fixed { ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
    /// Real pointer-chasing work on a host thread, sized to take `target_ms`
    /// on an idle machine and timed with the wall clock.
    Measured { target_ms: f64 },
}

impl Default for HostOverheadModel {
    fn default() -> Self {
        HostOverheadModel::Uniform {
            min_ms: 1.6,
            max_ms: 7.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HostConfig {
    pub overhead_model: HostOverheadModel,
    /// Scales every sampled overhead; models interference on a virtual clock.
    pub multiplier: f64,
    pub launch_us_min: f64,
    pub launch_us_max: f64,
    pub seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            overhead_model: HostOverheadModel::default(),
            multiplier: 1.0,
            launch_us_min: 11.0,
            launch_us_max: 17.0,
            seed: 0x5eed,
        }
    }
}

const CHASE_LEN: usize = 1 << 20;

/// Single-cycle random permutation walked by the host thread.
fn chase_table(seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next: Vec<u32> = (0..CHASE_LEN as u32).collect();
    // Sattolo's algorithm
    for i in (1..CHASE_LEN).rev() {
        let j = rng.random_range(0..i);
        next.swap(i, j);
    }
    next
}

fn chase(table: &mut [u32], start: u32, steps: u64) -> u32 {
    let mut idx = start as usize;
    for _ in 0..steps {
        let n = table[idx];
        // data-dependent write keeps the line dirty
        table[idx] = n;
        idx = n as usize;
    }
    idx as u32
}

/// Chase steps per millisecond on this machine, measured once while idle.
pub fn calibrated_steps_per_ms() -> f64 {
    static RATE: OnceLock<f64> = OnceLock::new();
    *RATE.get_or_init(|| {
        let mut table = chase_table(1);
        let steps = 200_000;
        let mut pos = 0;
        let mut best = f64::MAX;
        for _ in 0..5 {
            let t = Instant::now();
            pos = chase(&mut table, pos, steps);
            best = best.min(t.elapsed().as_secs_f64());
        }
        std::hint::black_box(pos);
        steps as f64 / (best * 1e3)
    })
}

/// Dedicated, unpinned host thread doing calibrated work on request.
#[derive(Debug)]
struct HostWorker {
    tx: mpsc::Sender<u64>,
    rx: mpsc::Receiver<()>,
    steps: u64,
}

impl HostWorker {
    fn spawn(target_ms: f64) -> Self {
        let steps = (calibrated_steps_per_ms() * target_ms).max(1.0) as u64;
        let (tx, work_rx) = mpsc::channel::<u64>();
        let (done_tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("host-plane".into())
            .spawn(move || {
                let mut table = chase_table(2);
                let mut pos = 0;
                while let Ok(steps) = work_rx.recv() {
                    pos = chase(&mut table, pos, steps);
                    if done_tx.send(()).is_err() {
                        break;
                    }
                }
                std::hint::black_box(pos);
            })
            .expect("spawn host thread");
        Self { tx, rx, steps }
    }

    fn run(&self) -> Duration {
        let t = Instant::now();
        self.tx.send(self.steps).expect("host thread alive");
        self.rx.recv().expect("host thread alive");
        t.elapsed()
    }
}

/// Host-side state of the host-mediated mode.
#[derive(Debug)]
pub struct HostPlane {
    cfg: HostConfig,
    rng: ChaCha8Rng,
    worker: Option<HostWorker>,
    buffer: Vec<u32>,
    samples: Vec<Duration>,
}

impl HostPlane {
    pub fn new(cfg: HostConfig) -> Self {
        let worker = match cfg.overhead_model {
            HostOverheadModel::Measured { target_ms } => Some(HostWorker::spawn(target_ms)),
            _ => None,
        };
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            worker,
            buffer: Vec::new(),
            samples: Vec::new(),
        }
    }

    /// One overhead sample, multiplier applied.
    pub fn sample_overhead(&mut self) -> Duration {
        let base = match self.cfg.overhead_model {
            HostOverheadModel::Fixed { ms } => from_millis_f64(ms),
            HostOverheadModel::Uniform { min_ms, max_ms } => {
                let ms = if max_ms > min_ms {
                    self.rng.random_range(min_ms..=max_ms)
                } else {
                    min_ms
                };
                from_millis_f64(ms)
            }
            HostOverheadModel::Measured { .. } => self.worker.as_ref().expect("worker").run(),
        };
        base.mul_f64(self.cfg.multiplier.max(0.0))
    }

    /// Copies sampled tokens to the host buffer and reassembles the batch.
    /// Returns the simulated duration of the round trip.
    pub fn round_trip(&mut self, tokens: &[u32]) -> Duration {
        self.buffer.clear();
        self.buffer.extend_from_slice(tokens);
        let d = self.sample_overhead();
        self.samples.push(d);
        d
    }

    pub fn launch_cost(&mut self) -> Duration {
        let (lo, hi) = (self.cfg.launch_us_min, self.cfg.launch_us_max);
        let us = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        from_micros_f64(us)
    }

    /// Every round-trip overhead observed so far.
    pub fn samples(&self) -> &[Duration] {
        &self.samples
    }
}

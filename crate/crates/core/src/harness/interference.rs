use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::scheduler::HostConfig;

/// Bytes walked by each hog thread.
pub const HOG_BUFFER_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterferenceMode {
    /// Real CPU hogs competing with every other thread.
    Wall,
    /// No threads; host overheads are scaled instead.
    Virtual { multiplier: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceConfig {
    pub threads: usize,
    pub mode: InterferenceMode,
}

/// Running interference. Hogs stop when this is dropped.
#[derive(Debug)]
pub struct Interferer {
    mode: InterferenceMode,
    stop: Arc<AtomicBool>,
    work: Arc<AtomicU64>,
    handles: Vec<JoinHandle<()>>,
}

pub fn inject_interference(cfg: InterferenceConfig) -> Result<Interferer, HarnessError> {
    if cfg.threads == 0 {
        return Err(HarnessError::InvalidSpec("interference needs at least one thread".into()));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let work = Arc::new(AtomicU64::new(0));
    let mut handles = Vec::new();
    if cfg.mode == InterferenceMode::Wall {
        for i in 0..cfg.threads {
            let stop = Arc::clone(&stop);
            let work = Arc::clone(&work);
            let h = std::thread::Builder::new()
                .name(format!("hog-{i}"))
                .spawn(move || hog(i as u64, &stop, &work))
                .map_err(|e| HarnessError::InvalidSpec(format!("spawning hog: {e}")))?;
            handles.push(h);
        }
    }
    Ok(Interferer {
        mode: cfg.mode,
        stop,
        work,
        handles,
    })
}

/// Compression-like loop: strided read-modify-write over a large buffer
/// where the next index depends on the data just written.
fn hog(seed: u64, stop: &AtomicBool, work: &AtomicU64) {
    let n = HOG_BUFFER_BYTES / 8;
    let mut buf: Vec<u64> = (0..n as u64).map(|i| i.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed).collect();
    let mut idx = 0usize;
    let mut acc = seed;
    while !stop.load(Ordering::Relaxed) {
        for _ in 0..4096 {
            let v = buf[idx];
            acc = acc.rotate_left(5) ^ v;
            buf[idx] = v.wrapping_add(acc);
            idx = (idx + 4099 + (acc as usize & 0xff) * 8) % n;
        }
        work.fetch_add(4096, Ordering::Relaxed);
    }
    std::hint::black_box(acc);
}

impl Interferer {
    pub fn mode(&self) -> InterferenceMode {
        self.mode
    }

    pub fn threads(&self) -> usize {
        self.handles.len()
    }

    /// Hog iterations so far; shows the hogs actually ran.
    pub fn work_done(&self) -> u64 {
        self.work.load(Ordering::Relaxed)
    }

    /// Host configuration as seen under this interference.
    pub fn apply(&self, host: &HostConfig) -> HostConfig {
        let mut h = host.clone();
        if let InterferenceMode::Virtual { multiplier } = self.mode {
            h.multiplier *= multiplier;
        }
        h
    }

    pub fn stop(self) {}
}

impl Drop for Interferer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

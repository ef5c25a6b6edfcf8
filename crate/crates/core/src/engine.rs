//! Stand-in for pre-captured inference graphs and the model behind them.
//!
//! A [`GraphCache`] holds one descriptor per `(batch, seq)` grid point and
//! phase, with an O(1) tightest-fit lookup and a max-shape fallback. Running
//! a graph samples tokens from a deterministic [`PseudoModel`] and reports a
//! simulated latency; sampling happens here and nowhere else.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::from_millis_f64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("empty {0} grid")]
    EmptyGrid(&'static str),
    #[error("{0} grid must be strictly ascending and positive")]
    UnsortedGrid(&'static str),
    #[error("shape violation: batch {batch} / seq {seq} exceeds graph {key:?}")]
    ShapeViolation { batch: usize, seq: usize, key: GraphKey },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Sentinel capacity of the max-shape fallback graph.
pub const MAX_SHAPE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GraphKey {
    pub batch_capacity: u32,
    pub seq_capacity: u32,
    pub phase: Phase,
}

impl GraphKey {
    pub fn is_fallback(&self) -> bool {
        self.batch_capacity == MAX_SHAPE
    }

    pub fn admits(&self, batch: usize, seq: usize) -> bool {
        batch as u64 <= self.batch_capacity as u64 && seq as u64 <= self.seq_capacity as u64
    }
}

/// Simulated latency coefficients, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyProfile {
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
    pub decode_base_ms: f64,
    pub decode_per_seq_ms: f64,
}

impl Default for LatencyProfile {
    fn default() -> Self {
        LatencyPreset::Llama8b.profile()
    }
}

/// Calibration presets. Decode base follows the median per-token time of
/// the corresponding model class; the rest are round numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LatencyPreset {
    #[default]
    #[serde(rename = "llama8b")]
    Llama8b,
    #[serde(rename = "phi15b")]
    Phi15b,
    #[serde(rename = "qwen32b")]
    Qwen32b,
    #[serde(rename = "qwen30b-a3b")]
    Qwen30bA3b,
    #[serde(rename = "custom")]
    Custom,
}

impl LatencyPreset {
    pub fn profile(self) -> LatencyProfile {
        let (decode_base_ms, prefill_per_token_ms) = match self {
            LatencyPreset::Llama8b | LatencyPreset::Custom => (7.5, 0.035),
            LatencyPreset::Phi15b => (13.4, 0.07),
            LatencyPreset::Qwen32b => (29.7, 0.15),
            LatencyPreset::Qwen30bA3b => (11.9, 0.05),
        };
        LatencyProfile {
            prefill_base_ms: 2.0,
            prefill_per_token_ms,
            decode_base_ms,
            decode_per_seq_ms: decode_base_ms * 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub batch_grid: Vec<u32>,
    pub seq_grid: Vec<u32>,
    pub latency_preset: LatencyPreset,
    /// Used when `latency_preset = "custom"`.
    pub custom: Option<LatencyProfile>,
    pub vocab_size: u32,
    pub eos_token: u32,
    /// Probability that any sampled position is forced to EOS.
    pub eos_probability: f64,
    pub graph_memory_bytes: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batch_grid: vec![1, 2, 4, 8, 16, 32],
            seq_grid: vec![128, 256, 512, 1024, 2048, 4096],
            latency_preset: LatencyPreset::Llama8b,
            custom: None,
            vocab_size: 32_000,
            eos_token: 2,
            eos_probability: 0.0,
            graph_memory_bytes: 2_621_440,
        }
    }
}

impl EngineConfig {
    pub fn profile(&self) -> LatencyProfile {
        match (self.latency_preset, self.custom) {
            (LatencyPreset::Custom, Some(p)) => p,
            (preset, _) => preset.profile(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphDescriptor {
    pub key: GraphKey,
    pub base: Duration,
    /// Per prompt token for prefill, per sequence for decode.
    pub per_unit: Duration,
    pub memory_cost: u64,
}

impl GraphDescriptor {
    fn latency(&self, units: usize) -> Duration {
        self.base + self.per_unit * units as u32
    }
}

/// Input buffers sized once for the largest grid shape and shared by every
/// graph.
#[derive(Debug)]
pub struct SharedBuffers {
    pub max_batch: usize,
    pub max_seq: usize,
    tokens: Vec<u32>,
}

impl SharedBuffers {
    pub fn bytes(&self) -> usize {
        self.tokens.len() * 4
    }
}

#[derive(Debug)]
pub struct GraphCache {
    batch_grid: Vec<u32>,
    seq_grid: Vec<u32>,
    batch_index: Vec<u16>,
    seq_index: Vec<u16>,
    prefill: Vec<GraphDescriptor>,
    decode: Vec<GraphDescriptor>,
    fallback: [GraphDescriptor; 2],
    buffers: SharedBuffers,
}

fn check_grid(grid: &[u32], name: &'static str) -> Result<(), EngineError> {
    if grid.is_empty() {
        return Err(EngineError::EmptyGrid(name));
    }
    if grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) || grid.len() > u16::MAX as usize {
        return Err(EngineError::UnsortedGrid(name));
    }
    Ok(())
}

/// `table[x]` = index of the smallest grid value >= x.
fn ceiling_table(grid: &[u32]) -> Vec<u16> {
    let max = *grid.last().unwrap() as usize;
    let mut table = Vec::with_capacity(max + 1);
    let mut gi = 0;
    for x in 0..=max {
        while (grid[gi] as usize) < x {
            gi += 1;
        }
        table.push(gi as u16);
    }
    table
}

impl GraphCache {
    pub fn build(batch_grid: &[u32], seq_grid: &[u32], profile: &LatencyProfile, memory_cost: u64) -> Result<Self, EngineError> {
        check_grid(batch_grid, "batch")?;
        check_grid(seq_grid, "seq")?;
        let make = |b: u32, s: u32, phase: Phase| {
            let (base, per) = match phase {
                Phase::Prefill => (profile.prefill_base_ms, profile.prefill_per_token_ms),
                Phase::Decode => (profile.decode_base_ms, profile.decode_per_seq_ms),
            };
            GraphDescriptor {
                key: GraphKey {
                    batch_capacity: b,
                    seq_capacity: s,
                    phase,
                },
                base: from_millis_f64(base),
                per_unit: from_millis_f64(per),
                memory_cost,
            }
        };
        let grid = |phase| {
            batch_grid
                .iter()
                .flat_map(|&b| seq_grid.iter().map(move |&s| (b, s)))
                .map(|(b, s)| make(b, s, phase))
                .collect::<Vec<_>>()
        };
        let max_batch = *batch_grid.last().unwrap() as usize;
        let max_seq = *seq_grid.last().unwrap() as usize;
        Ok(Self {
            batch_index: ceiling_table(batch_grid),
            seq_index: ceiling_table(seq_grid),
            prefill: grid(Phase::Prefill),
            decode: grid(Phase::Decode),
            fallback: [
                make(MAX_SHAPE, MAX_SHAPE, Phase::Prefill),
                make(MAX_SHAPE, MAX_SHAPE, Phase::Decode),
            ],
            buffers: SharedBuffers {
                max_batch,
                max_seq,
                tokens: vec![0; max_batch * max_seq],
            },
            batch_grid: batch_grid.to_vec(),
            seq_grid: seq_grid.to_vec(),
        })
    }

    /// Tightest-fitting graph for `(batch, seq)`, or the max-shape fallback.
    pub fn lookup(&self, phase: Phase, batch: usize, seq: usize) -> &GraphDescriptor {
        let (bi, si) = match (self.batch_index.get(batch), self.seq_index.get(seq)) {
            (Some(&b), Some(&s)) => (b as usize, s as usize),
            _ => return self.fallback(phase),
        };
        let idx = bi * self.seq_grid.len() + si;
        match phase {
            Phase::Prefill => &self.prefill[idx],
            Phase::Decode => &self.decode[idx],
        }
    }

    pub fn fallback(&self, phase: Phase) -> &GraphDescriptor {
        match phase {
            Phase::Prefill => &self.fallback[0],
            Phase::Decode => &self.fallback[1],
        }
    }

    /// Number of captured graphs, fallbacks included.
    pub fn len(&self) -> usize {
        self.prefill.len() + self.decode.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn batch_grid(&self) -> &[u32] {
        &self.batch_grid
    }

    pub fn seq_grid(&self) -> &[u32] {
        &self.seq_grid
    }

    pub fn shared_buffers(&self) -> &SharedBuffers {
        &self.buffers
    }

    pub fn memory_cost(&self) -> u64 {
        self.prefill
            .iter()
            .chain(&self.decode)
            .chain(&self.fallback)
            .map(|g| g.memory_cost)
            .sum()
    }
}

/// FNV-1a over the little-endian bytes of the prompt.
pub fn prompt_hash(tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit mixing chain over (seed, prompt hash, output position).
#[inline]
pub fn mix(seed: u64, prompt_hash: u64, position: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ prompt_hash) ^ position)
}

/// Deterministic token source: the token at position `p` depends only on
/// the request seed, the prompt and `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoModel {
    pub vocab_size: u32,
    pub eos_token: u32,
    pub eos_probability: f64,
}

impl PseudoModel {
    pub fn token(&self, seed: u64, prompt_hash: u64, position: u64) -> u32 {
        let m = mix(seed, prompt_hash, position);
        if self.eos_probability > 0.0 {
            let u = (m >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.eos_probability {
                return self.eos_token;
            }
        }
        let t = (m % self.vocab_size as u64) as u32;
        if t == self.eos_token {
            (t + 1) % self.vocab_size
        } else {
            t
        }
    }
}

/// A request completes after `token` iff it is EOS or fills the budget.
pub fn eos_check(generated_count: usize, max_output: usize, token: u32, eos_token: u32) -> bool {
    token == eos_token || generated_count + 1 >= max_output
}

/// One sequence's view handed to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqInput {
    pub seed: u64,
    pub prompt_hash: u64,
    /// Output position to sample (0 for prefill).
    pub position: u64,
    pub input_len: usize,
    /// Prompt plus generated tokens so far.
    pub context_len: usize,
}

/// What a graph run deposits into the extraction buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub tokens: Vec<u32>,
    pub latency: Duration,
}

#[derive(Debug)]
pub struct Engine {
    cache: GraphCache,
    model: PseudoModel,
    /// Temperature/top-p are recorded per request but do not steer the
    /// pseudo-model.
    drop_deposits: bool,
}

impl Engine {
    pub fn new(cfg: &EngineConfig) -> Result<Self, EngineError> {
        let cache = GraphCache::build(&cfg.batch_grid, &cfg.seq_grid, &cfg.profile(), cfg.graph_memory_bytes)?;
        Ok(Self {
            cache,
            model: PseudoModel {
                vocab_size: cfg.vocab_size.max(1),
                eos_token: cfg.eos_token,
                eos_probability: cfg.eos_probability,
            },
            drop_deposits: false,
        })
    }

    pub fn cache(&self) -> &GraphCache {
        &self.cache
    }

    pub fn model(&self) -> &PseudoModel {
        &self.model
    }

    /// Fault injection: graphs run but never deposit tokens.
    pub fn set_drop_deposits(&mut self, drop: bool) {
        self.drop_deposits = drop;
    }

    pub fn drops_deposits(&self) -> bool {
        self.drop_deposits
    }

    pub fn select(&self, phase: Phase, batch: &[SeqInput]) -> &GraphDescriptor {
        let seq = batch
            .iter()
            .map(|s| match phase {
                Phase::Prefill => s.input_len,
                Phase::Decode => s.context_len,
            })
            .max()
            .unwrap_or(0);
        self.cache.lookup(phase, batch.len(), seq)
    }

    /// Runs `graph` over `batch`, sampling one token per sequence in-graph.
    pub fn execute(&mut self, graph: &GraphDescriptor, batch: &[SeqInput]) -> Result<Execution, EngineError> {
        if batch.is_empty() {
            return Ok(Execution {
                tokens: Vec::new(),
                latency: Duration::ZERO,
            });
        }
        let phase = graph.key.phase;
        for s in batch {
            let seq = match phase {
                Phase::Prefill => s.input_len,
                Phase::Decode => s.context_len,
            };
            if !graph.key.admits(batch.len(), seq) {
                return Err(EngineError::ShapeViolation {
                    batch: batch.len(),
                    seq,
                    key: graph.key,
                });
            }
        }
        // Stage per-sequence positions in the shared input buffer.
        let stage = &mut self.cache.buffers.tokens;
        for (i, s) in batch.iter().enumerate().take(stage.len()) {
            stage[i] = s.position as u32;
        }
        let units = match phase {
            Phase::Prefill => batch.iter().map(|s| s.input_len).sum(),
            Phase::Decode => batch.len(),
        };
        let tokens = batch
            .iter()
            .map(|s| self.model.token(s.seed, s.prompt_hash, s.position))
            .collect();
        Ok(Execution {
            tokens,
            latency: graph.latency(units),
        })
    }
}

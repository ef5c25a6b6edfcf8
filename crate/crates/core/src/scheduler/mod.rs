//! Emulated device-resident persistent scheduler.
//!
//! [`DeviceScheduler::iterate`] performs one pass of the control loop at a
//! given time and returns when it next needs to run: scan and claim pending
//! slots, decide admission, launch a graph, poll its extraction buffer and
//! publish the sampled tokens. The same policy runs in host-mediated mode,
//! where every decode step also pays a host round trip and launches are
//! host-issued.

mod batch;
mod host;
mod kv;
mod scan;
mod window;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{admit_check, AdmitDecision, AdmitReasons, BatchState, ADMISSION_LAUNCHES};
pub use host::{calibrated_steps_per_ms, HostConfig, HostOverheadModel, HostPlane};
pub use kv::{KvConfig, KvPagePool};
pub use scan::{effective_lanes, lane_range, scan_slots, Claimed};
pub use window::{LaunchMode, LaunchRecord, LaunchWindow, DEFAULT_WINDOW_LIMIT};

use crate::clock::{as_nanos, from_micros_f64, from_millis_f64, Clock};
use crate::engine::{eos_check, prompt_hash, Engine, EngineError, Phase, SeqInput};
use crate::ring::{Plane, RingBuffer, RingError, SlotState};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("fire-and-forget launch at counter {counter} exceeds window limit {limit}")]
    WindowOverflow { counter: u32, limit: u32 },
    #[error("kv pool exhausted: need {needed} pages, {free} free")]
    KvExhausted { needed: usize, free: usize },
    #[error("{phase:?} graph produced no tokens within {waited:?}")]
    PollTimeout { phase: Phase, waited: Duration },
    #[error("invalid scheduler config: {0}")]
    Config(String),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    #[default]
    Device,
    Host,
}

impl std::str::FromStr for SchedulerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "device" => Ok(SchedulerMode::Device),
            "host" | "host_mediated" => Ok(SchedulerMode::Host),
            other => Err(format!("unknown mode {other:?} (expected device or host)")),
        }
    }
}

impl std::fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchedulerMode::Device => "device",
            SchedulerMode::Host => "host",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub batch_capacity: usize,
    pub window_limit: u32,
    pub lanes: usize,
    /// Scan worker threads; 0 picks the core count (at least 4), 1 scans inline.
    pub scan_threads: usize,
    pub ff_launch_us: f64,
    pub tail_launch_us: f64,
    pub poll_timeout_ms: f64,
    /// Keep the per-event log in memory.
    pub record_events: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: SchedulerMode::Device,
            batch_capacity: 16,
            window_limit: DEFAULT_WINDOW_LIMIT,
            lanes: 256,
            scan_threads: 0,
            ff_launch_us: 2.0,
            tail_launch_us: 5.5,
            poll_timeout_ms: 10_000.0,
            record_events: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Claim,
    AdmitCheck,
    Pause,
    PrefillStart,
    FirstToken,
    Resume,
    DecodeJoin,
    Launch,
    Complete,
    Cancel,
    KvReject,
}

/// One line of the scheduler event log.
#[derive(Debug, Clone, Serialize)]
pub struct SchedEvent {
    pub step: u64,
    pub epoch: u64,
    pub event: EventKind,
    pub slot: Option<usize>,
    pub clock_ns: u64,
    pub counter: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<LaunchMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<AdmitDecision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

/// Writes events as newline-delimited JSON.
pub fn write_event_log(events: &[SchedEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub decode_steps: u64,
    pub prefills: u64,
    pub admitted: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub kv_rejected: u64,
    pub ff_launches: u64,
    pub tail_launches: u64,
    pub host_launches: u64,
    pub host_round_trips: u64,
    pub max_window_counter: u32,
    pub epochs: u64,
}

/// A finished request as seen by the scheduler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRecord {
    pub request_id: u64,
    pub slot: usize,
    pub tokens: Vec<u32>,
    pub arrival_seq: u64,
    pub admitted_step: Option<u64>,
    pub first_decode_step: Option<u64>,
    pub first_epoch: u64,
    pub last_epoch: u64,
    pub cancelled: bool,
    pub completed_at: Duration,
}

/// Where graphs leave their sampled tokens.
#[derive(Debug, Default)]
pub struct ExtractionBuffer {
    deposit: Option<(Duration, Vec<u32>)>,
}

impl ExtractionBuffer {
    pub fn deposit(&mut self, at: Duration, tokens: Vec<u32>) {
        self.deposit = Some((at, tokens));
    }

    /// Occupied once the deposit time has passed.
    pub fn poll(&mut self, now: Duration) -> Option<Vec<u32>> {
        match &self.deposit {
            Some((at, _)) if *at <= now => self.deposit.take().map(|(_, t)| t),
            _ => None,
        }
    }

    pub fn ready_at(&self) -> Option<Duration> {
        self.deposit.as_ref().map(|(at, _)| *at)
    }
}

#[derive(Debug)]
struct SeqCtx {
    request_id: u64,
    seed: u64,
    prompt_hash: u64,
    input_len: usize,
    max_output: usize,
    generated: usize,
    arrival_seq: u64,
    admitted_step: Option<u64>,
    first_decode_step: Option<u64>,
    first_epoch: u64,
}

#[derive(Debug)]
struct Inflight {
    phase: Phase,
    slots: Vec<usize>,
    launched_at: Duration,
    tokens: Option<Vec<u32>>,
    /// When the step's results become actionable (after any host round trip).
    boundary_at: Duration,
}

pub struct DeviceScheduler {
    cfg: SchedulerConfig,
    ring: Arc<RingBuffer>,
    engine: Engine,
    window: LaunchWindow,
    batch: BatchState,
    kv: KvPagePool,
    waiting: BTreeMap<(u64, usize), ()>,
    seqs: HashMap<usize, SeqCtx>,
    inflight: Option<Inflight>,
    extraction: ExtractionBuffer,
    completing: Vec<usize>,
    resume_pending: bool,
    host: Option<HostPlane>,
    scan_pool: Option<rayon::ThreadPool>,
    events: Vec<SchedEvent>,
    stats: RunStats,
    completions: Vec<CompletionRecord>,
    prompt_buf: Vec<u32>,
    inputs: Vec<SeqInput>,
    poll_timeout: Duration,
}

impl std::fmt::Debug for DeviceScheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceScheduler")
            .field("mode", &self.cfg.mode)
            .field("step", &self.batch.step_index)
            .field("epoch", &self.window.epoch())
            .finish()
    }
}

enum Poll {
    Ready,
    Pending(Duration),
}

impl DeviceScheduler {
    pub fn new(
        cfg: SchedulerConfig,
        ring: Arc<RingBuffer>,
        engine: Engine,
        kv: KvConfig,
        host: HostConfig,
    ) -> Result<Self, SchedulerError> {
        if cfg.batch_capacity == 0 {
            return Err(SchedulerError::Config("batch_capacity must be > 0".into()));
        }
        if cfg.window_limit < ADMISSION_LAUNCHES {
            return Err(SchedulerError::Config(format!(
                "window_limit must be at least {ADMISSION_LAUNCHES}"
            )));
        }
        if kv.page_size == 0 {
            return Err(SchedulerError::Config("kv.page_size must be > 0".into()));
        }
        effective_lanes(ring.capacity(), cfg.lanes)?;
        let threads = match cfg.scan_threads {
            0 => std::thread::available_parallelism().map_or(4, |n| n.get()).max(4),
            n => n,
        };
        let scan_pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(|i| format!("scan-lane-{i}"))
                    .build()
                    .map_err(|e| SchedulerError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let host = (cfg.mode == SchedulerMode::Host).then(|| HostPlane::new(host));
        Ok(Self {
            window: LaunchWindow::new(
                cfg.window_limit,
                from_micros_f64(cfg.ff_launch_us),
                from_micros_f64(cfg.tail_launch_us),
            ),
            batch: BatchState::new(cfg.batch_capacity),
            kv: KvPagePool::from_config(&kv),
            poll_timeout: from_millis_f64(cfg.poll_timeout_ms),
            cfg,
            ring,
            engine,
            waiting: BTreeMap::new(),
            seqs: HashMap::new(),
            inflight: None,
            extraction: ExtractionBuffer::default(),
            completing: Vec::new(),
            resume_pending: false,
            host,
            scan_pool,
            events: Vec::new(),
            stats: RunStats::default(),
            completions: Vec::new(),
            prompt_buf: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn mode(&self) -> SchedulerMode {
        self.cfg.mode
    }

    pub fn ring(&self) -> &Arc<RingBuffer> {
        &self.ring
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn window(&self) -> &LaunchWindow {
        &self.window
    }

    pub fn batch(&self) -> &BatchState {
        &self.batch
    }

    pub fn kv(&self) -> &KvPagePool {
        &self.kv
    }

    pub fn host(&self) -> Option<&HostPlane> {
        self.host.as_ref()
    }

    pub fn events(&self) -> &[SchedEvent] {
        &self.events
    }

    pub fn take_completions(&mut self) -> Vec<CompletionRecord> {
        std::mem::take(&mut self.completions)
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            ff_launches: self.window.ff_launch_count(),
            tail_launches: self.window.tail_launch_count(),
            max_window_counter: self.window.max_counter(),
            epochs: self.window.epoch(),
            ..self.stats.clone()
        }
    }

    /// Nothing claimed, waiting or running.
    pub fn is_idle(&self) -> bool {
        self.inflight.is_none() && self.batch.is_idle() && self.waiting.is_empty()
    }

    fn log(&mut self, now: Duration, event: EventKind, slot: Option<usize>) -> Option<&mut SchedEvent> {
        if !self.cfg.record_events {
            return None;
        }
        self.events.push(SchedEvent {
            step: self.batch.step_index,
            epoch: self.window.epoch(),
            event,
            slot,
            clock_ns: as_nanos(now),
            counter: self.window.counter(),
            mode: None,
            arrival_seq: None,
            decision: None,
            phase: None,
        });
        self.events.last_mut()
    }

    /// Runs the control loop once at `now`. Returns the next time it needs
    /// to run, or `None` when idle with nothing claimed.
    pub fn iterate(&mut self, now: Duration) -> Result<Option<Duration>, SchedulerError> {
        if self.inflight.is_some() {
            match self.poll_completion(now)? {
                Poll::Pending(at) => return Ok(Some(at)),
                Poll::Ready => {
                    let inf = self.inflight.take().expect("checked above");
                    self.complete_step(now, inf)?;
                }
            }
        }
        self.boundary(now)
    }

    /// Busy-polls the extraction buffer of the outstanding graph.
    fn poll_completion(&mut self, now: Duration) -> Result<Poll, SchedulerError> {
        let inf = self.inflight.as_mut().expect("outstanding launch");
        if inf.tokens.is_none() {
            match self.extraction.poll(now) {
                Some(tokens) => {
                    let ready = inf.boundary_at;
                    if let (Some(host), Phase::Decode) = (self.host.as_mut(), inf.phase) {
                        inf.boundary_at = ready + host.round_trip(&tokens);
                        self.stats.host_round_trips += 1;
                    }
                    inf.tokens = Some(tokens);
                }
                None => {
                    let deadline = inf.launched_at + self.poll_timeout;
                    if now >= deadline {
                        return Err(SchedulerError::PollTimeout {
                            phase: inf.phase,
                            waited: now - inf.launched_at,
                        });
                    }
                    let next = self.extraction.ready_at().map_or(deadline, |t| t.min(deadline));
                    return Ok(Poll::Pending(next));
                }
            }
        }
        if inf.boundary_at > now {
            return Ok(Poll::Pending(inf.boundary_at));
        }
        Ok(Poll::Ready)
    }

    fn complete_step(&mut self, now: Duration, inf: Inflight) -> Result<(), SchedulerError> {
        let tokens = inf.tokens.expect("polled");
        let eos = self.engine.model().eos_token;
        match inf.phase {
            Phase::Prefill => {
                for (&slot, &token) in inf.slots.iter().zip(&tokens) {
                    self.ring.publish_tokens(slot, &[token])?;
                    self.ring
                        .transition(slot, SlotState::PrefillProcessing, SlotState::DecodeProcessing, Plane::Device)?;
                    let ctx = self.seqs.get_mut(&slot).expect("admitted slot");
                    ctx.generated = 1;
                    let done = eos_check(0, ctx.max_output, token, eos);
                    self.log(now, EventKind::FirstToken, Some(slot));
                    if done || self.ring.slot(slot)?.cancel_requested {
                        self.finish(now, slot)?;
                    } else {
                        self.batch.active.push(slot);
                    }
                }
                let paused = std::mem::take(&mut self.batch.paused);
                let mut merged = Vec::with_capacity(paused.len() + self.batch.active.len());
                for slot in paused {
                    self.ring
                        .transition(slot, SlotState::DecodePaused, SlotState::DecodeProcessing, Plane::Device)?;
                    self.log(now, EventKind::Resume, Some(slot));
                    merged.push(slot);
                }
                merged.append(&mut self.batch.active);
                self.batch.active = merged;
                self.resume_pending = true;
            }
            Phase::Decode => {
                for (&slot, &token) in inf.slots.iter().zip(&tokens) {
                    self.ring.publish_tokens(slot, &[token])?;
                    let ctx = self.seqs.get_mut(&slot).expect("active slot");
                    let before = ctx.generated;
                    ctx.generated += 1;
                    let done = eos_check(before, ctx.max_output, token, eos);
                    if done || self.ring.slot(slot)?.cancel_requested {
                        self.completing.push(slot);
                    }
                }
            }
        }
        Ok(())
    }

    /// DECODE_PROCESSING -> DECODE_COMPLETED, KV freed, batch updated.
    fn finish(&mut self, now: Duration, slot: usize) -> Result<(), SchedulerError> {
        self.ring
            .transition(slot, SlotState::DecodeProcessing, SlotState::DecodeCompleted, Plane::Device)?;
        let ctx = self.seqs.remove(&slot).expect("tracked slot");
        self.kv.kv_free(ctx.request_id);
        self.batch.active.retain(|&s| s != slot);
        let mut tokens = Vec::with_capacity(ctx.generated);
        self.ring.read_output(slot, 0, ctx.generated, &mut tokens)?;
        let cancelled = self.ring.slot(slot)?.cancel_requested;
        if cancelled {
            self.stats.cancelled += 1;
        }
        self.stats.completed += 1;
        self.completions.push(CompletionRecord {
            request_id: ctx.request_id,
            slot,
            tokens,
            arrival_seq: ctx.arrival_seq,
            admitted_step: ctx.admitted_step,
            first_decode_step: ctx.first_decode_step,
            first_epoch: ctx.first_epoch,
            last_epoch: self.window.epoch(),
            cancelled,
            completed_at: now,
        });
        self.log(now, EventKind::Complete, Some(slot));
        Ok(())
    }

    /// Finishes a claimed request that never ran (cancelled or unfittable).
    fn drop_waiting(&mut self, now: Duration, slot: usize, kind: EventKind) -> Result<(), SchedulerError> {
        self.ring
            .transition(slot, SlotState::PrefillProcessing, SlotState::DecodeProcessing, Plane::Device)?;
        self.log(now, kind, Some(slot));
        if kind == EventKind::KvReject {
            self.stats.kv_rejected += 1;
        }
        self.finish(now, slot)
    }

    fn scan(&mut self, now: Duration) -> Result<(), SchedulerError> {
        let claims = scan_slots(&self.ring, self.cfg.lanes, self.scan_pool.as_ref())?;
        for c in claims {
            let slot = self.ring.slot(c.slot)?;
            self.ring.read_prompt(c.slot, &mut self.prompt_buf)?;
            self.seqs.insert(
                c.slot,
                SeqCtx {
                    request_id: slot.request_id,
                    seed: slot.sampling_seed,
                    prompt_hash: prompt_hash(&self.prompt_buf),
                    input_len: slot.input_len,
                    max_output: slot.max_output.max(1),
                    generated: 0,
                    arrival_seq: c.arrival_seq,
                    admitted_step: None,
                    first_decode_step: None,
                    first_epoch: 0,
                },
            );
            self.waiting.insert((c.arrival_seq, c.slot), ());
            if let Some(e) = self.log(now, EventKind::Claim, Some(c.slot)) {
                e.arrival_seq = Some(c.arrival_seq);
            }
        }
        Ok(())
    }

    fn kv_need(&self, slot: usize) -> usize {
        let ctx = &self.seqs[&slot];
        self.kv.pages_for(ctx.input_len + ctx.max_output)
    }

    /// FCFS prefix of the waiting queue that fits `room` batch slots and
    /// `free_pages` KV pages.
    fn pending_prefix(&self, room: usize, mut free_pages: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(_, slot) in self.waiting.keys() {
            if out.len() == room {
                break;
            }
            let need = self.kv_need(slot);
            if need > free_pages {
                break;
            }
            free_pages -= need;
            out.push(slot);
        }
        out
    }

    fn boundary(&mut self, now: Duration) -> Result<Option<Duration>, SchedulerError> {
        self.scan(now)?;
        let cancelled: Vec<usize> = self
            .waiting
            .keys()
            .map(|&(_, s)| s)
            .filter(|&s| self.ring.slot(s).is_ok_and(|v| v.cancel_requested))
            .collect();
        for slot in cancelled {
            let seq = self.seqs[&slot].arrival_seq;
            self.waiting.remove(&(seq, slot));
            self.drop_waiting(now, slot, EventKind::Cancel)?;
        }

        if std::mem::take(&mut self.resume_pending) {
            return self.launch_decode(now);
        }

        loop {
            let completing = std::mem::take(&mut self.completing);
            let completing_pages: usize = completing
                .iter()
                .map(|s| self.kv.pages_of(self.seqs[s].request_id).map_or(0, <[u32]>::len))
                .sum();
            let room = self
                .batch
                .capacity
                .saturating_sub(self.batch.occupancy() - completing.len());
            let pending = self.pending_prefix(room, self.kv.free_pages() + completing_pages);
            let window = (self.host.is_none()).then_some(&self.window);
            let decision = admit_check(pending.len(), &self.batch, window, completing.len());
            if !self.waiting.is_empty() || decision.admit {
                if let Some(e) = self.log(now, EventKind::AdmitCheck, None) {
                    e.decision = Some(decision);
                }
            }
            for slot in completing {
                self.finish(now, slot)?;
            }
            if decision.admit {
                return self.admit(now, pending, decision);
            }
            if !self.batch.active.is_empty() {
                return self.launch_decode(now);
            }
            if self.waiting.is_empty() {
                return Ok(None);
            }
            if !decision.reasons.window_headroom {
                // Idle with a full window: recycle it so admission can proceed.
                let rec = self.window.launch(LaunchMode::Tail)?;
                if let Some(e) = self.log(now, EventKind::Launch, None) {
                    e.mode = Some(rec.mode);
                }
                return Ok(Some(now + rec.cost));
            }
            // Idle, window free, yet nothing fits: the head can never be served.
            let (&(seq, slot), _) = self.waiting.iter().next().expect("nonempty");
            self.waiting.remove(&(seq, slot));
            self.drop_waiting(now, slot, EventKind::KvReject)?;
        }
    }

    fn admit(&mut self, now: Duration, pending: Vec<usize>, decision: AdmitDecision) -> Result<Option<Duration>, SchedulerError> {
        debug_assert!(decision.admit);
        if let Some(e) = self.log(now, EventKind::Pause, None) {
            e.decision = Some(decision);
        }
        for slot in std::mem::take(&mut self.batch.active) {
            self.ring
                .transition(slot, SlotState::DecodeProcessing, SlotState::DecodePaused, Plane::Device)?;
            self.log(now, EventKind::Pause, Some(slot));
            self.batch.paused.push(slot);
        }
        assert!(
            self.batch.occupancy() + pending.len() <= self.batch.capacity,
            "admission beyond batch capacity"
        );
        self.inputs.clear();
        let step = self.batch.step_index;
        let epoch = self.window.epoch();
        for &slot in &pending {
            let need = self.kv_need(slot);
            let ctx = self.seqs.get_mut(&slot).expect("claimed");
            self.waiting.remove(&(ctx.arrival_seq, slot));
            ctx.admitted_step = Some(step);
            ctx.first_epoch = epoch;
            let (request_id, arrival_seq) = (ctx.request_id, ctx.arrival_seq);
            self.inputs.push(SeqInput {
                seed: ctx.seed,
                prompt_hash: ctx.prompt_hash,
                position: 0,
                input_len: ctx.input_len,
                context_len: ctx.input_len,
            });
            self.kv.kv_alloc(request_id, need * self.kv.page_size())?;
            if let Some(e) = self.log(now, EventKind::PrefillStart, Some(slot)) {
                e.arrival_seq = Some(arrival_seq);
            }
        }
        self.stats.prefills += 1;
        self.stats.admitted += pending.len() as u64;
        self.launch(now, Phase::Prefill, pending)
    }

    fn launch_decode(&mut self, now: Duration) -> Result<Option<Duration>, SchedulerError> {
        if self.batch.active.is_empty() {
            return self.boundary_without_scan(now);
        }
        self.batch.step_index += 1;
        let step = self.batch.step_index;
        self.inputs.clear();
        let slots = self.batch.active.clone();
        for &slot in &slots {
            let ctx = self.seqs.get_mut(&slot).expect("active slot");
            let joined = ctx.first_decode_step.is_none();
            if joined {
                ctx.first_decode_step = Some(step);
            }
            self.inputs.push(SeqInput {
                seed: ctx.seed,
                prompt_hash: ctx.prompt_hash,
                position: ctx.generated as u64,
                input_len: ctx.input_len,
                context_len: ctx.input_len + ctx.generated,
            });
            if joined {
                self.log(now, EventKind::DecodeJoin, Some(slot));
            }
        }
        self.stats.decode_steps += 1;
        self.launch(now, Phase::Decode, slots)
    }

    /// After a prefill whose requests all finished immediately.
    fn boundary_without_scan(&mut self, now: Duration) -> Result<Option<Duration>, SchedulerError> {
        if self.waiting.is_empty() {
            return Ok(None);
        }
        self.boundary(now)
    }

    fn launch(&mut self, now: Duration, phase: Phase, slots: Vec<usize>) -> Result<Option<Duration>, SchedulerError> {
        let rec = match self.host.as_mut() {
            Some(host) => {
                self.stats.host_launches += 1;
                LaunchRecord {
                    mode: LaunchMode::Host,
                    epoch: self.window.epoch(),
                    counter: self.window.counter(),
                    cost: host.launch_cost(),
                }
            }
            None => match phase {
                Phase::Prefill => self.window.launch(LaunchMode::FireAndForget)?,
                Phase::Decode => self.window.next_launch(),
            },
        };
        if let Some(e) = self.log(now, EventKind::Launch, None) {
            e.mode = Some(rec.mode);
            e.phase = Some(phase);
        }
        let graph = *self.engine.select(phase, &self.inputs);
        let exec = self.engine.execute(&graph, &self.inputs)?;
        let ready = now + rec.cost + exec.latency;
        if !self.engine.drops_deposits() {
            self.extraction.deposit(ready, exec.tokens);
        }
        self.inflight = Some(Inflight {
            phase,
            slots,
            launched_at: now,
            tokens: None,
            boundary_at: ready,
        });
        Ok(Some(ready))
    }

    /// Drives the loop on `clock` until `stop` is set, `step_budget` decode
    /// steps have run, or (on a virtual clock) the system goes idle.
    pub fn run_loop(&mut self, clock: &Clock, stop: &AtomicBool, step_budget: Option<u64>) -> Result<RunStats, SchedulerError> {
        let idle_poll = Duration::from_micros(50);
        while !stop.load(Ordering::Acquire) {
            if step_budget.is_some_and(|b| self.stats.decode_steps >= b) {
                break;
            }
            match self.iterate(clock.now())? {
                Some(t) => clock.wait_until(t),
                None if clock.is_virtual() => break,
                None => std::thread::sleep(idle_poll),
            }
        }
        Ok(self.stats())
    }
}

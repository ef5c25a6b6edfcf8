//! Frontend plane: request admission into the ring and token streaming back
//! out of it, using only one-sided transfers.
//!
//! Submission is two-phase. A slot is first reserved by a compare-and-swap on
//! its request-id word (0 to the new id). The prompt payload, the control
//! record and the `EMPTY -> PREFILL_PENDING` state CAS then go out in one
//! coalesced post, payload first. The reader periodically pulls the packed
//! metadata array, fetches newly generated token ranges, and reclaims
//! completed slots once every token has been delivered.

pub mod http;
mod poll;
mod slot_cache;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;

pub use poll::PollController;
pub use slot_cache::SlotCache;

use crate::ring::regions::{SlotControlRecord, CANCEL_FIELD_OFFSET};
use crate::ring::{
    MetadataSnapshot, Plane, RegionKind, RingBuffer, SlotState, SLOT_CONTROL_STRIDE, SNAPSHOT_ENTRY_BYTES,
    STATE_WORD_STRIDE,
};
use crate::transport::{Completion, Permissions, QueuePair, RegionHandle, TransferTask, Transport, TransportError};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt has {len} tokens, the per-slot limit is {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("max_tokens must be between 1 and {max}, got {requested}")]
    InvalidMaxTokens { requested: u32, max: usize },
    #[error("no free ring slot")]
    NoSlot,
    #[error("request {0} is not tracked")]
    UnknownRequest(u64),
    #[error("ring rejected the submission: {0}")]
    Rejected(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

impl FrontendError {
    /// Whether the client is at fault (as opposed to capacity or internals).
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            FrontendError::EmptyPrompt | FrontendError::PromptTooLong { .. } | FrontendError::InvalidMaxTokens { .. }
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub poll_us_min: u64,
    pub poll_us_max: u64,
    pub poll_us_init: u64,
    /// Submission coalescing window of the HTTP runtime.
    pub coalesce_us: u64,
    /// Read slots still waiting for their first token before the others.
    pub urgent_enabled: bool,
    /// Upper bound on tokens fetched per reader cycle.
    pub reader_token_cap: usize,
    /// Default `max_tokens` when a request omits it.
    pub default_max_tokens: u32,
    /// Retry-After hint, in seconds, on ring-full rejections.
    pub retry_after_s: u64,
    /// End-of-sequence id, used to label finish reasons.
    pub eos_token: u32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            poll_us_min: 50,
            poll_us_max: 2000,
            poll_us_init: 200,
            coalesce_us: 100,
            urgent_enabled: true,
            reader_token_cap: 65536,
            default_max_tokens: 16,
            retry_after_s: 1,
            eos_token: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestStatus {
    Queued,
    Submitted,
    Streaming,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Cancelled,
}

impl FinishReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::Stop => "stop",
            FinishReason::Length => "length",
            FinishReason::Cancelled => "cancelled",
        }
    }
}

/// What a request's sink receives.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    /// Newly delivered tokens. `finish` is set on the batch holding the last
    /// token.
    Tokens { ids: Vec<u32>, finish: Option<FinishReason> },
    /// The slot has been reclaimed; nothing more will arrive.
    Done { reason: FinishReason },
    Failed { message: String },
}

pub type Sink = UnboundedSender<StreamEvent>;

#[derive(Debug, Clone, Serialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub slot: Option<usize>,
    pub status: RequestStatus,
    pub prompt_len: usize,
    pub max_output: u32,
    pub arrival: Duration,
    pub submitted: Option<Duration>,
    pub first_token: Option<Duration>,
    pub last_token: Option<Duration>,
    pub finished: Option<Duration>,
    pub tokens: Vec<u32>,
    pub token_times: Vec<Duration>,
    pub finish: Option<FinishReason>,
    pub cancel_requested: bool,
    pub error: Option<String>,
}

impl RequestRecord {
    pub fn tokens_streamed(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.status, RequestStatus::Done | RequestStatus::Failed)
    }
}

/// A request ready for submission.
#[derive(Debug)]
pub struct SubmitRequest {
    pub prompt: Vec<u32>,
    pub max_output: u32,
    pub seed: u64,
    /// Client arrival time on the transport clock.
    pub arrival: Duration,
    pub sink: Option<Sink>,
}

impl SubmitRequest {
    pub fn new(prompt: Vec<u32>, max_output: u32, seed: u64, arrival: Duration) -> Self {
        Self {
            prompt,
            max_output,
            seed,
            arrival,
            sink: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RingHandles {
    pub metadata: RegionHandle,
    pub state_words: RegionHandle,
    pub slot_control: RegionHandle,
    pub input_arena: RegionHandle,
    pub output_arena: RegionHandle,
}

impl RingHandles {
    /// Registers the ring's regions with the transport, each with the
    /// narrowest permissions the frontend needs.
    pub fn register(ring: &Arc<RingBuffer>, transport: &Transport) -> Result<Self, TransportError> {
        let reg = |kind, perm| transport.register_region(ring.region(kind), perm, Plane::Device);
        Ok(Self {
            metadata: reg(RegionKind::Metadata, Permissions::READ)?,
            state_words: reg(RegionKind::StateWords, Permissions::ATOMIC)?,
            slot_control: reg(
                RegionKind::SlotControl,
                Permissions {
                    read: true,
                    write: true,
                    atomic: true,
                },
            )?,
            input_arena: reg(RegionKind::InputArena, Permissions::WRITE)?,
            output_arena: reg(RegionKind::OutputArena, Permissions::READ)?,
        })
    }
}

/// Ring geometry learned at connection time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingGeometry {
    pub capacity: usize,
    pub input_quota: usize,
    pub output_quota: usize,
}

impl RingGeometry {
    pub fn of(ring: &RingBuffer) -> Self {
        Self {
            capacity: ring.capacity(),
            input_quota: ring.input_quota(),
            output_quota: ring.output_quota(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct FrontendStats {
    pub submitted: u64,
    pub rejected_full: u64,
    pub claim_conflicts: u64,
    pub cache_refreshes: u64,
    pub reader_cycles: u64,
    pub tokens_delivered: u64,
    pub reclaimed: u64,
    pub mean_probes: f64,
}

#[derive(Default)]
struct Tracker {
    records: HashMap<u64, RequestRecord>,
    sinks: HashMap<u64, Sink>,
    by_slot: HashMap<usize, u64>,
    /// Slots still waiting for their first token, oldest first.
    urgent: Vec<usize>,
    /// All occupied slots this frontend owns.
    active: BTreeSet<usize>,
    finished: Vec<u64>,
}

impl Tracker {
    fn send(&mut self, id: u64, ev: StreamEvent) {
        if let Some(s) = self.sinks.get(&id) {
            if s.send(ev).is_err() {
                self.sinks.remove(&id);
            }
        }
    }

    fn finish(&mut self, id: u64, status: RequestStatus, at: Duration, reason: Option<FinishReason>, error: Option<String>) {
        let slot = self.records.get(&id).and_then(|r| r.slot);
        if let Some(r) = self.records.get_mut(&id) {
            r.status = status;
            r.finished = Some(at);
            if reason.is_some() {
                r.finish = reason;
            }
            if error.is_some() {
                r.error = error.clone();
            }
        }
        if let Some(slot) = slot {
            if self.by_slot.get(&slot) == Some(&id) {
                self.by_slot.remove(&slot);
                self.active.remove(&slot);
                self.urgent.retain(|&s| s != slot);
            }
        }
        let ev = match (status, error) {
            (RequestStatus::Failed, Some(message)) => StreamEvent::Failed { message },
            _ => StreamEvent::Done {
                reason: reason.unwrap_or(FinishReason::Length),
            },
        };
        self.send(id, ev);
        self.sinks.remove(&id);
        self.finished.push(id);
    }
}

pub struct Frontend {
    cfg: FrontendConfig,
    transport: Arc<Transport>,
    handles: RingHandles,
    geometry: RingGeometry,
    cache: Mutex<SlotCache>,
    tracker: Mutex<Tracker>,
    poll: Mutex<PollController>,
    reader: Mutex<()>,
    next_id: AtomicU64,
    next_seq: AtomicU64,
    stats: Mutex<FrontendStats>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("geometry", &self.geometry).finish()
    }
}

impl Frontend {
    pub fn new(cfg: FrontendConfig, transport: Arc<Transport>, handles: RingHandles, geometry: RingGeometry) -> Self {
        let us = Duration::from_micros;
        Self {
            poll: Mutex::new(PollController::new(
                us(cfg.poll_us_min),
                us(cfg.poll_us_max),
                us(cfg.poll_us_init),
            )),
            cache: Mutex::new(SlotCache::new(geometry.capacity)),
            tracker: Mutex::new(Tracker::default()),
            reader: Mutex::new(()),
            next_id: AtomicU64::new(1),
            next_seq: AtomicU64::new(1),
            stats: Mutex::new(FrontendStats::default()),
            cfg,
            transport,
            handles,
            geometry,
        }
    }

    /// Registers the ring with `transport` and builds a frontend over it.
    pub fn attach(cfg: FrontendConfig, ring: &Arc<RingBuffer>, transport: Arc<Transport>) -> Result<Self, FrontendError> {
        let handles = RingHandles::register(ring, &transport)?;
        Ok(Self::new(cfg, transport, handles, RingGeometry::of(ring)))
    }

    /// Starts request ids at `first` so several frontends can share a ring
    /// without colliding. Zero is not a valid id and is bumped to one.
    pub fn with_first_request_id(self, first: u64) -> Self {
        self.next_id.store(first.max(1), Ordering::Relaxed);
        self
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn transport(&self) -> &Arc<Transport> {
        &self.transport
    }

    pub fn geometry(&self) -> RingGeometry {
        self.geometry
    }

    pub fn poll_interval(&self) -> Duration {
        self.poll.lock().interval()
    }

    pub fn stats(&self) -> FrontendStats {
        let mut s = *self.stats.lock();
        s.mean_probes = self.cache.lock().mean_probes();
        s
    }

    pub fn cache_snapshot(&self) -> SlotCache {
        self.cache.lock().clone()
    }

    pub fn reset_probe_stats(&self) {
        self.cache.lock().reset_probe_stats();
    }

    /// Requests not yet DONE or FAILED.
    pub fn outstanding(&self) -> usize {
        let t = self.tracker.lock();
        t.records.len() - t.finished.len()
    }

    pub fn record(&self, id: u64) -> Option<RequestRecord> {
        self.tracker.lock().records.get(&id).cloned()
    }

    /// Removes and returns every terminal record.
    pub fn take_finished(&self) -> Vec<RequestRecord> {
        let mut t = self.tracker.lock();
        let ids = std::mem::take(&mut t.finished);
        ids.into_iter().filter_map(|id| t.records.remove(&id)).collect()
    }

    /// Validates a request against the ring's per-slot quotas.
    pub fn validate(&self, prompt_len: usize, max_output: u32) -> Result<(), FrontendError> {
        if prompt_len == 0 {
            return Err(FrontendError::EmptyPrompt);
        }
        if prompt_len > self.geometry.input_quota {
            return Err(FrontendError::PromptTooLong {
                len: prompt_len,
                max: self.geometry.input_quota,
            });
        }
        if max_output == 0 || max_output as usize > self.geometry.output_quota {
            return Err(FrontendError::InvalidMaxTokens {
                requested: max_output,
                max: self.geometry.output_quota,
            });
        }
        Ok(())
    }

    /// One bulk read of the packed metadata array.
    pub fn read_metadata(&self) -> Result<MetadataSnapshot, FrontendError> {
        let len = self.geometry.capacity * SNAPSHOT_ENTRY_BYTES;
        let task = self.transport.read_task(self.handles.metadata, 0, len);
        let c = self.transport.execute_batch(QueuePair::Retrieve, vec![task])?;
        let bytes = c.into_iter().next().unwrap().into_read()?;
        MetadataSnapshot::from_bytes(&bytes).ok_or_else(|| FrontendError::Rejected("malformed metadata".into()))
    }

    fn refresh_cache(&self) -> Result<(), FrontendError> {
        let snap = self.read_metadata()?;
        self.cache.lock().refresh(&snap);
        self.stats.lock().cache_refreshes += 1;
        Ok(())
    }

    /// Reserves one slot per id. Returns the slot for each, or `None` when
    /// the ring is full even after a forced refresh.
    fn reserve_slots(&self, ids: &[u64]) -> Result<Vec<Option<usize>>, FrontendError> {
        let mut result = vec![None; ids.len()];
        let mut todo: Vec<usize> = (0..ids.len()).collect();
        let mut refreshed = false;
        while !todo.is_empty() {
            let mut tasks = Vec::with_capacity(todo.len());
            let mut picked = Vec::with_capacity(todo.len());
            let mut starved = Vec::new();
            {
                let mut cache = self.cache.lock();
                for &i in &todo {
                    match cache.take_candidate() {
                        Some(slot) => {
                            tasks.push(self.transport.cas_task(
                                self.handles.slot_control,
                                slot * SLOT_CONTROL_STRIDE,
                                0,
                                ids[i],
                            ));
                            picked.push((i, slot));
                        }
                        None => starved.push(i),
                    }
                }
            }
            let mut retry = Vec::new();
            if !tasks.is_empty() {
                let completions = self.transport.execute_batch(QueuePair::Submit, tasks)?;
                let mut cache = self.cache.lock();
                for ((i, slot), c) in picked.into_iter().zip(completions) {
                    if cas_ok(&c) {
                        cache.record_allocation();
                        result[i] = Some(slot);
                    } else {
                        // stale free bit; it stays marked taken
                        self.stats.lock().claim_conflicts += 1;
                        retry.push(i);
                    }
                }
            }
            if !starved.is_empty() {
                if refreshed {
                    break;
                }
                self.refresh_cache()?;
                refreshed = true;
                retry.extend(starved);
            }
            retry.sort_unstable();
            todo = retry;
        }
        Ok(result)
    }

    /// Submits a batch of requests. Reservations go out as one post, then all
    /// payloads and publishing CASes as a second one.
    pub fn submit_batch(&self, reqs: Vec<SubmitRequest>) -> Vec<Result<u64, FrontendError>> {
        let mut out: Vec<Option<Result<u64, FrontendError>>> = Vec::with_capacity(reqs.len());
        let mut ids = Vec::new();
        let mut valid = Vec::new();
        for (i, r) in reqs.iter().enumerate() {
            match self.validate(r.prompt.len(), r.max_output) {
                Ok(()) => {
                    let id = self.next_id.fetch_add(1, Ordering::Relaxed);
                    ids.push(id);
                    valid.push(i);
                    out.push(None);
                }
                Err(e) => out.push(Some(Err(e))),
            }
        }
        if valid.is_empty() {
            return out.into_iter().map(Option::unwrap).collect();
        }
        let slots = match self.reserve_slots(&ids) {
            Ok(s) => s,
            Err(e) => {
                let msg = e.to_string();
                for &i in &valid {
                    out[i] = Some(Err(FrontendError::Rejected(msg.clone())));
                }
                return out.into_iter().map(Option::unwrap).collect();
            }
        };

        let mut reqs: Vec<Option<SubmitRequest>> = reqs.into_iter().map(Some).collect();
        let mut payload = Vec::new();
        let mut placed = Vec::new();
        for (k, &i) in valid.iter().enumerate() {
            let Some(slot) = slots[k] else {
                self.stats.lock().rejected_full += 1;
                out[i] = Some(Err(FrontendError::NoSlot));
                continue;
            };
            let req = reqs[i].take().unwrap();
            let id = ids[k];
            let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
            let bytes: Vec<u8> = req.prompt.iter().flat_map(|t| t.to_le_bytes()).collect();
            payload.push(self.transport.write_task(
                self.handles.input_arena,
                slot * self.geometry.input_quota * 4,
                bytes,
            ));
            let rec = SlotControlRecord {
                request_id: id,
                seed: req.seed,
                arrival_seq: seq,
                input_len: req.prompt.len() as u32,
                max_output: req.max_output,
                cancel: 0,
            };
            payload.push(self.transport.write_task(
                self.handles.slot_control,
                slot * SLOT_CONTROL_STRIDE,
                rec.to_bytes().to_vec(),
            ));
            placed.push((i, id, slot, req));
        }
        if placed.is_empty() {
            return out.into_iter().map(Option::unwrap).collect();
        }

        // Track before publishing so the reader never sees an unknown slot.
        {
            let mut t = self.tracker.lock();
            for (_, id, slot, req) in placed.iter_mut() {
                t.records.insert(
                    *id,
                    RequestRecord {
                        request_id: *id,
                        slot: Some(*slot),
                        status: RequestStatus::Queued,
                        prompt_len: req.prompt.len(),
                        max_output: req.max_output,
                        arrival: req.arrival,
                        submitted: None,
                        first_token: None,
                        last_token: None,
                        finished: None,
                        tokens: Vec::new(),
                        token_times: Vec::new(),
                        finish: None,
                        cancel_requested: false,
                        error: None,
                    },
                );
                if let Some(sink) = req.sink.take() {
                    t.sinks.insert(*id, sink);
                }
            }
        }

        let mut tasks = payload;
        for (_, _, slot, _) in &placed {
            tasks.push(self.transport.cas_task(
                self.handles.state_words,
                slot * STATE_WORD_STRIDE,
                SlotState::Empty as u64,
                SlotState::PrefillPending as u64,
            ));
        }
        let n_payload = placed.len() * 2;
        let completions = self.transport.execute_batch(QueuePair::Submit, tasks);
        let now = self.transport.clock().now();
        let completions = match completions {
            Ok(c) => c,
            Err(e) => {
                let msg = e.to_string();
                let mut t = self.tracker.lock();
                for (i, id, slot, _) in &placed {
                    t.records.remove(id);
                    t.sinks.remove(id);
                    out[*i] = Some(Err(FrontendError::Rejected(msg.clone())));
                    let _ = slot;
                }
                drop(t);
                // Best effort: return the reservations.
                for (_, id, slot, _) in &placed {
                    self.release(*slot, *id);
                }
                return out.into_iter().map(Option::unwrap).collect();
            }
        };

        let mut failed = Vec::new();
        {
            let mut t = self.tracker.lock();
            for (k, (i, id, slot, _)) in placed.iter().enumerate() {
                let wrote = completions[2 * k].outcome.is_ok() && completions[2 * k + 1].outcome.is_ok();
                let published = cas_ok(&completions[n_payload + k]);
                if wrote && published {
                    let r = t.records.get_mut(id).unwrap();
                    r.status = RequestStatus::Submitted;
                    r.submitted = Some(now);
                    t.by_slot.insert(*slot, *id);
                    t.active.insert(*slot);
                    t.urgent.push(*slot);
                    out[*i] = Some(Ok(*id));
                } else {
                    let why = first_error(&completions[2 * k..2 * k + 2])
                        .or_else(|| first_error(&completions[n_payload + k..n_payload + k + 1]))
                        .unwrap_or_else(|| "slot was not EMPTY".into());
                    t.records.remove(id);
                    t.sinks.remove(id);
                    out[*i] = Some(Err(FrontendError::Rejected(why)));
                    failed.push((*slot, *id));
                }
            }
        }
        for (slot, id) in failed {
            self.release(slot, id);
        }
        self.stats.lock().submitted += out.iter().filter(|r| matches!(r, Some(Ok(_)))).count() as u64;
        out.into_iter().map(Option::unwrap).collect()
    }

    pub fn submit(&self, req: SubmitRequest) -> Result<u64, FrontendError> {
        self.submit_batch(vec![req]).pop().unwrap()
    }

    fn release(&self, slot: usize, id: u64) {
        let task = self
            .transport
            .cas_task(self.handles.slot_control, slot * SLOT_CONTROL_STRIDE, id, 0);
        if let Ok(c) = self.transport.execute_batch(QueuePair::Submit, vec![task]) {
            if cas_ok(&c[0]) {
                self.cache.lock().mark_free(slot);
            }
        }
    }

    /// Sets the slot's cancel flag; the device finishes it at its next
    /// boundary and the reader then reports it FAILED.
    pub fn cancel(&self, id: u64) -> Result<(), FrontendError> {
        let slot = {
            let mut t = self.tracker.lock();
            let r = t.records.get_mut(&id).ok_or(FrontendError::UnknownRequest(id))?;
            if r.is_terminal() {
                return Ok(());
            }
            r.cancel_requested = true;
            t.sinks.remove(&id);
            r_slot(&t, id)
        };
        let Some(slot) = slot else { return Ok(()) };
        let task = self.transport.write_task(
            self.handles.slot_control,
            slot * SLOT_CONTROL_STRIDE + CANCEL_FIELD_OFFSET,
            1u32.to_le_bytes().to_vec(),
        );
        let c = self.transport.execute_batch(QueuePair::Submit, vec![task])?;
        c[0].outcome.clone().map_err(TransportError::from)?;
        Ok(())
    }

    /// One reader pass. Returns the number of tokens delivered.
    pub fn reader_cycle(&self) -> Result<usize, FrontendError> {
        let _guard = self.reader.lock();
        let snap = self.read_metadata()?;
        self.cache.lock().refresh(&snap);
        self.stats.lock().reader_cycles += 1;

        let now_slots: Vec<(usize, u64)> = {
            let t = self.tracker.lock();
            let mut order: Vec<usize> = Vec::with_capacity(t.active.len());
            if self.cfg.urgent_enabled {
                order.extend(t.urgent.iter().copied());
                order.extend(t.active.iter().copied().filter(|s| !t.urgent.contains(s)));
            } else {
                order.extend(t.active.iter().copied());
            }
            order.into_iter().map(|s| (s, t.by_slot[&s])).collect()
        };

        // Plan range reads.
        let mut budget = self.cfg.reader_token_cap;
        let mut reads: Vec<(usize, u64, usize, usize)> = Vec::new();
        {
            let t = self.tracker.lock();
            for &(slot, id) in &now_slots {
                let e = &snap.entries[slot];
                if e.request_id != id {
                    continue;
                }
                let have = t.records[&id].tokens.len();
                let gen = e.generated_count as usize;
                if gen > have && budget > 0 {
                    let n = (gen - have).min(budget);
                    budget -= n;
                    reads.push((slot, id, have, n));
                }
            }
        }
        let tasks: Vec<TransferTask> = reads
            .iter()
            .map(|&(slot, _, from, n)| {
                let off = (slot * self.geometry.output_quota + from) * 4;
                self.transport.read_task(self.handles.output_arena, off, n * 4)
            })
            .collect();
        let completions = if tasks.is_empty() {
            Vec::new()
        } else {
            self.transport.execute_batch(QueuePair::Retrieve, tasks)?
        };
        let now = self.transport.clock().now();

        let mut delivered = 0;
        {
            let mut t = self.tracker.lock();
            for (&(slot, id, _, _), c) in reads.iter().zip(completions) {
                let bytes = match c.outcome {
                    Ok(crate::transport::Outcome::Read(b)) => b,
                    Ok(_) => continue,
                    Err(e) => {
                        t.finish(id, RequestStatus::Failed, now, None, Some(e.to_string()));
                        continue;
                    }
                };
                let ids: Vec<u32> = bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                delivered += ids.len();
                let eos = self.cfg.eos_token;
                let r = t.records.get_mut(&id).unwrap();
                r.tokens.extend_from_slice(&ids);
                r.token_times.extend(std::iter::repeat_n(now, ids.len()));
                r.first_token.get_or_insert(now);
                r.last_token = Some(now);
                r.status = RequestStatus::Streaming;
                let finish = if r.tokens.last() == Some(&eos) {
                    Some(FinishReason::Stop)
                } else if r.tokens.len() >= r.max_output as usize {
                    Some(FinishReason::Length)
                } else {
                    None
                };
                if finish.is_some() {
                    r.finish = finish;
                }
                t.urgent.retain(|&s| s != slot);
                t.send(id, StreamEvent::Tokens { ids, finish });
            }
        }

        // Reclaim slots whose every token has been delivered.
        let reclaim: Vec<(usize, u64)> = {
            let t = self.tracker.lock();
            now_slots
                .iter()
                .filter(|&&(slot, id)| {
                    let e = &snap.entries[slot];
                    e.request_id == id
                        && e.slot_state() == Some(SlotState::DecodeCompleted)
                        && t.records.get(&id).is_some_and(|r| r.tokens.len() == e.generated_count as usize)
                })
                .copied()
                .collect()
        };
        if !reclaim.is_empty() {
            let tasks = reclaim
                .iter()
                .map(|&(slot, _)| {
                    self.transport.cas_task(
                        self.handles.state_words,
                        slot * STATE_WORD_STRIDE,
                        SlotState::DecodeCompleted as u64,
                        SlotState::Empty as u64,
                    )
                })
                .collect();
            let completions = self.transport.execute_batch(QueuePair::Retrieve, tasks)?;
            let now = self.transport.clock().now();
            let mut t = self.tracker.lock();
            let mut cache = self.cache.lock();
            let mut reclaimed = 0;
            for (&(slot, id), c) in reclaim.iter().zip(completions) {
                if cas_ok(&c) {
                    reclaimed += 1;
                    cache.mark_free(slot);
                    let r = &t.records[&id];
                    let cancelled = r.cancel_requested && r.finish.is_none();
                    if cancelled {
                        t.finish(
                            id,
                            RequestStatus::Failed,
                            now,
                            Some(FinishReason::Cancelled),
                            Some("cancelled".into()),
                        );
                    } else {
                        let reason = r.finish.unwrap_or(FinishReason::Length);
                        t.finish(id, RequestStatus::Done, now, Some(reason), None);
                    }
                } else {
                    let why = first_error(std::slice::from_ref(&c)).unwrap_or_else(|| "reclaim CAS lost".into());
                    t.finish(id, RequestStatus::Failed, now, None, Some(why));
                }
            }
            self.stats.lock().reclaimed += reclaimed;
        }

        self.poll.lock().observe(delivered);
        self.stats.lock().tokens_delivered += delivered as u64;
        Ok(delivered)
    }
}

fn r_slot(t: &Tracker, id: u64) -> Option<usize> {
    t.records.get(&id).and_then(|r| r.slot).filter(|s| t.by_slot.get(s) == Some(&id))
}

fn cas_ok(c: &Completion) -> bool {
    c.cas_succeeded().unwrap_or(false)
}

fn first_error(cs: &[Completion]) -> Option<String> {
    cs.iter().find_map(|c| c.outcome.as_ref().err().map(|e| e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use crate::engine::{Engine, EngineConfig};
    use crate::scheduler::{DeviceScheduler, HostConfig, KvConfig, SchedulerConfig};
    use crate::transport::TransportConfig;

    fn setup(cap: usize) -> (Arc<RingBuffer>, Arc<Transport>, Frontend) {
        let ring = Arc::new(RingBuffer::create(cap, cap * 64, cap * 64).unwrap().with_audit());
        let transport = Arc::new(Transport::new(TransportConfig::default(), Clock::virtual_clock()));
        let fe = Frontend::attach(FrontendConfig::default(), &ring, Arc::clone(&transport)).unwrap();
        (ring, transport, fe)
    }

    #[test]
    fn submit_publishes_prefill_pending() {
        let (ring, _t, fe) = setup(8);
        let id = fe.submit(SubmitRequest::new(vec![5, 6, 7], 4, 9, Duration::ZERO)).unwrap();
        let slot = fe.record(id).unwrap().slot.unwrap();
        let s = ring.slot(slot).unwrap();
        assert_eq!(s.state, SlotState::PrefillPending);
        assert_eq!(s.request_id, id);
        assert_eq!(s.input_len, 3);
        assert_eq!(s.max_output, 4);
        let mut p = Vec::new();
        ring.read_prompt(slot, &mut p).unwrap();
        assert_eq!(p, [5, 6, 7]);
    }

    #[test]
    fn validation_errors() {
        let (_r, _t, fe) = setup(4);
        assert!(matches!(fe.submit(SubmitRequest::new(vec![], 4, 0, Duration::ZERO)), Err(FrontendError::EmptyPrompt)));
        assert!(matches!(
            fe.submit(SubmitRequest::new(vec![1; 65], 4, 0, Duration::ZERO)),
            Err(FrontendError::PromptTooLong { len: 65, max: 64 })
        ));
        assert!(matches!(
            fe.submit(SubmitRequest::new(vec![1], 0, 0, Duration::ZERO)),
            Err(FrontendError::InvalidMaxTokens { .. })
        ));
    }

    #[test]
    fn full_ring_rejects_after_refresh() {
        let (ring, _t, fe) = setup(4);
        for _ in 0..4 {
            fe.submit(SubmitRequest::new(vec![1], 2, 0, Duration::ZERO)).unwrap();
        }
        assert!(matches!(fe.submit(SubmitRequest::new(vec![1], 2, 0, Duration::ZERO)), Err(FrontendError::NoSlot)));
        assert_eq!(fe.stats().rejected_full, 1);
        assert!(ring.snapshot_metadata().entries.iter().all(|e| e.state == SlotState::PrefillPending as u32));
    }

    #[test]
    fn stale_free_bit_is_skipped() {
        let (ring, _t, fe) = setup(8);
        // someone else took slot 0 behind the cache's back
        assert!(ring.reserve(0, 999).unwrap());
        let id = fe.submit(SubmitRequest::new(vec![1], 2, 0, Duration::ZERO)).unwrap();
        assert_eq!(fe.record(id).unwrap().slot, Some(1));
        assert_eq!(fe.stats().claim_conflicts, 1);
        assert!(!fe.cache_snapshot().is_free(0));
    }

    #[test]
    fn end_to_end_stream_and_reclaim() {
        let (ring, transport, fe) = setup(8);
        let engine = Engine::new(&EngineConfig::default()).unwrap();
        let mut sched = DeviceScheduler::new(
            SchedulerConfig {
                scan_threads: 1,
                lanes: 8,
                ..Default::default()
            },
            Arc::clone(&ring),
            engine,
            KvConfig::default(),
            HostConfig::default(),
        )
        .unwrap();
        let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel();
        let mut req = SubmitRequest::new(vec![10, 11, 12], 8, 42, Duration::ZERO);
        req.sink = Some(tx);
        let id = fe.submit(req).unwrap();
        let clock = transport.clock().clone();
        let mut wake = Some(clock.now());
        for _ in 0..10_000 {
            if let Some(w) = wake {
                clock.advance_to(w);
                wake = sched.iterate(clock.now()).unwrap();
            } else {
                clock.advance_to(clock.now() + Duration::from_millis(1));
            }
            fe.reader_cycle().unwrap();
            if fe.outstanding() == 0 {
                break;
            }
        }
        let done = fe.take_finished();
        assert_eq!(done.len(), 1);
        let r = &done[0];
        assert_eq!(r.request_id, id);
        assert_eq!(r.status, RequestStatus::Done);
        assert_eq!(r.tokens.len(), 8);
        assert_eq!(r.finish, Some(FinishReason::Length));
        assert_eq!(ring.state(r.slot.unwrap()).unwrap(), SlotState::Empty);
        let mut streamed = Vec::new();
        let mut done_seen = false;
        while let Ok(ev) = rx.try_recv() {
            match ev {
                StreamEvent::Tokens { ids, .. } => streamed.extend(ids),
                StreamEvent::Done { reason } => {
                    assert_eq!(reason, FinishReason::Length);
                    done_seen = true;
                }
                StreamEvent::Failed { message } => panic!("{message}"),
            }
        }
        assert!(done_seen);
        assert_eq!(streamed, r.tokens);
        assert_eq!(transport.one_sided_guarantee_audit(), 0);
        assert_eq!(ring.rejected_transitions(), 0);
    }
}

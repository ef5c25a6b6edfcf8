//! The shared ring buffer: a fixed slot array plus input/output token arenas.
//!
//! This is the only structure both planes touch. The frontend reaches it
//! through one-sided transfers (see [`regions`]); the device scheduler uses
//! the methods here directly.
//!
//! Each slot keeps its lifecycle state and its generated-token counter packed
//! in a single 64-bit word (`state << 32 | generated_count`). That gives the
//! metadata snapshot a consistent `(state, count)` pair per slot and lets the
//! `DECODE_COMPLETED -> EMPTY` edge reset the counter in the same CAS.
//!
//! Ordering contract: payload before state. Arena and slot-field writes are
//! issued before the releasing CAS on the slot word; readers acquire the word
//! before touching the payload.

pub mod regions;

use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use regions::{RegionKind, RingRegion, SLOT_CONTROL_STRIDE, STATE_WORD_STRIDE};

/// Bytes per slot in the metadata snapshot wire layout.
pub const SNAPSHOT_ENTRY_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u32)]
pub enum SlotState {
    Empty = 0,
    PrefillPending = 1,
    PrefillProcessing = 2,
    DecodeProcessing = 3,
    DecodePaused = 4,
    DecodeCompleted = 5,
}

impl SlotState {
    pub const ALL: [SlotState; 6] = [
        SlotState::Empty,
        SlotState::PrefillPending,
        SlotState::PrefillProcessing,
        SlotState::DecodeProcessing,
        SlotState::DecodePaused,
        SlotState::DecodeCompleted,
    ];

    pub fn from_u32(v: u32) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Is this slot holding a live request?
    pub fn is_occupied(self) -> bool {
        self != SlotState::Empty
    }
}

impl fmt::Display for SlotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlotState::Empty => "EMPTY",
            SlotState::PrefillPending => "PREFILL_PENDING",
            SlotState::PrefillProcessing => "PREFILL_PROCESSING",
            SlotState::DecodeProcessing => "DECODE_PROCESSING",
            SlotState::DecodePaused => "DECODE_PAUSED",
            SlotState::DecodeCompleted => "DECODE_COMPLETED",
        };
        f.write_str(s)
    }
}

/// Which side of the system performs an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    Frontend,
    Device,
}

/// The designated owner of a state edge, or `None` when the edge is illegal.
pub fn edge_owner(from: SlotState, to: SlotState) -> Option<Plane> {
    use SlotState::*;
    match (from, to) {
        (Empty, PrefillPending) => Some(Plane::Frontend),
        (PrefillPending, PrefillProcessing) => Some(Plane::Device),
        (PrefillProcessing, DecodeProcessing) => Some(Plane::Device),
        (DecodeProcessing, DecodePaused) => Some(Plane::Device),
        (DecodePaused, DecodeProcessing) => Some(Plane::Device),
        (DecodeProcessing, DecodeCompleted) => Some(Plane::Device),
        (DecodeCompleted, Empty) => Some(Plane::Frontend),
        _ => None,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("invalid ring size: {0}")]
    InvalidSize(String),
    #[error("slot index {0} out of range")]
    SlotOutOfRange(usize),
    #[error("illegal transition {from} -> {to} by {actor:?}")]
    IllegalTransition {
        from: SlotState,
        to: SlotState,
        actor: Plane,
    },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("arena exhausted: need {needed} tokens, slot range holds {available}")]
    ArenaExhausted { needed: usize, available: usize },
    #[error("slot {slot} output capacity exceeded ({requested} > {capacity})")]
    CapacityExceeded {
        slot: usize,
        requested: usize,
        capacity: usize,
    },
    #[error("slot {slot} is in state {state}, expected {expected}")]
    WrongState {
        slot: usize,
        state: SlotState,
        expected: &'static str,
    },
}

#[inline]
fn pack(state: SlotState, count: u32) -> u64 {
    ((state as u64) << 32) | count as u64
}

#[inline]
fn unpack(word: u64) -> (SlotState, u32) {
    let state = SlotState::from_u32((word >> 32) as u32).expect("corrupt slot word");
    (state, word as u32)
}

#[derive(Debug, Default)]
pub(crate) struct SlotCell {
    word: AtomicU64,
    request_id: AtomicU64,
    seed: AtomicU64,
    arrival_seq: AtomicU64,
    input_len: AtomicU32,
    max_output: AtomicU32,
    cancel: AtomicU32,
}

/// Point-in-time copy of one slot's fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub index: usize,
    pub state: SlotState,
    pub request_id: u64,
    pub input_offset: usize,
    pub input_len: usize,
    pub output_offset: usize,
    pub output_capacity: usize,
    pub generated_count: usize,
    pub max_output: usize,
    pub sampling_seed: u64,
    pub arrival_seq: u64,
    pub cancel_requested: bool,
}

/// Request metadata written alongside a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptMeta {
    pub request_id: u64,
    pub max_output: u32,
    pub seed: u64,
    pub arrival_seq: u64,
}

/// One entry of the metadata snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlotMeta {
    pub state: u32,
    pub generated_count: u32,
    pub request_id: u64,
}

impl SlotMeta {
    pub fn slot_state(&self) -> Option<SlotState> {
        SlotState::from_u32(self.state)
    }
}

/// Per-slot `(state, generated_count, request_id)` array.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetadataSnapshot {
    pub entries: Vec<SlotMeta>,
}

impl MetadataSnapshot {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Little-endian wire layout: `state: u32, generated_count: u32, request_id: u64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * SNAPSHOT_ENTRY_BYTES);
        for e in &self.entries {
            encode_meta(e, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() % SNAPSHOT_ENTRY_BYTES != 0 {
            return None;
        }
        let entries = bytes
            .chunks_exact(SNAPSHOT_ENTRY_BYTES)
            .map(|c| SlotMeta {
                state: u32::from_le_bytes(c[0..4].try_into().unwrap()),
                generated_count: u32::from_le_bytes(c[4..8].try_into().unwrap()),
                request_id: u64::from_le_bytes(c[8..16].try_into().unwrap()),
            })
            .collect();
        Some(Self { entries })
    }
}

pub(crate) fn encode_meta(e: &SlotMeta, out: &mut Vec<u8>) {
    out.extend_from_slice(&e.state.to_le_bytes());
    out.extend_from_slice(&e.generated_count.to_le_bytes());
    out.extend_from_slice(&e.request_id.to_le_bytes());
}

/// One successful state change, recorded when auditing is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionRecord {
    pub slot: usize,
    pub from: SlotState,
    pub to: SlotState,
    pub actor: Plane,
}

#[derive(Debug, Default)]
struct Audit {
    log: Mutex<Vec<TransitionRecord>>,
}

pub struct RingBuffer {
    slots: Box<[SlotCell]>,
    input_arena: Box<[AtomicU32]>,
    output_arena: Box<[AtomicU32]>,
    input_quota: usize,
    output_quota: usize,
    mask: usize,
    rejected: AtomicU64,
    audit: Option<Audit>,
}

impl fmt::Debug for RingBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RingBuffer")
            .field("capacity", &self.capacity())
            .field("input_quota", &self.input_quota)
            .field("output_quota", &self.output_quota)
            .finish()
    }
}

fn atomic_arena(len: usize) -> Box<[AtomicU32]> {
    // AtomicU32 has the same layout as u32, and zero is a valid value.
    let zeroed: Vec<u32> = vec![0; len];
    let mut zeroed = std::mem::ManuallyDrop::new(zeroed);
    let (ptr, len, cap) = (zeroed.as_mut_ptr(), zeroed.len(), zeroed.capacity());
    unsafe { Vec::from_raw_parts(ptr.cast::<AtomicU32>(), len, cap) }.into_boxed_slice()
}

impl RingBuffer {
    /// Creates a ring with every slot `EMPTY` and both arenas zeroed.
    ///
    /// Each slot owns a fixed quota of `arena / capacity` tokens in each arena.
    pub fn create(
        capacity: usize,
        input_arena_tokens: usize,
        output_arena_tokens: usize,
    ) -> Result<Self, RingError> {
        if capacity == 0 || !capacity.is_power_of_two() {
            return Err(RingError::InvalidSize(format!(
                "capacity {capacity} is not a power of two"
            )));
        }
        if capacity > u32::MAX as usize {
            return Err(RingError::InvalidSize("capacity too large".into()));
        }
        if input_arena_tokens == 0 || output_arena_tokens == 0 {
            return Err(RingError::InvalidSize("arena size must be > 0".into()));
        }
        let input_quota = input_arena_tokens / capacity;
        let output_quota = output_arena_tokens / capacity;
        if input_quota == 0 || output_quota == 0 {
            return Err(RingError::InvalidSize(format!(
                "arenas ({input_arena_tokens}, {output_arena_tokens}) too small for {capacity} slots"
            )));
        }
        let slots = (0..capacity).map(|_| SlotCell::default()).collect();
        Ok(Self {
            slots,
            input_arena: atomic_arena(input_arena_tokens),
            output_arena: atomic_arena(output_arena_tokens),
            input_quota,
            output_quota,
            mask: capacity - 1,
            rejected: AtomicU64::new(0),
            audit: None,
        })
    }

    /// Enables the transition log used by safety checks.
    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Audit::default());
        self
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn mask(&self) -> usize {
        self.mask
    }

    pub fn input_quota(&self) -> usize {
        self.input_quota
    }

    pub fn output_quota(&self) -> usize {
        self.output_quota
    }

    pub fn input_arena_len(&self) -> usize {
        self.input_arena.len()
    }

    pub fn output_arena_len(&self) -> usize {
        self.output_arena.len()
    }

    /// Number of transition attempts rejected as illegal.
    pub fn rejected_transitions(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn transition_log(&self) -> Vec<TransitionRecord> {
        self.audit
            .as_ref()
            .map(|a| a.log.lock().clone())
            .unwrap_or_default()
    }

    fn cell(&self, slot: usize) -> Result<&SlotCell, RingError> {
        self.slots.get(slot).ok_or(RingError::SlotOutOfRange(slot))
    }

    pub fn state(&self, slot: usize) -> Result<SlotState, RingError> {
        Ok(unpack(self.cell(slot)?.word.load(Ordering::Acquire)).0)
    }

    pub fn generated_count(&self, slot: usize) -> Result<usize, RingError> {
        Ok(unpack(self.cell(slot)?.word.load(Ordering::Acquire)).1 as usize)
    }

    pub fn slot(&self, slot: usize) -> Result<Slot, RingError> {
        let c = self.cell(slot)?;
        let (state, count) = unpack(c.word.load(Ordering::Acquire));
        Ok(Slot {
            index: slot,
            state,
            request_id: c.request_id.load(Ordering::Acquire),
            input_offset: slot * self.input_quota,
            input_len: c.input_len.load(Ordering::Acquire) as usize,
            output_offset: slot * self.output_quota,
            output_capacity: self.output_quota,
            generated_count: count as usize,
            max_output: c.max_output.load(Ordering::Acquire) as usize,
            sampling_seed: c.seed.load(Ordering::Acquire),
            arrival_seq: c.arrival_seq.load(Ordering::Acquire),
            cancel_requested: c.cancel.load(Ordering::Acquire) != 0,
        })
    }

    /// Atomically moves `slot` from `expected` to `next`.
    ///
    /// Returns `Ok(false)` when the slot was not in `expected` (lost race).
    pub fn transition(
        &self,
        slot: usize,
        expected: SlotState,
        next: SlotState,
        actor: Plane,
    ) -> Result<bool, RingError> {
        let cell = self.cell(slot)?;
        if edge_owner(expected, next) != Some(actor) {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(RingError::IllegalTransition {
                from: expected,
                to: next,
                actor,
            });
        }
        let reclaim = next == SlotState::Empty;
        let mut current = cell.word.load(Ordering::Acquire);
        loop {
            let (state, count) = unpack(current);
            if state != expected {
                return Ok(false);
            }
            let new_count = if reclaim { 0 } else { count };
            match cell.word.compare_exchange_weak(
                current,
                pack(next, new_count),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => break,
                Err(observed) => current = observed,
            }
        }
        if reclaim {
            cell.cancel.store(0, Ordering::Relaxed);
            cell.request_id.store(0, Ordering::Release);
        }
        if let Some(audit) = &self.audit {
            audit.log.lock().push(TransitionRecord {
                slot,
                from: expected,
                to: next,
                actor,
            });
        }
        Ok(true)
    }

    /// Reserves an `EMPTY` slot for `request_id` by swapping its request id
    /// from 0. Fails when the slot is occupied or already reserved.
    pub fn reserve(&self, slot: usize, request_id: u64) -> Result<bool, RingError> {
        let cell = self.cell(slot)?;
        if request_id == 0 {
            return Err(RingError::InvalidSize("request id 0 is reserved".into()));
        }
        if unpack(cell.word.load(Ordering::Acquire)).0 != SlotState::Empty {
            return Ok(false);
        }
        Ok(cell
            .request_id
            .compare_exchange(0, request_id, Ordering::AcqRel, Ordering::Acquire)
            .is_ok())
    }

    /// Drops a reservation that never reached `PREFILL_PENDING`.
    pub fn release(&self, slot: usize, request_id: u64) -> Result<bool, RingError> {
        let cell = self.cell(slot)?;
        if unpack(cell.word.load(Ordering::Acquire)).0 != SlotState::Empty {
            return Ok(false);
        }
        Ok(cell
            .request_id
            .compare_exchange(request_id, 0, Ordering::AcqRel, Ordering::Acquire)
            .is_ok())
    }

    /// Writes a prompt and its metadata into an `EMPTY` slot's input range.
    ///
    /// The caller must hold the slot (reservation) and flip it to
    /// `PREFILL_PENDING` afterwards.
    pub fn write_prompt(&self, slot: usize, tokens: &[u32], meta: PromptMeta) -> Result<(), RingError> {
        let cell = self.cell(slot)?;
        if tokens.is_empty() {
            return Err(RingError::EmptyPrompt);
        }
        if tokens.len() > self.input_quota {
            return Err(RingError::ArenaExhausted {
                needed: tokens.len(),
                available: self.input_quota,
            });
        }
        if meta.max_output as usize > self.output_quota {
            return Err(RingError::CapacityExceeded {
                slot,
                requested: meta.max_output as usize,
                capacity: self.output_quota,
            });
        }
        let state = unpack(cell.word.load(Ordering::Acquire)).0;
        if state != SlotState::Empty {
            return Err(RingError::WrongState {
                slot,
                state,
                expected: "EMPTY",
            });
        }
        self.write_input(slot * self.input_quota, tokens);
        cell.request_id.store(meta.request_id, Ordering::Relaxed);
        cell.seed.store(meta.seed, Ordering::Relaxed);
        cell.arrival_seq.store(meta.arrival_seq, Ordering::Relaxed);
        cell.input_len.store(tokens.len() as u32, Ordering::Relaxed);
        cell.max_output.store(meta.max_output, Ordering::Relaxed);
        cell.cancel.store(0, Ordering::Relaxed);
        Ok(())
    }

    fn write_input(&self, offset: usize, tokens: &[u32]) {
        for (dst, &t) in self.input_arena[offset..offset + tokens.len()].iter().zip(tokens) {
            dst.store(t, Ordering::Relaxed);
        }
    }

    /// Copies a slot's prompt tokens into `out` (cleared first).
    pub fn read_prompt(&self, slot: usize, out: &mut Vec<u32>) -> Result<(), RingError> {
        let cell = self.cell(slot)?;
        let len = (cell.input_len.load(Ordering::Acquire) as usize).min(self.input_quota);
        let off = slot * self.input_quota;
        out.clear();
        out.extend(self.input_arena[off..off + len].iter().map(|a| a.load(Ordering::Relaxed)));
        Ok(())
    }

    /// Appends generated tokens to the slot's output range.
    ///
    /// Token words are stored first; the count is bumped with release
    /// ordering so readers never see a count ahead of the tokens.
    pub fn publish_tokens(&self, slot: usize, new_tokens: &[u32]) -> Result<(), RingError> {
        let cell = self.cell(slot)?;
        let mut current = cell.word.load(Ordering::Acquire);
        let (state, count) = unpack(current);
        if !matches!(
            state,
            SlotState::PrefillProcessing | SlotState::DecodeProcessing
        ) {
            return Err(RingError::WrongState {
                slot,
                state,
                expected: "PREFILL_PROCESSING or DECODE_PROCESSING",
            });
        }
        let requested = count as usize + new_tokens.len();
        if requested > self.output_quota {
            return Err(RingError::CapacityExceeded {
                slot,
                requested,
                capacity: self.output_quota,
            });
        }
        let base = slot * self.output_quota + count as usize;
        for (dst, &t) in self.output_arena[base..base + new_tokens.len()]
            .iter()
            .zip(new_tokens)
        {
            dst.store(t, Ordering::Relaxed);
        }
        // Only the device publishes; the loop covers a concurrent edge on the
        // same word (the count itself cannot move under us).
        loop {
            let (state, count) = unpack(current);
            let next = pack(state, count + new_tokens.len() as u32);
            match cell
                .word
                .compare_exchange_weak(current, next, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Ok(()),
                Err(observed) => current = observed,
            }
        }
    }

    /// Reads `len` published tokens starting at output position `from`.
    pub fn read_output(&self, slot: usize, from: usize, len: usize, out: &mut Vec<u32>) -> Result<(), RingError> {
        self.cell(slot)?;
        if from + len > self.output_quota {
            return Err(RingError::CapacityExceeded {
                slot,
                requested: from + len,
                capacity: self.output_quota,
            });
        }
        let base = slot * self.output_quota + from;
        out.extend(self.output_arena[base..base + len].iter().map(|a| a.load(Ordering::Relaxed)));
        Ok(())
    }

    /// Sets or clears the cancellation flag the device checks every step.
    pub fn set_cancel(&self, slot: usize, cancel: bool) -> Result<(), RingError> {
        self.cell(slot)?.cancel.store(cancel as u32, Ordering::Release);
        Ok(())
    }

    pub fn meta(&self, slot: usize) -> Result<SlotMeta, RingError> {
        let c = self.cell(slot)?;
        let word = c.word.load(Ordering::Acquire);
        Ok(SlotMeta {
            state: (word >> 32) as u32,
            generated_count: word as u32,
            request_id: c.request_id.load(Ordering::Acquire),
        })
    }

    /// Per-field-atomic snapshot of every slot. Cross-slot tearing is allowed.
    pub fn snapshot_metadata(&self) -> MetadataSnapshot {
        MetadataSnapshot {
            entries: (0..self.capacity()).map(|i| self.meta(i).unwrap()).collect(),
        }
    }

    /// Size of the metadata block in bytes.
    pub fn metadata_bytes(&self) -> usize {
        self.capacity() * SNAPSHOT_ENTRY_BYTES
    }
}

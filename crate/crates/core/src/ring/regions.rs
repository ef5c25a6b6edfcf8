//! Byte-addressable views of the ring used as one-sided transfer targets.
//!
//! | region        | stride           | ops             |
//! |---------------|------------------|-----------------|
//! | metadata      | 16 B / slot      | read            |
//! | state words   | 8 B / slot       | read, CAS       |
//! | slot control  | 40 B / slot      | read, write, CAS on `request_id` |
//! | input arena   | 4 B / token      | read, write     |
//! | output arena  | 4 B / token      | read            |
//!
//! All integers are little-endian.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::{encode_meta, RingBuffer, RingError, SlotState, SNAPSHOT_ENTRY_BYTES};
use crate::transport::{AccessError, RemoteMemory};

pub const STATE_WORD_STRIDE: usize = 8;
pub const SLOT_CONTROL_STRIDE: usize = 40;
/// Offset of the cancel flag inside a slot control record.
pub const CANCEL_FIELD_OFFSET: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Metadata,
    StateWords,
    SlotControl,
    InputArena,
    OutputArena,
}

/// The fixed-layout per-slot control record written by the frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlotControlRecord {
    pub request_id: u64,
    pub seed: u64,
    pub arrival_seq: u64,
    pub input_len: u32,
    pub max_output: u32,
    pub cancel: u32,
}

impl SlotControlRecord {
    pub fn to_bytes(&self) -> [u8; SLOT_CONTROL_STRIDE] {
        let mut b = [0u8; SLOT_CONTROL_STRIDE];
        b[0..8].copy_from_slice(&self.request_id.to_le_bytes());
        b[8..16].copy_from_slice(&self.seed.to_le_bytes());
        b[16..24].copy_from_slice(&self.arrival_seq.to_le_bytes());
        b[24..28].copy_from_slice(&self.input_len.to_le_bytes());
        b[28..32].copy_from_slice(&self.max_output.to_le_bytes());
        b[32..36].copy_from_slice(&self.cancel.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        Self {
            request_id: u64_at(0),
            seed: u64_at(8),
            arrival_seq: u64_at(16),
            input_len: u32_at(24),
            max_output: u32_at(28),
            cancel: u32_at(32),
        }
    }
}

impl RingBuffer {
    fn control_record(&self, slot: usize) -> SlotControlRecord {
        let c = &self.slots[slot];
        SlotControlRecord {
            request_id: c.request_id.load(Ordering::Acquire),
            seed: c.seed.load(Ordering::Acquire),
            arrival_seq: c.arrival_seq.load(Ordering::Acquire),
            input_len: c.input_len.load(Ordering::Acquire),
            max_output: c.max_output.load(Ordering::Acquire),
            cancel: c.cancel.load(Ordering::Acquire),
        }
    }

    fn apply_control_record(&self, slot: usize, rec: &SlotControlRecord) -> Result<(), RingError> {
        let state = self.state(slot)?;
        if state != SlotState::Empty {
            return Err(RingError::WrongState {
                slot,
                state,
                expected: "EMPTY",
            });
        }
        if rec.input_len == 0 {
            return Err(RingError::EmptyPrompt);
        }
        if rec.input_len as usize > self.input_quota {
            return Err(RingError::ArenaExhausted {
                needed: rec.input_len as usize,
                available: self.input_quota,
            });
        }
        if rec.max_output as usize > self.output_quota {
            return Err(RingError::CapacityExceeded {
                slot,
                requested: rec.max_output as usize,
                capacity: self.output_quota,
            });
        }
        let c = &self.slots[slot];
        c.request_id.store(rec.request_id, Ordering::Relaxed);
        c.seed.store(rec.seed, Ordering::Relaxed);
        c.arrival_seq.store(rec.arrival_seq, Ordering::Relaxed);
        c.input_len.store(rec.input_len, Ordering::Relaxed);
        c.max_output.store(rec.max_output, Ordering::Relaxed);
        c.cancel.store(rec.cancel, Ordering::Release);
        Ok(())
    }

    /// Byte-addressable views for registration with the transport.
    pub fn region(self: &Arc<Self>, kind: RegionKind) -> Arc<RingRegion> {
        Arc::new(RingRegion {
            ring: Arc::clone(self),
            kind,
        })
    }
}

pub struct RingRegion {
    ring: Arc<RingBuffer>,
    kind: RegionKind,
}

impl RingRegion {
    pub fn kind(&self) -> RegionKind {
        self.kind
    }
}

fn rejected(e: RingError) -> AccessError {
    AccessError::Rejected(e.to_string())
}

fn check_words(offset: usize, len: usize, total: usize) -> Result<(usize, usize), AccessError> {
    if offset % 4 != 0 || len % 4 != 0 {
        return Err(AccessError::Misaligned);
    }
    if offset + len > total {
        return Err(AccessError::OutOfBounds);
    }
    Ok((offset / 4, len / 4))
}

fn copy_from_records(
    offset: usize,
    dst: &mut [u8],
    stride: usize,
    mut encode: impl FnMut(usize, &mut Vec<u8>),
) {
    let first = offset / stride;
    let last = (offset + dst.len()).div_ceil(stride);
    let mut buf = Vec::with_capacity((last - first) * stride);
    for slot in first..last {
        encode(slot, &mut buf);
    }
    let skip = offset - first * stride;
    dst.copy_from_slice(&buf[skip..skip + dst.len()]);
}

impl RemoteMemory for RingRegion {
    fn len(&self) -> usize {
        let cap = self.ring.capacity();
        match self.kind {
            RegionKind::Metadata => cap * SNAPSHOT_ENTRY_BYTES,
            RegionKind::StateWords => cap * STATE_WORD_STRIDE,
            RegionKind::SlotControl => cap * SLOT_CONTROL_STRIDE,
            RegionKind::InputArena => self.ring.input_arena.len() * 4,
            RegionKind::OutputArena => self.ring.output_arena.len() * 4,
        }
    }

    fn read(&self, offset: usize, dst: &mut [u8]) -> Result<(), AccessError> {
        if offset + dst.len() > self.len() {
            return Err(AccessError::OutOfBounds);
        }
        let ring = &self.ring;
        match self.kind {
            RegionKind::Metadata => copy_from_records(offset, dst, SNAPSHOT_ENTRY_BYTES, |slot, buf| {
                encode_meta(&ring.meta(slot).unwrap(), buf)
            }),
            RegionKind::StateWords => copy_from_records(offset, dst, STATE_WORD_STRIDE, |slot, buf| {
                buf.extend_from_slice(&ring.slots[slot].word.load(Ordering::Acquire).to_le_bytes())
            }),
            RegionKind::SlotControl => copy_from_records(offset, dst, SLOT_CONTROL_STRIDE, |slot, buf| {
                buf.extend_from_slice(&ring.control_record(slot).to_bytes())
            }),
            RegionKind::InputArena | RegionKind::OutputArena => {
                let arena = if self.kind == RegionKind::InputArena {
                    &ring.input_arena
                } else {
                    &ring.output_arena
                };
                let (start, n) = check_words(offset, dst.len(), self.len())?;
                for (chunk, word) in dst.chunks_exact_mut(4).zip(&arena[start..start + n]) {
                    chunk.copy_from_slice(&word.load(Ordering::Relaxed).to_le_bytes());
                }
            }
        }
        Ok(())
    }

    fn write(&self, offset: usize, src: &[u8]) -> Result<(), AccessError> {
        if offset + src.len() > self.len() {
            return Err(AccessError::OutOfBounds);
        }
        match self.kind {
            RegionKind::InputArena => {
                let (start, n) = check_words(offset, src.len(), self.len())?;
                for (chunk, word) in src.chunks_exact(4).zip(&self.ring.input_arena[start..start + n]) {
                    word.store(u32::from_le_bytes(chunk.try_into().unwrap()), Ordering::Relaxed);
                }
                Ok(())
            }
            RegionKind::SlotControl => {
                let slot = offset / SLOT_CONTROL_STRIDE;
                let within = offset % SLOT_CONTROL_STRIDE;
                if within == 0 && src.len() % SLOT_CONTROL_STRIDE == 0 {
                    for (i, rec) in src.chunks_exact(SLOT_CONTROL_STRIDE).enumerate() {
                        self.ring
                            .apply_control_record(slot + i, &SlotControlRecord::from_bytes(rec))
                            .map_err(rejected)?;
                    }
                    Ok(())
                } else if within == CANCEL_FIELD_OFFSET && src.len() == 4 {
                    let v = u32::from_le_bytes(src.try_into().unwrap());
                    self.ring.set_cancel(slot, v != 0).map_err(rejected)
                } else {
                    Err(AccessError::Misaligned)
                }
            }
            _ => Err(AccessError::Unsupported),
        }
    }

    fn compare_swap(&self, offset: usize, expected: u64, new: u64) -> Result<u64, AccessError> {
        match self.kind {
            RegionKind::StateWords => {
                if offset % STATE_WORD_STRIDE != 0 {
                    return Err(AccessError::Misaligned);
                }
                let slot = offset / STATE_WORD_STRIDE;
                let from = SlotState::from_u32(expected as u32)
                    .ok_or_else(|| AccessError::Rejected("bad state".into()))?;
                let to = SlotState::from_u32(new as u32)
                    .ok_or_else(|| AccessError::Rejected("bad state".into()))?;
                let swapped = self
                    .ring
                    .transition(slot, from, to, super::Plane::Frontend)
                    .map_err(rejected)?;
                if swapped {
                    Ok(expected)
                } else {
                    Ok(self.ring.state(slot).map_err(rejected)? as u64)
                }
            }
            RegionKind::SlotControl => {
                if offset % SLOT_CONTROL_STRIDE != 0 {
                    return Err(AccessError::Misaligned);
                }
                let slot = offset / SLOT_CONTROL_STRIDE;
                if expected != 0 {
                    if new != 0 {
                        return Err(AccessError::Rejected("request id swaps only to or from 0".into()));
                    }
                    let released = self.ring.release(slot, expected).map_err(rejected)?;
                    return Ok(if released {
                        expected
                    } else {
                        self.ring.slots[slot].request_id.load(Ordering::Acquire)
                    });
                }
                if self.ring.reserve(slot, new).map_err(rejected)? {
                    Ok(0)
                } else {
                    let current = self.ring.slots[slot].request_id.load(Ordering::Acquire);
                    Ok(if current == 0 { u64::MAX } else { current })
                }
            }
            _ => Err(AccessError::Unsupported),
        }
    }
}

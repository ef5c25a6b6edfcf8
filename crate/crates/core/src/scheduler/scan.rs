use rayon::prelude::*;

use crate::ring::{Plane, RingBuffer, SlotState};

use super::SchedulerError;

/// A slot claimed by the scan, with its FCFS key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Claimed {
    pub slot: usize,
    pub arrival_seq: u64,
}

/// Range of slots scanned by `lane`.
pub fn lane_range(capacity: usize, lanes: usize, lane: usize) -> std::ops::Range<usize> {
    let per = capacity / lanes;
    lane * per..(lane + 1) * per
}

/// Lane count actually used for a ring: never more lanes than slots.
pub fn effective_lanes(capacity: usize, lanes: usize) -> Result<usize, SchedulerError> {
    let lanes = lanes.clamp(1, capacity.max(1));
    if capacity % lanes != 0 {
        return Err(SchedulerError::Config(format!(
            "lane count {lanes} does not divide capacity {capacity}"
        )));
    }
    Ok(lanes)
}

fn scan_lane(ring: &RingBuffer, range: std::ops::Range<usize>, out: &mut Vec<Claimed>) {
    for slot in range {
        if ring.state(slot) != Ok(SlotState::PrefillPending) {
            continue;
        }
        if let Ok(true) = ring.transition(slot, SlotState::PrefillPending, SlotState::PrefillProcessing, Plane::Device) {
            let arrival_seq = ring.slot(slot).map(|s| s.arrival_seq).unwrap_or(u64::MAX);
            out.push(Claimed { slot, arrival_seq });
        }
    }
}

/// Claims every `PREFILL_PENDING` slot, one lane per contiguous range, and
/// returns the claims ordered by arrival sequence.
///
/// With `pool` set the lanes run on its workers, otherwise inline.
pub fn scan_slots(
    ring: &RingBuffer,
    lanes: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<Claimed>, SchedulerError> {
    let capacity = ring.capacity();
    let lanes = effective_lanes(capacity, lanes)?;
    let mut claimed = match pool {
        Some(pool) => pool.install(|| {
            (0..lanes)
                .into_par_iter()
                .fold(Vec::new, |mut acc, lane| {
                    scan_lane(ring, lane_range(capacity, lanes, lane), &mut acc);
                    acc
                })
                .reduce(Vec::new, |mut a, mut b| {
                    a.append(&mut b);
                    a
                })
        }),
        None => {
            let mut acc = Vec::new();
            for lane in 0..lanes {
                scan_lane(ring, lane_range(capacity, lanes, lane), &mut acc);
            }
            acc
        }
    };
    claimed.sort_by_key(|c| (c.arrival_seq, c.slot));
    Ok(claimed)
}

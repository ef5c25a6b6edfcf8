use crate::ring::{MetadataSnapshot, SlotState};

/// Local view of which ring slots are free.
///
/// A free bit may be stale (the slot was taken by someone else); that is
/// discovered when the claim fails. Taken bits only become stale until the
/// next refresh.
#[derive(Debug, Clone)]
pub struct SlotCache {
    words: Vec<u64>,
    capacity: usize,
    hint: usize,
    refresh_age: u64,
    probes: u64,
    allocations: u64,
}

impl SlotCache {
    pub fn new(capacity: usize) -> Self {
        let mut words = vec![u64::MAX; capacity.div_ceil(64)];
        if capacity % 64 != 0 {
            *words.last_mut().unwrap() = (1u64 << (capacity % 64)) - 1;
        }
        Self {
            words,
            capacity,
            hint: 0,
            refresh_age: 0,
            probes: 0,
            allocations: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn hint(&self) -> usize {
        self.hint
    }

    pub fn set_hint(&mut self, hint: usize) {
        self.hint = hint % self.capacity;
    }

    pub fn refresh_age(&self) -> u64 {
        self.refresh_age
    }

    pub fn is_free(&self, slot: usize) -> bool {
        self.words[slot / 64] >> (slot % 64) & 1 == 1
    }

    pub fn mark_taken(&mut self, slot: usize) {
        self.words[slot / 64] &= !(1u64 << (slot % 64));
    }

    pub fn mark_free(&mut self, slot: usize) {
        self.words[slot / 64] |= 1u64 << (slot % 64);
    }

    pub fn free_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Rebuilds the bitmap from a bulk metadata read.
    pub fn refresh(&mut self, snap: &MetadataSnapshot) {
        for (i, e) in snap.entries.iter().enumerate().take(self.capacity) {
            if e.slot_state() == Some(SlotState::Empty) && e.request_id == 0 {
                self.mark_free(i);
            } else {
                self.mark_taken(i);
            }
        }
        self.refresh_age = 0;
    }

    /// Counts a reader cycle that did not refresh the cache.
    pub fn age(&mut self) {
        self.refresh_age += 1;
    }

    /// Next free bit at or after the hint, wrapping once. Each bitmap word
    /// examined counts as one probe.
    pub fn next_free(&mut self) -> Option<usize> {
        let n = self.words.len();
        let start_word = self.hint / 64;
        for k in 0..=n {
            let w = (start_word + k) % n;
            self.probes += 1;
            let mut bits = self.words[w];
            if k == 0 {
                bits &= u64::MAX << (self.hint % 64);
            } else if k == n {
                bits &= !(u64::MAX << (self.hint % 64));
            }
            if bits != 0 {
                return Some(w * 64 + bits.trailing_zeros() as usize);
            }
        }
        None
    }

    /// Picks a candidate and marks it taken; the caller confirms with a claim.
    pub fn take_candidate(&mut self) -> Option<usize> {
        let slot = self.next_free()?;
        self.mark_taken(slot);
        self.hint = (slot + 1) % self.capacity;
        Some(slot)
    }

    pub fn record_allocation(&mut self) {
        self.allocations += 1;
    }

    /// Mean probes per successful allocation so far.
    pub fn mean_probes(&self) -> f64 {
        if self.allocations == 0 {
            0.0
        } else {
            self.probes as f64 / self.allocations as f64
        }
    }

    pub fn reset_probe_stats(&mut self) {
        self.probes = 0;
        self.allocations = 0;
    }
}

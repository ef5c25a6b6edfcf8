//! Open-addressed merge table packed four entries to a cache line.

use std::mem::{align_of, size_of};

/// Rank value marking an unused entry.
pub const EMPTY_RANK: u32 = u32::MAX;
const MAX_LOAD: f64 = 0.7;
const ENTRIES_PER_BUCKET: usize = 4;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEntry {
    pub left: u32,
    pub right: u32,
    pub merged: u32,
    pub rank: u32,
}

impl MergeEntry {
    const EMPTY: Self = Self {
        left: 0,
        right: 0,
        merged: 0,
        rank: EMPTY_RANK,
    };
}

#[repr(C, align(64))]
#[derive(Debug, Clone, Copy)]
pub struct Bucket {
    pub entries: [MergeEntry; ENTRIES_PER_BUCKET],
}

const _: () = assert!(size_of::<MergeEntry>() == 16);
const _: () = assert!(size_of::<Bucket>() == 64 && align_of::<Bucket>() == 64);

#[derive(Debug, Clone)]
pub struct MergeTable {
    buckets: Vec<Bucket>,
    mask: usize,
    len: usize,
}

#[inline]
fn hash(left: u32, right: u32) -> u64 {
    (((left as u64) << 32) | right as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl MergeTable {
    /// Table sized for `expected` entries at load factor <= 0.7.
    pub fn with_capacity(expected: usize) -> Self {
        let slots = ((expected as f64 / MAX_LOAD).ceil() as usize).max(1);
        let buckets = slots.div_ceil(ENTRIES_PER_BUCKET).next_power_of_two();
        Self {
            buckets: vec![
                Bucket {
                    entries: [MergeEntry::EMPTY; ENTRIES_PER_BUCKET]
                };
                buckets
            ],
            mask: buckets - 1,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn load_factor(&self) -> f64 {
        self.len as f64 / (self.buckets.len() * ENTRIES_PER_BUCKET) as f64
    }

    /// Address of the bucket storage, for alignment checks.
    pub fn storage_ptr(&self) -> *const Bucket {
        self.buckets.as_ptr()
    }

    #[inline]
    fn home(&self, left: u32, right: u32) -> usize {
        (hash(left, right) >> 32) as usize & self.mask
    }

    /// Inserts a merge. Returns false if `(left, right)` is already present.
    pub fn insert(&mut self, left: u32, right: u32, merged: u32, rank: u32) -> bool {
        assert_ne!(rank, EMPTY_RANK, "reserved rank");
        if (self.len + 1) as f64 > MAX_LOAD * (self.buckets.len() * ENTRIES_PER_BUCKET) as f64 {
            self.grow();
        }
        let mut b = self.home(left, right);
        loop {
            for e in &mut self.buckets[b].entries {
                if e.rank == EMPTY_RANK {
                    *e = MergeEntry {
                        left,
                        right,
                        merged,
                        rank,
                    };
                    self.len += 1;
                    return true;
                }
                if e.left == left && e.right == right {
                    return false;
                }
            }
            b = (b + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let old = std::mem::replace(self, Self::with_capacity((self.len + 1) * 2));
        for bucket in &old.buckets {
            for e in bucket.entries.iter().filter(|e| e.rank != EMPTY_RANK) {
                self.insert(e.left, e.right, e.merged, e.rank);
            }
        }
    }

    /// `(merged, rank)` for the pair, if it merges.
    #[inline]
    pub fn lookup(&self, left: u32, right: u32) -> Option<(u32, u32)> {
        let mut b = self.home(left, right);
        loop {
            for e in &self.buckets[b].entries {
                if e.rank == EMPTY_RANK {
                    return None;
                }
                if e.left == left && e.right == right {
                    return Some((e.merged, e.rank));
                }
            }
            b = (b + 1) & self.mask;
        }
    }
}

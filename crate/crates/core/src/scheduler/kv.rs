use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::SchedulerError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KvConfig {
    pub page_size: usize,
    pub total_pages: usize,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            page_size: 16,
            total_pages: 65_536,
        }
    }
}

/// Fixed-size paged KV-cache allocator keyed by request id.
#[derive(Debug, Clone)]
pub struct KvPagePool {
    page_size: usize,
    total_pages: usize,
    free_list: Vec<u32>,
    maps: HashMap<u64, Vec<u32>>,
}

impl KvPagePool {
    pub fn new(page_size: usize, total_pages: usize) -> Self {
        assert!(page_size > 0, "page size must be positive");
        Self {
            page_size,
            total_pages,
            // popped from the back, so low page numbers go first
            free_list: (0..total_pages as u32).rev().collect(),
            maps: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &KvConfig) -> Self {
        Self::new(cfg.page_size, cfg.total_pages)
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn total_pages(&self) -> usize {
        self.total_pages
    }

    pub fn free_pages(&self) -> usize {
        self.free_list.len()
    }

    pub fn allocated_pages(&self) -> usize {
        self.maps.values().map(Vec::len).sum()
    }

    pub fn pages_for(&self, token_count: usize) -> usize {
        token_count.div_ceil(self.page_size)
    }

    pub fn pages_of(&self, request: u64) -> Option<&[u32]> {
        self.maps.get(&request).map(Vec::as_slice)
    }

    /// Grows `request`'s page map to cover `token_count` more tokens.
    pub fn kv_alloc(&mut self, request: u64, token_count: usize) -> Result<&[u32], SchedulerError> {
        let needed = self.pages_for(token_count);
        if needed > self.free_list.len() {
            return Err(SchedulerError::KvExhausted {
                needed,
                free: self.free_list.len(),
            });
        }
        let split = self.free_list.len() - needed;
        let pages = self.free_list.split_off(split);
        let map = self.maps.entry(request).or_default();
        map.extend(pages.into_iter().rev());
        Ok(map)
    }

    /// Returns every page held by `request`. Returns the number freed.
    pub fn kv_free(&mut self, request: u64) -> usize {
        match self.maps.remove(&request) {
            Some(pages) => {
                let n = pages.len();
                self.free_list.extend(pages.into_iter().rev());
                n
            }
            None => 0,
        }
    }

    /// Conservation and no-aliasing check. Returns a description of the first
    /// violation found.
    pub fn check(&self) -> Result<(), String> {
        let mut seen = vec![false; self.total_pages];
        let all = self.free_list.iter().chain(self.maps.values().flatten());
        let mut count = 0;
        for &p in all {
            let p = p as usize;
            if p >= self.total_pages {
                return Err(format!("page {p} out of range"));
            }
            if seen[p] {
                return Err(format!("page {p} appears twice"));
            }
            seen[p] = true;
            count += 1;
        }
        if count != self.total_pages {
            return Err(format!("{count} pages accounted, expected {}", self.total_pages));
        }
        Ok(())
    }
}

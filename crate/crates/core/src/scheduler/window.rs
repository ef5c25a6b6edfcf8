use std::time::Duration;

use serde::Serialize;

use super::SchedulerError;

/// Default number of fire-and-forget launches one graph execution may issue.
pub const DEFAULT_WINDOW_LIMIT: u32 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    FireAndForget,
    Tail,
    /// Host-issued launch; no device window involved.
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaunchRecord {
    pub mode: LaunchMode,
    pub epoch: u64,
    pub counter: u32,
    pub cost: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchWindow {
    counter: u32,
    limit: u32,
    tail_launch_count: u64,
    ff_launch_count: u64,
    epoch: u64,
    max_counter: u32,
    ff_cost: Duration,
    tail_cost: Duration,
}

impl LaunchWindow {
    pub fn new(limit: u32, ff_cost: Duration, tail_cost: Duration) -> Self {
        Self {
            counter: 0,
            limit,
            tail_launch_count: 0,
            ff_launch_count: 0,
            epoch: 0,
            max_counter: 0,
            ff_cost,
            tail_cost,
        }
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    pub fn limit(&self) -> u32 {
        self.limit
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn tail_launch_count(&self) -> u64 {
        self.tail_launch_count
    }

    pub fn ff_launch_count(&self) -> u64 {
        self.ff_launch_count
    }

    /// Largest counter value ever held.
    pub fn max_counter(&self) -> u32 {
        self.max_counter
    }

    pub fn has_headroom(&self, needed: u32) -> bool {
        self.counter + needed <= self.limit
    }

    pub fn launch(&mut self, mode: LaunchMode) -> Result<LaunchRecord, SchedulerError> {
        let cost = match mode {
            LaunchMode::FireAndForget => {
                if self.counter >= self.limit {
                    return Err(SchedulerError::WindowOverflow {
                        counter: self.counter,
                        limit: self.limit,
                    });
                }
                self.counter += 1;
                self.ff_launch_count += 1;
                self.max_counter = self.max_counter.max(self.counter);
                self.ff_cost
            }
            LaunchMode::Tail => {
                self.counter = 0;
                self.epoch += 1;
                self.tail_launch_count += 1;
                self.tail_cost
            }
            LaunchMode::Host => {
                return Err(SchedulerError::WindowOverflow {
                    counter: self.counter,
                    limit: self.limit,
                })
            }
        };
        Ok(LaunchRecord {
            mode,
            epoch: self.epoch,
            counter: self.counter,
            cost,
        })
    }

    /// Fire-and-forget while the window has room, otherwise a tail launch.
    pub fn next_launch(&mut self) -> LaunchRecord {
        let mode = if self.counter < self.limit {
            LaunchMode::FireAndForget
        } else {
            LaunchMode::Tail
        };
        self.launch(mode).expect("mode chosen to fit the window")
    }
}

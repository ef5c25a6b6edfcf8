use std::time::Duration;

/// Reader poll interval: halves after a cycle that delivered tokens,
/// doubles after an idle one, clamped to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollController {
    min: Duration,
    max: Duration,
    current: Duration,
}

impl PollController {
    pub fn new(min: Duration, max: Duration, init: Duration) -> Self {
        let max = max.max(min);
        Self {
            min,
            max,
            current: init.clamp(min, max),
        }
    }

    pub fn interval(&self) -> Duration {
        self.current
    }

    pub fn observe(&mut self, delivered: usize) -> Duration {
        self.current = if delivered > 0 {
            (self.current / 2).max(self.min)
        } else {
            (self.current * 2).min(self.max)
        };
        self.current
    }

    pub fn reset(&mut self) {
        self.current = self.min;
    }
}

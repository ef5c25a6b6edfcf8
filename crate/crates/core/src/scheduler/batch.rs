use serde::Serialize;

use super::window::LaunchWindow;

/// Launches an admission needs: the prefill graph and the resumed decode.
pub const ADMISSION_LAUNCHES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchState {
    pub active: Vec<usize>,
    pub paused: Vec<usize>,
    pub capacity: usize,
    pub step_index: u64,
}

impl BatchState {
    pub fn new(capacity: usize) -> Self {
        Self {
            active: Vec::with_capacity(capacity),
            paused: Vec::with_capacity(capacity),
            capacity,
            step_index: 0,
        }
    }

    pub fn occupancy(&self) -> usize {
        self.active.len() + self.paused.len()
    }

    pub fn is_idle(&self) -> bool {
        self.occupancy() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AdmitReasons {
    pub pending_found: bool,
    pub capacity_free: bool,
    pub window_headroom: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AdmitDecision {
    pub admit: bool,
    pub reasons: AdmitReasons,
}

/// Evaluates the three admission conditions at a step boundary.
///
/// `window = None` means launches are host-issued and unconstrained.
pub fn admit_check(
    pending: usize,
    batch: &BatchState,
    window: Option<&LaunchWindow>,
    completing_this_step: usize,
) -> AdmitDecision {
    let reasons = AdmitReasons {
        pending_found: pending > 0,
        capacity_free: batch.occupancy().saturating_sub(completing_this_step) < batch.capacity,
        window_headroom: window.is_none_or(|w| w.has_headroom(ADMISSION_LAUNCHES)),
    };
    AdmitDecision {
        admit: reasons.pending_found && reasons.capacity_free && reasons.window_headroom,
        reasons,
    }
}

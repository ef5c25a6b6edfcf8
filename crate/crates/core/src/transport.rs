//! Simulated one-sided RDMA between frontend memory and the ring's regions.
//!
//! Memory effects are applied by the transport itself against registered
//! [`RemoteMemory`] regions, in post order, so no code belonging to the
//! device scheduler ever runs on behalf of a transfer. Completions become
//! visible once the transport clock passes each task's deadline.
//!
//! Latency model: a posted batch of `k` tasks costs one `c_fixed` plus
//! `length * c_byte` per task. Tasks on one queue pair complete in post order.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{from_micros_f64, Clock};
use crate::ring::Plane;

/// Memory that can be targeted by one-sided operations.
pub trait RemoteMemory: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self, offset: usize, dst: &mut [u8]) -> Result<(), AccessError>;

    fn write(&self, offset: usize, src: &[u8]) -> Result<(), AccessError>;

    /// 64-bit atomic compare-and-swap; returns the previous value.
    fn compare_swap(&self, _offset: usize, _expected: u64, _new: u64) -> Result<u64, AccessError> {
        Err(AccessError::Unsupported)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccessError {
    #[error("access outside region bounds")]
    OutOfBounds,
    #[error("misaligned access")]
    Misaligned,
    #[error("operation not supported by region")]
    Unsupported,
    #[error("rejected by region: {0}")]
    Rejected(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("region length must be > 0")]
    EmptyRegion,
    #[error("region already registered")]
    DoubleRegistration,
    #[error("unknown region {0}")]
    UnknownRegion(u32),
    #[error("task pool exhausted: accepted {accepted} of {requested}")]
    PoolExhausted { accepted: usize, requested: usize },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("permission denied for {0:?}")]
    PermissionDenied(TaskOp),
    #[error("remote access failed: {0}")]
    Access(#[from] AccessError),
    #[error("task {0} never completed")]
    Lost(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub mode: ClockMode,
    pub c_fixed_us: f64,
    pub c_byte_ns: f64,
    pub cq_depth: usize,
    pub task_pool: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            mode: ClockMode::Virtual,
            c_fixed_us: 2.0,
            c_byte_ns: 5.0,
            cq_depth: 4096,
            task_pool: 8192,
        }
    }
}

impl TransportConfig {
    pub fn c_fixed(&self) -> Duration {
        from_micros_f64(self.c_fixed_us)
    }

    pub fn byte_cost(&self, bytes: usize) -> Duration {
        Duration::from_nanos((self.c_byte_ns * bytes as f64).round() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Permissions {
    pub read: bool,
    pub write: bool,
    pub atomic: bool,
}

impl Permissions {
    pub const READ: Self = Self { read: true, write: false, atomic: false };
    pub const WRITE: Self = Self { read: false, write: true, atomic: false };
    pub const READ_WRITE: Self = Self { read: true, write: true, atomic: false };
    pub const ATOMIC: Self = Self { read: true, write: false, atomic: true };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionHandle {
    pub region_id: u32,
    /// Abstract base address of the region in the owner's address space.
    pub base: u64,
    pub length: usize,
    pub permissions: Permissions,
}

/// Queue pairs: prompt submission and token/metadata retrieval are staged
/// separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueuePair {
    Submit = 0,
    Retrieve = 1,
}

pub type TaskId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskOp {
    Read,
    Write,
    CompareSwap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskKind {
    Read,
    /// Payload is copied at post time.
    Write(Vec<u8>),
    CompareSwap { expected: u64, new: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferTask {
    pub task_id: TaskId,
    pub kind: TaskKind,
    pub region: RegionHandle,
    pub offset: usize,
    pub length: usize,
}

impl TransferTask {
    pub fn op(&self) -> TaskOp {
        match self.kind {
            TaskKind::Read => TaskOp::Read,
            TaskKind::Write(_) => TaskOp::Write,
            TaskKind::CompareSwap { .. } => TaskOp::CompareSwap,
        }
    }
}

/// Result of a finished task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub task_id: TaskId,
    pub completed_at: Duration,
    pub outcome: Result<Outcome, AccessError>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Read(Vec<u8>),
    Written,
    /// Previous value at the CAS target.
    Swapped { previous: u64, success: bool },
}

impl Completion {
    pub fn into_read(self) -> Result<Vec<u8>, TransportError> {
        match self.outcome? {
            Outcome::Read(d) => Ok(d),
            other => Err(TransportError::InvalidTask(format!("expected read, got {other:?}"))),
        }
    }

    pub fn cas_succeeded(&self) -> Result<bool, TransportError> {
        match &self.outcome {
            Ok(Outcome::Swapped { success, .. }) => Ok(*success),
            Ok(other) => Err(TransportError::InvalidTask(format!("expected cas, got {other:?}"))),
            Err(e) => Err(e.clone().into()),
        }
    }
}

/// Bounded queue of completed tasks for one queue pair.
#[derive(Debug, Default)]
pub struct CompletionQueue {
    depth: usize,
    busy_until: Duration,
    inflight: VecDeque<Completion>,
    /// Completions drained by [`Transport::wait`] on behalf of other waiters.
    parked: HashMap<TaskId, Completion>,
}

impl CompletionQueue {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn outstanding(&self) -> usize {
        self.inflight.len() + self.parked.len()
    }
}

pub type DeviceHandler = Box<dyn Fn(&TransferTask) + Send + Sync>;

struct Region {
    handle: RegionHandle,
    owner: Plane,
    memory: Arc<dyn RemoteMemory>,
    key: usize,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct TransportStats {
    pub posted: u64,
    pub completed: u64,
    pub batches: u64,
    pub bytes: u64,
    /// Sum of simulated transfer cost charged, in nanoseconds.
    pub charged_ns: u64,
}

pub struct Transport {
    cfg: TransportConfig,
    clock: Clock,
    regions: RwLock<Vec<Region>>,
    queues: [Mutex<CompletionQueue>; 2],
    pool_in_use: AtomicUsize,
    next_task: AtomicU64,
    device_handlers: RwLock<HashMap<u32, Vec<DeviceHandler>>>,
    handler_invocations: AtomicU64,
    posted: AtomicU64,
    completed: AtomicU64,
    batches: AtomicU64,
    bytes: AtomicU64,
    charged_ns: AtomicU64,
}

impl std::fmt::Debug for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transport").field("cfg", &self.cfg).finish()
    }
}

impl Transport {
    pub fn new(cfg: TransportConfig, clock: Clock) -> Self {
        let cq = || {
            Mutex::new(CompletionQueue {
                depth: cfg.cq_depth,
                ..Default::default()
            })
        };
        Self {
            queues: [cq(), cq()],
            cfg,
            clock,
            regions: RwLock::new(Vec::new()),
            pool_in_use: AtomicUsize::new(0),
            next_task: AtomicU64::new(1),
            device_handlers: RwLock::new(HashMap::new()),
            handler_invocations: AtomicU64::new(0),
            posted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            batches: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
            charged_ns: AtomicU64::new(0),
        }
    }

    /// Builds a transport with a clock matching `cfg.mode`.
    pub fn from_config(cfg: TransportConfig) -> Self {
        let clock = match cfg.mode {
            ClockMode::Virtual => Clock::virtual_clock(),
            ClockMode::Wall => Clock::wall(),
        };
        Self::new(cfg, clock)
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Registers a memory region owned by `owner` for remote access.
    pub fn register_region(
        &self,
        memory: Arc<dyn RemoteMemory>,
        permissions: Permissions,
        owner: Plane,
    ) -> Result<RegionHandle, TransportError> {
        let length = memory.len();
        if length == 0 {
            return Err(TransportError::EmptyRegion);
        }
        let key = Arc::as_ptr(&memory) as *const () as usize;
        let mut regions = self.regions.write();
        if regions.iter().any(|r| r.key == key && r.owner == owner) {
            return Err(TransportError::DoubleRegistration);
        }
        let base = regions
            .last()
            .map(|r| (r.handle.base + r.handle.length as u64).next_multiple_of(4096))
            .unwrap_or(0x1000_0000);
        let handle = RegionHandle {
            region_id: regions.len() as u32,
            base,
            length,
            permissions,
        };
        regions.push(Region {
            handle,
            owner,
            memory,
            key,
        });
        Ok(handle)
    }

    /// Attaches a device-plane callback to a region. Correctly wired systems
    /// never do this; it exists so the one-sidedness audit can be tested.
    pub fn attach_device_handler(&self, region: RegionHandle, handler: DeviceHandler) {
        self.device_handlers
            .write()
            .entry(region.region_id)
            .or_default()
            .push(handler);
    }

    /// Number of transfers that invoked a device-plane handler. Always 0 in a
    /// correctly wired system.
    pub fn one_sided_guarantee_audit(&self) -> u64 {
        self.handler_invocations.load(Ordering::Relaxed)
    }

    fn make_task(&self, region: RegionHandle, offset: usize, length: usize, kind: TaskKind) -> TransferTask {
        TransferTask {
            task_id: self.next_task.fetch_add(1, Ordering::Relaxed),
            kind,
            region,
            offset,
            length,
        }
    }

    pub fn read_task(&self, region: RegionHandle, offset: usize, length: usize) -> TransferTask {
        self.make_task(region, offset, length, TaskKind::Read)
    }

    pub fn write_task(&self, region: RegionHandle, offset: usize, payload: Vec<u8>) -> TransferTask {
        let len = payload.len();
        self.make_task(region, offset, len, TaskKind::Write(payload))
    }

    pub fn cas_task(&self, region: RegionHandle, offset: usize, expected: u64, new: u64) -> TransferTask {
        self.make_task(region, offset, 8, TaskKind::CompareSwap { expected, new })
    }

    fn validate(&self, task: &TransferTask) -> Result<(), TransportError> {
        match self.regions.read().get(task.region.region_id as usize) {
            Some(r) if r.handle == task.region => {}
            _ => return Err(TransportError::UnknownRegion(task.region.region_id)),
        }
        if task.length == 0 {
            return Err(TransportError::InvalidTask("zero-length task".into()));
        }
        if task.offset + task.length > task.region.length {
            return Err(TransportError::InvalidTask(format!(
                "range {}+{} beyond region length {}",
                task.offset, task.length, task.region.length
            )));
        }
        let p = task.region.permissions;
        let allowed = match task.op() {
            TaskOp::Read => p.read,
            TaskOp::Write => p.write,
            TaskOp::CompareSwap => p.atomic,
        };
        if !allowed {
            return Err(TransportError::PermissionDenied(task.op()));
        }
        if let TaskKind::Write(ref data) = task.kind {
            if data.len() != task.length {
                return Err(TransportError::InvalidTask("payload length mismatch".into()));
            }
        }
        Ok(())
    }

    fn execute(&self, task: &TransferTask) -> Result<Outcome, AccessError> {
        let regions = self.regions.read();
        let Some(region) = regions.get(task.region.region_id as usize) else {
            return Err(AccessError::Rejected("unknown region".into()));
        };
        let outcome = match &task.kind {
            TaskKind::Read => {
                let mut buf = vec![0u8; task.length];
                region.memory.read(task.offset, &mut buf).map(|_| Outcome::Read(buf))
            }
            TaskKind::Write(data) => region.memory.write(task.offset, data).map(|_| Outcome::Written),
            TaskKind::CompareSwap { expected, new } => region
                .memory
                .compare_swap(task.offset, *expected, *new)
                .map(|previous| Outcome::Swapped {
                    previous,
                    success: previous == *expected,
                }),
        };
        if region.owner == Plane::Device {
            if let Some(handlers) = self.device_handlers.read().get(&task.region.region_id) {
                if !handlers.is_empty() {
                    for h in handlers {
                        h(task);
                    }
                    self.handler_invocations.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        outcome
    }

    /// Posts a coalesced batch on one queue pair.
    ///
    /// Returns the number of tasks accepted. If the task pool or completion
    /// queue cannot take every task, the accepted prefix is posted and
    /// [`TransportError::PoolExhausted`] reports how many made it.
    pub fn post(&self, qp: QueuePair, tasks: Vec<TransferTask>) -> Result<usize, TransportError> {
        if tasks.is_empty() {
            return Ok(0);
        }
        for t in &tasks {
            self.validate(t)?;
        }
        let requested = tasks.len();
        let mut cq = self.queues[qp as usize].lock();
        let cq_room = cq.depth.saturating_sub(cq.outstanding());
        let accepted = self.reserve_pool(requested.min(cq_room));

        if accepted > 0 {
            let now = self.clock.now();
            let mut t = cq.busy_until.max(now) + self.cfg.c_fixed();
            let mut charged = self.cfg.c_fixed();
            for task in tasks.iter().take(accepted) {
                let cost = self.cfg.byte_cost(task.length);
                t += cost;
                charged += cost;
                let outcome = self.execute(task);
                self.bytes.fetch_add(task.length as u64, Ordering::Relaxed);
                cq.inflight.push_back(Completion {
                    task_id: task.task_id,
                    completed_at: t,
                    outcome,
                });
            }
            cq.busy_until = t;
            self.charged_ns.fetch_add(crate::clock::as_nanos(charged), Ordering::Relaxed);
            self.posted.fetch_add(accepted as u64, Ordering::Relaxed);
            self.batches.fetch_add(1, Ordering::Relaxed);
        }
        if accepted < requested {
            return Err(TransportError::PoolExhausted { accepted, requested });
        }
        Ok(accepted)
    }

    fn reserve_pool(&self, want: usize) -> usize {
        let mut in_use = self.pool_in_use.load(Ordering::Relaxed);
        loop {
            let take = want.min(self.cfg.task_pool.saturating_sub(in_use));
            match self.pool_in_use.compare_exchange_weak(
                in_use,
                in_use + take,
                Ordering::AcqRel,
                Ordering::Relaxed,
            ) {
                Ok(_) => return take,
                Err(v) => in_use = v,
            }
        }
    }

    fn drain_due(&self, cq: &mut CompletionQueue, max: usize) -> Vec<Completion> {
        let now = self.clock.now();
        let mut out = Vec::new();
        while out.len() < max {
            match cq.inflight.front() {
                Some(c) if c.completed_at <= now => out.push(cq.inflight.pop_front().unwrap()),
                _ => break,
            }
        }
        out
    }

    fn release(&self, n: usize) {
        if n > 0 {
            self.pool_in_use.fetch_sub(n, Ordering::AcqRel);
            self.completed.fetch_add(n as u64, Ordering::Relaxed);
        }
    }

    /// Nonblocking: returns up to `max` finished tasks in post order.
    pub fn poll(&self, qp: QueuePair, max: usize) -> Vec<Completion> {
        let mut cq = self.queues[qp as usize].lock();
        let mut out: Vec<Completion> = Vec::new();
        if !cq.parked.is_empty() {
            let mut parked: Vec<_> = cq.parked.drain().map(|(_, c)| c).collect();
            parked.sort_by_key(|c| c.task_id);
            let rest = parked.split_off(parked.len().min(max));
            out.extend(parked);
            cq.parked.extend(rest.into_iter().map(|c| (c.task_id, c)));
        }
        let more = self.drain_due(&mut cq, max - out.len());
        out.extend(more);
        self.release(out.len());
        out
    }

    /// Waits until every task in `ids` has completed and returns their
    /// completions in the order of `ids`. Completions belonging to other
    /// waiters are parked for them.
    pub fn wait(&self, qp: QueuePair, ids: &[TaskId]) -> Result<Vec<Completion>, TransportError> {
        let mut found: HashMap<TaskId, Completion> = HashMap::with_capacity(ids.len());
        loop {
            let next_deadline = {
                let mut cq = self.queues[qp as usize].lock();
                let mut taken = 0;
                for id in ids {
                    if let Some(c) = cq.parked.remove(id) {
                        found.insert(*id, c);
                        taken += 1;
                    }
                }
                for c in self.drain_due(&mut cq, usize::MAX) {
                    if ids.contains(&c.task_id) {
                        taken += 1;
                        found.insert(c.task_id, c);
                    } else {
                        cq.parked.insert(c.task_id, c);
                    }
                }
                self.release(taken);
                if found.len() == ids.len() {
                    None
                } else {
                    let pending = cq
                        .inflight
                        .iter()
                        .filter(|c| ids.contains(&c.task_id))
                        .map(|c| c.completed_at)
                        .max();
                    match pending {
                        Some(t) => Some(t),
                        None => {
                            let missing = ids.iter().find(|id| !found.contains_key(id)).copied().unwrap_or(0);
                            return Err(TransportError::Lost(missing));
                        }
                    }
                }
            };
            match next_deadline {
                None => break,
                Some(t) => self.clock.wait_until(t),
            }
        }
        Ok(ids.iter().map(|id| found.remove(id).unwrap()).collect())
    }

    /// Posts and waits; the common synchronous frontend pattern.
    pub fn execute_batch(&self, qp: QueuePair, tasks: Vec<TransferTask>) -> Result<Vec<Completion>, TransportError> {
        let ids: Vec<TaskId> = tasks.iter().map(|t| t.task_id).collect();
        self.post(qp, tasks)?;
        self.wait(qp, &ids)
    }

    pub fn stats(&self) -> TransportStats {
        TransportStats {
            posted: self.posted.load(Ordering::Relaxed),
            completed: self.completed.load(Ordering::Relaxed),
            batches: self.batches.load(Ordering::Relaxed),
            bytes: self.bytes.load(Ordering::Relaxed),
            charged_ns: self.charged_ns.load(Ordering::Relaxed),
        }
    }

    pub fn pool_in_use(&self) -> usize {
        self.pool_in_use.load(Ordering::Relaxed)
    }
}

/// Plain byte buffer usable as a remote region.
#[derive(Debug)]
pub struct ByteRegion {
    bytes: Mutex<Vec<u8>>,
}

impl ByteRegion {
    pub fn new(len: usize) -> Self {
        Self {
            bytes: Mutex::new(vec![0; len]),
        }
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.bytes.lock().clone()
    }
}

impl RemoteMemory for ByteRegion {
    fn len(&self) -> usize {
        self.bytes.lock().len()
    }

    fn read(&self, offset: usize, dst: &mut [u8]) -> Result<(), AccessError> {
        let b = self.bytes.lock();
        let src = b.get(offset..offset + dst.len()).ok_or(AccessError::OutOfBounds)?;
        dst.copy_from_slice(src);
        Ok(())
    }

    fn write(&self, offset: usize, src: &[u8]) -> Result<(), AccessError> {
        let mut b = self.bytes.lock();
        let dst = b.get_mut(offset..offset + src.len()).ok_or(AccessError::OutOfBounds)?;
        dst.copy_from_slice(src);
        Ok(())
    }
}

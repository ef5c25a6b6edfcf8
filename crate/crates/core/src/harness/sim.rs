//! Discrete-event driver: frontend, transport and device scheduler sharing
//! one virtual clock, all on the calling thread.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Duration;

use super::workload::WorkItem;
use super::HarnessError;
use crate::clock::{from_millis_f64, Clock};
use crate::config::SystemConfig;
use crate::engine::Engine;
use crate::frontend::{Frontend, FrontendError, FrontendStats, RequestRecord, SubmitRequest};
use crate::scheduler::{CompletionRecord, DeviceScheduler, RunStats, SchedEvent};
use crate::transport::{Transport, TransportStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival(usize),
    Reader,
    Device(u64),
}

#[derive(Debug)]
pub struct SimOutcome {
    /// Frontend records in request-id order; `work[i]` maps to `work_index[i]`.
    pub records: Vec<RequestRecord>,
    pub work_index: Vec<usize>,
    pub completions: Vec<CompletionRecord>,
    pub sched: RunStats,
    pub events: Vec<SchedEvent>,
    pub host_samples: Vec<Duration>,
    pub frontend: FrontendStats,
    pub transport: TransportStats,
    pub one_sided_audit: u64,
    pub rejected_transitions: u64,
    pub retries: u64,
    pub kv_leak: Option<String>,
    /// First arrival to last reclaim.
    pub makespan: Duration,
    /// Device busy time from first arrival to its last completion.
    pub device_makespan: Duration,
}

/// Runs `work` to completion on a fresh system built from `cfg`.
pub fn simulate(cfg: &SystemConfig, work: &[WorkItem]) -> Result<SimOutcome, HarnessError> {
    let ring = Arc::new(cfg.ring.build()?);
    let transport = Arc::new(Transport::new(cfg.transport.clone(), Clock::virtual_clock()));
    let clock = transport.clock().clone();
    let frontend = Frontend::attach(cfg.frontend.clone(), &ring, Arc::clone(&transport))?;
    let engine = Engine::new(&cfg.engine)?;
    let mut sched = DeviceScheduler::new(
        cfg.scheduler.clone(),
        Arc::clone(&ring),
        engine,
        cfg.kv.clone(),
        cfg.host.clone(),
    )?;
    let retry = from_millis_f64(cfg.harness.retry_ms.max(0.001));

    let mut heap: BinaryHeap<Reverse<(Duration, u64, Ev)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<_>, t: Duration, ev: Ev| {
        seq += 1;
        heap.push(Reverse((t, seq, ev)));
    };
    for (i, w) in work.iter().enumerate() {
        push(&mut heap, w.arrival, Ev::Arrival(i));
    }

    let mut device_gen = 0u64;
    let mut device_armed = false;
    let mut reader_armed = false;
    let mut records = Vec::with_capacity(work.len());
    let mut id_to_work = std::collections::HashMap::new();
    let mut retries = 0u64;
    let mut completions = Vec::new();

    while records.len() < work.len() {
        let Some(Reverse((t, _, ev))) = heap.pop() else {
            return Err(HarnessError::Stalled {
                finished: records.len(),
                total: work.len(),
            });
        };
        clock.advance_to(t);
        match ev {
            Ev::Arrival(first) => {
                // Coalesce arrivals that are already due.
                let mut batch = vec![first];
                while let Some(Reverse((t2, _, Ev::Arrival(j)))) = heap.peek().copied() {
                    if t2 > clock.now() {
                        break;
                    }
                    heap.pop();
                    batch.push(j);
                }
                let reqs = batch
                    .iter()
                    .map(|&i| {
                        let w = &work[i];
                        SubmitRequest::new(w.prompt.clone(), w.max_output, w.seed, w.arrival)
                    })
                    .collect();
                let mut any = false;
                for (&i, res) in batch.iter().zip(frontend.submit_batch(reqs)) {
                    match res {
                        Ok(id) => {
                            id_to_work.insert(id, i);
                            any = true;
                        }
                        Err(FrontendError::NoSlot) => {
                            retries += 1;
                            push(&mut heap, clock.now() + retry, Ev::Arrival(i));
                        }
                        Err(e) => return Err(HarnessError::Submit(format!("request {i}: {e}"))),
                    }
                }
                if any {
                    if !device_armed {
                        device_armed = true;
                        device_gen += 1;
                        push(&mut heap, clock.now(), Ev::Device(device_gen));
                    }
                    if !reader_armed {
                        reader_armed = true;
                        push(&mut heap, clock.now() + frontend.poll_interval(), Ev::Reader);
                    }
                }
            }
            Ev::Device(gen) => {
                if gen != device_gen {
                    continue;
                }
                match sched.iterate(t)? {
                    Some(next) => push(&mut heap, next.max(t), Ev::Device(gen)),
                    None => device_armed = false,
                }
                completions.extend(sched.take_completions());
            }
            Ev::Reader => {
                frontend.reader_cycle()?;
                for r in frontend.take_finished() {
                    records.push(r);
                }
                if frontend.outstanding() > 0 {
                    push(&mut heap, clock.now() + frontend.poll_interval(), Ev::Reader);
                } else {
                    reader_armed = false;
                }
            }
        }
    }

    records.sort_by_key(|r| r.request_id);
    let work_index = records.iter().map(|r| id_to_work[&r.request_id]).collect();
    let start = work.iter().map(|w| w.arrival).min().unwrap_or_default();
    let end = records.iter().filter_map(|r| r.finished).max().unwrap_or(start);
    let dev_end = completions.iter().map(|c| c.completed_at).max().unwrap_or(start);
    Ok(SimOutcome {
        work_index,
        one_sided_audit: transport.one_sided_guarantee_audit(),
        rejected_transitions: ring.rejected_transitions(),
        transport: transport.stats(),
        frontend: frontend.stats(),
        sched: sched.stats(),
        events: sched.events().to_vec(),
        host_samples: sched.host().map(|h| h.samples().to_vec()).unwrap_or_default(),
        kv_leak: sched.kv().check().err().or_else(|| {
            (sched.kv().allocated_pages() != 0).then(|| format!("{} pages still allocated", sched.kv().allocated_pages()))
        }),
        records,
        completions,
        retries,
        makespan: end.saturating_sub(start),
        device_makespan: dev_end.saturating_sub(start),
    })
}

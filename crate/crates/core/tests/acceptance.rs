//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `cargo test -p ringserve-core --test acceptance` runs all eleven; pass
//! criterion numbers to run a subset, e.g. `-- 3 7`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Display;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ringserve_core::clock::Clock;
use ringserve_core::config::SystemConfig;
use ringserve_core::engine::{prompt_hash, Engine, EngineConfig, LatencyPreset, LatencyProfile, PseudoModel};
use ringserve_core::frontend::http::router;
use ringserve_core::frontend::{Frontend, FrontendConfig, FrontendError, RequestRecord, RequestStatus, SubmitRequest};
use ringserve_core::harness::{
    compute_metrics, fit_saturation, generate, inject_interference, run_invariants, serviceable_load, simulate,
    write_csv, ArrivalProcess, InterferenceConfig, InterferenceMode, LengthDist, RequestTiming, SimOutcome,
    WorkItem, WorkloadSpec, CSV_HEADER, DEFAULT_RATES,
};
use ringserve_core::ring::{edge_owner, RingBuffer, SlotState};
use ringserve_core::runtime::Runtime;
use ringserve_core::scheduler::{
    calibrated_steps_per_ms, CompletionRecord, DeviceScheduler, EventKind, HostConfig, HostOverheadModel,
    KvConfig, KvPagePool, LaunchMode, SchedulerConfig, SchedulerMode, ADMISSION_LAUNCHES,
};
use ringserve_core::tokenizer::{pretokenize_with, synthetic, Backend, EncodeScratch, Tokenizer};
use ringserve_core::transport::{Transport, TransportConfig};

// Allocation counter, armed per thread so background threads do not count.

struct CountingAlloc;

thread_local! {
    static COUNTING: Cell<bool> = const { Cell::new(false) };
    static ALLOCS: Cell<u64> = const { Cell::new(0) };
}

fn note_alloc() {
    let _ = COUNTING.try_with(|on| {
        if on.get() {
            let _ = ALLOCS.try_with(|n| n.set(n.get() + 1));
        }
    });
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note_alloc();
        unsafe { System.alloc(layout) }
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note_alloc();
        unsafe { System.alloc_zeroed(layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note_alloc();
        unsafe { System.realloc(ptr, layout, new_size) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

fn count_allocs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    ALLOCS.with(|n| n.set(0));
    COUNTING.with(|c| c.set(true));
    let out = f();
    COUNTING.with(|c| c.set(false));
    (out, ALLOCS.with(Cell::get))
}

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn err<E: Display>(e: E) -> String {
    e.to_string()
}

/// What the pseudo-model must emit for one request.
fn expected_tokens(model: &PseudoModel, seed: u64, prompt: &[u32], max_output: u32) -> Vec<u32> {
    let ph = prompt_hash(prompt);
    let mut out = Vec::new();
    for pos in 0..max_output.max(1) as u64 {
        let t = model.token(seed, ph, pos);
        out.push(t);
        if t == model.eos_token {
            break;
        }
    }
    out
}

fn model_of(cfg: &EngineConfig) -> PseudoModel {
    PseudoModel {
        vocab_size: cfg.vocab_size,
        eos_token: cfg.eos_token,
        eos_probability: cfg.eos_probability,
    }
}

fn quick_engine(eos_probability: f64) -> EngineConfig {
    EngineConfig {
        batch_grid: vec![1, 2, 4, 8, 16],
        seq_grid: vec![64, 256],
        latency_preset: LatencyPreset::Custom,
        custom: Some(LatencyProfile {
            prefill_base_ms: 0.3,
            prefill_per_token_ms: 0.001,
            decode_base_ms: 0.2,
            decode_per_seq_ms: 0.01,
        }),
        vocab_size: 512,
        eos_probability,
        ..EngineConfig::default()
    }
}

fn work_for(out: &SimOutcome) -> Vec<(usize, RequestRecord)> {
    out.records.iter().zip(&out.work_index).map(|(r, &i)| (i, r.clone())).collect()
}

// 1. State-machine safety

struct Interleaving {
    requests: usize,
    transitions: usize,
    conflicts: u64,
    cancelled: usize,
}

fn interleaving(seed: u64) -> Result<Interleaving, String> {
    const SLOTS: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ring = Arc::new(RingBuffer::create(SLOTS, SLOTS * 32, SLOTS * 32).map_err(err)?.with_audit());
    let transport = Arc::new(Transport::new(TransportConfig::default(), Clock::virtual_clock()));
    let clock = transport.clock().clone();
    let engine_cfg = quick_engine(0.08);
    let model = model_of(&engine_cfg);
    let mode = if seed % 2 == 0 { SchedulerMode::Device } else { SchedulerMode::Host };
    let mut sched = DeviceScheduler::new(
        SchedulerConfig {
            mode,
            batch_capacity: rng.random_range(1..=8),
            window_limit: rng.random_range(ADMISSION_LAUNCHES..=16),
            lanes: SLOTS,
            scan_threads: 1,
            ..SchedulerConfig::default()
        },
        Arc::clone(&ring),
        Engine::new(&engine_cfg).map_err(err)?,
        KvConfig::default(),
        HostConfig::default(),
    )
    .map_err(err)?;
    let fes: Vec<Frontend> = (0..4u64)
        .map(|k| {
            Frontend::attach(FrontendConfig::default(), &ring, Arc::clone(&transport))
                .map(|f| f.with_first_request_id(k * 1_000_000 + 1))
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;

    // Enough requests per submitter that the ring fills in some schedules.
    let mut pending: Vec<VecDeque<(Vec<u32>, u32, u64)>> = (0..4)
        .map(|_| {
            (0..rng.random_range(4..=24))
                .map(|_| {
                    let len = rng.random_range(1..=16);
                    let prompt = (0..len).map(|_| rng.random_range(3..512)).collect();
                    (prompt, rng.random_range(1..=24), rng.random())
                })
                .collect()
        })
        .collect();
    let total: usize = pending.iter().map(VecDeque::len).sum();
    let mut expected: HashMap<u64, Vec<u32>> = HashMap::new();
    let mut owner: HashMap<u64, usize> = HashMap::new();
    let mut live: HashMap<usize, u64> = HashMap::new();
    let mut done: HashSet<u64> = HashSet::new();
    let mut streamed: HashMap<u64, Vec<u32>> = HashMap::new();
    let mut completions: Vec<CompletionRecord> = Vec::new();
    let mut wake: Option<Duration> = None;
    let mut cancelled = 0;

    let mut steps = 0;
    while done.len() < total {
        steps += 1;
        ensure!(steps < 200_000, "stalled with {}/{total} finished", done.len());
        clock.advance_to(clock.now() + Duration::from_micros(rng.random_range(0..400)));
        let now = clock.now();
        let k = rng.random_range(0..4);
        match rng.random_range(0..20) {
            0..=5 => {
                let n = rng.random_range(1..=3).min(pending[k].len());
                if n == 0 {
                    continue;
                }
                let batch: Vec<_> = pending[k].drain(..n).collect();
                let reqs = batch
                    .iter()
                    .map(|(p, m, s)| SubmitRequest::new(p.clone(), *m, *s, now))
                    .collect();
                for (item, res) in batch.into_iter().zip(fes[k].submit_batch(reqs)) {
                    match res {
                        Ok(id) => {
                            let slot = fes[k].record(id).and_then(|r| r.slot).ok_or("submitted without a slot")?;
                            if let Some(prev) = live.insert(slot, id) {
                                return Err(format!("slot {slot} handed to {id} while {prev} holds it"));
                            }
                            ensure!(ring.meta(slot).map_err(err)?.request_id == id, "slot {slot} not tagged with {id}");
                            expected.insert(id, expected_tokens(&model, item.2, &item.0, item.1));
                            owner.insert(id, k);
                        }
                        Err(FrontendError::NoSlot) => pending[k].push_front(item),
                        Err(e) => return Err(format!("submit: {e}")),
                    }
                }
            }
            6..=11 => {
                fes[k].reader_cycle().map_err(err)?;
                for r in fes[k].take_finished() {
                    let slot = r.slot.ok_or("finished without a slot")?;
                    ensure!(live.remove(&slot) == Some(r.request_id), "reclaimed slot {slot} not owned by {}", r.request_id);
                    ensure!(done.insert(r.request_id), "request {} finished twice", r.request_id);
                    let want = &expected[&r.request_id];
                    match r.status {
                        RequestStatus::Done => ensure!(&r.tokens == want, "request {} streamed wrong tokens", r.request_id),
                        RequestStatus::Failed if r.cancel_requested => {
                            ensure!(want.starts_with(&r.tokens), "cancelled request {} diverged", r.request_id);
                            cancelled += 1;
                        }
                        s => return Err(format!("request {} ended {s:?}: {:?}", r.request_id, r.error)),
                    }
                    streamed.insert(r.request_id, r.tokens);
                }
            }
            12..=18 => {
                if wake.is_none_or(|t| t <= now) {
                    wake = sched.iterate(now).map_err(err)?;
                    completions.extend(sched.take_completions());
                }
            }
            _ => {
                let mine: Vec<u64> = live.values().copied().filter(|id| owner[id] == k).collect();
                if !mine.is_empty() && rng.random_bool(0.3) {
                    let id = mine[rng.random_range(0..mine.len())];
                    match fes[k].cancel(id) {
                        Ok(()) | Err(FrontendError::UnknownRequest(_)) => {}
                        Err(e) => return Err(format!("cancel: {e}")),
                    }
                }
            }
        }
    }

    ensure!(ring.rejected_transitions() == 0, "{} illegal transitions attempted", ring.rejected_transitions());
    ensure!(transport.one_sided_guarantee_audit() == 0, "transfers ran device code");
    let log = ring.transition_log();
    let mut state = vec![SlotState::Empty; SLOTS];
    for rec in &log {
        ensure!(edge_owner(rec.from, rec.to) == Some(rec.actor), "illegal edge {rec:?}");
        ensure!(state[rec.slot] == rec.from, "slot {} moved from {:?} while in {:?}", rec.slot, rec.from, state[rec.slot]);
        state[rec.slot] = rec.to;
    }
    ensure!(state.iter().all(|s| *s == SlotState::Empty), "slots left occupied");
    let claims = log
        .iter()
        .filter(|r| r.from == SlotState::PrefillPending && r.to == SlotState::PrefillProcessing)
        .count();
    ensure!(claims == total, "{claims} device claims for {total} requests");
    let mut seen = HashSet::new();
    for c in &completions {
        ensure!(seen.insert(c.request_id), "device completed {} twice", c.request_id);
        ensure!(streamed.get(&c.request_id) == Some(&c.tokens), "request {} streamed != published", c.request_id);
    }
    ensure!(seen.len() == total, "device completed {} of {total}", seen.len());
    Ok(Interleaving {
        requests: total,
        transitions: log.len(),
        conflicts: fes.iter().map(|f| f.stats().claim_conflicts).sum(),
        cancelled,
    })
}

/// Same protocol on real threads and the wall clock.
fn threaded_stress() -> Outcome {
    const SLOTS: usize = 64;
    const PER_SUBMITTER: usize = 150;
    let ring = Arc::new(RingBuffer::create(SLOTS, SLOTS * 32, SLOTS * 32).map_err(err)?.with_audit());
    let transport = Arc::new(Transport::new(TransportConfig::default(), Clock::wall()));
    let clock = transport.clock().clone();
    let engine_cfg = quick_engine(0.05);
    let model = model_of(&engine_cfg);
    let mut sched = DeviceScheduler::new(
        SchedulerConfig {
            batch_capacity: 8,
            window_limit: 16,
            lanes: SLOTS,
            scan_threads: 1,
            ..SchedulerConfig::default()
        },
        Arc::clone(&ring),
        Engine::new(&engine_cfg).map_err(err)?,
        KvConfig::default(),
        HostConfig::default(),
    )
    .map_err(err)?;
    let fes: Vec<Arc<Frontend>> = (0..4u64)
        .map(|k| {
            Frontend::attach(FrontendConfig::default(), &ring, Arc::clone(&transport))
                .map(|f| Arc::new(f.with_first_request_id(k * 1_000_000 + 1)))
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let stop = Arc::new(AtomicBool::new(false));
    let finished = Arc::new(Mutex::new(Vec::<RequestRecord>::new()));
    let expected = Arc::new(Mutex::new(HashMap::<u64, Vec<u32>>::new()));

    let device = {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || sched.run_loop(&clock, &stop, None).map_err(err))
    };
    let reader = {
        let (stop, fes, finished) = (Arc::clone(&stop), fes.clone(), Arc::clone(&finished));
        std::thread::spawn(move || -> Result<(), String> {
            while !stop.load(Ordering::Acquire) {
                for fe in &fes {
                    fe.reader_cycle().map_err(err)?;
                    finished.lock().extend(fe.take_finished());
                }
                std::thread::sleep(Duration::from_micros(100));
            }
            Ok(())
        })
    };
    let submitters: Vec<_> = fes
        .iter()
        .enumerate()
        .map(|(k, fe)| {
            let (fe, expected, model) = (Arc::clone(fe), Arc::clone(&expected), model.clone());
            std::thread::spawn(move || -> Result<(), String> {
                let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
                for _ in 0..PER_SUBMITTER {
                    let len = rng.random_range(1..=16);
                    let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(3..512)).collect();
                    let (max, seed) = (rng.random_range(1..=12), rng.random());
                    loop {
                        let now = fe.transport().clock().now();
                        match fe.submit(SubmitRequest::new(prompt.clone(), max, seed, now)) {
                            Ok(id) => {
                                expected.lock().insert(id, expected_tokens(&model, seed, &prompt, max));
                                break;
                            }
                            Err(FrontendError::NoSlot) => std::thread::sleep(Duration::from_micros(200)),
                            Err(e) => return Err(e.to_string()),
                        }
                    }
                }
                Ok(())
            })
        })
        .collect();

    let total = 4 * PER_SUBMITTER;
    let started = Instant::now();
    let mut submit_result = Ok(());
    for s in submitters {
        if let Err(e) = s.join().map_err(|_| "submitter panicked".to_string()).and_then(|r| r) {
            submit_result = Err(e);
        }
    }
    while submit_result.is_ok() && finished.lock().len() < total && started.elapsed() < Duration::from_secs(60) {
        std::thread::sleep(Duration::from_millis(5));
    }
    stop.store(true, Ordering::Release);
    let dev = device.join().map_err(|_| "device thread panicked")?;
    let rd = reader.join().map_err(|_| "reader thread panicked")?;
    submit_result?;
    dev?;
    rd?;

    let finished = std::mem::take(&mut *finished.lock());
    let expected = expected.lock();
    ensure!(finished.len() == total, "{} of {total} finished", finished.len());
    let mut ids = HashSet::new();
    for r in &finished {
        ensure!(ids.insert(r.request_id), "request {} finished twice", r.request_id);
        ensure!(r.status == RequestStatus::Done, "request {} ended {:?}", r.request_id, r.status);
        ensure!(Some(&r.tokens) == expected.get(&r.request_id), "request {} wrong tokens", r.request_id);
    }
    ensure!(ring.rejected_transitions() == 0, "{} illegal transitions", ring.rejected_transitions());
    let log = ring.transition_log();
    ensure!(log.iter().all(|r| edge_owner(r.from, r.to) == Some(r.actor)), "illegal edge logged");
    let count = |from, to| log.iter().filter(|r| r.from == from && r.to == to).count();
    ensure!(count(SlotState::Empty, SlotState::PrefillPending) == total, "publish count mismatch");
    ensure!(count(SlotState::PrefillPending, SlotState::PrefillProcessing) == total, "claim count mismatch");
    ensure!(count(SlotState::DecodeCompleted, SlotState::Empty) == total, "reclaim count mismatch");
    for s in 0..SLOTS {
        let m = ring.meta(s).map_err(err)?;
        ensure!(m.slot_state() == Some(SlotState::Empty) && m.request_id == 0, "slot {s} not reclaimed");
    }
    let conflicts: u64 = fes.iter().map(|f| f.stats().claim_conflicts).sum();
    Ok(format!("{total} requests on 6 threads, {} transitions, {conflicts} reservation conflicts", log.len()))
}

fn c1_state_machine() -> Outcome {
    let (mut requests, mut transitions, mut conflicts, mut cancelled) = (0, 0, 0, 0);
    for seed in 0..10_000 {
        let r = interleaving(seed).map_err(|e| format!("interleaving {seed}: {e}"))?;
        requests += r.requests;
        transitions += r.transitions;
        conflicts += r.conflicts;
        cancelled += r.cancelled;
    }
    let threaded = threaded_stress().map_err(|e| format!("threaded run: {e}"))?;
    Ok(format!(
        "10000 interleavings, {requests} requests ({cancelled} cancelled), {transitions} audited transitions, \
         {conflicts} reservation conflicts resolved; {threaded}; 0 illegal transitions, 0 double claims"
    ))
}

// 2. Exactly-once delivery

fn c2_exactly_once() -> Outcome {
    let mut cfg = SystemConfig::default();
    cfg.ring.capacity = 1024;
    cfg.ring.input_arena_tokens = 1024 * 64;
    cfg.ring.output_arena_tokens = 1024 * 64;
    cfg.scheduler.scan_threads = 1;
    cfg.scheduler.batch_capacity = 32;
    cfg.engine.eos_probability = 0.03;
    let spec = WorkloadSpec {
        arrival: ArrivalProcess::Poisson,
        rate: 5000.0,
        count: Some(1000),
        duration_s: None,
        input: LengthDist::Uniform { min: 1, max: 48 },
        output: LengthDist::Uniform { min: 1, max: 64 },
        trace: None,
        vocab_size: cfg.engine.vocab_size,
    };
    let work = generate(&spec, 42).map_err(err)?;
    let out = simulate(&cfg, &work).map_err(err)?;
    let bad = run_invariants(&out);
    ensure!(bad.is_empty(), "{bad:?}");
    ensure!(out.records.len() == 1000, "{} records", out.records.len());
    let model = model_of(&cfg.engine);
    let published: HashMap<u64, &CompletionRecord> = out.completions.iter().map(|c| (c.request_id, c)).collect();
    ensure!(published.len() == 1000, "{} distinct completions", published.len());
    let mut tokens = 0;
    for (i, r) in work_for(&out) {
        let w = &work[i];
        let arena = &published[&r.request_id].tokens;
        ensure!(&r.tokens == arena, "request {}: streamed {:?} != published {:?}", r.request_id, r.tokens, arena);
        ensure!(r.tokens == expected_tokens(&model, w.seed, &w.prompt, w.max_output), "request {} off-model", r.request_id);
        ensure!(r.token_times.len() == r.tokens.len(), "request {} timing count", r.request_id);
        ensure!(r.token_times.windows(2).all(|p| p[0] <= p[1]), "request {} out of order", r.request_id);
        tokens += r.tokens.len();
    }
    // Peak number of requests between submission and reclaim.
    let mut edges: Vec<(Duration, i32)> = Vec::new();
    for r in &out.records {
        edges.push((r.submitted.unwrap_or(r.arrival), 1));
        edges.push((r.finished.unwrap_or(r.arrival), -1));
    }
    edges.sort();
    let peak = edges.iter().scan(0, |n, e| {
        *n += e.1;
        Some(*n)
    });
    let peak = peak.max().unwrap_or(0);
    Ok(format!("1000 requests, {tokens} tokens, peak {peak} in flight; streamed == published == model for all"))
}

// 3. Launch-window law

fn c3_launch_window() -> Outcome {
    let mut cfg = SystemConfig::default();
    cfg.ring.capacity = 512;
    cfg.ring.input_arena_tokens = 512 * 64;
    cfg.ring.output_arena_tokens = 512 * 1024;
    cfg.scheduler.scan_threads = 1;
    cfg.scheduler.record_events = true;
    let mut spec = WorkloadSpec::fixed(320, 4.0, 64, 640);
    spec.vocab_size = cfg.engine.vocab_size;
    let work = generate(&spec, 3).map_err(err)?;
    let out = simulate(&cfg, &work).map_err(err)?;
    let bad = run_invariants(&out);
    ensure!(bad.is_empty(), "{bad:?}");
    let limit = cfg.scheduler.window_limit;
    ensure!(limit == 120, "default window limit is {limit}");
    ensure!(out.sched.decode_steps >= 10_000, "only {} decode steps", out.sched.decode_steps);
    ensure!(out.sched.max_window_counter <= limit, "counter reached {}", out.sched.max_window_counter);

    let (mut epoch, mut counter, mut resets, mut max_seen) = (0u64, 0u32, 0u64, 0u32);
    for e in &out.events {
        max_seen = max_seen.max(e.counter);
        ensure!(e.counter <= limit, "event counter {} > {limit}", e.counter);
        match (e.event, e.mode) {
            (EventKind::Launch, Some(LaunchMode::Tail)) => {
                ensure!(e.counter == 0 && e.epoch == epoch + 1, "tail launch at step {} did not reset", e.step);
                resets += 1;
            }
            (EventKind::Launch, Some(LaunchMode::FireAndForget)) => {
                ensure!(e.counter == counter + 1 && e.epoch == epoch, "launch at step {} skipped the counter", e.step);
            }
            (EventKind::Launch, m) => return Err(format!("unexpected launch mode {m:?}")),
            _ => ensure!(
                e.counter == counter && e.epoch == epoch,
                "window moved outside a launch at step {}",
                e.step
            ),
        }
        epoch = e.epoch;
        counter = e.counter;
    }
    ensure!(resets == epoch && resets == out.sched.epochs, "{resets} resets, final epoch {epoch}");

    let long = out
        .completions
        .iter()
        .filter(|c| c.last_epoch >= c.first_epoch + 2)
        .max_by_key(|c| c.last_epoch - c.first_epoch)
        .ok_or("no request spans three epochs")?;
    let idx = out.records.iter().position(|r| r.request_id == long.request_id).ok_or("missing record")?;
    let w = work[out.work_index[idx]].clone();
    let mut single = cfg.clone();
    single.scheduler.window_limit = 1_000_000;
    let reference = simulate(&single, &[WorkItem { arrival: Duration::ZERO, ..w.clone() }]).map_err(err)?;
    let rc = &reference.completions[0];
    ensure!(rc.first_epoch == rc.last_epoch, "reference run crossed epochs");
    ensure!(rc.tokens == long.tokens, "multi-epoch tokens differ from the single-epoch reference");
    ensure!(long.tokens == expected_tokens(&model_of(&cfg.engine), w.seed, &w.prompt, w.max_output), "off-model");
    Ok(format!(
        "{} decode steps, max counter {max_seen}/{limit}, {resets} resets == {epoch} epoch increments; \
         request {} spans {} epochs ({} tokens) and matches its single-epoch reference",
        out.sched.decode_steps,
        long.request_id,
        long.last_epoch - long.first_epoch + 1,
        long.tokens.len()
    ))
}

// 4. Admission conditions

fn c4_admission() -> Outcome {
    let (mut checks, mut pauses, mut joins) = (0usize, 0usize, 0usize);
    let mut blocked = [0usize; 3];
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut cfg = SystemConfig::default();
        cfg.ring.capacity = 128;
        cfg.ring.input_arena_tokens = 128 * 128;
        cfg.ring.output_arena_tokens = 128 * 128;
        cfg.engine = quick_engine(rng.random_range(0.0..0.1));
        cfg.scheduler.scan_threads = 1;
        cfg.scheduler.record_events = true;
        cfg.scheduler.mode = if seed % 4 == 3 { SchedulerMode::Host } else { SchedulerMode::Device };
        cfg.scheduler.batch_capacity = rng.random_range(1..=16);
        cfg.scheduler.window_limit = rng.random_range(ADMISSION_LAUNCHES..=24);
        cfg.kv = KvConfig {
            page_size: 16,
            total_pages: rng.random_range(20..=80),
        };
        let spec = WorkloadSpec {
            arrival: ArrivalProcess::Poisson,
            rate: rng.random_range(50.0..3000.0),
            count: Some(rng.random_range(10..=60)),
            duration_s: None,
            input: LengthDist::Uniform { min: 1, max: 100 },
            output: LengthDist::Uniform { min: 1, max: 100 },
            trace: None,
            vocab_size: cfg.engine.vocab_size,
        };
        let work = generate(&spec, seed).map_err(err)?;
        let out = simulate(&cfg, &work).map_err(err)?;
        let device = cfg.scheduler.mode == SchedulerMode::Device;

        // Each check opens a window that closes at the next launch or check.
        let mut open: Option<(bool, bool)> = None;
        let close = |open: &mut Option<(bool, bool)>| -> Result<(), String> {
            if let Some((admit, paused)) = open.take() {
                ensure!(admit == paused, "seed {seed}: admit={admit} but pause={paused}");
            }
            Ok(())
        };
        for e in &out.events {
            match e.event {
                EventKind::AdmitCheck => {
                    close(&mut open)?;
                    let d = e.decision.ok_or("check without a decision")?;
                    let r = d.reasons;
                    ensure!(
                        d.admit == (r.pending_found && r.capacity_free && r.window_headroom),
                        "seed {seed}: decision disagrees with its reasons"
                    );
                    let headroom = !device || e.counter + ADMISSION_LAUNCHES <= cfg.scheduler.window_limit;
                    ensure!(r.window_headroom == headroom, "seed {seed}: headroom misreported at counter {}", e.counter);
                    for (b, ok) in blocked.iter_mut().zip([r.pending_found, r.capacity_free, r.window_headroom]) {
                        *b += usize::from(!ok);
                    }
                    checks += 1;
                    open = Some((d.admit, false));
                }
                EventKind::Pause if e.slot.is_none() => match &mut open {
                    Some((_, paused @ false)) => {
                        *paused = true;
                        pauses += 1;
                    }
                    _ => return Err(format!("seed {seed}: pause without a preceding check")),
                },
                EventKind::Launch => close(&mut open)?,
                _ => {}
            }
        }
        close(&mut open)?;
        for c in &out.completions {
            match (c.admitted_step, c.first_decode_step) {
                (Some(a), Some(d)) => {
                    ensure!(d == a + 1, "seed {seed}: request {} admitted at {a} first decoded at {d}", c.request_id);
                    joins += 1;
                }
                (Some(_), None) => ensure!(c.tokens.len() == 1, "seed {seed}: request {} never decoded", c.request_id),
                (None, _) => ensure!(c.tokens.is_empty(), "seed {seed}: request {} ran unadmitted", c.request_id),
            }
        }
    }
    ensure!(blocked.iter().all(|&b| b > 0), "fuzzing never blocked on some reason: {blocked:?}");
    Ok(format!(
        "200 schedules, {checks} checks, {pauses} pauses all with three reasons; blocked by \
         pending/capacity/window {}/{}/{}; {joins} requests joined at admission step + 1",
        blocked[0], blocked[1], blocked[2]
    ))
}

// 5. Policy equivalence

fn c5_policy_equivalence() -> Outcome {
    let mut compared = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let mut cfg = SystemConfig::default();
        cfg.ring.capacity = 64;
        cfg.ring.input_arena_tokens = 64 * 256;
        cfg.ring.output_arena_tokens = 64 * 128;
        cfg.scheduler.scan_threads = 1;
        cfg.scheduler.batch_capacity = rng.random_range(1..=16);
        cfg.engine.eos_probability = rng.random_range(0.0..0.05);
        let spec = WorkloadSpec {
            arrival: if rng.random_bool(0.5) { ArrivalProcess::Poisson } else { ArrivalProcess::FixedInterval },
            rate: rng.random_range(5.0..400.0),
            count: Some(rng.random_range(5..=40)),
            duration_s: None,
            input: LengthDist::Uniform { min: 1, max: 200 },
            output: LengthDist::Uniform { min: 1, max: 100 },
            trace: None,
            vocab_size: cfg.engine.vocab_size,
        };
        let work = generate(&spec, seed).map_err(err)?;
        let mut per_mode = Vec::new();
        for mode in [SchedulerMode::Device, SchedulerMode::Host] {
            cfg.scheduler.mode = mode;
            let out = simulate(&cfg, &work).map_err(err)?;
            let bad = run_invariants(&out);
            ensure!(bad.is_empty(), "workload {seed} {mode:?}: {bad:?}");
            let mut by_work = vec![Vec::new(); work.len()];
            for (i, r) in work_for(&out) {
                by_work[i] = r.tokens;
            }
            per_mode.push(by_work);
        }
        let model = model_of(&cfg.engine);
        for (i, w) in work.iter().enumerate() {
            ensure!(per_mode[0][i] == per_mode[1][i], "workload {seed} request {i}: modes disagree");
            ensure!(
                per_mode[0][i] == expected_tokens(&model, w.seed, &w.prompt, w.max_output),
                "workload {seed} request {i}: off-model"
            );
            compared += 1;
        }
    }
    Ok(format!("100 workloads, {compared} requests identical in both modes"))
}

// 6. Makespan ratio on the virtual clock

fn makespan_config(outputs: u32) -> SystemConfig {
    let mut cfg = SystemConfig::default();
    cfg.ring.capacity = 64;
    cfg.ring.input_arena_tokens = 64 * 2048;
    cfg.ring.output_arena_tokens = 64 * 1024;
    cfg.scheduler.scan_threads = 1;
    cfg.scheduler.lanes = 64;
    cfg.engine.latency_preset = LatencyPreset::Custom;
    cfg.engine.custom = Some(LatencyProfile {
        prefill_base_ms: 10.0,
        prefill_per_token_ms: 0.01,
        decode_base_ms: 10.0,
        decode_per_seq_ms: 0.0,
    });
    cfg.host.overhead_model = HostOverheadModel::Uniform { min_ms: 1.6, max_ms: 7.0 };
    cfg.harness.arrival = ArrivalProcess::FixedInterval;
    cfg.harness.input = LengthDist::Fixed { value: 1024 };
    cfg.harness.output = LengthDist::Fixed { value: outputs };
    cfg
}

fn c6_makespan() -> Outcome {
    let (lo, hi, tol) = (1.16, 1.70, 0.05);
    let mut parts = Vec::new();
    for outputs in [64, 512] {
        let cfg = makespan_config(outputs);
        let spec = WorkloadSpec {
            arrival: ArrivalProcess::FixedInterval,
            rate: 1e6,
            count: Some(16),
            duration_s: None,
            input: cfg.harness.input.clone(),
            output: cfg.harness.output.clone(),
            trace: None,
            vocab_size: cfg.engine.vocab_size,
        };
        let work = generate(&spec, cfg.harness.seed).map_err(err)?;
        let mut spans = Vec::new();
        for mode in [SchedulerMode::Device, SchedulerMode::Host] {
            let mut c = cfg.clone();
            c.scheduler.mode = mode;
            let out = simulate(&c, &work).map_err(err)?;
            let bad = run_invariants(&out);
            ensure!(bad.is_empty(), "{mode:?}: {bad:?}");
            spans.push(out.makespan.as_secs_f64());
        }
        let ratio = spans[1] / spans[0];
        parts.push(format!("16x(1024->{outputs}) host {:.3}s / device {:.3}s = {ratio:.3}", spans[1], spans[0]));
        ensure!(
            (lo - tol..=hi + tol).contains(&ratio),
            "{}; outside [{lo}, {hi}] +/- {tol}",
            parts.join("; ")
        );
    }
    Ok(format!("{} (band [{lo}, {hi}])", parts.join("; ")))
}

// 7. Interference on the wall clock

struct WallRun {
    throughput: f64,
    completed: usize,
}

fn wall_run(mode: SchedulerMode, work: &[(Duration, Vec<u32>, u32, u64)]) -> Result<WallRun, String> {
    let mut cfg = SystemConfig::default();
    cfg.ring.capacity = 512;
    cfg.ring.input_arena_tokens = 512 * 256;
    cfg.ring.output_arena_tokens = 512 * 64;
    cfg.scheduler.mode = mode;
    cfg.scheduler.scan_threads = 1;
    cfg.scheduler.lanes = 512;
    cfg.host.overhead_model = HostOverheadModel::Measured { target_ms: 3.0 };
    let rt = Runtime::start(&cfg).map_err(err)?;
    rt.retain_finished(true);
    let fe = Arc::clone(rt.frontend());
    let clock = fe.transport().clock().clone();
    let t0 = clock.now();
    for (at, prompt, max, seed) in work {
        let due = t0 + *at;
        let now = clock.now();
        if due > now {
            std::thread::sleep(due - now);
        }
        let arrival = clock.now();
        loop {
            match fe.submit(SubmitRequest::new(prompt.clone(), *max, *seed, arrival)) {
                Ok(_) => break,
                Err(FrontendError::NoSlot) => std::thread::sleep(Duration::from_millis(1)),
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut records = Vec::new();
    while records.len() < work.len() && Instant::now() < deadline {
        records.extend(rt.take_finished());
        std::thread::sleep(Duration::from_millis(5));
    }
    let errors = rt.errors();
    rt.shutdown();
    ensure!(errors.is_empty(), "runtime errors: {errors:?}");
    ensure!(records.len() == work.len(), "{} of {} finished", records.len(), work.len());
    ensure!(records.iter().all(|r| r.status == RequestStatus::Done), "a request failed");
    let start = records.iter().map(|r| r.arrival).min().unwrap();
    let end = records.iter().filter_map(|r| r.finished).max().unwrap();
    Ok(WallRun {
        throughput: records.len() as f64 / (end - start).as_secs_f64(),
        completed: records.len(),
    })
}

fn wall_workload(rate: f64, count: usize, burst: bool) -> Vec<(Duration, Vec<u32>, u32, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let gap = rand_distr::Exp::new(rate).expect("positive rate");
    let mut t = 0.0;
    (0..count)
        .map(|_| {
            if !burst {
                t += gap.sample(&mut rng);
            }
            let prompt = (0..128).map(|_| rng.random_range(3..256)).collect();
            (Duration::from_secs_f64(t), prompt, 32, rng.random())
        })
        .collect()
}

fn c7_interference() -> Outcome {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let hogs = 2 * cores;
    // Size the host work while the machine is idle.
    let steps_per_ms = calibrated_steps_per_ms();

    let saturated = wall_run(SchedulerMode::Host, &wall_workload(1.0, 240, true))?;
    let rate = 0.85 * saturated.throughput;
    let work = wall_workload(rate, 300, false);
    let mut retention = Vec::new();
    let mut detail = Vec::new();
    for mode in [SchedulerMode::Device, SchedulerMode::Host] {
        let quiet = wall_run(mode, &work)?;
        let hog = inject_interference(InterferenceConfig {
            threads: hogs,
            mode: InterferenceMode::Wall,
        })
        .map_err(err)?;
        let loud = wall_run(mode, &work);
        let hog_work = hog.work_done();
        drop(hog);
        let loud = loud?;
        let r = loud.throughput / quiet.throughput;
        detail.push(format!(
            "{mode:?} {:.1} -> {:.1} req/s (retention {r:.3}, {} done, hog work {hog_work})",
            quiet.throughput, loud.throughput, loud.completed
        ));
        retention.push(r);
    }
    let note = if cores < 8 {
        format!("; note: {cores} core(s), below the 8 the trend is specified for")
    } else {
        String::new()
    };
    let summary = format!(
        "{hogs} hogs, rate {rate:.1} req/s (0.85 of host capacity {:.1}), host work {steps_per_ms:.0} steps/ms; {}{note}",
        saturated.throughput,
        detail.join("; ")
    );
    ensure!(retention[0] >= 0.95, "device retention {:.3} < 0.95: {summary}", retention[0]);
    ensure!(retention[1] <= 0.90, "host retention {:.3} > 0.90: {summary}", retention[1]);
    Ok(summary)
}

// 8. Tokenizer

fn oracle_encode(merges: &HashMap<(Vec<u8>, Vec<u8>), usize>, piece: &[u8]) -> Vec<Vec<u8>> {
    let mut syms: Vec<Vec<u8>> = piece.iter().map(|&b| vec![b]).collect();
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..syms.len().saturating_sub(1) {
            if let Some(&rank) = merges.get(&(syms[i].clone(), syms[i + 1].clone())) {
                if best.is_none_or(|(r, _)| rank < r) {
                    best = Some((rank, i));
                }
            }
        }
        let Some((_, i)) = best else { return syms };
        let right = syms.remove(i + 1);
        syms[i].extend(right);
    }
}

fn random_input(rng: &mut ChaCha8Rng) -> Vec<u8> {
    match rng.random_range(0..10) {
        0..=5 => {
            let words = rng.random_range(0..30);
            synthetic::text(rng, words).into_bytes()
        }
        6 | 7 => {
            const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ABCXYZ0123456789.,!?'-\n\t";
            (0..rng.random_range(0..120)).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
        }
        _ => (0..rng.random_range(0..120)).map(|_| rng.random()).collect(),
    }
}

fn c8_tokenizer() -> Outcome {
    let merges = synthetic::merges(11, 500);
    ensure!(merges.len() == 500, "{} merges", merges.len());
    let tok = Tokenizer::from_merges(&merges).map_err(err)?;
    let mut ranks = HashMap::new();
    for (r, m) in merges.iter().enumerate() {
        ranks.entry(m.clone()).or_insert(r);
    }
    let mut by_bytes: HashMap<Vec<u8>, u32> = HashMap::new();
    for id in 0..tok.vocab_len() as u32 {
        let b = tok.token_bytes(id).ok_or("hole in vocab")?.to_vec();
        ensure!(by_bytes.insert(b, id).is_none(), "two ids share bytes");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<Vec<u8>> = (0..10_000).map(|_| random_input(&mut rng)).collect();
    let mut merged_tokens = 0;
    for text in &inputs {
        let mut want = Vec::new();
        for piece in pretokenize_with(text, Backend::Scalar) {
            for sym in oracle_encode(&ranks, &text[piece]) {
                merged_tokens += usize::from(sym.len() > 1);
                want.push(by_bytes[&sym]);
            }
        }
        ensure!(tok.encode(text) == want, "encode differs from the oracle on {:?}", String::from_utf8_lossy(text));
    }

    let bytes: Vec<Vec<u8>> = (0..10_000)
        .map(|i| {
            if i % 2 == 0 {
                (0..rng.random_range(0..200)).map(|_| rng.random()).collect()
            } else {
                (0..rng.random_range(0..60)).map(|_| rng.random::<char>()).collect::<String>().into_bytes()
            }
        })
        .collect();
    for b in &bytes {
        ensure!(tok.decode(&tok.encode(b)).map_err(err)? == *b, "round trip failed on {b:?}");
    }

    let mut scratch = EncodeScratch::new();
    let mut out = Vec::new();
    for text in inputs.iter().chain(&bytes) {
        out.clear();
        tok.encode_into(text, &mut scratch, &mut out);
    }
    let (ok, allocs) = count_allocs(|| {
        let mut ok = true;
        for text in inputs.iter().chain(&bytes) {
            out.clear();
            tok.encode_into(text, &mut scratch, &mut out);
            ok &= !out.is_empty() || text.is_empty();
        }
        ok
    });
    ensure!(ok, "encode_into produced no tokens for a nonempty input");
    ensure!(allocs == 0, "{allocs} allocations inside encode after warm-up");
    Ok(format!(
        "10000 strings match the oracle ({merged_tokens} merged tokens), 10000 byte strings round-trip, \
         0 allocations over 20000 warm encodes"
    ))
}

// 9. Metrics and fits

fn nearest_rank(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((p * s.len() as f64) / 100.0).ceil() as usize;
    s[k.max(1).min(s.len()) - 1]
}

fn close(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..500 {
        let n = rng.random_range(1..40);
        let records: Vec<RequestTiming> = (0..n)
            .map(|_| {
                let arrival = Duration::from_micros(rng.random_range(0..1_000_000));
                let ntok = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..20) };
                let mut t = arrival + Duration::from_micros(rng.random_range(0..50_000));
                let times: Vec<Duration> = (0..ntok)
                    .map(|_| {
                        t += Duration::from_micros(rng.random_range(0..20_000));
                        t
                    })
                    .collect();
                RequestTiming {
                    arrival,
                    submitted: Some(arrival),
                    first_token: times.first().copied(),
                    last_token: times.last().copied(),
                    token_times: times,
                }
            })
            .collect();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let (mut ttft, mut tpot, mut itl) = (Vec::new(), Vec::new(), Vec::new());
        let (mut done, mut toks) = (0usize, 0usize);
        let start = records.iter().map(|r| r.arrival).min().unwrap();
        let mut end = start;
        for r in &records {
            if r.token_times.is_empty() {
                continue;
            }
            done += 1;
            toks += r.token_times.len();
            let (first, last) = (r.token_times[0], *r.token_times.last().unwrap());
            end = end.max(last);
            ttft.push(ms(first - r.arrival));
            if r.token_times.len() > 1 {
                tpot.push(ms(last - first) / (r.token_times.len() - 1) as f64);
            }
            for i in 1..r.token_times.len() {
                itl.push(ms(r.token_times[i] - r.token_times[i - 1]));
            }
        }
        let span = (end - start).as_secs_f64();
        let agg = match compute_metrics(&records) {
            Ok(a) => a,
            Err(e) => return Err(format!("case {case}: {e}")),
        };
        ensure!(agg.requests == done && agg.output_tokens == toks, "case {case}: counts");
        let thr = if span > 0.0 { done as f64 / span } else { 0.0 };
        ensure!(close(agg.throughput_rps, thr), "case {case}: throughput {} vs {thr}", agg.throughput_rps);
        for (name, got, want) in [("ttft", agg.ttft, &ttft), ("tpot", agg.tpot, &tpot), ("itl", agg.itl, &itl)] {
            let mean = if want.is_empty() { f64::NAN } else { want.iter().sum::<f64>() / want.len() as f64 };
            let pos: Vec<f64> = want.iter().copied().filter(|v| *v > 0.0).collect();
            let geo = if pos.is_empty() {
                f64::NAN
            } else {
                (pos.iter().map(|v| v.ln()).sum::<f64>() / pos.len() as f64).exp()
            };
            ensure!(got.count == want.len(), "case {case} {name}: count");
            for (label, g, w) in [
                ("p50", got.p50, nearest_rank(want, 50.0)),
                ("p95", got.p95, nearest_rank(want, 95.0)),
                ("p99", got.p99, nearest_rank(want, 99.0)),
                ("p99.9", got.p999, nearest_rank(want, 99.9)),
                ("mean", got.mean, mean),
                ("geo", got.geo_mean, geo),
            ] {
                ensure!(close(g, w), "case {case} {name} {label}: {g} vs {w}");
            }
        }
    }

    let levels = DEFAULT_RATES;
    let mut worst = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let j = rng.random_range(2..levels.len() - 2);
        let k = levels[j];
        let noise = Normal::new(0.0, 0.05 * k).map_err(err)?;
        let points: Vec<(f64, f64)> = levels.iter().map(|&l| (l, l.min(k) + noise.sample(&mut rng))).collect();
        let fit = fit_saturation(&points).map_err(err)?;
        let at = levels.iter().position(|&l| l == fit).ok_or("knee is not a swept level")?;
        let off = at.abs_diff(j);
        worst = worst.max(off);
        ensure!(off <= 1, "seed {seed}: knee {k} fitted at {fit}; points {points:.2?}");
    }

    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.random_range(1..15);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..50.0)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let curve: Vec<(f64, f64)> = xs
            .iter()
            .map(|&x| {
                let y = match rng.random_range(0..4) {
                    0 => 0.95 * x,
                    _ => x * rng.random_range(0.0..1.2),
                };
                (x, y)
            })
            .collect();
        let mut brute = 0.0;
        for &(x, y) in &curve {
            if y >= 0.95 * x && x > brute {
                brute = x;
            }
        }
        ensure!(serviceable_load(&curve) == brute, "curve {seed}: {} vs {brute}", serviceable_load(&curve));
    }
    ensure!(serviceable_load(&[]) == 0.0, "empty curve");
    Ok(format!(
        "500 random record sets match the naive oracle; knee within {worst} level(s) over 100 seeds; \
         serviceable load matches brute force on 100 curves"
    ))
}

// 10. KV allocator

fn c10_kv() -> Outcome {
    let mut ops = 0usize;
    let (mut rejects, mut peak) = (0usize, 0usize);
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = rng.random_range(1..=64);
        let mut pool = KvPagePool::new(16, total);
        let mut shadow: HashMap<u64, Vec<u32>> = HashMap::new();
        let mut next_id = 1u64;
        for _ in 0..64 {
            ops += 1;
            if shadow.is_empty() || rng.random_bool(0.55) {
                let tokens: usize = rng.random_range(1..=16 * 24);
                let need = tokens.div_ceil(16);
                let free_before = pool.free_pages();
                match pool.kv_alloc(next_id, tokens) {
                    Ok(pages) => {
                        ensure!(pages.len() == need, "seed {seed}: {} pages for {tokens} tokens", pages.len());
                        let pages = pages.to_vec();
                        for p in &pages {
                            ensure!((*p as usize) < total, "seed {seed}: page {p} out of range");
                            ensure!(
                                shadow.values().all(|v| !v.contains(p)),
                                "seed {seed}: page {p} aliased"
                            );
                        }
                        let distinct: HashSet<_> = pages.iter().collect();
                        ensure!(distinct.len() == pages.len(), "seed {seed}: duplicate page within a request");
                        shadow.insert(next_id, pages);
                    }
                    Err(_) => {
                        ensure!(need > free_before, "seed {seed}: refused {need} pages with {free_before} free");
                        ensure!(pool.free_pages() == free_before, "seed {seed}: failed alloc leaked");
                        rejects += 1;
                    }
                }
                next_id += 1;
            } else if rng.random_bool(0.9) {
                let ids: Vec<u64> = shadow.keys().copied().collect();
                let id = ids[rng.random_range(0..ids.len())];
                let n = pool.kv_free(id);
                let want = shadow.remove(&id).unwrap().len();
                ensure!(n == want, "seed {seed}: freed {n} of {want}");
            } else {
                ensure!(pool.kv_free(u64::MAX) == 0, "seed {seed}: freed an unknown request");
            }
            let held: usize = shadow.values().map(Vec::len).sum();
            peak = peak.max(held);
            ensure!(pool.allocated_pages() == held, "seed {seed}: allocated count drift");
            ensure!(pool.free_pages() + held == total, "seed {seed}: pages not conserved");
            pool.check().map_err(|e| format!("seed {seed}: {e}"))?;
            for (id, pages) in &shadow {
                ensure!(pool.pages_of(*id) == Some(pages.as_slice()), "seed {seed}: page list of {id} changed");
            }
        }
    }
    Ok(format!("10000 sequences, {ops} operations ({rejects} refusals); conserved with no aliasing"))
}

// 11. Wire formats

fn http(addr: SocketAddr, path: &str, body: &str) -> Result<(u16, Vec<(String, String)>, Vec<u8>), String> {
    let mut s = TcpStream::connect(addr).map_err(err)?;
    s.set_read_timeout(Some(Duration::from_secs(20))).map_err(err)?;
    write!(
        s,
        "POST {path} HTTP/1.1\r\nHost: t\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .map_err(err)?;
    let mut r = BufReader::new(s);
    let mut line = String::new();
    r.read_line(&mut line).map_err(err)?;
    let status = line.split_whitespace().nth(1).and_then(|s| s.parse().ok()).ok_or("bad status line")?;
    let mut headers = Vec::new();
    loop {
        line.clear();
        r.read_line(&mut line).map_err(err)?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once(':').ok_or("bad header")?;
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let mut body = Vec::new();
    if headers.iter().any(|(k, v)| k == "transfer-encoding" && v.contains("chunked")) {
        loop {
            let mut size = String::new();
            r.read_line(&mut size).map_err(err)?;
            let n = usize::from_str_radix(size.trim(), 16).map_err(err)?;
            let mut chunk = vec![0; n + 2];
            r.read_exact(&mut chunk).map_err(err)?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    } else {
        r.read_to_end(&mut body).map_err(err)?;
    }
    Ok((status, headers, body))
}

fn check_sse(body: &[u8], events: usize) -> Result<String, String> {
    let text = std::str::from_utf8(body).map_err(err)?;
    let mut rest = text;
    let mut payloads = Vec::new();
    while !rest.is_empty() {
        let line = rest.strip_prefix("data: ").ok_or("event does not start with \"data: \"")?;
        let end = line.find('\n').ok_or("unterminated event")?;
        ensure!(line[end..].starts_with("\n\n"), "event not terminated by a blank line");
        payloads.push(&line[..end]);
        rest = &line[end + 2..];
    }
    ensure!(payloads.last() == Some(&"[DONE]"), "stream does not end with [DONE]");
    ensure!(payloads.iter().filter(|p| **p == "[DONE]").count() == 1, "more than one [DONE]");
    ensure!(payloads.len() == events + 1, "{} data events for {events} tokens", payloads.len() - 1);
    let mut joined = String::new();
    for p in &payloads[..events] {
        let v: serde_json::Value = serde_json::from_str(p).map_err(err)?;
        joined.push_str(v["choices"][0]["text"].as_str().ok_or("no text field")?);
    }
    Ok(joined)
}

fn c11_wire() -> Outcome {
    let ring = Arc::new(RingBuffer::create(4096, 4096 * 4, 4096 * 4).map_err(err)?);
    ensure!(ring.metadata_bytes() == 65_536, "metadata block is {} bytes", ring.metadata_bytes());
    ring.reserve(5, 0xDEAD_BEEF_0123).map_err(err)?;
    let snap = ring.snapshot_metadata();
    let bytes = snap.to_bytes();
    ensure!(bytes.len() == 65_536, "snapshot is {} bytes", bytes.len());
    let entry = &bytes[5 * 16..6 * 16];
    ensure!(entry[..4] == (SlotState::Empty as u32).to_le_bytes(), "state field");
    ensure!(entry[4..8] == 0u32.to_le_bytes(), "count field");
    ensure!(entry[8..] == 0xDEAD_BEEF_0123u64.to_le_bytes(), "request id field");
    let transport = Arc::new(Transport::new(TransportConfig::default(), Clock::virtual_clock()));
    let fe = Frontend::attach(FrontendConfig::default(), &ring, Arc::clone(&transport)).map_err(err)?;
    let before = transport.stats().bytes;
    let read = fe.read_metadata().map_err(err)?;
    let moved = transport.stats().bytes - before;
    ensure!(moved == 65_536, "bulk metadata read moved {moved} bytes");
    ensure!(read.to_bytes() == bytes, "one-sided read differs from the ring");

    let mut csv = Vec::new();
    write_csv(&[], &mut csv).map_err(err)?;
    let header = "rate,mode,interference,throughput_rps,throughput_tps,ttft_p50,ttft_p95,ttft_p99,ttft_p999,\
                  ttft_mean,tpot_p50,tpot_p95,tpot_p99,tpot_p999,tpot_mean,itl_p50,itl_p99,itl_p999";
    ensure!(CSV_HEADER == header, "CSV header constant differs");
    ensure!(csv == format!("{header}\n").into_bytes(), "CSV output header differs");

    let mut cfg = SystemConfig::default();
    cfg.ring.capacity = 16;
    cfg.ring.input_arena_tokens = 16 * 1024;
    cfg.ring.output_arena_tokens = 16 * 1024;
    cfg.scheduler.scan_threads = 1;
    cfg.scheduler.lanes = 16;
    let rt = Runtime::start(&cfg).map_err(err)?;
    let app = router(rt.app_state("acceptance"));
    let tokio = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(err)?;
    let listener = tokio.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).map_err(err)?;
    let addr = listener.local_addr().map_err(err)?;
    tokio.spawn(async move { axum::serve(listener, app).await });
    let result = (|| {
        let (status, headers, body) =
            http(addr, "/v1/completions", r#"{"prompt":"wire check","max_tokens":8,"seed":4,"stream":true}"#)?;
        ensure!(status == 200, "status {status}");
        ensure!(
            headers.iter().any(|(k, v)| k == "content-type" && v.starts_with("text/event-stream")),
            "not an event stream"
        );
        let streamed = check_sse(&body, 8)?;
        let (_, _, plain) = http(addr, "/v1/completions", r#"{"prompt":"wire check","max_tokens":8,"seed":4}"#)?;
        let v: serde_json::Value = serde_json::from_slice(&plain).map_err(err)?;
        ensure!(v["choices"][0]["text"] == streamed.as_str(), "streamed text differs from the non-streamed text");
        Ok(())
    })();
    rt.shutdown();
    drop(tokio);
    result?;
    Ok("4096-slot snapshot = 65536 bytes (16 per slot, read in one transfer); SSE events and [DONE] \
        terminator bit-exact; CSV header bit-exact"
        .into())
}

fn main() -> ExitCode {
    type Criterion = (usize, &'static str, fn() -> Outcome, Option<u64>);
    let criteria: [Criterion; 11] = [
        (1, "state-machine safety", c1_state_machine, Some(120)),
        (2, "exactly-once delivery", c2_exactly_once, Some(120)),
        (3, "launch-window law", c3_launch_window, None),
        (4, "admission conditions", c4_admission, None),
        (5, "policy equivalence", c5_policy_equivalence, None),
        (6, "makespan ratio", c6_makespan, Some(60)),
        (7, "interference retention", c7_interference, Some(300)),
        (8, "tokenizer", c8_tokenizer, None),
        (9, "metrics and fits", c9_metrics, None),
        (10, "kv allocator", c10_kv, None),
        (11, "wire formats", c11_wire, None),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run, budget) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        if let (Ok(_), Some(b)) = (&result, budget) {
            if secs > b as f64 {
                result = Err(format!("took {secs:.1}s, budget {b}s"));
            }
        }
        match result {
            Ok(detail) => println!("PASS [{n:>2}] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{n:>2}] {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

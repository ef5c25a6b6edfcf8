//! Wall-clock deployment: device loop, reader and submission threads plus
//! the HTTP server.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Clock;
use crate::config::SystemConfig;
use crate::engine::{Engine, EngineError};
use crate::frontend::http::{router, AppState, Submitter};
use crate::frontend::{Frontend, FrontendError, RequestRecord};
use crate::ring::{RingBuffer, RingError};
use crate::scheduler::{DeviceScheduler, SchedulerError};
use crate::tokenizer::{Tokenizer, TokenizerError};
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

pub struct Runtime {
    frontend: Arc<Frontend>,
    ring: Arc<RingBuffer>,
    tokenizer: Arc<Tokenizer>,
    submitter: Option<Submitter>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    errors: Arc<Mutex<Vec<String>>>,
    retain: Arc<AtomicBool>,
    finished: Arc<Mutex<Vec<RequestRecord>>>,
}

impl Runtime {
    /// Builds the system on the wall clock and starts its threads.
    pub fn start(cfg: &SystemConfig) -> Result<Self, RuntimeError> {
        let tokenizer = Arc::new(Tokenizer::from_config(&cfg.tokenizer)?);
        let mut engine_cfg = cfg.engine.clone();
        // Sample only ids the tokenizer can decode.
        engine_cfg.vocab_size = tokenizer.vocab_len() as u32;
        let ring = Arc::new(cfg.ring.build()?);
        let transport = Arc::new(Transport::new(cfg.transport.clone(), Clock::wall()));
        let clock = transport.clock().clone();
        let mut fe_cfg = cfg.frontend.clone();
        fe_cfg.eos_token = engine_cfg.eos_token;
        let frontend = Arc::new(Frontend::attach(fe_cfg, &ring, Arc::clone(&transport))?);
        let mut sched = DeviceScheduler::new(
            cfg.scheduler.clone(),
            Arc::clone(&ring),
            Engine::new(&engine_cfg)?,
            cfg.kv.clone(),
            cfg.host.clone(),
        )?;

        let stop = Arc::new(AtomicBool::new(false));
        let errors = Arc::new(Mutex::new(Vec::new()));
        let retain = Arc::new(AtomicBool::new(false));
        let finished = Arc::new(Mutex::new(Vec::new()));
        let mut threads = Vec::new();
        {
            let (stop, errors) = (Arc::clone(&stop), Arc::clone(&errors));
            threads.push(
                std::thread::Builder::new()
                    .name("device".into())
                    .spawn(move || {
                        if let Err(e) = sched.run_loop(&clock, &stop, None) {
                            tracing::error!("device loop stopped: {e}");
                            errors.lock().push(e.to_string());
                        }
                    })?,
            );
        }
        {
            let (stop, errors, fe) = (Arc::clone(&stop), Arc::clone(&errors), Arc::clone(&frontend));
            let (retain, finished) = (Arc::clone(&retain), Arc::clone(&finished));
            threads.push(std::thread::Builder::new().name("reader".into()).spawn(move || {
                while !stop.load(Ordering::Acquire) {
                    if fe.outstanding() == 0 {
                        std::thread::sleep(Duration::from_micros(fe.config().poll_us_min));
                        continue;
                    }
                    if let Err(e) = fe.reader_cycle() {
                        tracing::warn!("reader cycle failed: {e}");
                        errors.lock().push(e.to_string());
                    }
                    let done = fe.take_finished();
                    if retain.load(Ordering::Relaxed) {
                        finished.lock().extend(done);
                    }
                    std::thread::sleep(fe.poll_interval());
                }
            })?);
        }
        let (submitter, handle) = Submitter::spawn(
            Arc::clone(&frontend),
            Duration::from_micros(cfg.frontend.coalesce_us),
            Arc::clone(&stop),
        );
        threads.push(handle);
        Ok(Self {
            frontend,
            ring,
            tokenizer,
            submitter: Some(submitter),
            stop,
            threads,
            errors,
            retain,
            finished,
        })
    }

    pub fn frontend(&self) -> &Arc<Frontend> {
        &self.frontend
    }

    pub fn ring(&self) -> &Arc<RingBuffer> {
        &self.ring
    }

    pub fn tokenizer(&self) -> &Arc<Tokenizer> {
        &self.tokenizer
    }

    pub fn errors(&self) -> Vec<String> {
        self.errors.lock().clone()
    }

    /// Keep finished request records for [`Runtime::take_finished`]. Off by
    /// default so a long-running server does not accumulate them.
    pub fn retain_finished(&self, on: bool) {
        self.retain.store(on, Ordering::Relaxed);
    }

    pub fn take_finished(&self) -> Vec<RequestRecord> {
        std::mem::take(&mut *self.finished.lock())
    }

    pub fn app_state(&self, model: &str) -> AppState {
        AppState {
            frontend: Arc::clone(&self.frontend),
            tokenizer: Arc::clone(&self.tokenizer),
            submitter: self.submitter.clone().expect("runtime running"),
            model: model.to_string(),
        }
    }

    /// Stops every thread. Outstanding requests are abandoned.
    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Release);
        self.submitter = None;
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Serves the HTTP API on `listen` until ctrl-c.
pub async fn serve(cfg: &SystemConfig, listen: SocketAddr, model: &str) -> Result<(), RuntimeError> {
    let rt = Runtime::start(cfg)?;
    let app = router(rt.app_state(model));
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    drop(rt);
    Ok(())
}

//! Hardware-free emulation of a CPU-free LLM serving stack.
//!
//! A device-resident persistent scheduler and a frontend plane share a single
//! [`ring::RingBuffer`]; the frontend reaches it only through one-sided
//! transfers over [`transport::Transport`]. The [`harness`] module drives the
//! whole system on a virtual clock to produce latency/throughput reports.

pub mod clock;
pub mod config;
pub mod engine;
pub mod frontend;
pub mod harness;
pub mod ring;
pub mod runtime;
pub mod scheduler;
pub mod tokenizer;
pub mod transport;

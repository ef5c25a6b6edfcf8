//! Whole-system TOML configuration.
//!
//! Every section is optional; omitted keys take their defaults.
//!
//! ```toml
//! [ring]
//! capacity = 4096
//!
//! [scheduler]
//! mode = "device"
//! batch_capacity = 16
//!
//! [host.overhead_model]
//! kind = "uniform"
//! min_ms = 1.6
//! max_ms = 7.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::frontend::FrontendConfig;
use crate::harness::HarnessConfig;
use crate::ring::{RingBuffer, RingError};
use crate::scheduler::{HostConfig, KvConfig, SchedulerConfig};
use crate::tokenizer::TokenizerConfig;
use crate::transport::TransportConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RingConfig {
    /// Slot count; a power of two.
    pub capacity: usize,
    /// Input arena size in tokens, split evenly across slots.
    pub input_arena_tokens: usize,
    /// Output arena size in tokens, split evenly across slots.
    pub output_arena_tokens: usize,
    /// Record every state transition (costly; for tests and audits).
    pub audit: bool,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            capacity: 4096,
            input_arena_tokens: 1 << 24,
            output_arena_tokens: 1 << 24,
            audit: false,
        }
    }
}

impl RingConfig {
    pub fn build(&self) -> Result<RingBuffer, RingError> {
        let ring = RingBuffer::create(self.capacity, self.input_arena_tokens, self.output_arena_tokens)?;
        Ok(if self.audit { ring.with_audit() } else { ring })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub ring: RingConfig,
    pub transport: TransportConfig,
    pub scheduler: SchedulerConfig,
    pub kv: KvConfig,
    pub host: HostConfig,
    pub engine: EngineConfig,
    pub frontend: FrontendConfig,
    pub harness: HarnessConfig,
    pub tokenizer: TokenizerConfig,
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.ring.capacity.is_power_of_two() {
            return bad(format!("ring.capacity {} is not a power of two", self.ring.capacity));
        }
        if self.scheduler.batch_capacity == 0 {
            return bad("scheduler.batch_capacity must be > 0".into());
        }
        let f = &self.frontend;
        if f.poll_us_min == 0 || f.poll_us_min > f.poll_us_max {
            return bad(format!(
                "frontend poll bounds [{}, {}] are invalid",
                f.poll_us_min, f.poll_us_max
            ));
        }
        if self.harness.rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("harness.rates must be positive".into());
        }
        if self.harness.load_scale <= 0.0 {
            return bad("harness.load_scale must be > 0".into());
        }
        Ok(())
    }
}

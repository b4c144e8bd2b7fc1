//! Run manifest: reproducibility metadata written once per run, before any
//! result file is finalised.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionSummary {
    pub passed: bool,
    pub failing: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// FNV-1a 64 hash of the raw config bytes, hex encoded.
    pub config_hash: String,
    pub tool_version: String,
    pub subcommand: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seed: u64,
    /// "config" or "env" (LSA_INFER_SEED).
    pub seed_source: String,
    pub workers: usize,
    pub assumptions: Option<AssumptionSummary>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config_bytes: &[u8],
        subcommand: &str,
        started_unix: u64,
        seed: u64,
        seed_from_env: bool,
        workers: usize,
        assumptions: Option<AssumptionSummary>,
    ) -> Self {
        Self {
            config_hash: format!("{:016x}", fnv1a64(config_bytes)),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            started_unix,
            finished_unix: unix_now(),
            seed,
            seed_source: if seed_from_env { "env" } else { "config" }.to_string(),
            workers,
            assumptions,
        }
    }
}

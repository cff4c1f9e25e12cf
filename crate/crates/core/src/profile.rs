//! Platform profiles: measured latencies and memory parameters of a target SoC.
//!
//! The three built-ins carry the measured keystream/DRAM latencies of the
//! evaluated platforms as constants. SRAM sizes are decimal megabytes.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::crypto::AES_BLOCK_BYTES;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile field `{field}` must be strictly positive (got {value})")]
    NonPositive { field: &'static str, value: f64 },
    #[error("unknown profile `{0}` (expected i9, xavier, orin or a .json path)")]
    Unknown(String),
    #[error("reading profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing profile {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn default_t_save() -> f64 {
    1500.0
}
fn default_ice_clock() -> f64 {
    1.4e9
}
fn default_t_addr_cycles() -> f64 {
    1.0
}
fn default_t_xor_cycles() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    /// Keystream latency for one 64-byte line, ns.
    pub t_ks_ns: f64,
    /// DRAM access latency, ns.
    pub t_dram_ns: f64,
    pub memory_type: String,
    /// Memory bandwidth ceiling, bytes/s.
    pub bw_ceiling: f64,
    /// Plaintext NPU SRAM size, bytes.
    pub sram_size: u64,
    /// SRAM scrub bandwidth, bytes/s.
    pub sram_bw: f64,
    #[serde(default = "default_t_save")]
    pub t_save_ns: f64,
    /// ICE core clock. One AES block per cycle when fully pipelined.
    #[serde(default = "default_ice_clock")]
    pub ice_clock_hz: f64,
    #[serde(default = "default_t_addr_cycles")]
    pub t_addr_cycles: f64,
    #[serde(default = "default_t_xor_cycles")]
    pub t_xor_cycles: f64,
}

impl PlatformProfile {
    pub fn i9_12900h() -> Self {
        Self {
            name: "i9-12900H".into(),
            t_ks_ns: 4.2,
            t_dram_ns: 71.6,
            memory_type: "DDR5-4800".into(),
            bw_ceiling: 22.4e9,
            sram_size: 2_000_000,
            sram_bw: 512e9,
            t_save_ns: default_t_save(),
            ice_clock_hz: default_ice_clock(),
            t_addr_cycles: default_t_addr_cycles(),
            t_xor_cycles: default_t_xor_cycles(),
        }
    }

    pub fn xavier() -> Self {
        Self {
            name: "Jetson AGX Xavier".into(),
            t_ks_ns: 16.8,
            t_dram_ns: 43.2,
            memory_type: "LPDDR4x".into(),
            bw_ceiling: 136.5e9,
            sram_size: 4_000_000,
            sram_bw: 480e9,
            ..Self::i9_12900h()
        }
    }

    pub fn orin() -> Self {
        Self {
            name: "Jetson AGX Orin".into(),
            t_ks_ns: 12.1,
            t_dram_ns: 38.7,
            memory_type: "LPDDR5X".into(),
            bw_ceiling: 204.8e9,
            sram_size: 4_000_000,
            sram_bw: 960e9,
            ..Self::i9_12900h()
        }
    }

    pub fn builtins() -> [(&'static str, PlatformProfile); 3] {
        [
            ("i9", Self::i9_12900h()),
            ("xavier", Self::xavier()),
            ("orin", Self::orin()),
        ]
    }

    /// Resolve a built-in short name (`i9`, `xavier`, `orin`) or a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        if let Some((_, p)) = Self::builtins()
            .into_iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name_or_path))
        {
            return Ok(p);
        }
        if name_or_path.ends_with(".json") || Path::new(name_or_path).exists() {
            return Self::from_json_file(Path::new(name_or_path));
        }
        Err(ProfileError::Unknown(name_or_path.to_string()))
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ProfileError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: display.clone(),
            source,
        })?;
        let profile: Self =
            serde_json::from_str(&text).map_err(|source| ProfileError::Parse { path: display, source })?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let fields = [
            ("t_ks_ns", self.t_ks_ns),
            ("t_dram_ns", self.t_dram_ns),
            ("bw_ceiling", self.bw_ceiling),
            ("sram_size", self.sram_size as f64),
            ("sram_bw", self.sram_bw),
            ("t_save_ns", self.t_save_ns),
            ("ice_clock_hz", self.ice_clock_hz),
            ("t_addr_cycles", self.t_addr_cycles),
            ("t_xor_cycles", self.t_xor_cycles),
        ];
        for (field, value) in fields {
            // NaN fails this too.
            if !value.is_finite() || value <= 0.0 {
                return Err(ProfileError::NonPositive { field, value });
            }
        }
        Ok(())
    }

    /// `T_DRAM - T_ks`; positive means the keystream hides under the fetch.
    pub fn slack_ns(&self) -> f64 {
        self.t_dram_ns - self.t_ks_ns
    }

    pub fn cycle_ns(&self) -> f64 {
        1e9 / self.ice_clock_hz
    }

    pub fn t_addr_ns(&self) -> f64 {
        self.t_addr_cycles * self.cycle_ns()
    }

    pub fn t_xor_ns(&self) -> f64 {
        self.t_xor_cycles * self.cycle_ns()
    }

    /// Throughput of a single fully pipelined ICE core, bytes/s.
    pub fn ice_throughput(&self) -> f64 {
        self.ice_clock_hz * AES_BLOCK_BYTES as f64
    }

    /// Rate at which lines stream through the ICE, bytes/s: the memory
    /// ceiling, capped by what one ICE core can encrypt.
    pub fn line_service_rate(&self) -> f64 {
        self.bw_ceiling.min(self.ice_throughput())
    }
}

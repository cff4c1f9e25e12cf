//! Closed-form performance, energy and area models, plus table emission.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::crypto::{AES_BLOCK_BYTES, LINE_BYTES};
use crate::pipeline::littles_law_bytes;
use crate::preempt::profile_preempt_latency;
use crate::profile::PlatformProfile;

pub const PAGE_BYTES: u64 = 4096;
pub const BURST_BEATS: f64 = 128.0;
pub const XOR_PENALTY_CYCLES: f64 = 2.0;

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("tile size must be positive")]
    ZeroTile,
    #[error("tile schedule entry `{0}` needs tile_bytes >= 1 and count >= 1")]
    BadScheduleEntry(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// 4 KiB page-granular protection.
    Page,
    /// 64-byte line-granular protection.
    Tessera,
}

/// Bytes fetched per byte used for a `tile_bytes` tile.
///
/// Page granularity is `ceil(4096 / t)` up to one page; larger tiles round
/// up to whole pages, `ceil(t / 4096) * 4096 / t`.
pub fn amplification(tile_bytes: u64, granularity: Granularity) -> Result<f64, PerfError> {
    if tile_bytes == 0 {
        return Err(PerfError::ZeroTile);
    }
    Ok(match granularity {
        Granularity::Page if tile_bytes <= PAGE_BYTES => PAGE_BYTES.div_ceil(tile_bytes) as f64,
        Granularity::Page => (tile_bytes.div_ceil(PAGE_BYTES) * PAGE_BYTES) as f64 / tile_bytes as f64,
        Granularity::Tessera => {
            let line = LINE_BYTES as u64;
            (tile_bytes.div_ceil(line) * line) as f64 / tile_bytes as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileClass {
    pub layer: String,
    pub tile_bytes: u64,
}

/// Representative tile sizes per layer type.
pub fn tile_classes() -> Vec<TileClass> {
    [
        ("BatchNorm", 128),
        ("DW-Conv", 288),
        ("PW-narrow", 512),
        ("Conv-mid", 1024),
        ("PW-wide", 2048),
        ("Conv/Attn/FC", 4096),
    ]
    .into_iter()
    .map(|(layer, tile_bytes)| TileClass {
        layer: layer.into(),
        tile_bytes,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileScheduleEntry {
    pub name: String,
    pub tile_bytes: u64,
    pub count: u64,
}

pub fn load_tile_schedule(path: &Path) -> Result<Vec<TileScheduleEntry>, PerfError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| PerfError::Io {
        path: p.clone(),
        source,
    })?;
    let entries: Vec<TileScheduleEntry> =
        serde_json::from_str(&text).map_err(|source| PerfError::Json { path: p, source })?;
    for e in &entries {
        if e.tile_bytes == 0 || e.count == 0 {
            return Err(PerfError::BadScheduleEntry(e.name.clone()));
        }
    }
    Ok(entries)
}

/// Aggregate amplification of a whole schedule: total fetched over total used.
pub fn schedule_amplification(entries: &[TileScheduleEntry], granularity: Granularity) -> Result<f64, PerfError> {
    let mut used = 0.0;
    let mut fetched = 0.0;
    for e in entries {
        let bytes = (e.tile_bytes * e.count) as f64;
        used += bytes;
        fetched += bytes * amplification(e.tile_bytes, granularity)?;
    }
    if used == 0.0 {
        return Err(PerfError::ZeroTile);
    }
    Ok(fetched / used)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthMode {
    /// Unencrypted line-granular fetch.
    Baseline,
    /// Block decryption serialized after each fetch.
    Direct,
    /// Overlapped keystream with a two-cycle XOR per burst.
    Tessera,
    /// Page-granular protection; cost is pure amplification.
    Page,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveBandwidth {
    /// Fraction of the memory ceiling.
    pub fraction: f64,
    pub bytes_per_s: f64,
}

/// Crypto overhead factor alone, before amplification.
pub fn crypto_factor(profile: &PlatformProfile, mode: BandwidthMode) -> f64 {
    match mode {
        BandwidthMode::Baseline | BandwidthMode::Page => 1.0,
        BandwidthMode::Direct => profile.t_dram_ns / (profile.t_dram_ns + profile.t_ks_ns),
        BandwidthMode::Tessera => BURST_BEATS / (BURST_BEATS + XOR_PENALTY_CYCLES),
    }
}

pub fn effective_bandwidth(
    profile: &PlatformProfile,
    mode: BandwidthMode,
    tile_bytes: u64,
) -> Result<EffectiveBandwidth, PerfError> {
    let granularity = match mode {
        BandwidthMode::Page => Granularity::Page,
        _ => Granularity::Tessera,
    };
    let fraction = crypto_factor(profile, mode) / amplification(tile_bytes, granularity)?;
    Ok(EffectiveBandwidth {
        fraction,
        bytes_per_s: fraction * profile.bw_ceiling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub dram_pj_per_byte: f64,
    pub ice_power_w: f64,
    pub model_bytes: f64,
    /// Bytes/s at which the model streams through the ICE.
    pub load_bw: f64,
}

impl Default for EnergyParams {
    /// ResNet-18 (46.8 MB) loaded at 22.1 GB/s.
    fn default() -> Self {
        Self {
            dram_pj_per_byte: 120.0,
            ice_power_w: 0.090,
            model_bytes: 46.8e6,
            load_bw: 22.1e9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub amplification: f64,
    pub dram_mj: f64,
    pub ice_mj: f64,
    pub total_mj: f64,
}

pub fn inference_energy(params: &EnergyParams, amplification: f64) -> EnergyReport {
    let dram_mj = params.model_bytes * amplification * params.dram_pj_per_byte * 1e-9;
    let ice_mj = params.ice_power_w * (params.model_bytes / params.load_bw) * 1e3;
    EnergyReport {
        amplification,
        dram_mj,
        ice_mj,
        total_mj: dram_mj + ice_mj,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpaParams {
    pub gate_equivalents: f64,
    pub um2_per_ge: f64,
    pub pj_per_bit: f64,
}

impl Default for PpaParams {
    fn default() -> Self {
        Self {
            gate_equivalents: 100_000.0,
            um2_per_ge: 0.4,
            pj_per_bit: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PpaReport {
    pub area_mm2: f64,
    pub power_w: f64,
    pub aes_blocks_per_s: f64,
}

/// Area, power and block rate at `throughput` bytes/s.
pub fn ppa(params: &PpaParams, throughput: f64) -> PpaReport {
    PpaReport {
        area_mm2: params.gate_equivalents * params.um2_per_ge * 1e-6,
        power_w: throughput * 8.0 * params.pj_per_bit * 1e-12,
        aes_blocks_per_s: throughput / AES_BLOCK_BYTES as f64,
    }
}

/// Round to one decimal, halves away from zero.
pub fn round_half_up_1dp(x: f64) -> f64 {
    // The nudge keeps values like 98.45 (stored as 98.4499...) on the upper side.
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

/// Truncate toward zero at one decimal; the energy figures are quoted this way.
pub fn truncate_1dp(x: f64) -> f64 {
    ((x * 10.0) + 1e-9).trunc() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreemptRow {
    pub profile: String,
    pub sram_bytes: u64,
    pub sram_bw_gbps: f64,
    pub t_save_us: f64,
    pub t_preempt_us: f64,
    pub t_preempt_us_rounded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub profile: String,
    pub t_ks_ns: f64,
    pub t_dram_ns: f64,
    pub slack_ns: f64,
    pub direct_fraction: f64,
    pub tessera_fraction: f64,
    pub direct_pct: f64,
    pub tessera_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmplificationRow {
    pub layer: String,
    pub tile_bytes: u64,
    pub page_amplification: f64,
    pub tessera_amplification: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub scheme: String,
    pub amplification: f64,
    pub dram_mj: f64,
    pub ice_mj: f64,
    pub total_mj: f64,
    pub dram_mj_display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpaRow {
    pub area_mm2: f64,
    pub power_mw: f64,
    pub aes_blocks_per_s: f64,
    pub fifo_high_water_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelTables {
    pub preemption: Vec<PreemptRow>,
    pub throughput: Vec<ThroughputRow>,
    pub amplification: Vec<AmplificationRow>,
    pub energy: Vec<EnergyRow>,
    pub ppa: Vec<PpaRow>,
}

/// Worst-case line latency used to size the keystream FIFO, ns.
pub const FIFO_SIZING_LATENCY_NS: f64 = 100.0;

/// Page amplification of the page-granular energy comparison.
pub const PAGE_ENERGY_AMPLIFICATION: f64 = 5.0;

pub fn throughput_row(p: &PlatformProfile) -> ThroughputRow {
    let direct = crypto_factor(p, BandwidthMode::Direct);
    let tessera = crypto_factor(p, BandwidthMode::Tessera);
    ThroughputRow {
        profile: p.name.clone(),
        t_ks_ns: p.t_ks_ns,
        t_dram_ns: p.t_dram_ns,
        slack_ns: p.slack_ns(),
        direct_fraction: direct,
        tessera_fraction: tessera,
        direct_pct: round_half_up_1dp(direct * 100.0),
        tessera_pct: round_half_up_1dp(tessera * 100.0),
    }
}

/// Every table for the given profiles. The energy and area rows use the
/// first profile as the reference platform.
pub fn model_tables(profiles: &[PlatformProfile]) -> Result<ModelTables, PerfError> {
    let preemption = profiles
        .iter()
        .map(|p| {
            let us = profile_preempt_latency(p) / 1000.0;
            PreemptRow {
                profile: p.name.clone(),
                sram_bytes: p.sram_size,
                sram_bw_gbps: p.sram_bw / 1e9,
                t_save_us: p.t_save_ns / 1000.0,
                t_preempt_us: us,
                t_preempt_us_rounded: round_half_up_1dp(us),
            }
        })
        .collect();
    let throughput = profiles.iter().map(throughput_row).collect();
    let amplification = tile_classes()
        .into_iter()
        .map(|c| {
            Ok(AmplificationRow {
                page_amplification: amplification(c.tile_bytes, Granularity::Page)?,
                tessera_amplification: amplification(c.tile_bytes, Granularity::Tessera)?,
                layer: c.layer,
                tile_bytes: c.tile_bytes,
            })
        })
        .collect::<Result<_, PerfError>>()?;

    let params = EnergyParams::default();
    let energy = [("page", PAGE_ENERGY_AMPLIFICATION), ("tessera", 1.0)]
        .into_iter()
        .map(|(scheme, a)| {
            let mut e = inference_energy(&params, a);
            if scheme == "page" {
                // No inline engine on the page-granular path.
                e.ice_mj = 0.0;
                e.total_mj = e.dram_mj;
            }
            EnergyRow {
                scheme: scheme.into(),
                amplification: a,
                dram_mj: e.dram_mj,
                ice_mj: e.ice_mj,
                total_mj: e.total_mj,
                dram_mj_display: format!("{:.1}", truncate_1dp(e.dram_mj)),
            }
        })
        .collect();

    let reference = profiles.first().cloned().unwrap_or_else(PlatformProfile::i9_12900h);
    let r = ppa(&PpaParams::default(), reference.ice_throughput());
    let ppa_rows = vec![PpaRow {
        area_mm2: r.area_mm2,
        power_mw: r.power_w * 1e3,
        aes_blocks_per_s: r.aes_blocks_per_s,
        fifo_high_water_bytes: littles_law_bytes(reference.bw_ceiling, FIFO_SIZING_LATENCY_NS),
    }];

    Ok(ModelTables {
        preemption,
        throughput,
        amplification,
        energy,
        ppa: ppa_rows,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PerfError> {
    let err = |source| PerfError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| PerfError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PerfError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PerfError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|source| PerfError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write `preemption`, `throughput`, `amplification`, `energy` and `ppa` as CSV with JSON
/// mirrors into `dir`. Returns the paths written.
pub fn emit_tables(dir: &Path, profiles: &[PlatformProfile]) -> Result<Vec<PathBuf>, PerfError> {
    std::fs::create_dir_all(dir).map_err(|source| PerfError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let t = model_tables(profiles)?;
    let mut written = Vec::new();
    macro_rules! emit {
        ($stem:literal, $rows:expr) => {{
            let csv_path = dir.join(concat!($stem, ".csv"));
            let json_path = dir.join(concat!($stem, ".json"));
            write_csv(&csv_path, $rows)?;
            write_json(&json_path, $rows)?;
            written.push(csv_path);
            written.push(json_path);
        }};
    }
    emit!("preemption", &t.preemption);
    emit!("throughput", &t.throughput);
    emit!("amplification", &t.amplification);
    emit!("energy", &t.energy);
    emit!("ppa", &t.ppa);
    Ok(written)
}

//! Functional model of the unified-memory fabric.
//!
//! One DRAM array shared by every initiator, a block of NPU SRAM, and an
//! SMMU that filters transactions by stream ID. Permission checks happen per
//! 64-byte line. Any range named by a policy entry is protected: only
//! streams holding a matching entry may touch it. Addresses outside DRAM and
//! SRAM decode to nothing (`DECERR`); protected lines refused to a stream
//! answer `SLVERR`.
//!
//! There is no timing here. The scrub engine reports how long it would take,
//! but the fabric itself is untimed.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::crypto::LINE_BYTES;
use crate::profile::PlatformProfile;

const LINE: u64 = LINE_BYTES as u64;

pub const DEFAULT_DRAM_BASE: u64 = 0x8000_0000;
pub const DEFAULT_SRAM_BASE: u64 = 0x1000_0000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("zero-length bus transaction")]
    ZeroLength,
    #[error("transaction {addr:#x}+{len} straddles a permission boundary")]
    Misaligned { addr: u64, len: u64 },
    #[error("SMMU configuration denied to normal-world caller")]
    NormalWorldDenied,
    #[error("SMMU configuration is locked")]
    AlreadyLocked,
    #[error("invalid SMMU policy: {0}")]
    InvalidPolicy(String),
    #[error("duplicate stream id {0}")]
    DuplicateStream(u16),
    #[error("invalid fabric layout: {0}")]
    InvalidLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamRole {
    Cpu,
    NpuDma,
    RoguePeripheral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub id: u16,
    pub role: StreamRole,
}

impl StreamId {
    pub const CPU: StreamId = StreamId {
        id: 0,
        role: StreamRole::Cpu,
    };
    pub const NPU_DMA: StreamId = StreamId {
        id: 1,
        role: StreamRole::NpuDma,
    };
    pub const ROGUE: StreamId = StreamId {
        id: 2,
        role: StreamRole::RoguePeripheral,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrRange {
    pub start: u64,
    pub len: u64,
}

impl AddrRange {
    pub fn new(start: u64, len: u64) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr < self.end()
    }

    pub fn overlaps(&self, other: &AddrRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub read: bool,
    pub write: bool,
}

impl Access {
    pub const RW: Access = Access {
        read: true,
        write: true,
    };
    pub const RO: Access = Access {
        read: true,
        write: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub stream: u16,
    pub range: AddrRange,
    pub access: Access,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmmuPolicy {
    pub entries: Vec<PolicyEntry>,
    pub locked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BusStatus {
    #[serde(rename = "OKAY")]
    Okay,
    #[serde(rename = "SLVERR")]
    SlvErr,
    #[serde(rename = "DECERR")]
    DecErr,
}

impl fmt::Display for BusStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusStatus::Okay => "OKAY",
            BusStatus::SlvErr => "SLVERR",
            BusStatus::DecErr => "DECERR",
        })
    }
}

/// AXI-style response. Error responses carry no data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BusResponse {
    Okay(Vec<u8>),
    SlvErr,
    DecErr,
}

impl BusResponse {
    pub fn status(&self) -> BusStatus {
        match self {
            BusResponse::Okay(_) => BusStatus::Okay,
            BusResponse::SlvErr => BusStatus::SlvErr,
            BusResponse::DecErr => BusStatus::DecErr,
        }
    }

    pub fn is_okay(&self) -> bool {
        matches!(self, BusResponse::Okay(_))
    }

    pub fn data(&self) -> Option<&[u8]> {
        match self {
            BusResponse::Okay(d) => Some(d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FabricLayout {
    pub dram_base: u64,
    pub dram_size: u64,
    pub sram_base: u64,
    pub sram_size: u64,
    /// Scrub engine bandwidth, bytes/s.
    pub sram_bw: f64,
}

impl FabricLayout {
    pub fn for_profile(profile: &PlatformProfile, dram_size: u64) -> Self {
        Self {
            dram_base: DEFAULT_DRAM_BASE,
            dram_size,
            sram_base: DEFAULT_SRAM_BASE,
            sram_size: profile.sram_size,
            sram_bw: profile.sram_bw,
        }
    }

    pub fn dram_range(&self) -> AddrRange {
        AddrRange::new(self.dram_base, self.dram_size)
    }

    pub fn sram_range(&self) -> AddrRange {
        AddrRange::new(self.sram_base, self.sram_size)
    }
}

/// DRAM contents as laid out by a loader: the bytes placed at `base_addr`,
/// `logical_len` of which are meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DramImage {
    pub base_addr: u64,
    pub contents: Vec<u8>,
    pub logical_len: u64,
}

impl DramImage {
    pub fn range(&self) -> AddrRange {
        AddrRange::new(self.base_addr, self.contents.len() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Dram,
    Sram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Read,
    Write,
}

pub struct Fabric {
    layout: FabricLayout,
    dram: Vec<u8>,
    sram: Vec<u8>,
    streams: Vec<StreamId>,
    policy: SmmuPolicy,
    /// Restricted tag on plaintext SRAM. When set, only the tag owner passes
    /// the second gate regardless of SMMU entries.
    tag_owner: Option<u16>,
}

impl fmt::Debug for Fabric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fabric")
            .field("layout", &self.layout)
            .field("streams", &self.streams)
            .field("policy", &self.policy)
            .field("tag_owner", &self.tag_owner)
            .finish_non_exhaustive()
    }
}

impl Fabric {
    /// A fabric with the CPU, NPU-DMA and rogue-peripheral streams attached
    /// and no SMMU policy installed.
    pub fn new(layout: FabricLayout) -> Result<Self, FabricError> {
        let aligned = |v: u64| v % LINE == 0;
        if !(aligned(layout.dram_base)
            && aligned(layout.dram_size)
            && aligned(layout.sram_base)
            && aligned(layout.sram_size))
        {
            return Err(FabricError::InvalidLayout("regions must be line-aligned".into()));
        }
        if layout.dram_size == 0 || layout.sram_size == 0 {
            return Err(FabricError::InvalidLayout("regions must be non-empty".into()));
        }
        if layout.dram_range().overlaps(&layout.sram_range()) {
            return Err(FabricError::InvalidLayout("DRAM and SRAM overlap".into()));
        }
        if layout.sram_bw.is_nan() || layout.sram_bw <= 0.0 {
            return Err(FabricError::InvalidLayout("scrub bandwidth must be positive".into()));
        }
        Ok(Self {
            layout,
            dram: vec![0; layout.dram_size as usize],
            sram: vec![0; layout.sram_size as usize],
            streams: vec![StreamId::CPU, StreamId::NPU_DMA, StreamId::ROGUE],
            policy: SmmuPolicy::default(),
            tag_owner: None,
        })
    }

    pub fn layout(&self) -> &FabricLayout {
        &self.layout
    }

    pub fn streams(&self) -> &[StreamId] {
        &self.streams
    }

    pub fn attach_stream(&mut self, stream: StreamId) -> Result<(), FabricError> {
        if self.streams.iter().any(|s| s.id == stream.id) {
            return Err(FabricError::DuplicateStream(stream.id));
        }
        self.streams.push(stream);
        Ok(())
    }

    pub fn policy(&self) -> &SmmuPolicy {
        &self.policy
    }

    /// The policy real firmware would install: SRAM read/write for the NPU
    /// DMA stream only, locked.
    pub fn npu_only_policy(&self) -> SmmuPolicy {
        SmmuPolicy {
            entries: vec![PolicyEntry {
                stream: StreamId::NPU_DMA.id,
                range: self.layout.sram_range(),
                access: Access::RW,
            }],
            locked: true,
        }
    }

    fn validate_policy(&self, policy: &SmmuPolicy) -> Result<(), FabricError> {
        let sram = self.layout.sram_range();
        let mut sram_owner = None;
        for e in &policy.entries {
            if e.range.len == 0 || e.range.start % LINE != 0 || e.range.len % LINE != 0 {
                return Err(FabricError::InvalidPolicy(format!(
                    "range {:#x}+{} is not line-aligned and non-empty",
                    e.range.start, e.range.len
                )));
            }
            if !self.streams.iter().any(|s| s.id == e.stream) {
                return Err(FabricError::InvalidPolicy(format!("unknown stream {}", e.stream)));
            }
            if e.range.overlaps(&sram) {
                match sram_owner {
                    None => sram_owner = Some(e.stream),
                    Some(owner) if owner != e.stream => {
                        return Err(FabricError::InvalidPolicy(format!(
                            "protected SRAM mapped to streams {owner} and {}",
                            e.stream
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Install `policy`. Only the secure world may configure, and only until
    /// a policy with `locked = true` has been installed.
    pub fn configure_smmu(&mut self, caller_is_secure_world: bool, policy: SmmuPolicy) -> Result<(), FabricError> {
        if !caller_is_secure_world {
            return Err(FabricError::NormalWorldDenied);
        }
        if self.policy.locked {
            return Err(FabricError::AlreadyLocked);
        }
        self.validate_policy(&policy)?;
        self.policy = policy;
        Ok(())
    }

    pub fn lock_smmu(&mut self, caller_is_secure_world: bool) -> Result<(), FabricError> {
        if !caller_is_secure_world {
            return Err(FabricError::NormalWorldDenied);
        }
        self.policy.locked = true;
        Ok(())
    }

    /// Enable the restricted-tag gate on SRAM for `owner`.
    pub fn set_sram_tag(&mut self, owner: Option<u16>) {
        self.tag_owner = owner;
    }

    pub fn sram_tag(&self) -> Option<u16> {
        self.tag_owner
    }

    fn region_of(&self, addr: u64) -> Option<Region> {
        if self.layout.dram_range().contains(addr) {
            Some(Region::Dram)
        } else if self.layout.sram_range().contains(addr) {
            Some(Region::Sram)
        } else {
            None
        }
    }

    fn line_verdict(&self, stream: u16, line_addr: u64, op: Op) -> (Option<Region>, BusStatus) {
        let Some(region) = self.region_of(line_addr) else {
            return (None, BusStatus::DecErr);
        };
        let covering = self.policy.entries.iter().filter(|e| e.range.contains(line_addr));
        let mut protected = false;
        let mut permitted = false;
        for e in covering {
            protected = true;
            if e.stream == stream
                && (match op {
                    Op::Read => e.access.read,
                    Op::Write => e.access.write,
                })
            {
                permitted = true;
            }
        }
        if protected && !permitted {
            return (Some(region), BusStatus::SlvErr);
        }
        if region == Region::Sram {
            if let Some(owner) = self.tag_owner {
                if owner != stream {
                    return (Some(region), BusStatus::SlvErr);
                }
            }
        }
        (Some(region), BusStatus::Okay)
    }

    fn check(
        &self,
        initiator: StreamId,
        addr: u64,
        len: u64,
        op: Op,
    ) -> Result<(BusStatus, Option<Region>), FabricError> {
        if len == 0 {
            return Err(FabricError::ZeroLength);
        }
        let end = addr.checked_add(len).ok_or(FabricError::Misaligned { addr, len })?;
        let first = addr - addr % LINE;
        let mut verdict = None;
        let mut line = first;
        while line < end {
            let v = self.line_verdict(initiator.id, line, op);
            match verdict {
                None => verdict = Some(v),
                Some(prev) if prev != v => return Err(FabricError::Misaligned { addr, len }),
                _ => {}
            }
            line += LINE;
        }
        let (region, status) = verdict.expect("len > 0 visits at least one line");
        Ok((status, region))
    }

    fn backing(&mut self, region: Region) -> (&mut Vec<u8>, u64) {
        match region {
            Region::Dram => (&mut self.dram, self.layout.dram_base),
            Region::Sram => (&mut self.sram, self.layout.sram_base),
        }
    }

    pub fn bus_read(&mut self, initiator: StreamId, addr: u64, len: u64) -> Result<BusResponse, FabricError> {
        let (status, region) = self.check(initiator, addr, len, Op::Read)?;
        Ok(match status {
            BusStatus::Okay => {
                let (mem, base) = self.backing(region.expect("decoded"));
                let off = (addr - base) as usize;
                BusResponse::Okay(mem[off..off + len as usize].to_vec())
            }
            BusStatus::SlvErr => BusResponse::SlvErr,
            BusStatus::DecErr => BusResponse::DecErr,
        })
    }

    pub fn bus_write(&mut self, initiator: StreamId, addr: u64, bytes: &[u8]) -> Result<BusResponse, FabricError> {
        let (status, region) = self.check(initiator, addr, bytes.len() as u64, Op::Write)?;
        Ok(match status {
            BusStatus::Okay => {
                let (mem, base) = self.backing(region.expect("decoded"));
                let off = (addr - base) as usize;
                mem[off..off + bytes.len()].copy_from_slice(bytes);
                BusResponse::Okay(Vec::new())
            }
            BusStatus::SlvErr => BusResponse::SlvErr,
            BusStatus::DecErr => BusResponse::DecErr,
        })
    }

    /// Hardware scrub engine: zero all of SRAM. Reachable only through this
    /// privileged entry point, never through a bus transaction. Returns the
    /// time the engine needs, `size / bandwidth`, in ns.
    pub fn scrub_sram(&mut self) -> f64 {
        self.sram.fill(0);
        scrub_duration_ns(self.layout.sram_size, self.layout.sram_bw)
    }

    /// Physical DRAM contents as a cold-boot or interposer attacker sees
    /// them. Bypasses the SMMU.
    pub fn dram_dump(&self) -> &[u8] {
        &self.dram
    }

    /// Die-internal SRAM view for inspection; not an initiator path.
    pub fn sram_contents(&self) -> &[u8] {
        &self.sram
    }

    /// Place an image into DRAM as the host loader does: CPU-stream writes.
    pub fn load_dram_image(&mut self, image: &DramImage) -> Result<BusResponse, FabricError> {
        self.bus_write(StreamId::CPU, image.base_addr, &image.contents)
    }

    /// Write the DRAM+SRAM snapshot as `<stem>.bin` plus a `<stem>.json`
    /// sidecar describing where each region lives in the flat file.
    pub fn write_snapshot(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        let mut flat = Vec::with_capacity(self.dram.len() + self.sram.len());
        flat.extend_from_slice(&self.dram);
        flat.extend_from_slice(&self.sram);
        std::fs::write(dir.join(format!("{stem}.bin")), &flat)?;
        let sidecar = SnapshotSidecar {
            regions: vec![
                SnapshotRegion {
                    name: "dram".into(),
                    base: self.layout.dram_base,
                    len: self.layout.dram_size,
                    file_offset: 0,
                },
                SnapshotRegion {
                    name: "sram".into(),
                    base: self.layout.sram_base,
                    len: self.layout.sram_size,
                    file_offset: self.layout.dram_size,
                },
            ],
            streams: self.streams.clone(),
            policy: self.policy.clone(),
            sram_tag_owner: self.tag_owner,
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(format!("{stem}.json")), json)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRegion {
    pub name: String,
    pub base: u64,
    pub len: u64,
    pub file_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub regions: Vec<SnapshotRegion>,
    pub streams: Vec<StreamId>,
    pub policy: SmmuPolicy,
    pub sram_tag_owner: Option<u16>,
}

pub fn scrub_duration_ns(size_bytes: u64, bw_bytes_per_s: f64) -> f64 {
    size_bytes as f64 / bw_bytes_per_s * 1e9
}

//! Attack scenarios with machine-checkable verdicts.
//!
//! Every scenario runs twice: once against the defended system and once
//! against a negative control with the relevant defence removed. A harness
//! that reported `defended` for both arms would be vacuous, so the controls
//! are part of the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::crypto::{xor_line, CryptoError, LineCipher, NonceBase, SessionKey, LINE_BYTES};
use crate::fabric::{
    AddrRange, BusResponse, BusStatus, Fabric, FabricError, FabricLayout, StreamId, DEFAULT_DRAM_BASE,
    DEFAULT_SRAM_BASE,
};
use crate::ice::IceRegisters;
use crate::image::{pack, ImageError, PackOptions, WeightImage};
use crate::keys::{generate_device_identity, AppIdentity, DevicePublicKey, Enclave, KeyBlob, KeyError};
use crate::pipeline::{stream_decrypt, IceDatapath, LineOutcome, PipelineError};
use crate::preempt::{InferenceContext, PreemptError};
use crate::profile::PlatformProfile;

const LINE: u64 = LINE_BYTES as u64;
type Line = [u8; LINE_BYTES];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("image has no all-zero line to cancel against")]
    NoZeroLine,
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Preempt(#[from] PreemptError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Defended,
    Control,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Evidence {
    pub attempts: u64,
    pub aborted: u64,
    pub lines_examined: u64,
    pub lines_recovered: u64,
    pub recovered_fraction: f64,
    /// Bus responses by status.
    pub responses: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canary_found: Option<bool>,
    pub note: String,
}

impl Evidence {
    fn tally(&mut self, status: BusStatus) {
        *self.responses.entry(status.to_string()).or_default() += 1;
    }

    fn set_fraction(&mut self) {
        self.recovered_fraction = if self.lines_examined == 0 {
            0.0
        } else {
            self.lines_recovered as f64 / self.lines_examined as f64
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackVerdict {
    pub scenario: String,
    pub variant: Variant,
    pub expect_defended: bool,
    pub defended: bool,
    pub evidence: Evidence,
}

impl AttackVerdict {
    fn new(scenario: Scenario, variant: Variant, defended: bool, evidence: Evidence) -> Self {
        Self {
            scenario: scenario.to_string(),
            variant,
            expect_defended: variant == Variant::Defended,
            defended,
            evidence,
        }
    }

    /// The verdict matches what the variant should produce.
    pub fn as_expected(&self) -> bool {
        self.defended == self.expect_defended
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    ColdBoot,
    RogueDma,
    PreemptHijack,
    ConfusedDeputy,
    AliasReplay,
    FixedCounterLeak,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::ColdBoot,
        Scenario::RogueDma,
        Scenario::PreemptHijack,
        Scenario::ConfusedDeputy,
        Scenario::AliasReplay,
        Scenario::FixedCounterLeak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ColdBoot => "cold_boot",
            Scenario::RogueDma => "rogue_dma",
            Scenario::PreemptHijack => "preempt_hijack",
            Scenario::ConfusedDeputy => "confused_deputy",
            Scenario::AliasReplay => "alias_replay",
            Scenario::FixedCounterLeak => "fixed_counter_leak",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s || sc.name().replace('_', "-") == s)
            .ok_or_else(|| AttackError::UnknownScenario(s.to_string()))
    }
}

fn to_line(bytes: &[u8]) -> Line {
    let mut l = [0u8; LINE_BYTES];
    l[..bytes.len()].copy_from_slice(bytes);
    l
}

fn lines_of(bytes: &[u8]) -> Vec<Line> {
    bytes.chunks(LINE_BYTES).map(to_line).collect()
}

fn is_zero(line: &[u8]) -> bool {
    line.iter().all(|&b| b == 0)
}

/// Nonzero known lines, keyed by content.
fn known_index(known: &[u8]) -> HashMap<Line, Vec<usize>> {
    let mut index: HashMap<Line, Vec<usize>> = HashMap::new();
    for (i, l) in lines_of(known).into_iter().enumerate() {
        if !is_zero(&l) {
            index.entry(l).or_default().push(i);
        }
    }
    index
}

/// Scan every byte offset of `region` in the DRAM dump for a 64-byte
/// window equal to a nonzero known plaintext line.
pub fn attack_cold_boot(
    fabric: &Fabric,
    region: AddrRange,
    known_plaintext: &[u8],
    canary_line: Option<usize>,
) -> Evidence {
    let index = known_index(known_plaintext);
    let base = fabric.layout().dram_base;
    let start = (region.start - base) as usize;
    let dump = &fabric.dram_dump()[start..start + region.len as usize];
    let mut found: HashSet<usize> = HashSet::new();
    for w in dump.windows(LINE_BYTES) {
        if let Some(ids) = index.get(w) {
            found.extend(ids);
        }
    }
    let mut ev = Evidence {
        attempts: dump.len().saturating_sub(LINE_BYTES - 1) as u64,
        lines_examined: index.values().map(Vec::len).sum::<usize>() as u64,
        lines_recovered: found.len() as u64,
        canary_found: canary_line.map(|c| found.contains(&c)),
        note: format!("scanned {} bytes of DRAM", dump.len()),
        ..Evidence::default()
    };
    ev.set_fraction();
    ev
}

/// Hammer the SRAM from the rogue stream, then read the weight region of
/// DRAM from the same stream.
pub fn attack_rogue_dma(
    fabric: &mut Fabric,
    dram_region: AddrRange,
    known_plaintext: &[u8],
) -> Result<Evidence, AttackError> {
    let index = known_index(known_plaintext);
    let sram = fabric.layout().sram_range();
    let mut ev = Evidence {
        lines_examined: index.values().map(Vec::len).sum::<usize>() as u64,
        ..Evidence::default()
    };
    let mut recovered: HashSet<usize> = HashSet::new();
    for i in 0..sram.len / LINE {
        let addr = sram.start + i * LINE;
        let r = fabric.bus_read(StreamId::ROGUE, addr, LINE)?;
        ev.attempts += 1;
        ev.tally(r.status());
        match r {
            BusResponse::Okay(data) => {
                if let Some(ids) = index.get(&data[..]) {
                    recovered.extend(ids);
                }
            }
            _ => ev.aborted += 1,
        }
    }
    for i in 0..sram.len / LINE {
        let r = fabric.bus_write(StreamId::ROGUE, sram.start + i * LINE, &[0xee; LINE_BYTES])?;
        ev.attempts += 1;
        ev.tally(r.status());
        if !r.is_okay() {
            ev.aborted += 1;
        }
    }
    // DRAM is shared by design: the rogue stream may read it, but only sees
    // ciphertext.
    let mut dram_hits = 0;
    let mut dram_ok = 0;
    for i in 0..dram_region.len / LINE {
        if let BusResponse::Okay(data) = fabric.bus_read(StreamId::ROGUE, dram_region.start + i * LINE, LINE)? {
            dram_ok += 1;
            if let Some(ids) = index.get(&data[..]) {
                dram_hits += 1;
                recovered.extend(ids);
            }
        }
    }
    ev.lines_recovered = recovered.len() as u64;
    ev.note = format!("DRAM reads OKAY: {dram_ok}, plaintext lines among them: {dram_hits}");
    ev.set_fraction();
    Ok(ev)
}

/// Preempt the running context, then read all of SRAM as the next task on
/// the NPU stream.
pub fn attack_preempt_hijack(ctx: &mut InferenceContext, known_plaintext: &[u8]) -> Result<Evidence, AttackError> {
    let index = known_index(known_plaintext);
    let report = ctx.preempt()?;
    let sram = ctx.fabric().layout().sram_range();
    let r = ctx.fabric_mut().bus_read(StreamId::NPU_DMA, sram.start, sram.len)?;
    let mut ev = Evidence {
        attempts: 1,
        lines_examined: index.values().map(Vec::len).sum::<usize>() as u64,
        ..Evidence::default()
    };
    ev.tally(r.status());
    let data = r.data().unwrap_or(&[]);
    let residue = data.chunks(LINE_BYTES).filter(|l| !is_zero(l)).count();
    let mut recovered = HashSet::new();
    for l in data.chunks(LINE_BYTES) {
        if let Some(ids) = index.get(l) {
            recovered.extend(ids.iter().copied());
        }
    }
    ev.lines_recovered = recovered.len() as u64;
    ev.set_fraction();
    ev.note = format!(
        "nonzero SRAM lines after switch: {residue}; key register zero: {}; drained {} lines",
        report.keys_cleared, report.drained_lines
    );
    Ok(ev)
}

/// Outcome of the three impersonation and tamper attempts.
pub fn attack_confused_deputy(
    enclave: &mut Enclave,
    blob: &KeyBlob,
    legit: &AppIdentity,
    impostor_cert: &[u8],
    sibling: &AppIdentity,
    tamper_positions: &[usize],
) -> Evidence {
    let mut ev = Evidence::default();
    let mut outcomes: BTreeMap<String, u64> = BTreeMap::new();
    let mut attempt = |ev: &mut Evidence, r: Result<_, KeyError>, ice: &IceRegisters| {
        ev.attempts += 1;
        let key = match r {
            Ok(_) => "Provisioned".to_string(),
            Err(e) => {
                ev.aborted += 1;
                format!("{e:?}")
            }
        };
        if ice.is_provisioned() {
            ev.lines_recovered += 1;
        }
        *outcomes.entry(key).or_default() += 1;
    };

    let mut ice = IceRegisters::new();
    let r = enclave.unseal_and_provision(blob, &AppIdentity::new(impostor_cert.to_vec()), &mut ice);
    attempt(&mut ev, r, &ice);

    let bytes = blob.to_bytes();
    for &pos in tamper_positions {
        let mut bad = bytes.clone();
        bad[pos % bytes.len()] ^= 0x01;
        let mut ice = IceRegisters::new();
        let r = enclave.unseal_bytes_and_provision(&bad, legit, &mut ice);
        attempt(&mut ev, r, &ice);
    }

    let mut ice = IceRegisters::new();
    let r = enclave.unseal_and_provision(blob, sibling, &mut ice);
    attempt(&mut ev, r, &ice);

    let mut ice = IceRegisters::new();
    let legit_ok = enclave.unseal_and_provision(blob, legit, &mut ice).is_ok();

    ev.lines_examined = ev.attempts;
    ev.set_fraction();
    ev.note = format!(
        "outcomes: {}; legitimate caller provisioned: {legit_ok}",
        outcomes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ev.responses = outcomes;
    ev
}

/// Copy pristine ciphertext lines to other physical addresses and push them
/// through the armed ICE. `relocations` holds `(source line index, target
/// address)` pairs; a line counts as recovered when the ICE output equals
/// the source plaintext.
pub fn attack_alias_replay(
    fabric: &mut Fabric,
    ice: &IceRegisters,
    image: &WeightImage,
    known_plaintext: &[u8],
    relocations: &[(usize, u64)],
) -> Result<Evidence, AttackError> {
    let datapath = IceDatapath::new(ice)?;
    let truth = lines_of(known_plaintext);
    let ct = lines_of(&image.ciphertext);
    let scratch = fabric.layout().sram_base;
    let mut ev = Evidence::default();
    for &(src, dst) in relocations {
        fabric.bus_write(StreamId::CPU, dst, &ct[src])?;
        ev.attempts += 1;
        ev.lines_examined += 1;
        match datapath.process_line(fabric, dst, scratch)? {
            LineOutcome::Written => {
                let out = fabric.sram_contents()[..LINE_BYTES].to_vec();
                if out[..] == truth[src][..] {
                    ev.lines_recovered += 1;
                }
                ev.tally(BusStatus::Okay);
            }
            LineOutcome::Failed(e) => {
                ev.aborted += 1;
                ev.tally(e.status);
            }
        }
    }
    ev.set_fraction();
    Ok(ev)
}

/// Plaintext lines with their sparsity pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseWeightImage {
    pub lines: Vec<Line>,
    pub zero_lines: Vec<usize>,
}

impl SparseWeightImage {
    pub fn from_lines(lines: Vec<Line>) -> Self {
        let zero_lines = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| is_zero(&l[..]))
            .map(|(i, _)| i)
            .collect();
        Self { lines, zero_lines }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self::from_lines(lines_of(bytes))
    }

    /// Int8-like weights in [-24, 24] with each line zero with probability
    /// `zero_fraction`. At least one zero and one nonzero line when
    /// `n_lines >= 2` and `0 < zero_fraction < 1`.
    pub fn random<R: Rng>(n_lines: usize, zero_fraction: f64, rng: &mut R) -> Self {
        let mut lines: Vec<Line> = (0..n_lines)
            .map(|_| {
                if rng.gen_bool(zero_fraction) {
                    [0u8; LINE_BYTES]
                } else {
                    nonzero_weight_line(rng)
                }
            })
            .collect();
        if n_lines >= 2 && zero_fraction > 0.0 && zero_fraction < 1.0 {
            if lines.iter().all(|l| !is_zero(l)) {
                lines[rng.gen_range(0..n_lines)] = [0; LINE_BYTES];
            }
            if lines.iter().all(|l| is_zero(l)) {
                lines[rng.gen_range(0..n_lines)] = nonzero_weight_line(rng);
            }
        }
        Self::from_lines(lines)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.lines.concat()
    }

    pub fn nonzero_count(&self) -> usize {
        self.lines.len() - self.zero_lines.len()
    }
}

fn nonzero_weight_line<R: Rng>(rng: &mut R) -> Line {
    let mut l = [0u8; LINE_BYTES];
    for b in l.iter_mut() {
        *b = rng.gen_range(-24i8..=24) as u8;
    }
    if is_zero(&l) {
        l[0] = 1;
    }
    l
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakReport {
    pub zero_line: usize,
    pub nonzero_lines: usize,
    pub fixed_recovered: usize,
    pub fixed_fraction: f64,
    pub address_recovered: usize,
    pub address_fraction: f64,
}

/// Lines recovered by XOR against the ciphertext of line `zero`.
fn xor_recover(ct: &[Line], zero: usize, truth: &[Line]) -> usize {
    ct.iter()
        .zip(truth)
        .filter(|(c, p)| !is_zero(&p[..]) && xor_line(c, &ct[zero]) == **p)
        .count()
}

/// Encrypt `sparse` twice, under one keystream for every line and under
/// address-derived counters, and attack both with ciphertext-only XOR
/// cancellation against a known zero line.
pub fn fixed_counter_leak(
    sparse: &SparseWeightImage,
    key: &SessionKey,
    iv: NonceBase,
    base_addr: u64,
) -> Result<LeakReport, AttackError> {
    let &zero = sparse.zero_lines.first().ok_or(AttackError::NoZeroLine)?;
    let cipher = LineCipher::new(key, iv)?;
    let fixed: Vec<Line> = sparse
        .lines
        .iter()
        .map(|p| xor_line(p, &cipher.fixed_keystream()))
        .collect();
    let addressed: Vec<Line> = sparse
        .lines
        .iter()
        .enumerate()
        .map(|(i, p)| cipher.apply(base_addr + i as u64 * LINE, p))
        .collect::<Result<_, _>>()?;
    let nonzero = sparse.nonzero_count();
    let frac = |n: usize| if nonzero == 0 { 0.0 } else { n as f64 / nonzero as f64 };
    let fixed_recovered = xor_recover(&fixed, zero, &sparse.lines);
    let address_recovered = xor_recover(&addressed, zero, &sparse.lines);
    Ok(LeakReport {
        zero_line: zero,
        nonzero_lines: nonzero,
        fixed_recovered,
        fixed_fraction: frac(fixed_recovered),
        address_recovered,
        address_fraction: frac(address_recovered),
    })
}

/// Without knowing which line is zero: under a fixed keystream equal
/// plaintexts give equal ciphertexts, and in a sparse tensor the most common
/// line is the zero line. Returns the index of a line carrying the most
/// frequent ciphertext, if that ciphertext repeats at all.
pub fn blind_zero_candidate(ciphertext_lines: &[Line]) -> Option<usize> {
    let mut counts: HashMap<&Line, (usize, usize)> = HashMap::new();
    for (i, l) in ciphertext_lines.iter().enumerate() {
        counts.entry(l).or_insert((0, i)).0 += 1;
    }
    counts
        .into_values()
        .filter(|&(n, _)| n >= 2)
        .max_by_key(|&(n, first)| (n, std::cmp::Reverse(first)))
        .map(|(_, first)| first)
}

/// Sizes of the shared attack testbed.
pub const TESTBED_WEIGHT_LINES: usize = 256;
pub const TESTBED_DRAM_BYTES: u64 = 64 * 1024;
pub const TESTBED_SRAM_BYTES: u64 = 16 * 1024;
pub const TESTBED_CANARY_LINE: usize = 17;
pub const CANARY: &[u8; 16] = b"TESSERA-CANARY!!";
pub const DEFAULT_RELOCATIONS: usize = 10_000;

/// One device, one application and one packed model shared by all scenarios.
pub struct Testbed {
    pub profile: PlatformProfile,
    pub app: AppIdentity,
    pub public: DevicePublicKey,
    pub enclave: Enclave,
    pub weights: Vec<u8>,
    pub image: WeightImage,
    rng: ChaCha20Rng,
}

impl fmt::Debug for Testbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Testbed")
            .field("profile", &self.profile.name)
            .field("weights", &self.weights.len())
            .finish_non_exhaustive()
    }
}

impl Testbed {
    pub fn new(seed: u64, profile: PlatformProfile) -> Result<Self, AttackError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let identity = generate_device_identity(2048, &mut rng)?;
        Self::with_enclave(seed, profile, identity.enclave)
    }

    /// Reuse an existing device identity; keygen dominates testbed setup.
    pub fn with_enclave(seed: u64, profile: PlatformProfile, enclave: Enclave) -> Result<Self, AttackError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_7e55);
        let mut sparse = SparseWeightImage::random(TESTBED_WEIGHT_LINES, 0.3, &mut rng);
        sparse.lines[TESTBED_CANARY_LINE] = to_line(&CANARY.repeat(4));
        let sparse = SparseWeightImage::from_lines(sparse.lines);
        let weights = sparse.to_bytes();
        let app = AppIdentity::new(b"tessera-demo-app certificate v1".to_vec());
        let public = enclave.public_key();
        let image = pack(&weights, &public, &app, PackOptions::at(DEFAULT_DRAM_BASE), &mut rng)?;
        Ok(Self {
            profile,
            app,
            public,
            enclave,
            weights,
            image,
            rng,
        })
    }

    pub fn image_region(&self) -> AddrRange {
        AddrRange::new(self.image.header.base_addr, self.image.ciphertext.len() as u64)
    }

    pub fn bare_fabric(&self) -> Fabric {
        Fabric::new(FabricLayout {
            dram_base: DEFAULT_DRAM_BASE,
            dram_size: TESTBED_DRAM_BYTES,
            sram_base: DEFAULT_SRAM_BASE,
            sram_size: TESTBED_SRAM_BYTES,
            sram_bw: self.profile.sram_bw,
        })
        .expect("testbed layout is valid")
    }

    /// DRAM holding the packed image, or the raw weights when `encrypted`
    /// is false.
    pub fn loaded_fabric(&self, encrypted: bool) -> Result<Fabric, AttackError> {
        let mut f = self.bare_fabric();
        if encrypted {
            f.load_dram_image(&self.image.dram_image())?;
        } else {
            f.bus_write(StreamId::CPU, DEFAULT_DRAM_BASE, &self.weights)?;
        }
        Ok(f)
    }

    /// Encrypted image in DRAM, ICE armed through the enclave, and the
    /// NPU-only policy installed and locked when `lock_smmu` is set.
    pub fn provisioned(&mut self, lock_smmu: bool) -> Result<(Fabric, IceRegisters), AttackError> {
        let mut f = self.loaded_fabric(true)?;
        if lock_smmu {
            let p = f.npu_only_policy();
            f.configure_smmu(true, p)?;
        }
        let mut ice = IceRegisters::new();
        self.enclave
            .unseal_and_provision(&self.image.blob, &self.app, &mut ice)?;
        Ok((f, ice))
    }

    /// A running inference over 1 KiB tiles.
    pub fn context(&mut self) -> Result<InferenceContext, AttackError> {
        let (f, ice) = self.provisioned(true)?;
        Ok(InferenceContext::new(f, ice, self.image.tiles(1024), &self.profile)?)
    }

    /// Every line shifted by one, then `n` random relocations.
    fn relocations(&mut self, n: usize) -> Vec<(usize, u64)> {
        let lines = self.image.ciphertext.len() / LINE_BYTES;
        let dram_lines = TESTBED_DRAM_BYTES / LINE;
        let shifted = (0..lines).map(|i| (i, DEFAULT_DRAM_BASE + (i as u64 + 1) * LINE));
        shifted
            .chain((0..n).map(|_| {
                let src = self.rng.gen_range(0..lines);
                let mut dst = self.rng.gen_range(0..dram_lines);
                if dst == src as u64 {
                    dst = (dst + 1) % dram_lines;
                }
                (src, DEFAULT_DRAM_BASE + dst * LINE)
            }))
            .collect()
    }
}

fn cold_boot(bed: &mut Testbed) -> Result<Vec<AttackVerdict>, AttackError> {
    let region = bed.image_region();
    let mut out = Vec::new();
    for (variant, encrypted) in [(Variant::Defended, true), (Variant::Control, false)] {
        let f = bed.loaded_fabric(encrypted)?;
        let ev = attack_cold_boot(&f, region, &bed.weights, Some(TESTBED_CANARY_LINE));
        out.push(AttackVerdict::new(
            Scenario::ColdBoot,
            variant,
            ev.lines_recovered == 0,
            ev,
        ));
    }
    Ok(out)
}

fn rogue_dma(bed: &mut Testbed) -> Result<Vec<AttackVerdict>, AttackError> {
    let mut out = Vec::new();
    for (variant, lock) in [(Variant::Defended, true), (Variant::Control, false)] {
        let (mut f, ice) = bed.provisioned(lock)?;
        stream_decrypt(&mut f, &ice, &bed.image.tiles(1024))?;
        let ev = attack_rogue_dma(&mut f, bed.image_region(), &bed.weights)?;
        let defended = ev.aborted == ev.attempts;
        out.push(AttackVerdict::new(Scenario::RogueDma, variant, defended, ev));
    }
    Ok(out)
}

fn preempt_hijack(bed: &mut Testbed) -> Result<Vec<AttackVerdict>, AttackError> {
    let mut out = Vec::new();
    let half = (bed.image.ciphertext.len() / LINE_BYTES / 2) as u64;
    for (variant, scrub, steps) in [
        (Variant::Defended, true, half),
        (Variant::Defended, true, 0),
        (Variant::Control, false, half),
    ] {
        let mut ctx = bed.context()?;
        if !scrub {
            ctx.disable_scrub();
        }
        ctx.run_steps(steps)?;
        let mut ev = attack_preempt_hijack(&mut ctx, &bed.weights)?;
        let clean = ctx.fabric().sram_contents().iter().all(|&b| b == 0);
        if steps == 0 {
            ev.note = format!("before any decryption; {}", ev.note);
        }
        out.push(AttackVerdict::new(Scenario::PreemptHijack, variant, clean, ev));
    }
    Ok(out)
}

fn confused_deputy(bed: &mut Testbed) -> Result<Vec<AttackVerdict>, AttackError> {
    let mut impostor = bed.app.cert_bytes.clone();
    *impostor.last_mut().expect("certificate is non-empty") ^= 0x01;
    let sibling = AppIdentity::new(b"sibling-app certificate".to_vec());
    let positions: Vec<usize> = (0..bed.image.blob.encoded_len()).collect();
    let mut out = Vec::new();

    let ev = attack_confused_deputy(
        &mut bed.enclave,
        &bed.image.blob,
        &bed.app,
        &impostor,
        &sibling,
        &positions,
    );
    let defended = ev.aborted == ev.attempts && ev.note.ends_with("true");
    out.push(AttackVerdict::new(
        Scenario::ConfusedDeputy,
        Variant::Defended,
        defended,
        ev,
    ));

    let mut careless = Enclave::from_efuse_bytes(&bed.enclave.to_efuse_bytes()?)?.without_app_binding_check();
    let ev = attack_confused_deputy(
        &mut careless,
        &bed.image.blob,
        &bed.app,
        &impostor,
        &sibling,
        &positions,
    );
    let defended = ev.aborted == ev.attempts;
    out.push(AttackVerdict::new(
        Scenario::ConfusedDeputy,
        Variant::Control,
        defended,
        ev,
    ));
    Ok(out)
}

fn alias_replay(bed: &mut Testbed, n: usize) -> Result<Vec<AttackVerdict>, AttackError> {
    let moved = bed.relocations(n);
    let identity: Vec<(usize, u64)> = (0..bed.image.ciphertext.len() / LINE_BYTES)
        .map(|i| (i, DEFAULT_DRAM_BASE + i as u64 * LINE))
        .collect();
    let mut out = Vec::new();
    for (variant, relocs) in [(Variant::Defended, moved), (Variant::Control, identity)] {
        let (mut f, ice) = bed.provisioned(true)?;
        let mut ev = attack_alias_replay(&mut f, &ice, &bed.image, &bed.weights, &relocs)?;
        ev.note = match variant {
            Variant::Defended => format!("every line shifted by one, plus {n} random targets"),
            Variant::Control => "identity remap".into(),
        };
        out.push(AttackVerdict::new(
            Scenario::AliasReplay,
            variant,
            ev.lines_recovered == 0,
            ev,
        ));
    }
    Ok(out)
}

fn fixed_counter(bed: &mut Testbed) -> Result<Vec<AttackVerdict>, AttackError> {
    let sparse = SparseWeightImage::from_bytes(&bed.weights);
    let key = SessionKey::generate(&mut bed.rng);
    let iv = NonceBase::generate(&mut bed.rng);
    let report = fixed_counter_leak(&sparse, &key, iv, DEFAULT_DRAM_BASE)?;

    // The same attack on a real packed artifact, without being told which line is zero.
    let demo = pack(
        &bed.weights,
        &bed.public,
        &bed.app,
        PackOptions {
            base_addr: DEFAULT_DRAM_BASE,
            fixed_counter: true,
            insecure_demo: true,
        },
        &mut bed.rng,
    )?;
    let ct = lines_of(&demo.ciphertext);
    let blind = blind_zero_candidate(&ct).map(|z| xor_recover(&ct, z, &sparse.lines));

    let make = |recovered: usize, fraction: f64, note: String| Evidence {
        attempts: sparse.lines.len() as u64,
        lines_examined: report.nonzero_lines as u64,
        lines_recovered: recovered as u64,
        recovered_fraction: fraction,
        note,
        ..Evidence::default()
    };
    Ok(vec![
        AttackVerdict::new(
            Scenario::FixedCounterLeak,
            Variant::Defended,
            report.address_recovered == 0,
            make(
                report.address_recovered,
                report.address_fraction,
                "address-derived counters".into(),
            ),
        ),
        AttackVerdict::new(
            Scenario::FixedCounterLeak,
            Variant::Control,
            report.fixed_recovered == 0,
            make(
                report.fixed_recovered,
                report.fixed_fraction,
                format!(
                    "fixed counter; blind attack on packed demo image recovered {} of {} lines",
                    blind.unwrap_or(0),
                    report.nonzero_lines
                ),
            ),
        ),
    ])
}

pub fn run_scenario(bed: &mut Testbed, scenario: Scenario) -> Result<Vec<AttackVerdict>, AttackError> {
    match scenario {
        Scenario::ColdBoot => cold_boot(bed),
        Scenario::RogueDma => rogue_dma(bed),
        Scenario::PreemptHijack => preempt_hijack(bed),
        Scenario::ConfusedDeputy => confused_deputy(bed),
        Scenario::AliasReplay => alias_replay(bed, DEFAULT_RELOCATIONS),
        Scenario::FixedCounterLeak => fixed_counter(bed),
    }
}

pub fn run_all(bed: &mut Testbed) -> Result<Vec<AttackVerdict>, AttackError> {
    let mut out = Vec::new();
    for s in Scenario::ALL {
        out.extend(run_scenario(bed, s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::test_support;
    use proptest::prelude::*;

    fn bed() -> Testbed {
        Testbed::with_enclave(11, PlatformProfile::xavier(), test_support::enclave(1)).unwrap()
    }

    fn check(verdicts: &[AttackVerdict]) {
        assert!(verdicts.iter().any(|v| v.variant == Variant::Control));
        for v in verdicts {
            assert!(v.as_expected(), "{v:#?}");
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("rogue-dma".parse::<Scenario>().is_ok());
        assert!("rowhammer".parse::<Scenario>().is_err());
    }

    #[test]
    fn cold_boot_arms() {
        let v = cold_boot(&mut bed()).unwrap();
        check(&v);
        assert_eq!(v[0].evidence.lines_recovered, 0);
        assert_eq!(v[0].evidence.canary_found, Some(false));
        assert_eq!(v[1].evidence.recovered_fraction, 1.0);
        assert_eq!(v[1].evidence.canary_found, Some(true));
    }

    #[test]
    fn encrypted_zero_model_has_no_matches() {
        let b = bed();
        let zeros = vec![0u8; 4096];
        let img = pack(
            &zeros,
            &b.public,
            &b.app,
            PackOptions::at(DEFAULT_DRAM_BASE),
            &mut ChaCha20Rng::seed_from_u64(1),
        )
        .unwrap();
        let mut f = b.bare_fabric();
        f.load_dram_image(&img.dram_image()).unwrap();
        assert!(img.ciphertext.chunks(64).all(|l| !is_zero(l)));
        let ev = attack_cold_boot(&f, AddrRange::new(DEFAULT_DRAM_BASE, 4096), &zeros, None);
        assert_eq!(ev.lines_recovered, 0);
    }

    #[test]
    fn rogue_dma_arms() {
        let v = rogue_dma(&mut bed()).unwrap();
        check(&v);
        assert_eq!(
            v[0].evidence.responses.get("SLVERR").copied(),
            Some(2 * TESTBED_SRAM_BYTES / 64)
        );
        assert!(v[0].evidence.note.ends_with("plaintext lines among them: 0"));
        assert!(v[1].evidence.lines_recovered > 0);
    }

    #[test]
    fn preempt_hijack_arms() {
        let v = preempt_hijack(&mut bed()).unwrap();
        check(&v);
        assert!(v[2].evidence.lines_recovered > 0);
    }

    #[test]
    fn confused_deputy_arms() {
        let v = confused_deputy(&mut bed()).unwrap();
        check(&v);
        let d = &v[0].evidence;
        assert_eq!(d.attempts, 274);
        assert_eq!(d.responses.get("OaepDecodeFailure").copied(), Some(272));
        assert_eq!(d.responses.get("AppBindingMismatch").copied(), Some(2));
        assert_eq!(v[1].evidence.responses.get("Provisioned").copied(), Some(2));
    }

    #[test]
    fn alias_replay_arms() {
        let mut b = bed();
        let v = alias_replay(&mut b, 500).unwrap();
        check(&v);
        assert_eq!(v[1].evidence.recovered_fraction, 1.0);
    }

    #[test]
    fn fixed_counter_arms() {
        let v = fixed_counter(&mut bed()).unwrap();
        check(&v);
        assert_eq!(v[1].evidence.recovered_fraction, 1.0);
        assert_eq!(v[0].evidence.recovered_fraction, 0.0);
        let n = v[1].evidence.lines_examined;
        assert!(v[1].evidence.note.contains(&format!("recovered {n} of {n}")));
    }

    #[test]
    fn two_line_xor_identity() {
        let a = [0x5au8; 64];
        let s = SparseWeightImage::from_lines(vec![a, [0; 64]]);
        let r = fixed_counter_leak(&s, &SessionKey::from_bytes([1; 32]), NonceBase([2; 12]), 0).unwrap();
        assert_eq!((r.fixed_recovered, r.address_recovered), (1, 0));
    }

    #[test]
    fn no_zero_line_is_an_error() {
        let s = SparseWeightImage::from_lines(vec![[1; 64], [2; 64]]);
        assert!(matches!(
            fixed_counter_leak(&s, &SessionKey::from_bytes([1; 32]), NonceBase([2; 12]), 0),
            Err(AttackError::NoZeroLine)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn leak_is_all_or_nothing(seed in any::<u64>(), n in 2usize..64, zf in 0.05f64..0.9) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let s = SparseWeightImage::random(n, zf, &mut rng);
            let key = SessionKey::generate(&mut rng);
            let r = fixed_counter_leak(&s, &key, NonceBase::generate(&mut rng), DEFAULT_DRAM_BASE).unwrap();
            prop_assert_eq!(r.fixed_fraction, 1.0);
            prop_assert_eq!(r.address_fraction, 0.0);
        }
    }
}

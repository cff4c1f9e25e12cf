//! Context-switch hook for a running inference.
//!
//! [`InferenceContext`] owns the fabric and ICE registers of one NPU job and
//! streams its tile schedule line by line. [`InferenceContext::preempt`]
//! runs the switch sequence as one atomic step:
//!
//! 1. stop issuing DMA,
//! 2. drain the lines already in flight into SRAM,
//! 3. scrub SRAM,
//! 4. clear the ICE key and nonce registers,
//! 5. hand the NPU over.
//!
//! [`InferenceContext::resume`] re-provisions through the enclave and
//! restarts at the first line of the tile that was interrupted.
//!
//! The context's result is its delivered output: each tile's plaintext is
//! appended once all of its lines have landed in SRAM. Tiles occupy
//! consecutive SRAM slots, so a scrub also erases slots of tiles that were
//! already delivered; only slots from the interrupted tile onward are
//! rewritten after a restart.

use serde::Serialize;
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

use crate::crypto::LINE_BYTES;
use crate::fabric::{BusResponse, Fabric, StreamId};
use crate::ice::IceRegisters;
use crate::keys::{AppIdentity, Enclave, KeyBlob, KeyError, ProvisionReceipt};
use crate::pipeline::{sram_placement, FillReport, IceDatapath, PipelineError, TileDescriptor};
use crate::profile::PlatformProfile;

const LINE: u64 = LINE_BYTES as u64;

/// Lines a context keeps issued ahead of the last completed one.
pub const DEFAULT_IN_FLIGHT_LINES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PreemptState {
    Running,
    DmaStopped,
    Drained,
    Scrubbed,
    KeysCleared,
    Switched,
    Reprovisioned,
    Restarted,
}

impl PreemptState {
    fn may_follow(self, prev: PreemptState) -> bool {
        use PreemptState::*;
        matches!(
            (prev, self),
            (Running | Restarted, DmaStopped)
                | (DmaStopped, Drained)
                | (Drained, Scrubbed)
                | (Scrubbed, KeysCleared)
                | (KeysCleared, Switched)
                | (Switched, Reprovisioned)
                | (Reprovisioned, Restarted)
        )
    }

    /// Streaming may proceed in these states.
    pub fn is_running(self) -> bool {
        matches!(self, PreemptState::Running | PreemptState::Restarted)
    }
}

impl fmt::Display for PreemptState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum PreemptError {
    #[error("context is not running (state {0})")]
    NotRunning(PreemptState),
    #[error("context is not switched out (state {0})")]
    NotSwitched(PreemptState),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: PreemptState, to: PreemptState },
    #[error(transparent)]
    Provision(#[from] KeyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PreemptReport {
    /// Scrub time plus state save, ns.
    pub duration_ns: f64,
    pub scrub_ns: f64,
    pub drained_lines: u64,
    pub sram_zeroed: bool,
    pub keys_cleared: bool,
    /// Tile that streaming restarts from on resume.
    pub resumed_tile_index: usize,
}

/// One line of the JSON-lines trace.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TraceEvent {
    pub seq: u64,
    pub t_ns: f64,
    pub state: PreemptState,
    pub sram_all_zero: bool,
    pub key_register_zero: bool,
}

/// Preemption latency, ns: `sram_size / sram_bw + t_save`.
pub fn preempt_latency(sram_size: u64, sram_bw: f64, t_save_ns: f64) -> f64 {
    if sram_size == 0 {
        return t_save_ns;
    }
    sram_size as f64 / sram_bw * 1e9 + t_save_ns
}

/// Preemption latency for a profile, ns.
pub fn profile_preempt_latency(profile: &PlatformProfile) -> f64 {
    preempt_latency(profile.sram_size, profile.sram_bw, profile.t_save_ns)
}

#[derive(Debug, Clone, Copy)]
struct PendingLine {
    tile: usize,
    src: u64,
    dst: u64,
}

#[derive(Debug)]
pub struct InferenceContext {
    fabric: Fabric,
    ice: IceRegisters,
    tiles: Vec<TileDescriptor>,
    slots: Vec<u64>,
    lines_done: Vec<u64>,
    next_tile: usize,
    next_line: u64,
    pending: VecDeque<PendingLine>,
    in_flight: usize,
    delivered_tiles: usize,
    output: Vec<u8>,
    state: PreemptState,
    trace: Vec<TraceEvent>,
    clock_ns: f64,
    line_interval_ns: f64,
    t_save_ns: f64,
    scrub_enabled: bool,
    report: FillReport,
}

impl InferenceContext {
    pub fn new(
        fabric: Fabric,
        ice: IceRegisters,
        tiles: Vec<TileDescriptor>,
        profile: &PlatformProfile,
    ) -> Result<Self, PreemptError> {
        let slots = sram_placement(&fabric, &tiles)?;
        let mut ctx = Self {
            lines_done: vec![0; tiles.len()],
            fabric,
            ice,
            tiles,
            slots,
            next_tile: 0,
            next_line: 0,
            pending: VecDeque::new(),
            in_flight: DEFAULT_IN_FLIGHT_LINES,
            delivered_tiles: 0,
            output: Vec::new(),
            state: PreemptState::Running,
            trace: Vec::new(),
            clock_ns: 0.0,
            line_interval_ns: LINE as f64 / profile.line_service_rate() * 1e9,
            t_save_ns: profile.t_save_ns,
            scrub_enabled: true,
            report: FillReport::default(),
        };
        ctx.log_state();
        Ok(ctx)
    }

    pub fn with_in_flight(mut self, lines: usize) -> Self {
        self.in_flight = lines;
        self
    }

    /// Fault injection for negative controls: preemption skips the scrub.
    pub fn disable_scrub(&mut self) {
        self.scrub_enabled = false;
    }

    pub fn state(&self) -> PreemptState {
        self.state
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    pub fn ice(&self) -> &IceRegisters {
        &self.ice
    }

    pub fn tiles(&self) -> &[TileDescriptor] {
        &self.tiles
    }

    /// SRAM address of each tile's slot.
    pub fn tile_slots(&self) -> &[u64] {
        &self.slots
    }

    pub fn delivered_tiles(&self) -> usize {
        self.delivered_tiles
    }

    pub fn delivered_output(&self) -> &[u8] {
        &self.output
    }

    pub fn fill_report(&self) -> &FillReport {
        &self.report
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace events serialize") + "\n")
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.delivered_tiles == self.tiles.len()
    }

    /// Lines already issued and not yet written.
    pub fn lines_in_flight(&self) -> usize {
        self.pending.len()
    }

    fn log_state(&mut self) {
        let event = TraceEvent {
            seq: self.trace.len() as u64,
            t_ns: self.clock_ns,
            state: self.state,
            sram_all_zero: self.fabric.sram_contents().iter().all(|&b| b == 0),
            key_register_zero: self.ice.key_register().iter().all(|&b| b == 0),
        };
        self.trace.push(event);
    }

    fn transition(&mut self, to: PreemptState) -> Result<(), PreemptError> {
        if !to.may_follow(self.state) {
            return Err(PreemptError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        self.log_state();
        Ok(())
    }

    fn has_unissued(&self) -> bool {
        self.next_tile < self.tiles.len()
    }

    fn issue(&mut self) {
        let tile = &self.tiles[self.next_tile];
        self.pending.push_back(PendingLine {
            tile: self.next_tile,
            src: tile.base + self.next_line * LINE,
            dst: self.slots[self.next_tile] + self.next_line * LINE,
        });
        self.next_line += 1;
        if self.next_line == tile.lines() {
            self.next_tile += 1;
            self.next_line = 0;
        }
    }

    fn complete_oldest(&mut self, deliver: bool) -> Result<(), PreemptError> {
        let Some(line) = self.pending.pop_front() else {
            return Ok(());
        };
        let datapath = IceDatapath::new(&self.ice)?;
        let outcome = datapath.process_line(&mut self.fabric, line.src, line.dst)?;
        self.report.record(outcome);
        self.lines_done[line.tile] += 1;
        if deliver && self.lines_done[line.tile] == self.tiles[line.tile].lines() {
            debug_assert_eq!(line.tile, self.delivered_tiles);
            let tile = &self.tiles[line.tile];
            let bytes = match self
                .fabric
                .bus_read(StreamId::NPU_DMA, self.slots[line.tile], tile.fetch_bytes())
            {
                Ok(BusResponse::Okay(d)) => d,
                _ => vec![0; tile.fetch_bytes() as usize],
            };
            self.output.extend_from_slice(&bytes[..tile.len as usize]);
            self.delivered_tiles += 1;
            self.report.tiles += 1;
        }
        Ok(())
    }

    /// Advance one line-time: issue the next line, and retire the oldest
    /// once the in-flight window is full or nothing is left to issue.
    /// Returns `false` when the schedule is finished.
    pub fn step(&mut self) -> Result<bool, PreemptError> {
        if !self.state.is_running() {
            return Err(PreemptError::NotRunning(self.state));
        }
        if !self.has_unissued() && self.pending.is_empty() {
            return Ok(false);
        }
        if self.has_unissued() {
            self.issue();
        }
        if self.pending.len() > self.in_flight || !self.has_unissued() {
            self.complete_oldest(true)?;
        }
        self.clock_ns += self.line_interval_ns;
        Ok(true)
    }

    /// Run up to `n` steps; returns how many made progress.
    pub fn run_steps(&mut self, n: u64) -> Result<u64, PreemptError> {
        let mut done = 0;
        while done < n && self.step()? {
            done += 1;
        }
        Ok(done)
    }

    pub fn run_to_completion(&mut self) -> Result<(), PreemptError> {
        while self.step()? {}
        Ok(())
    }

    /// Stop, drain, scrub, clear keys and switch out.
    pub fn preempt(&mut self) -> Result<PreemptReport, PreemptError> {
        if !self.state.is_running() {
            return Err(PreemptError::NotRunning(self.state));
        }
        self.transition(PreemptState::DmaStopped)?;

        let mut drained = 0;
        if self.ice.is_provisioned() {
            while !self.pending.is_empty() {
                self.complete_oldest(false)?;
                drained += 1;
            }
        }
        self.pending.clear();
        self.transition(PreemptState::Drained)?;

        let scrub_ns = if self.scrub_enabled {
            self.fabric.scrub_sram()
        } else {
            0.0
        };
        self.clock_ns += scrub_ns;
        self.transition(PreemptState::Scrubbed)?;

        self.ice.clear();
        self.transition(PreemptState::KeysCleared)?;

        self.clock_ns += self.t_save_ns;
        self.transition(PreemptState::Switched)?;

        let sram = self.fabric.layout().sram_size;
        let sram_bw = self.fabric.layout().sram_bw;
        Ok(PreemptReport {
            duration_ns: preempt_latency(sram, sram_bw, self.t_save_ns),
            scrub_ns,
            drained_lines: drained,
            sram_zeroed: self.fabric.sram_contents().iter().all(|&b| b == 0),
            keys_cleared: self.ice.key_register().iter().all(|&b| b == 0),
            resumed_tile_index: self.delivered_tiles,
        })
    }

    /// Re-provision through the enclave and rewind to the interrupted tile.
    /// A failed provisioning leaves the context switched out.
    pub fn resume(
        &mut self,
        enclave: &mut Enclave,
        blob: &KeyBlob,
        caller: &AppIdentity,
    ) -> Result<ProvisionReceipt, PreemptError> {
        if self.state != PreemptState::Switched {
            return Err(PreemptError::NotSwitched(self.state));
        }
        let receipt = enclave.unseal_and_provision(blob, caller, &mut self.ice)?;
        self.transition(PreemptState::Reprovisioned)?;
        self.next_tile = self.delivered_tiles;
        self.next_line = 0;
        for done in &mut self.lines_done[self.delivered_tiles..] {
            *done = 0;
        }
        self.transition(PreemptState::Restarted)?;
        Ok(receipt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{encrypt_line, CacheLine, NonceBase, SessionKey};
    use crate::fabric::{FabricLayout, DEFAULT_DRAM_BASE, DEFAULT_SRAM_BASE};
    use crate::keys::{seal_model_key, test_support};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const KEY: [u8; 32] = [0x42; 32];
    const IV: NonceBase = NonceBase([0x24; 12]);

    fn profile() -> PlatformProfile {
        PlatformProfile::i9_12900h()
    }

    fn setup(plain: &[u8], tiles: Vec<TileDescriptor>) -> InferenceContext {
        let mut f = Fabric::new(FabricLayout {
            dram_base: DEFAULT_DRAM_BASE,
            dram_size: 64 * 64,
            sram_base: DEFAULT_SRAM_BASE,
            sram_size: 64 * 64,
            sram_bw: 512e9,
        })
        .unwrap();
        let p = f.npu_only_policy();
        f.configure_smmu(true, p).unwrap();
        let key = SessionKey::from_bytes(KEY);
        let mut padded = plain.to_vec();
        padded.resize(64 * 64, 0);
        let mut ct = Vec::new();
        for (i, chunk) in padded.chunks(64).enumerate() {
            let mut line = [0u8; 64];
            line[..chunk.len()].copy_from_slice(chunk);
            let cl = CacheLine::new(DEFAULT_DRAM_BASE + 64 * i as u64, line).unwrap();
            ct.extend_from_slice(&encrypt_line(&key, &IV, &cl).unwrap());
        }
        f.bus_write(StreamId::CPU, DEFAULT_DRAM_BASE, &ct).unwrap();
        InferenceContext::new(f, IceRegisters::armed_for_test(KEY, IV), tiles, &profile()).unwrap()
    }

    fn plain(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i * 31 % 251) as u8 + 1).collect()
    }

    fn schedule(lens: &[u64]) -> Vec<TileDescriptor> {
        let mut base = DEFAULT_DRAM_BASE;
        lens.iter()
            .enumerate()
            .map(|(i, &len)| {
                let t = TileDescriptor::new(base, len, format!("t{i}"));
                base += t.fetch_bytes();
                t
            })
            .collect()
    }

    /// Plaintext as the tiles see it: each tile's logical bytes.
    fn expected_output(p: &[u8], tiles: &[TileDescriptor]) -> Vec<u8> {
        let mut out = Vec::new();
        for t in tiles {
            let off = (t.base - DEFAULT_DRAM_BASE) as usize;
            let mut padded = p.to_vec();
            padded.resize(64 * 64, 0);
            out.extend_from_slice(&padded[off..off + t.len as usize]);
        }
        out
    }

    fn sealed() -> (Enclave, KeyBlob, AppIdentity) {
        let enclave = test_support::enclave(0);
        let app = AppIdentity::new(b"app-cert".to_vec());
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let blob = seal_model_key(&enclave.public_key(), &SessionKey::from_bytes(KEY), &app, IV, &mut rng).unwrap();
        (enclave, blob, app)
    }

    #[test]
    fn latency_formula() {
        assert!((preempt_latency(2 * 1024 * 1024, 512e9, 1500.0) - 5596.0).abs() < 1e-6);
        assert!((preempt_latency(2 * 1024 * 1024, 512e9, 0.0) - 4096.0).abs() < 1e-6);
        assert_eq!(preempt_latency(0, 512e9, 0.0), 0.0);
        for (_, p) in PlatformProfile::builtins() {
            assert!(profile_preempt_latency(&p) < 100_000.0);
        }
    }

    #[test]
    fn table_latencies_decimal_megabytes() {
        let want = [5.4, 9.8, 5.7];
        for ((_, p), w) in PlatformProfile::builtins().iter().zip(want) {
            let us = profile_preempt_latency(p) / 1000.0;
            assert!((us - w).abs() <= 0.05, "{}: {us}", p.name);
        }
    }

    #[test]
    fn uninterrupted_run_delivers_plaintext() {
        let p = plain(1000);
        let tiles = schedule(&[300, 200, 500]);
        let mut ctx = setup(&p, tiles.clone());
        ctx.run_to_completion().unwrap();
        assert!(ctx.is_complete());
        assert_eq!(ctx.delivered_output(), &expected_output(&p, &tiles)[..]);
        assert_eq!(ctx.fill_report().lines_processed, 5 + 4 + 8);
    }

    #[test]
    fn preempt_sequence_and_postconditions() {
        let p = plain(1000);
        let mut ctx = setup(&p, schedule(&[300, 200, 500]));
        ctx.run_steps(7).unwrap();
        let in_flight = ctx.lines_in_flight() as u64;
        assert!(in_flight > 0);
        let r = ctx.preempt().unwrap();
        assert_eq!(r.drained_lines, in_flight);
        assert!(r.sram_zeroed && r.keys_cleared);
        assert_eq!(r.resumed_tile_index, 0);
        assert_eq!(ctx.state(), PreemptState::Switched);
        assert!(!ctx.ice().is_provisioned());
        assert_eq!(ctx.ice().nonce_register(), NonceBase::default());
        let sram = ctx.fabric().layout().sram_range();
        let read = ctx
            .fabric_mut()
            .bus_read(StreamId::NPU_DMA, sram.start, sram.len)
            .unwrap();
        assert!(read.data().unwrap().iter().all(|&b| b == 0));

        let states: Vec<_> = ctx.trace().iter().map(|e| e.state).collect();
        use PreemptState::*;
        assert_eq!(states, [Running, DmaStopped, Drained, Scrubbed, KeysCleared, Switched]);
        let scrubbed = ctx
            .trace()
            .iter()
            .position(|e| e.sram_all_zero && e.state == Scrubbed)
            .unwrap();
        assert!(scrubbed < 5);
        assert!((r.duration_ns - preempt_latency(4096, 512e9, 1500.0)).abs() < 1e-9);
    }

    #[test]
    fn preempt_twice_is_not_running() {
        let mut ctx = setup(&plain(128), schedule(&[128]));
        ctx.preempt().unwrap();
        assert!(matches!(
            ctx.preempt(),
            Err(PreemptError::NotRunning(PreemptState::Switched))
        ));
        assert!(matches!(ctx.step(), Err(PreemptError::NotRunning(_))));
    }

    #[test]
    fn resume_requires_switch() {
        let (mut enclave, blob, app) = sealed();
        let mut ctx = setup(&plain(128), schedule(&[128]));
        assert!(matches!(
            ctx.resume(&mut enclave, &blob, &app),
            Err(PreemptError::NotSwitched(_))
        ));
    }

    #[test]
    fn resume_restarts_interrupted_tile() {
        let p = plain(1000);
        let tiles = schedule(&[300, 200, 500]);
        let mut reference = setup(&p, tiles.clone());
        reference.run_to_completion().unwrap();

        let (mut enclave, blob, app) = sealed();
        let mut ctx = setup(&p, tiles);
        ctx.run_steps(11).unwrap();
        let r = ctx.preempt().unwrap();
        assert!(r.resumed_tile_index >= 1);
        ctx.resume(&mut enclave, &blob, &app).unwrap();
        assert_eq!(ctx.state(), PreemptState::Restarted);
        ctx.run_to_completion().unwrap();
        assert_eq!(ctx.delivered_output(), reference.delivered_output());
        let from = (ctx.tile_slots()[r.resumed_tile_index] - DEFAULT_SRAM_BASE) as usize;
        assert_eq!(
            ctx.fabric().sram_contents()[from..],
            reference.fabric().sram_contents()[from..]
        );
        assert!(ctx.fabric().sram_contents()[..from].iter().all(|&b| b == 0));
    }

    #[test]
    fn tampered_blob_blocks_resume() {
        let (mut enclave, mut blob, app) = sealed();
        blob.ciphertext[10] ^= 1;
        let mut ctx = setup(&plain(640), schedule(&[320, 320]));
        ctx.run_steps(3).unwrap();
        ctx.preempt().unwrap();
        let lines_before = ctx.fill_report().lines_processed;
        assert!(matches!(
            ctx.resume(&mut enclave, &blob, &app),
            Err(PreemptError::Provision(KeyError::OaepDecodeFailure))
        ));
        assert_eq!(ctx.state(), PreemptState::Switched);
        assert!(!ctx.ice().is_provisioned());
        assert!(ctx.step().is_err());
        assert_eq!(ctx.fill_report().lines_processed, lines_before);
        assert!(ctx.fabric().sram_contents().iter().all(|&b| b == 0));
    }

    #[test]
    fn disabled_scrub_leaves_plaintext() {
        let mut ctx = setup(&plain(640), schedule(&[640]));
        ctx.disable_scrub();
        ctx.run_steps(5).unwrap();
        let r = ctx.preempt().unwrap();
        assert!(!r.sram_zeroed);
        assert!(r.keys_cleared);
    }

    #[test]
    fn trace_is_json_lines() {
        let mut ctx = setup(&plain(128), schedule(&[128]));
        ctx.preempt().unwrap();
        let text = ctx.trace_jsonl();
        assert_eq!(text.lines().count(), 6);
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["state"], "Switched");
        assert_eq!(last["key_register_zero"], true);
    }

    #[test]
    fn transition_order_enforced() {
        assert!(PreemptState::Switched.may_follow(PreemptState::KeysCleared));
        assert!(!PreemptState::Switched.may_follow(PreemptState::Drained));
        assert!(!PreemptState::Switched.may_follow(PreemptState::Scrubbed));
        assert!(PreemptState::DmaStopped.may_follow(PreemptState::Restarted));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn restart_equivalence(
            lens in prop::collection::vec(1u64..400, 1..6),
            cut in 0u64..80,
            window in 0usize..6,
        ) {
            let total: u64 = lens.iter().map(|l| l.div_ceil(64) * 64).sum();
            prop_assume!(total <= 64 * 64);
            let p = plain(total as usize);
            let tiles = schedule(&lens);
            let mut reference = setup(&p, tiles.clone());
            reference.run_to_completion().unwrap();

            let (mut enclave, blob, app) = sealed();
            let mut ctx = setup(&p, tiles.clone()).with_in_flight(window);
            ctx.run_steps(cut).unwrap();
            let r = ctx.preempt().unwrap();
            prop_assert!(r.sram_zeroed && r.keys_cleared);
            ctx.resume(&mut enclave, &blob, &app).unwrap();
            ctx.run_to_completion().unwrap();
            prop_assert_eq!(ctx.delivered_output(), &expected_output(&p, &tiles)[..]);
            prop_assert_eq!(ctx.delivered_output(), reference.delivered_output());
        }
    }
}

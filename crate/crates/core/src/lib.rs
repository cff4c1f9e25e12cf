//! Simulator for an inline crypto engine that decrypts NPU weight streams
//! at cache-line granularity between shared DRAM and accelerator SRAM.
//!
//! The crate models the AES-CTR datapath with address-derived counters, the
//! device/model/application key hierarchy, an SMMU-guarded memory fabric,
//! keystream latency jitter, the preemption scrub sequence, analytic
//! performance models and an attack harness with negative controls.

pub mod attack;
pub mod crypto;
pub mod fabric;
pub mod ice;
pub mod image;
pub mod keys;
pub mod perf;
pub mod pipeline;
pub mod preempt;
pub mod profile;

pub use attack::{run_all, run_scenario, AttackError, AttackVerdict, Scenario, Testbed};
pub use crypto::{CacheLine, CounterBlock, CryptoError, LineCipher, NonceBase, SessionKey, LINE_BYTES};
pub use fabric::{AddrRange, BusResponse, BusStatus, Fabric, FabricError, FabricLayout, StreamId};
pub use ice::IceRegisters;
pub use image::{inspect, pack, ImageError, PackOptions, WeightImage};
pub use keys::{generate_device_identity, AppIdentity, DevicePublicKey, Enclave, KeyBlob, KeyError};
pub use perf::{model_tables, ModelTables, PerfError};
pub use pipeline::{simulate_jitter, stream_decrypt, JitterParams, PipelineError, SimStats, TileDescriptor};
pub use preempt::{preempt_latency, InferenceContext, PreemptError, PreemptState};
pub use profile::{PlatformProfile, ProfileError};

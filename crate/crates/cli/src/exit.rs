//! Process exit codes, one per error class.

use tessera_core::attack::AttackError;
use tessera_core::perf::PerfError;
use tessera_core::{ImageError, KeyError, PipelineError, PreemptError, ProfileError};

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const FORMAT: u8 = 4;
pub const KEY: u8 = 5;
pub const SIMULATION: u8 = 6;
pub const PROFILE: u8 = 7;
pub const NOT_DEFENDED: u8 = 8;

/// A defended-expected scenario came back undefended.
#[derive(Debug, thiserror::Error)]
#[error("{0} defended-expected scenario(s) reported defended = false")]
pub struct Undefended(pub usize);

fn key(e: &KeyError) -> u8 {
    match e {
        KeyError::BlobFormat(_) | KeyError::Encoding(_) => FORMAT,
        _ => KEY,
    }
}

fn image(e: &ImageError) -> u8 {
    match e {
        ImageError::Io { .. } => IO,
        ImageError::Key(k) => key(k),
        ImageError::Misaligned(_) | ImageError::InsecureDemoRefused => USAGE,
        _ => FORMAT,
    }
}

fn preempt(e: &PreemptError) -> u8 {
    match e {
        PreemptError::Provision(k) => key(k),
        _ => SIMULATION,
    }
}

fn attack(e: &AttackError) -> u8 {
    match e {
        AttackError::UnknownScenario(_) => USAGE,
        AttackError::Key(k) => key(k),
        AttackError::Image(i) => image(i),
        AttackError::Preempt(p) => preempt(p),
        _ => SIMULATION,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Undefended>() {
            return NOT_DEFENDED;
        }
        if let Some(e) = cause.downcast_ref::<ImageError>() {
            return image(e);
        }
        if let Some(e) = cause.downcast_ref::<KeyError>() {
            return key(e);
        }
        if let Some(e) = cause.downcast_ref::<AttackError>() {
            return attack(e);
        }
        if let Some(e) = cause.downcast_ref::<PreemptError>() {
            return preempt(e);
        }
        if cause.is::<PipelineError>() {
            return SIMULATION;
        }
        if let Some(e) = cause.downcast_ref::<ProfileError>() {
            return match e {
                ProfileError::Io { .. } => IO,
                _ => PROFILE,
            };
        }
        if let Some(e) = cause.downcast_ref::<PerfError>() {
            return match e {
                PerfError::Io { .. } => IO,
                _ => FORMAT,
            };
        }
        if cause.is::<std::io::Error>() {
            return IO;
        }
    }
    INTERNAL
}

//! ICE key and nonce registers.
//!
//! Loading is crate-private: outside this crate the only way to arm the
//! registers is [`crate::keys::Enclave::unseal_and_provision`].

use crate::crypto::{LineCipher, NonceBase, SessionKey};
use zeroize::Zeroize;

#[derive(Debug)]
pub struct IceRegisters {
    key: SessionKey,
    nonce: NonceBase,
    loads: u64,
}

impl Default for IceRegisters {
    fn default() -> Self {
        Self::new()
    }
}

impl IceRegisters {
    /// Power-on state: key register zero and not live.
    pub fn new() -> Self {
        let mut key = SessionKey::from_bytes([0; 32]);
        key.clear();
        Self {
            key,
            nonce: NonceBase::default(),
            loads: 0,
        }
    }

    pub(crate) fn load(&mut self, key: SessionKey, nonce: NonceBase) {
        self.key = key;
        self.nonce = nonce;
        self.loads += 1;
    }

    pub fn is_provisioned(&self) -> bool {
        self.key.is_live()
    }

    pub fn clear(&mut self) {
        self.key.clear();
        self.nonce.0.zeroize();
    }

    /// Raw key register contents; all zero once cleared.
    pub fn key_register(&self) -> &[u8; 32] {
        self.key.raw_bytes()
    }

    pub fn nonce_register(&self) -> NonceBase {
        self.nonce
    }

    /// Number of successful provisioning loads since power-on.
    pub fn load_count(&self) -> u64 {
        self.loads
    }

    /// Expanded cipher for the armed key, or `None` when unprovisioned.
    pub fn cipher(&self) -> Option<LineCipher> {
        LineCipher::new(&self.key, self.nonce).ok()
    }

    #[cfg(test)]
    pub(crate) fn armed_for_test(key: [u8; 32], nonce: NonceBase) -> Self {
        let mut ice = Self::new();
        ice.load(SessionKey::from_bytes(key), nonce);
        ice
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_on_is_unprovisioned() {
        let ice = IceRegisters::new();
        assert!(!ice.is_provisioned());
        assert!(ice.cipher().is_none());
        assert_eq!(ice.key_register(), &[0; 32]);
    }

    #[test]
    fn clear_zeroes_both_registers() {
        let mut ice = IceRegisters::armed_for_test([7; 32], NonceBase([9; 12]));
        assert!(ice.is_provisioned());
        ice.clear();
        assert!(!ice.is_provisioned());
        assert_eq!(ice.key_register(), &[0; 32]);
        assert_eq!(ice.nonce_register(), NonceBase::default());
    }
}

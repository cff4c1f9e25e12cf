//! Device identity, model-key sealing and the enclave that provisions the ICE.
//!
//! A model key travels to the device as a key blob: RSAES-OAEP (SHA-256,
//! MGF1-SHA-256, empty label) under the device public key over the 64-byte
//! payload `k_msk || SHA-256(app certificate)`. The per-model nonce rides
//! alongside in clear; it is unique, not secret.
//!
//! Blob wire format (little-endian):
//!
//! | offset | size          | field            |
//! |--------|---------------|------------------|
//! | 0      | 2             | version (= 1)    |
//! | 2      | 2             | rsa_bits         |
//! | 4      | 12            | iv_base          |
//! | 16     | rsa_bits / 8  | OAEP ciphertext  |

use rand::{CryptoRng, RngCore};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::traits::PublicKeyParts;
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt;
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{NonceBase, SessionKey};
use crate::ice::IceRegisters;

pub const BLOB_VERSION: u16 = 1;
pub const BLOB_HEADER_BYTES: usize = 16;
pub const OAEP_PAYLOAD_BYTES: usize = 64;
pub const SUPPORTED_RSA_BITS: [usize; 2] = [2048, 4096];

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("unsupported RSA key size {0} (expected 2048 or 4096)")]
    UnsupportedKeySize(usize),
    #[error("RSA key generation failed: {0}")]
    KeyGeneration(String),
    #[error("RSA-OAEP encryption failed: {0}")]
    RsaEncryptFailure(String),
    #[error("key blob failed OAEP decoding")]
    OaepDecodeFailure,
    #[error("caller identity does not match the application bound into the blob")]
    AppBindingMismatch,
    #[error("session key already cleared")]
    KeyCleared,
    #[error("malformed key blob: {0}")]
    BlobFormat(String),
    #[error("malformed key encoding: {0}")]
    Encoding(String),
}

/// OAEP-SHA256 with MGF1-SHA256. The label carries the cleartext blob
/// header, so a flipped version, size or IV byte fails decoding like any
/// other tamper.
fn oaep(rsa_bits: u16, iv: &NonceBase) -> Oaep {
    let mut label = format!("tessera-blob:{BLOB_VERSION}:{rsa_bits}:");
    for b in iv.as_bytes() {
        label.push_str(&format!("{b:02x}"));
    }
    Oaep::new_with_label::<Sha256, _>(label)
}

/// Public half of the device identity keypair.
#[derive(Clone, PartialEq, Eq)]
pub struct DevicePublicKey(RsaPublicKey);

impl DevicePublicKey {
    pub fn bits(&self) -> usize {
        self.0.size() * 8
    }

    pub fn modulus_bytes(&self) -> usize {
        self.0.size()
    }

    /// SubjectPublicKeyInfo DER.
    pub fn to_der(&self) -> Result<Vec<u8>, KeyError> {
        self.0
            .to_public_key_der()
            .map(|d| d.as_bytes().to_vec())
            .map_err(|e| KeyError::Encoding(e.to_string()))
    }

    pub fn from_der(der: &[u8]) -> Result<Self, KeyError> {
        let pk = RsaPublicKey::from_public_key_der(der).map_err(|e| KeyError::Encoding(e.to_string()))?;
        if !SUPPORTED_RSA_BITS.contains(&(pk.size() * 8)) {
            return Err(KeyError::UnsupportedKeySize(pk.size() * 8));
        }
        Ok(Self(pk))
    }
}

impl fmt::Debug for DevicePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DevicePublicKey({} bits)", self.bits())
    }
}

/// Opaque code-signing certificate. Only its SHA-256 digest matters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppIdentity {
    pub cert_bytes: Vec<u8>,
}

impl AppIdentity {
    pub fn new(cert_bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            cert_bytes: cert_bytes.into(),
        }
    }

    /// `H_app`, recomputed on every call.
    pub fn h_app(&self) -> [u8; 32] {
        Sha256::digest(&self.cert_bytes).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBlob {
    pub rsa_bits: u16,
    pub iv: NonceBase,
    pub ciphertext: Vec<u8>,
}

impl KeyBlob {
    pub fn encoded_len(&self) -> usize {
        BLOB_HEADER_BYTES + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&self.rsa_bits.to_le_bytes());
        out.extend_from_slice(self.iv.as_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        if bytes.len() < BLOB_HEADER_BYTES {
            return Err(KeyError::BlobFormat(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let version = u16::from_le_bytes([bytes[0], bytes[1]]);
        if version != BLOB_VERSION {
            return Err(KeyError::BlobFormat(format!("unsupported blob version {version}")));
        }
        let rsa_bits = u16::from_le_bytes([bytes[2], bytes[3]]);
        if !SUPPORTED_RSA_BITS.contains(&(rsa_bits as usize)) {
            return Err(KeyError::BlobFormat(format!("unsupported rsa_bits {rsa_bits}")));
        }
        let ct_len = rsa_bits as usize / 8;
        if bytes.len() != BLOB_HEADER_BYTES + ct_len {
            return Err(KeyError::BlobFormat(format!(
                "expected {} bytes, got {}",
                BLOB_HEADER_BYTES + ct_len,
                bytes.len()
            )));
        }
        let mut iv = [0u8; 12];
        iv.copy_from_slice(&bytes[4..16]);
        Ok(Self {
            rsa_bits,
            iv: NonceBase(iv),
            ciphertext: bytes[16..].to_vec(),
        })
    }
}

/// Issued by the enclave on a successful load. Carries no key material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvisionReceipt {
    pub sequence: u64,
    #[serde(serialize_with = "hex_bytes")]
    pub h_app: [u8; 32],
    #[serde(serialize_with = "hex_bytes")]
    pub iv: [u8; 12],
}

pub(crate) fn hex_bytes<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    s.serialize_str(&out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProvisionOutcome {
    Provisioned,
    OaepDecodeFailure,
    AppBindingMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvisionEvent {
    pub sequence: u64,
    pub outcome: ProvisionOutcome,
}

/// The secure enclave. Sole holder of `sk_dev`.
pub struct Enclave {
    sk: RsaPrivateKey,
    log: Vec<ProvisionEvent>,
    secure_world: bool,
    check_app_binding: bool,
    sequence: u64,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("bits", &(self.sk.size() * 8))
            .field("secure_world", &self.secure_world)
            .field("log_len", &self.log.len())
            .finish_non_exhaustive()
    }
}

pub struct DeviceIdentity {
    pub public: DevicePublicKey,
    pub enclave: Enclave,
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn generate_device_identity<R: RngCore + CryptoRng>(bits: usize, rng: &mut R) -> Result<DeviceIdentity, KeyError> {
    if !SUPPORTED_RSA_BITS.contains(&bits) {
        return Err(KeyError::UnsupportedKeySize(bits));
    }
    let sk = RsaPrivateKey::new(rng, bits).map_err(|e| KeyError::KeyGeneration(e.to_string()))?;
    let enclave = Enclave::from_private_key(sk);
    Ok(DeviceIdentity {
        public: enclave.public_key(),
        enclave,
    })
}

pub fn seal_model_key<R: RngCore + CryptoRng>(
    pk: &DevicePublicKey,
    key: &SessionKey,
    app: &AppIdentity,
    iv: NonceBase,
    rng: &mut R,
) -> Result<KeyBlob, KeyError> {
    let k = key.expose().map_err(|_| KeyError::KeyCleared)?;
    let mut payload = Zeroizing::new([0u8; OAEP_PAYLOAD_BYTES]);
    payload[..32].copy_from_slice(k);
    payload[32..].copy_from_slice(&app.h_app());
    // OAEP-SHA256 capacity is k - 2*32 - 2 bytes.
    let capacity = pk.modulus_bytes().saturating_sub(2 * 32 + 2);
    if payload.len() > capacity {
        return Err(KeyError::RsaEncryptFailure(format!(
            "payload of {} bytes exceeds OAEP capacity {capacity}",
            payload.len()
        )));
    }
    let ciphertext =
        pk.0.encrypt(rng, oaep(pk.bits() as u16, &iv), &payload[..])
            .map_err(|e| KeyError::RsaEncryptFailure(e.to_string()))?;
    Ok(KeyBlob {
        rsa_bits: pk.bits() as u16,
        iv,
        ciphertext,
    })
}

impl Enclave {
    fn from_private_key(sk: RsaPrivateKey) -> Self {
        Self {
            sk,
            log: Vec::new(),
            secure_world: true,
            check_app_binding: true,
            sequence: 0,
        }
    }

    pub fn public_key(&self) -> DevicePublicKey {
        DevicePublicKey(RsaPublicKey::from(&self.sk))
    }

    pub fn is_secure_world(&self) -> bool {
        self.secure_world
    }

    pub fn log(&self) -> &[ProvisionEvent] {
        &self.log
    }

    /// Serialized private key standing in for on-die eFuse storage. Only
    /// the simulator's own device state files should ever hold this.
    pub fn to_efuse_bytes(&self) -> Result<Zeroizing<Vec<u8>>, KeyError> {
        let doc = self.sk.to_pkcs8_der().map_err(|e| KeyError::Encoding(e.to_string()))?;
        Ok(Zeroizing::new(doc.as_bytes().to_vec()))
    }

    pub fn from_efuse_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        let sk = RsaPrivateKey::from_pkcs8_der(bytes).map_err(|e| KeyError::Encoding(e.to_string()))?;
        if !SUPPORTED_RSA_BITS.contains(&(sk.size() * 8)) {
            return Err(KeyError::UnsupportedKeySize(sk.size() * 8));
        }
        Ok(Self::from_private_key(sk))
    }

    /// Negative-control enclave that skips the application-binding check.
    /// Exists so the confused-deputy scenario can show what the check buys.
    pub fn without_app_binding_check(mut self) -> Self {
        self.check_app_binding = false;
        self
    }

    fn record(&mut self, outcome: ProvisionOutcome) -> u64 {
        self.sequence += 1;
        self.log.push(ProvisionEvent {
            sequence: self.sequence,
            outcome,
        });
        self.sequence
    }

    /// As [`Self::unseal_and_provision`], from the blob's wire bytes. A blob
    /// that does not even parse is reported as an OAEP failure, so callers
    /// learn nothing about which check rejected it.
    pub fn unseal_bytes_and_provision(
        &mut self,
        blob_bytes: &[u8],
        caller: &AppIdentity,
        ice: &mut IceRegisters,
    ) -> Result<ProvisionReceipt, KeyError> {
        match KeyBlob::from_bytes(blob_bytes) {
            Ok(blob) => self.unseal_and_provision(&blob, caller, ice),
            Err(_) => {
                self.record(ProvisionOutcome::OaepDecodeFailure);
                Err(KeyError::OaepDecodeFailure)
            }
        }
    }

    /// Unseal `blob`, verify the caller, and arm the ICE. On any failure the
    /// ICE registers are left exactly as they were.
    pub fn unseal_and_provision(
        &mut self,
        blob: &KeyBlob,
        caller: &AppIdentity,
        ice: &mut IceRegisters,
    ) -> Result<ProvisionReceipt, KeyError> {
        if blob.ciphertext.len() != self.sk.size() || blob.rsa_bits as usize != self.sk.size() * 8 {
            self.record(ProvisionOutcome::OaepDecodeFailure);
            return Err(KeyError::OaepDecodeFailure);
        }
        let payload =
            match self
                .sk
                .decrypt_blinded(&mut rand::thread_rng(), oaep(blob.rsa_bits, &blob.iv), &blob.ciphertext)
            {
                Ok(p) if p.len() == OAEP_PAYLOAD_BYTES => Zeroizing::new(p),
                _ => {
                    self.record(ProvisionOutcome::OaepDecodeFailure);
                    return Err(KeyError::OaepDecodeFailure);
                }
            };
        let mut sealed_hash = [0u8; 32];
        sealed_hash.copy_from_slice(&payload[32..]);
        if self.check_app_binding && !bool::from(sealed_hash.ct_eq(&caller.h_app())) {
            self.record(ProvisionOutcome::AppBindingMismatch);
            return Err(KeyError::AppBindingMismatch);
        }
        let mut key = [0u8; 32];
        key.copy_from_slice(&payload[..32]);
        ice.load(SessionKey::from_bytes(key), blob.iv);
        zeroize::Zeroize::zeroize(&mut key);
        let sequence = self.record(ProvisionOutcome::Provisioned);
        Ok(ProvisionReceipt {
            sequence,
            h_app: sealed_hash,
            iv: blob.iv.0,
        })
    }
}

/// Names of the artifacts in which the raw 32-byte key occurs anywhere.
pub fn audit_key_confinement<'a>(key: &[u8; 32], artifacts: &[(&'a str, &[u8])]) -> Vec<&'a str> {
    artifacts
        .iter()
        .filter(|(_, bytes)| bytes.windows(32).any(|w| w == key))
        .map(|(name, _)| *name)
        .collect()
}

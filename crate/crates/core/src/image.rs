//! Encrypted weight image format.
//!
//! All integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `TSRA` |
//! | 4 | 2 | version (1) |
//! | 6 | 2 | flags (bit 0: fixed-counter demo; others zero) |
//! | 8 | 8 | base_addr |
//! | 16 | 8 | plaintext_len |
//! | 24 | 32 | h_app |
//! | 56 | 2 | blob_len |
//! | 58 | blob_len | key blob |
//!
//! then zero padding to a 64-byte boundary, then `ceil(plaintext_len / 64)`
//! ciphertext lines. Counters come from the absolute load address
//! `base_addr + offset`.

use rand::{CryptoRng, RngCore};
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

use crate::crypto::{xor_line, CryptoError, LineCipher, NonceBase, SessionKey, LINE_BYTES};
use crate::fabric::DramImage;
use crate::keys::{hex_bytes, seal_model_key, AppIdentity, DevicePublicKey, KeyBlob, KeyError};
use crate::pipeline::TileDescriptor;

const LINE: u64 = LINE_BYTES as u64;

pub const IMAGE_MAGIC: [u8; 4] = *b"TSRA";
pub const IMAGE_VERSION: u16 = 1;
pub const FLAG_FIXED_COUNTER: u16 = 1;
pub const FIXED_HEADER_BYTES: usize = 58;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("not a weight image (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported image version {0}")]
    BadVersion(u16),
    #[error("image truncated: need {need} bytes, have {have}")]
    TruncatedFile { need: usize, have: usize },
    #[error("reserved flag bits set: {0:#06x}")]
    ReservedFlags(u16),
    #[error("image length {actual} does not match header ({expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("base address {0:#x} is not 64-byte aligned")]
    Misaligned(u64),
    #[error("fixed-counter images are insecure; pass the insecure-demo override to build one")]
    InsecureDemoRefused,
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PackOptions {
    pub base_addr: u64,
    /// Encrypt every line under the same keystream. Attack demonstrations only.
    pub fixed_counter: bool,
    /// Required alongside `fixed_counter`.
    pub insecure_demo: bool,
}

impl PackOptions {
    pub fn at(base_addr: u64) -> Self {
        Self {
            base_addr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageHeader {
    pub version: u16,
    pub flags: u16,
    pub base_addr: u64,
    pub plaintext_len: u64,
    #[serde(serialize_with = "hex_bytes")]
    pub h_app: [u8; 32],
    pub blob_len: u16,
}

impl ImageHeader {
    pub fn fixed_counter(&self) -> bool {
        self.flags & FLAG_FIXED_COUNTER != 0
    }

    pub fn ciphertext_offset(&self) -> usize {
        (FIXED_HEADER_BYTES + self.blob_len as usize).next_multiple_of(LINE_BYTES)
    }

    pub fn ciphertext_lines(&self) -> u64 {
        self.plaintext_len.div_ceil(LINE)
    }

    pub fn file_len(&self) -> usize {
        // Saturating: the length fields come straight from untrusted files.
        let body = usize::try_from(self.ciphertext_lines().saturating_mul(LINE)).unwrap_or(usize::MAX);
        self.ciphertext_offset().saturating_add(body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightImage {
    pub header: ImageHeader,
    pub blob: KeyBlob,
    pub ciphertext: Vec<u8>,
}

/// What `inspect` reports. No key material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InspectReport {
    #[serde(flatten)]
    pub header: ImageHeader,
    pub fixed_counter: bool,
    pub rsa_bits: u16,
    pub ciphertext_offset: usize,
    pub ciphertext_lines: u64,
    pub file_len: usize,
}

/// Encrypt `plaintext` under a fresh session key and nonce, sealed to `pk`
/// and bound to `app`. The session key is dropped (and zeroized) on return.
pub fn pack<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    pk: &DevicePublicKey,
    app: &AppIdentity,
    opts: PackOptions,
    rng: &mut R,
) -> Result<WeightImage, ImageError> {
    if opts.fixed_counter && !opts.insecure_demo {
        return Err(ImageError::InsecureDemoRefused);
    }
    if opts.base_addr % LINE != 0 {
        return Err(ImageError::Misaligned(opts.base_addr));
    }
    let key = SessionKey::generate(rng);
    let iv = NonceBase::generate(rng);
    let blob = seal_model_key(pk, &key, app, iv, rng)?;
    let cipher = LineCipher::new(&key, iv)?;
    drop(key);

    let mut ciphertext = Vec::with_capacity(plaintext.len().next_multiple_of(LINE_BYTES));
    for (i, chunk) in plaintext.chunks(LINE_BYTES).enumerate() {
        let mut line = [0u8; LINE_BYTES];
        line[..chunk.len()].copy_from_slice(chunk);
        let ct = if opts.fixed_counter {
            xor_line(&line, &cipher.fixed_keystream())
        } else {
            cipher.apply(opts.base_addr + i as u64 * LINE, &line)?
        };
        ciphertext.extend_from_slice(&ct);
    }

    let blob_len = blob.encoded_len() as u16;
    Ok(WeightImage {
        header: ImageHeader {
            version: IMAGE_VERSION,
            flags: if opts.fixed_counter { FLAG_FIXED_COUNTER } else { 0 },
            base_addr: opts.base_addr,
            plaintext_len: plaintext.len() as u64,
            h_app: app.h_app(),
            blob_len,
        },
        blob,
        ciphertext,
    })
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes(b[at..at + 2].try_into().expect("2 bytes"))
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn need(bytes: &[u8], n: usize) -> Result<(), ImageError> {
    if bytes.len() < n {
        return Err(ImageError::TruncatedFile {
            need: n,
            have: bytes.len(),
        });
    }
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<ImageHeader, ImageError> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != IMAGE_MAGIC {
        return Err(ImageError::BadMagic(magic));
    }
    need(bytes, 6)?;
    let version = le_u16(bytes, 4);
    if version != IMAGE_VERSION {
        return Err(ImageError::BadVersion(version));
    }
    need(bytes, FIXED_HEADER_BYTES)?;
    let flags = le_u16(bytes, 6);
    if flags & !FLAG_FIXED_COUNTER != 0 {
        return Err(ImageError::ReservedFlags(flags));
    }
    let header = ImageHeader {
        version,
        flags,
        base_addr: le_u64(bytes, 8),
        plaintext_len: le_u64(bytes, 16),
        h_app: bytes[24..56].try_into().expect("32 bytes"),
        blob_len: le_u16(bytes, 56),
    };
    need(bytes, header.file_len())?;
    if bytes.len() != header.file_len() {
        return Err(ImageError::LengthMismatch {
            expected: header.file_len(),
            actual: bytes.len(),
        });
    }
    Ok(header)
}

impl WeightImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.file_len());
        out.extend_from_slice(&IMAGE_MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.flags.to_le_bytes());
        out.extend_from_slice(&h.base_addr.to_le_bytes());
        out.extend_from_slice(&h.plaintext_len.to_le_bytes());
        out.extend_from_slice(&h.h_app);
        out.extend_from_slice(&h.blob_len.to_le_bytes());
        out.extend_from_slice(&self.blob.to_bytes());
        out.resize(h.ciphertext_offset(), 0);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let header = parse_header(bytes)?;
        let blob_end = FIXED_HEADER_BYTES + header.blob_len as usize;
        let blob = KeyBlob::from_bytes(&bytes[FIXED_HEADER_BYTES..blob_end])?;
        let ciphertext = bytes[header.ciphertext_offset()..].to_vec();
        Ok(Self {
            header,
            blob,
            ciphertext,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_from(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// The ciphertext as the host loader places it in DRAM.
    pub fn dram_image(&self) -> DramImage {
        DramImage {
            base_addr: self.header.base_addr,
            contents: self.ciphertext.clone(),
            logical_len: self.header.plaintext_len,
        }
    }

    /// Split the image into tiles of `tile_bytes` (rounded up to whole lines);
    /// the last tile takes the remainder. Delivered in order, the tiles
    /// reproduce the plaintext exactly.
    pub fn tiles(&self, tile_bytes: u64) -> Vec<TileDescriptor> {
        let stride = tile_bytes.max(1).next_multiple_of(LINE);
        let total = self.header.plaintext_len;
        (0..total.div_ceil(stride))
            .map(|i| {
                let off = i * stride;
                TileDescriptor::new(self.header.base_addr + off, stride.min(total - off), format!("tile{i}"))
            })
            .collect()
    }
}

/// Decode the header of an image file without touching key material.
pub fn inspect(bytes: &[u8]) -> Result<InspectReport, ImageError> {
    let image = WeightImage::from_bytes(bytes)?;
    let h = image.header;
    Ok(InspectReport {
        fixed_counter: h.fixed_counter(),
        rsa_bits: image.blob.rsa_bits,
        ciphertext_offset: h.ciphertext_offset(),
        ciphertext_lines: h.ciphertext_lines(),
        file_len: h.file_len(),
        header: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::decrypt_line;
    use crate::crypto::CacheLine;
    use crate::ice::IceRegisters;
    use crate::keys::{audit_key_confinement, test_support};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const BASE: u64 = 0x8000_0000;

    fn app() -> AppIdentity {
        AppIdentity::new(b"resnet-runner".to_vec())
    }

    fn packed(plain: &[u8], seed: u64) -> WeightImage {
        let pk = test_support::enclave(0).public_key();
        pack(
            plain,
            &pk,
            &app(),
            PackOptions::at(BASE),
            &mut ChaCha20Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn layout_and_round_trip() {
        let img = packed(&[7u8; 100], 1);
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..4], b"TSRA");
        assert_eq!(le_u16(&bytes, 4), 1);
        assert_eq!(le_u64(&bytes, 8), BASE);
        assert_eq!(le_u64(&bytes, 16), 100);
        assert_eq!(&bytes[24..56], &app().h_app());
        assert_eq!(le_u16(&bytes, 56), 16 + 256);
        let off = img.header.ciphertext_offset();
        assert_eq!(off, 384);
        assert!(bytes[FIXED_HEADER_BYTES + 272..off].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), off + 128);
        assert_eq!(WeightImage::from_bytes(&bytes).unwrap(), img);

        let r = inspect(&bytes).unwrap();
        assert_eq!(
            (r.header.version, r.ciphertext_lines, r.header.plaintext_len),
            (1, 2, 100)
        );
        assert_eq!(r.file_len, bytes.len());
    }

    #[test]
    fn decrypts_under_unsealed_key() {
        let plain: Vec<u8> = (0..300u32).map(|i| (i * 13) as u8).collect();
        let img = packed(&plain, 2);
        let mut enclave = test_support::enclave(0);
        let mut ice = IceRegisters::new();
        enclave.unseal_and_provision(&img.blob, &app(), &mut ice).unwrap();
        let key = SessionKey::from_bytes(*ice.key_register());
        let mut out = Vec::new();
        for (i, ct) in img.ciphertext.chunks(64).enumerate() {
            let line = CacheLine::new(BASE + 64 * i as u64, ct.try_into().unwrap()).unwrap();
            out.extend_from_slice(&decrypt_line(&key, &ice.nonce_register(), &line).unwrap());
        }
        assert_eq!(&out[..300], &plain[..]);
        assert!(out[300..].iter().all(|&b| b == 0));
        assert!(audit_key_confinement(ice.key_register(), &[("image", &img.to_bytes())]).is_empty());
    }

    #[test]
    fn fresh_nonce_per_pack() {
        let a = packed(&[0u8; 256], 3);
        let b = packed(&[0u8; 256], 4);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.blob.iv, b.blob.iv);
    }

    #[test]
    fn fixed_counter_requires_override() {
        let pk = test_support::enclave(0).public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let opts = PackOptions {
            base_addr: BASE,
            fixed_counter: true,
            insecure_demo: false,
        };
        assert!(matches!(
            pack(&[1; 64], &pk, &app(), opts, &mut rng),
            Err(ImageError::InsecureDemoRefused)
        ));
        let img = pack(
            &[1; 128],
            &pk,
            &app(),
            PackOptions {
                insecure_demo: true,
                ..opts
            },
            &mut rng,
        )
        .unwrap();
        assert!(img.header.fixed_counter());
        assert_eq!(img.ciphertext[..64], img.ciphertext[64..]);
    }

    #[test]
    fn misaligned_base_rejected() {
        let pk = test_support::enclave(0).public_key();
        let r = pack(
            &[1; 64],
            &pk,
            &app(),
            PackOptions::at(BASE + 4),
            &mut ChaCha20Rng::seed_from_u64(6),
        );
        assert!(matches!(r, Err(ImageError::Misaligned(_))));
    }

    #[test]
    fn malformed_files() {
        let bytes = packed(&[9u8; 64], 7).to_bytes();
        assert!(matches!(
            inspect(&bytes[..bytes.len() - 1]),
            Err(ImageError::TruncatedFile { .. })
        ));
        assert!(matches!(inspect(&bytes[..20]), Err(ImageError::TruncatedFile { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(inspect(&bad), Err(ImageError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(inspect(&bad), Err(ImageError::BadVersion(2))));
        let mut bad = bytes.clone();
        bad[6] = 0x02;
        assert!(matches!(inspect(&bad), Err(ImageError::ReservedFlags(2))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(inspect(&long), Err(ImageError::LengthMismatch { .. })));
    }

    #[test]
    fn tiles_cover_plaintext() {
        let img = packed(&[3u8; 1000], 8);
        let tiles = img.tiles(300);
        assert_eq!(tiles.iter().map(|t| t.len).collect::<Vec<_>>(), [320, 320, 320, 40]);
        assert_eq!(tiles[1].base, BASE + 320);
        assert_eq!(tiles.iter().map(|t| t.len).sum::<u64>(), 1000);
        assert!(tiles.iter().all(|t| t.base % 64 == 0));
    }
}

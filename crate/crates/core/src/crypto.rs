//! Cache-line AES-256-CTR with address-derived counters.
//!
//! Every 64-byte line at physical address `P` is covered by four 16-byte AES
//! blocks. Block `j` of the line uses the counter
//!
//! ```text
//! nonce (12 bytes) || be32(4 * floor(P / 64) + j)
//! ```
//!
//! so the 32-bit index field counts 16-byte blocks, not lines. Counting lines
//! and bumping the index per sub-block would hand line `n`'s blocks 1..3 the
//! same counters as line `n + 1`'s blocks 0..2. With block indexing the
//! addressable range is `2^32 * 16 B = 64 GiB`.
//!
//! Keystream generation depends only on `(key, nonce, address)` and never on
//! the data, which is what lets the engine run AES in the shadow of the DRAM
//! fetch.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes256;
use std::fmt;
use thiserror::Error;
use zeroize::Zeroize;

/// Cache-line size in bytes.
pub const LINE_BYTES: usize = 64;
/// AES block size in bytes.
pub const AES_BLOCK_BYTES: usize = 16;
/// AES blocks per cache line.
pub const BLOCKS_PER_LINE: u64 = (LINE_BYTES / AES_BLOCK_BYTES) as u64;
/// First byte address whose counter index no longer fits in 32 bits.
pub const ADDRESSABLE_LIMIT: u64 = (1u64 << 32) * AES_BLOCK_BYTES as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("address {addr:#x} is not aligned to a 64-byte line")]
    Misaligned { addr: u64 },
    #[error("address {addr:#x} exceeds the 32-bit block counter range")]
    CounterOverflow { addr: u64 },
    #[error("session key has been cleared")]
    KeyCleared,
}

/// 256-bit model session key.
///
/// `clear` zeroes the bytes and poisons the key; every key-consuming
/// operation afterwards fails with [`CryptoError::KeyCleared`].
#[derive(Clone)]
pub struct SessionKey {
    bytes: [u8; 32],
    live: bool,
}

impl SessionKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self { bytes, live: true }
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_bytes(bytes)
    }

    /// Key material, or `KeyCleared` once zeroized.
    pub fn expose(&self) -> Result<&[u8; 32], CryptoError> {
        if self.live {
            Ok(&self.bytes)
        } else {
            Err(CryptoError::KeyCleared)
        }
    }

    /// Raw register contents, including after clearing (then all zero).
    pub fn raw_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    pub fn is_live(&self) -> bool {
        self.live
    }

    pub fn clear(&mut self) {
        self.bytes.zeroize();
        self.live = false;
    }
}

impl Drop for SessionKey {
    fn drop(&mut self) {
        self.bytes.zeroize();
    }
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("live", &self.live)
            .finish_non_exhaustive()
    }
}

/// 96-bit per-model nonce (`IV_base`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NonceBase(pub [u8; 12]);

impl NonceBase {
    pub fn generate<R: rand::RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 12];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 12] {
        &self.0
    }
}

impl fmt::Debug for NonceBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NonceBase(")?;
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// A 64-byte line tagged with its line-aligned physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheLine {
    addr: u64,
    pub data: [u8; LINE_BYTES],
}

impl CacheLine {
    pub fn new(addr: u64, data: [u8; LINE_BYTES]) -> Result<Self, CryptoError> {
        check_aligned(addr)?;
        Ok(Self { addr, data })
    }

    pub fn addr(&self) -> u64 {
        self.addr
    }
}

/// One 128-bit AES input: nonce in bytes 0..12, big-endian block index in 12..16.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CounterBlock(pub [u8; 16]);

impl CounterBlock {
    pub fn new(nonce: &NonceBase, index: u32) -> Self {
        let mut bytes = [0u8; 16];
        bytes[..12].copy_from_slice(&nonce.0);
        bytes[12..].copy_from_slice(&index.to_be_bytes());
        Self(bytes)
    }

    pub fn index(&self) -> u32 {
        u32::from_be_bytes([self.0[12], self.0[13], self.0[14], self.0[15]])
    }

    pub fn nonce(&self) -> NonceBase {
        let mut n = [0u8; 12];
        n.copy_from_slice(&self.0[..12]);
        NonceBase(n)
    }
}

impl fmt::Debug for CounterBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CounterBlock({:?}, {})", self.nonce(), self.index())
    }
}

fn check_aligned(addr: u64) -> Result<(), CryptoError> {
    if addr % LINE_BYTES as u64 != 0 {
        return Err(CryptoError::Misaligned { addr });
    }
    Ok(())
}

/// Index of the first 16-byte block of the line at `addr`.
fn first_block_index(addr: u64) -> Result<u32, CryptoError> {
    check_aligned(addr)?;
    let first = (addr / LINE_BYTES as u64) * BLOCKS_PER_LINE;
    let last = first + BLOCKS_PER_LINE - 1;
    if last > u32::MAX as u64 {
        return Err(CryptoError::CounterOverflow { addr });
    }
    Ok(first as u32)
}

/// The four counter blocks of the line at `addr`.
pub fn derive_counters(iv: &NonceBase, addr: u64) -> Result<[CounterBlock; 4], CryptoError> {
    let first = first_block_index(addr)?;
    Ok(std::array::from_fn(|j| CounterBlock::new(iv, first + j as u32)))
}

/// An expanded AES-256 key bound to a model nonce.
///
/// Free functions below rebuild this per call; streaming code should hold
/// one across lines.
#[derive(Clone)]
pub struct LineCipher {
    aes: Aes256,
    iv: NonceBase,
}

impl LineCipher {
    pub fn new(key: &SessionKey, iv: NonceBase) -> Result<Self, CryptoError> {
        let aes = Aes256::new(GenericArray::from_slice(key.expose()?));
        Ok(Self { aes, iv })
    }

    pub fn nonce(&self) -> NonceBase {
        self.iv
    }

    fn encrypt_counters(&self, counters: &[CounterBlock; 4]) -> [u8; LINE_BYTES] {
        let mut blocks = counters.map(|c| GenericArray::from(c.0));
        self.aes.encrypt_blocks(&mut blocks);
        let mut out = [0u8; LINE_BYTES];
        for (chunk, block) in out.chunks_exact_mut(AES_BLOCK_BYTES).zip(blocks.iter()) {
            chunk.copy_from_slice(block);
        }
        out
    }

    pub fn keystream(&self, addr: u64) -> Result<[u8; LINE_BYTES], CryptoError> {
        let counters = derive_counters(&self.iv, addr)?;
        Ok(self.encrypt_counters(&counters))
    }

    /// Keystream for a fixed block index regardless of address. Only the
    /// fixed-counter demonstration uses this; it reuses keystream by design.
    pub fn fixed_keystream(&self) -> [u8; LINE_BYTES] {
        let counters = std::array::from_fn(|j| CounterBlock::new(&self.iv, j as u32));
        self.encrypt_counters(&counters)
    }

    pub fn apply(&self, addr: u64, data: &[u8; LINE_BYTES]) -> Result<[u8; LINE_BYTES], CryptoError> {
        let ks = self.keystream(addr)?;
        Ok(xor_line(data, &ks))
    }
}

impl fmt::Debug for LineCipher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LineCipher")
            .field("iv", &self.iv)
            .finish_non_exhaustive()
    }
}

pub fn xor_line(a: &[u8; LINE_BYTES], b: &[u8; LINE_BYTES]) -> [u8; LINE_BYTES] {
    std::array::from_fn(|i| a[i] ^ b[i])
}

/// 64 bytes of keystream for the line at `addr`.
pub fn line_keystream(key: &SessionKey, iv: &NonceBase, addr: u64) -> Result<[u8; LINE_BYTES], CryptoError> {
    // Validate the address before paying for key expansion.
    first_block_index(addr)?;
    LineCipher::new(key, *iv)?.keystream(addr)
}

pub fn decrypt_line(key: &SessionKey, iv: &NonceBase, line: &CacheLine) -> Result<[u8; LINE_BYTES], CryptoError> {
    Ok(xor_line(&line.data, &line_keystream(key, iv, line.addr)?))
}

pub fn encrypt_line(key: &SessionKey, iv: &NonceBase, line: &CacheLine) -> Result<[u8; LINE_BYTES], CryptoError> {
    // CTR is an involution.
    decrypt_line(key, iv, line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    // Frozen from OpenSSL (python `cryptography`, AES-256 ECB/CTR).
    const ZERO_KEY_ZERO_BLOCK: &str = "dc95c078a2408989ad48a21492842087";
    const FIPS197_C3_CT: &str = "8ea2b7ca516745bfeafc49904b496089";
    const SEQ_KEY_LINE0: &str = "b7a435ce454463b760dc82c838468a115c699625af4b93a0f8220a2a6119c5d0\
                                 e6187c2d45cb02bf626587d3077ac0de70ac591092b7426c9c0e26867fab7501";
    const SEQ_KEY_LINE_80000040: &str = "21fe4c4b3f276cc89522254c96b80dd69494fd592e9d07270a0b0195d245f679\
                                         c07c16671f6fb74855ad8896cb5c68e6c1aba71b1afab2de95f7802604e094a0";

    fn seq_key() -> SessionKey {
        SessionKey::from_bytes(std::array::from_fn(|i| i as u8))
    }

    fn seq_iv() -> NonceBase {
        NonceBase(std::array::from_fn(|i| 0xa0 + i as u8))
    }

    #[test]
    fn zero_iv_zero_addr_counters() {
        let c = derive_counters(&NonceBase::default(), 0).unwrap();
        assert_eq!(c.map(|c| c.index()), [0, 1, 2, 3]);
        assert_eq!(c[0].0, [0u8; 16]);
    }

    #[test]
    fn second_line_counters() {
        let c = derive_counters(&NonceBase::default(), 64).unwrap();
        assert_eq!(c.map(|c| c.index()), [4, 5, 6, 7]);
    }

    #[test]
    fn counter_layout_is_nonce_then_big_endian_index() {
        let iv = seq_iv();
        let c = derive_counters(&iv, 0x1234_5640).unwrap();
        assert_eq!(&c[0].0[..12], iv.as_bytes());
        let idx = (0x1234_5640u64 / 64 * 4) as u32;
        assert_eq!(&c[0].0[12..], &idx.to_be_bytes());
        assert_eq!(c[3].index(), idx + 3);
    }

    #[test]
    fn counter_range_boundaries() {
        let iv = NonceBase::default();
        assert_eq!(
            derive_counters(&iv, 1 << 36),
            Err(CryptoError::CounterOverflow { addr: 1 << 36 })
        );
        let last = (1u64 << 36) - 64;
        let c = derive_counters(&iv, last).unwrap();
        assert_eq!(c[3].index(), u32::MAX);
        assert_eq!(derive_counters(&iv, 65), Err(CryptoError::Misaligned { addr: 65 }));
    }

    #[test]
    fn aes_reference_vectors() {
        let ks = line_keystream(&SessionKey::from_bytes([0; 32]), &NonceBase::default(), 0).unwrap();
        assert_eq!(hex::encode(&ks[..16]), ZERO_KEY_ZERO_BLOCK);

        let cipher = Aes256::new(GenericArray::from_slice(seq_key().expose().unwrap()));
        let mut block = GenericArray::clone_from_slice(&hex::decode("00112233445566778899aabbccddeeff").unwrap());
        cipher.encrypt_block(&mut block);
        assert_eq!(hex::encode(block), FIPS197_C3_CT);
    }

    #[test]
    fn keystream_matches_standard_ctr() {
        let key = seq_key();
        let iv = seq_iv();
        assert_eq!(hex::encode(line_keystream(&key, &iv, 0).unwrap()), SEQ_KEY_LINE0);
        assert_eq!(
            hex::encode(line_keystream(&key, &iv, 0x8000_0040).unwrap()),
            SEQ_KEY_LINE_80000040
        );
    }

    #[test]
    fn sub_block_keystream_is_counter_index_one() {
        let key = seq_key();
        let iv = seq_iv();
        let ks = line_keystream(&key, &iv, 0).unwrap();
        let aes = Aes256::new(GenericArray::from_slice(key.expose().unwrap()));
        let mut b = GenericArray::from(CounterBlock::new(&iv, 1).0);
        aes.encrypt_block(&mut b);
        assert_eq!(&ks[16..32], b.as_slice());
    }

    #[test]
    fn ciphertext_equal_to_keystream_decrypts_to_zero() {
        let key = seq_key();
        let iv = seq_iv();
        let ks = line_keystream(&key, &iv, 128).unwrap();
        let pt = decrypt_line(&key, &iv, &CacheLine::new(128, ks).unwrap()).unwrap();
        assert_eq!(pt, [0u8; 64]);
        let ct = encrypt_line(&key, &iv, &CacheLine::new(128, [0u8; 64]).unwrap()).unwrap();
        assert_eq!(ct, ks);
    }

    #[test]
    fn identical_plaintext_distinct_ciphertext_over_small_range() {
        let key = seq_key();
        let iv = seq_iv();
        let pt = [0x5au8; 64];
        let mut seen = HashSet::new();
        for line in 0..4096u64 {
            let ct = encrypt_line(&key, &iv, &CacheLine::new(line * 64, pt).unwrap()).unwrap();
            assert!(seen.insert(ct), "ciphertext repeated at line {line}");
        }
    }

    #[test]
    fn cleared_key_is_unusable_and_zero() {
        let mut key = seq_key();
        key.clear();
        assert_eq!(key.raw_bytes(), &[0u8; 32]);
        assert!(!key.is_live());
        assert_eq!(line_keystream(&key, &seq_iv(), 0), Err(CryptoError::KeyCleared));
        assert_eq!(
            decrypt_line(&key, &seq_iv(), &CacheLine::new(0, [0; 64]).unwrap()),
            Err(CryptoError::KeyCleared)
        );
        assert!(LineCipher::new(&key, seq_iv()).is_err());
    }

    #[test]
    fn debug_output_hides_key() {
        let s = format!("{:?}", seq_key());
        assert!(!s.contains("31"), "{s}");
    }

    #[test]
    fn cache_line_rejects_misaligned() {
        assert_eq!(CacheLine::new(32, [0; 64]), Err(CryptoError::Misaligned { addr: 32 }));
    }

    proptest! {
        #[test]
        fn round_trip(key in any::<[u8; 32]>(), iv in any::<[u8; 12]>(), line in 0u64..(1 << 30), data in any::<[u8; 32]>()) {
            let key = SessionKey::from_bytes(key);
            let iv = NonceBase(iv);
            let mut pt = [0u8; 64];
            pt[..32].copy_from_slice(&data);
            pt[32..].copy_from_slice(&data);
            let addr = line * 64;
            let ct = encrypt_line(&key, &iv, &CacheLine::new(addr, pt).unwrap()).unwrap();
            let back = decrypt_line(&key, &iv, &CacheLine::new(addr, ct).unwrap()).unwrap();
            prop_assert_eq!(back, pt);
        }

        #[test]
        fn xor_linearity_same_address(c1 in any::<[u8; 32]>(), c2 in any::<[u8; 32]>(), line in 0u64..(1 << 20)) {
            let key = seq_key();
            let iv = seq_iv();
            let addr = line * 64;
            let widen = |h: [u8; 32]| -> [u8; 64] { std::array::from_fn(|i| h[i % 32] ^ (i as u8)) };
            let (c1, c2) = (widen(c1), widen(c2));
            let p1 = decrypt_line(&key, &iv, &CacheLine::new(addr, c1).unwrap()).unwrap();
            let p2 = decrypt_line(&key, &iv, &CacheLine::new(addr, c2).unwrap()).unwrap();
            prop_assert_eq!(xor_line(&p1, &p2), xor_line(&c1, &c2));
        }

        #[test]
        fn distinct_lines_have_disjoint_indices(a in 0u64..(1 << 30), b in 0u64..(1 << 30)) {
            prop_assume!(a != b);
            let iv = NonceBase::default();
            let ca = derive_counters(&iv, a * 64).unwrap();
            let cb = derive_counters(&iv, b * 64).unwrap();
            for x in &ca {
                prop_assert!(!cb.contains(x));
            }
        }
    }
}

//! Authenticated-encryption envelopes for relayed aggregates.
//!
//! AES-128-GCM with a 96-bit nonce built from `(round, step, sender counter)`
//! and a 128-bit tag. The unordered client pair that owns the key is bound as
//! associated data, so a valid envelope cannot be replayed on another link.
//! [`EnvelopeSealer`] keeps the per-key nonce registry; reuse is a hard error.

use std::collections::HashSet;

use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit as BlockKeyInit};
use aes::Aes128;
use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes128Gcm, Nonce as GcmNonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::topology::ClientId;

pub const KEY_BYTES: usize = 16;
pub const NONCE_BYTES: usize = 12;
pub const TAG_BYTES: usize = 16;
const TIMESTAMP_BYTES: usize = 8 + 4 + 8;

/// Default acceptance window for wall-clock skew, in simulated milliseconds.
pub const DEFAULT_WINDOW_MS: u64 = 30_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("unsupported key length {0} bits (only 128 is supported)")]
    UnsupportedKeyLength(u32),
    #[error("nonce reused under the same key")]
    NonceReuse,
    #[error("authentication failed")]
    AuthFailure,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AeKey(pub [u8; KEY_BYTES]);

impl std::fmt::Debug for AeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AeKey(..)")
    }
}

impl AeKey {
    pub fn bytes(&self) -> &[u8; KEY_BYTES] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }
}

/// `AE.Gen(1^κ)`.
pub fn ae_gen(kappa_bits: u32, seed: u64) -> Result<AeKey, CryptoError> {
    if kappa_bits != 128 {
        return Err(CryptoError::UnsupportedKeyLength(kappa_bits));
    }
    let mut key = [0u8; KEY_BYTES];
    rng::stream(seed, &[0xAE]).fill_bytes(&mut key);
    Ok(AeKey(key))
}

/// Logical `(round, step)` plus simulated wall-clock milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamp {
    pub round: u64,
    pub step: u32,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StampedPayload {
    pub payload: Vec<u8>,
    pub timestamp: Timestamp,
}

impl StampedPayload {
    /// `payload ‖ round(u64 LE) ‖ step(u32 LE) ‖ wall_ms(u64 LE)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() + TIMESTAMP_BYTES);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.timestamp.round.to_le_bytes());
        out.extend_from_slice(&self.timestamp.step.to_le_bytes());
        out.extend_from_slice(&self.timestamp.wall_ms.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let split = bytes.len().checked_sub(TIMESTAMP_BYTES)?;
        let (payload, ts) = bytes.split_at(split);
        Some(Self {
            payload: payload.to_vec(),
            timestamp: Timestamp {
                round: u64::from_le_bytes(ts[0..8].try_into().ok()?),
                step: u32::from_le_bytes(ts[8..12].try_into().ok()?),
                wall_ms: u64::from_le_bytes(ts[12..20].try_into().ok()?),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Nonce(pub [u8; NONCE_BYTES]);

impl Nonce {
    /// `round ‖ step ‖ sender counter`, each truncated to 32 bits LE.
    pub fn from_parts(round: u64, step: u32, sender_counter: u32) -> Self {
        let mut n = [0u8; NONCE_BYTES];
        n[0..4].copy_from_slice(&(round as u32).to_le_bytes());
        n[4..8].copy_from_slice(&step.to_le_bytes());
        n[8..12].copy_from_slice(&sender_counter.to_le_bytes());
        Nonce(n)
    }
}

/// `(Y ‖ σ)` plus the nonce and the key-pair hint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_BYTES],
    pub nonce: Nonce,
    pub key_pair: (ClientId, ClientId),
}

impl Envelope {
    /// On-the-wire size: nonce, ciphertext, tag and the two 32-bit ids.
    pub fn wire_len(&self) -> usize {
        NONCE_BYTES + self.ciphertext.len() + TAG_BYTES + 8
    }

    /// Number of bits in `Y ‖ σ`.
    pub fn sealed_bits(&self) -> usize {
        (self.ciphertext.len() + TAG_BYTES) * 8
    }

    /// Flips bit `i` of `Y ‖ σ`.
    pub fn flip_bit(&mut self, i: usize) {
        let byte = i / 8;
        let mask = 1u8 << (i % 8);
        if byte < self.ciphertext.len() {
            self.ciphertext[byte] ^= mask;
        } else {
            self.tag[byte - self.ciphertext.len()] ^= mask;
        }
    }
}

fn ordered(pair: (ClientId, ClientId)) -> (ClientId, ClientId) {
    if pair.0 <= pair.1 {
        pair
    } else {
        (pair.1, pair.0)
    }
}

fn associated_data(pair: (ClientId, ClientId)) -> [u8; 8] {
    let (a, b) = ordered(pair);
    let mut ad = [0u8; 8];
    ad[..4].copy_from_slice(&a.0.to_le_bytes());
    ad[4..].copy_from_slice(&b.0.to_le_bytes());
    ad
}

/// Encrypting side of the AE service; owns the nonce registry.
#[derive(Debug, Default)]
pub struct EnvelopeSealer {
    used: HashSet<([u8; KEY_BYTES], [u8; NONCE_BYTES])>,
}

impl EnvelopeSealer {
    pub fn new() -> Self {
        Self::default()
    }

    /// `AE.Enc((X ‖ τ), K)`.
    pub fn encrypt(
        &mut self,
        payload: &StampedPayload,
        key: &AeKey,
        nonce: Nonce,
        key_pair: (ClientId, ClientId),
    ) -> Result<Envelope, CryptoError> {
        if !self.used.insert((key.0, nonce.0)) {
            return Err(CryptoError::NonceReuse);
        }
        let cipher = Aes128Gcm::new_from_slice(&key.0).expect("16-byte key");
        let ad = associated_data(key_pair);
        let mut sealed = cipher
            .encrypt(
                GcmNonce::from_slice(&nonce.0),
                Payload {
                    msg: &payload.to_bytes(),
                    aad: &ad,
                },
            )
            .expect("AES-GCM encryption is infallible for in-range lengths");
        let tag_start = sealed.len() - TAG_BYTES;
        let mut tag = [0u8; TAG_BYTES];
        tag.copy_from_slice(&sealed[tag_start..]);
        sealed.truncate(tag_start);
        Ok(Envelope {
            ciphertext: sealed,
            tag,
            nonce,
            key_pair: ordered(key_pair),
        })
    }

    pub fn issued(&self) -> usize {
        self.used.len()
    }
}

/// `AE.Dec((Y ‖ σ), K)`; any mismatch yields [`CryptoError::AuthFailure`].
pub fn ae_decrypt(env: &Envelope, key: &AeKey) -> Result<StampedPayload, CryptoError> {
    let cipher = Aes128Gcm::new_from_slice(&key.0).expect("16-byte key");
    let mut sealed = Vec::with_capacity(env.ciphertext.len() + TAG_BYTES);
    sealed.extend_from_slice(&env.ciphertext);
    sealed.extend_from_slice(&env.tag);
    let ad = associated_data(env.key_pair);
    let plain = cipher
        .decrypt(
            GcmNonce::from_slice(&env.nonce.0),
            Payload {
                msg: &sealed,
                aad: &ad,
            },
        )
        .map_err(|_| CryptoError::AuthFailure)?;
    StampedPayload::from_bytes(&plain).ok_or(CryptoError::AuthFailure)
}

/// True iff `(round, step)` match and the wall-clock skew is within the window.
pub fn validate_timestamp(
    payload: &StampedPayload,
    expected: (u64, u32),
    now_ms: u64,
    window_ms: u64,
) -> bool {
    let ts = payload.timestamp;
    (ts.round, ts.step) == expected && ts.wall_ms.abs_diff(now_ms) <= window_ms
}

/// Single-block cipher used by the key-discovery challenge (`CK.Enc`).
pub fn ck_encrypt(key: &AeKey, block: &[u8; 16]) -> [u8; 16] {
    let cipher = Aes128::new_from_slice(&key.0).expect("16-byte key");
    let mut b = aes::Block::clone_from_slice(block);
    cipher.encrypt_block(&mut b);
    b.into()
}

/// Inverse of [`ck_encrypt`] (`CK.Dec`).
pub fn ck_decrypt(key: &AeKey, block: &[u8; 16]) -> [u8; 16] {
    let cipher = Aes128::new_from_slice(&key.0).expect("16-byte key");
    let mut b = aes::Block::clone_from_slice(block);
    cipher.decrypt_block(&mut b);
    b.into()
}

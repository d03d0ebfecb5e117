//! Canonical byte encoding for every hashed or signed structure.
//!
//! Integers are big-endian at fixed widths, digests and keys are raw 32-byte
//! strings, and variable-length lists carry a `u32` big-endian element count.
//! Each structure is hashed as `SHA-256(tag ‖ encoding)` with a one-byte tag
//! from [`tag`]. The layouts are listed in `docs/FORMATS.md`.

use crate::crypto::{hash, Digest};

/// One-byte domain tags prefixed to canonical encodings before hashing.
pub mod tag {
    pub const LEAF: u8 = 0x00;
    pub const NODE: u8 = 0x01;
    pub const EMPTY_LEAF: u8 = 0x02;
    pub const ACCOUNT_KEY: u8 = 0x03;
    pub const STATE: u8 = 0x10;
    pub const TX_BODY: u8 = 0x11;
    pub const TX_ITEM: u8 = 0x12;
    pub const ISSUE_ITEM: u8 = 0x13;
    pub const BATCH: u8 = 0x14;
    pub const EFFECTS: u8 = 0x15;
    pub const VOTE: u8 = 0x16;
    pub const WITHDRAW: u8 = 0x17;
    pub const DAP_REGISTER: u8 = 0x18;
    pub const DEPOSIT_ID: u8 = 0x19;
    pub const CHALLENGE_ID: u8 = 0x1A;
    pub const QUOTE: u8 = 0x1B;
    pub const AUDIT_ID: u8 = 0x1C;
    pub const PROGRAM: u8 = 0x1D;
    pub const LEDGER: u8 = 0x1E;
    pub const RNG: u8 = 0x1F;
}

/// Append-only canonical encoder.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tag(tag: u8) -> Self {
        Self { buf: vec![tag] }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes32(&mut self, v: &[u8; 32]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Length-prefixed byte string.
    pub fn var(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn count(&mut self, n: usize) -> &mut Self {
        self.u32(n as u32)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn digest(&self) -> Digest {
        hash(&self.buf)
    }
}

/// Structures with a canonical tagged encoding.
pub trait Canonical {
    const TAG: u8;

    fn encode_body(&self, enc: &mut Encoder);

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_tag(Self::TAG);
        self.encode_body(&mut enc);
        enc.into_bytes()
    }

    fn canonical_hash(&self) -> Digest {
        hash(&self.canonical_bytes())
    }
}

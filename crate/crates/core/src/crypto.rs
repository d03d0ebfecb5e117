//! Hashing, key generation, signing and verification.
//!
//! SHA-256 for hashing and Ed25519 for signatures. A rollup address is the
//! full 32-byte Ed25519 public key, and the same keys address main-chain
//! accounts.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

macro_rules! hex_newtype {
    ($name:ident, $len:expr) => {
        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                let raw = hex::decode(s).ok()?;
                let arr: [u8; $len] = raw.try_into().ok()?;
                Some(Self(arr))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}…)", stringify!($name), &self.to_hex()[..12])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).ok_or_else(|| {
                    de::Error::custom(concat!("invalid hex for ", stringify!($name)))
                })
            }
        }
    };
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);
hex_newtype!(Digest, 32);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);
}

/// Ed25519 public key; doubles as rollup and main-chain account address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey(pub [u8; 32]);
hex_newtype!(PublicKey, 32);

pub type Address = PublicKey;

/// The receive-only burn account: all-zero bytes, which is not a valid Ed25519
/// key anyone holds the secret for.
pub const BURN_ADDRESS: Address = PublicKey([0u8; 32]);

/// Raw 64-byte signature value.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct SigBytes(pub [u8; 64]);
hex_newtype!(SigBytes, 64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub value: SigBytes,
    pub signer: PublicKey,
}

impl Signature {
    /// An all-zero signature attributed to `signer`; never verifies.
    pub fn zeroed(signer: PublicKey) -> Self {
        Self { value: SigBytes([0u8; 64]), signer }
    }
}

/// Signing key material. Not `Serialize`: secrets never enter traces.
#[derive(Clone)]
pub struct SecretKey([u8; 32]);

impl SecretKey {
    pub fn expose(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(<redacted>)")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public_key: PublicKey,
    secret_key: SecretKey,
}

impl KeyPair {
    pub fn from_secret(secret: SecretKey) -> Self {
        let signing = SigningKey::from_bytes(&secret.0);
        Self {
            public_key: PublicKey(signing.verifying_key().to_bytes()),
            secret_key: secret,
        }
    }

    pub fn secret_key(&self) -> &SecretKey {
        &self.secret_key
    }

    pub fn address(&self) -> Address {
        self.public_key
    }
}

pub fn hash(message: &[u8]) -> Digest {
    Digest(Sha256::digest(message).into())
}

/// Hash of several byte strings concatenated, without intermediate copies.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// Deterministic key generation from 32 bytes of seed entropy.
pub fn gen_keypair(seed: [u8; 32]) -> KeyPair {
    KeyPair::from_secret(SecretKey(seed))
}

pub fn sign(message: &[u8], key: &KeyPair) -> Signature {
    let signing = SigningKey::from_bytes(&key.secret_key.0);
    Signature {
        value: SigBytes(signing.sign(message).to_bytes()),
        signer: key.public_key,
    }
}

/// Signs the hash of `message`; the convention for every protocol structure.
pub fn sign_digest(digest: &Digest, key: &KeyPair) -> Signature {
    sign(&digest.0, key)
}

/// Strict Ed25519 verification. Malformed keys or signature bytes yield
/// `false`. The `signer` field of `sig` is advisory and must match `pk`.
pub fn verify(message: &[u8], sig: &Signature, pk: &PublicKey) -> bool {
    if sig.signer != *pk {
        return false;
    }
    let Ok(vk) = VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let s = ed25519_dalek::Signature::from_bytes(&sig.value.0);
    vk.verify_strict(message, &s).is_ok()
}

/// [`verify`] over a digest, memoized per thread. Committee replicas check
/// the same transaction signatures many times over.
pub fn verify_digest(digest: &Digest, sig: &Signature, pk: &PublicKey) -> bool {
    const CAP: usize = 1 << 20;
    thread_local! {
        static SEEN: RefCell<HashMap<[u8; 160], bool>> = RefCell::new(HashMap::new());
    }
    let mut key = [0u8; 160];
    key[..32].copy_from_slice(&digest.0);
    key[32..96].copy_from_slice(&sig.value.0);
    key[96..128].copy_from_slice(&sig.signer.0);
    key[128..].copy_from_slice(&pk.0);
    if let Some(v) = SEEN.with(|c| c.borrow().get(&key).copied()) {
        return v;
    }
    let v = verify(&digest.0, sig, pk);
    SEEN.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= CAP {
            c.clear();
        }
        c.insert(key, v);
    });
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn seed(i: u64) -> [u8; 32] {
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&i.to_be_bytes());
        s[31] = 0xA5;
        s
    }

    #[test]
    fn sha256_empty_vector() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_is_deterministic_and_collision_free_on_sample() {
        assert_eq!(hash(b"teerollup"), hash(b"teerollup"));
        let mut seen = HashSet::with_capacity(100_000);
        for i in 0u64..100_000 {
            assert!(seen.insert(hash(&i.to_le_bytes())), "collision at {i}");
        }
    }

    #[test]
    fn hash_parts_matches_concatenation() {
        assert_eq!(hash_parts(&[b"ab", b"", b"cd"]), hash(b"abcd"));
    }

    #[test]
    fn keypair_determinism_and_distinct_addresses() {
        assert_eq!(gen_keypair(seed(7)).public_key, gen_keypair(seed(7)).public_key);
        assert_ne!(gen_keypair(seed(7)).public_key, gen_keypair(seed(8)).public_key);
        let addrs: HashSet<_> = (0..1000).map(|i| gen_keypair(seed(i)).address()).collect();
        assert_eq!(addrs.len(), 1000);
    }

    #[test]
    fn sign_verify_contract() {
        let k = gen_keypair(seed(1));
        let other = gen_keypair(seed(2));
        let m = b"transfer 5".to_vec();
        let sig = sign(&m, &k);
        assert!(verify(&m, &sig, &k.public_key));
        assert!(!verify(&m, &sig, &other.public_key));
        let mut flipped = m.clone();
        flipped[0] ^= 0x01;
        assert!(!verify(&flipped, &sig, &k.public_key));
        assert!(!verify(&m, &Signature::zeroed(k.public_key), &k.public_key));
    }

    #[test]
    fn burn_address_never_verifies() {
        let k = gen_keypair(seed(3));
        let mut sig = sign(b"x", &k);
        sig.signer = BURN_ADDRESS;
        assert!(!verify(b"x", &sig, &BURN_ADDRESS));
    }

    #[test]
    fn hex_round_trip_through_serde() {
        let d = hash(b"q");
        let json = serde_json::to_string(&d).unwrap();
        let back: Digest = serde_json::from_str(&json).unwrap();
        assert_eq!(d, back);
        assert!(serde_json::from_str::<Digest>("\"zz\"").is_err());
    }
}

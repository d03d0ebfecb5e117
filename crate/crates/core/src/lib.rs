//! TEE-committee rollup: protocol library and deterministic simulator.
//!
//! The protocol layers are [`crypto`], [`merkle`], [`tee`], [`rollup`],
//! [`chain`] and [`contracts`]. The simulated actors live in [`sequencer`],
//! [`dap`] and [`adversary`], and [`sim`] runs scenarios and checks traces.

pub mod adversary;
pub mod chain;
pub mod codec;
pub mod contracts;
pub mod crypto;
pub mod dap;
pub mod merkle;
pub mod oracle;
pub mod rollup;
pub mod scenarios;
pub mod sequencer;
pub mod sim;
pub mod tee;

pub use crypto::{Address, Digest, KeyPair, PublicKey, Signature};
pub use merkle::{AccountTree, MerkleProof};
pub use rollup::{Batch, BatchItem, QuorumCertificate, RollupState, RollupTx, Vote};

//! In-process model of a TEE: install, resume, attest.
//!
//! Attestation is an unforgeable registry: an [`AttestationService`] holds a
//! vendor key and endorses `(eid, prog_hash, public_key, platform)` for
//! enclaves it installed. Compromise is fixed at install time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{tag, Encoder};
use crate::crypto::{
    gen_keypair, hash_parts, sign_digest, verify_digest, Digest, KeyPair, PublicKey, SecretKey,
    Signature,
};
use crate::merkle::AccountTree;
use crate::rollup::{execute, ExecError, ExecutionOutput, Proposal, RollupState, Vote, Batch};

/// Identity of the rollup program every registered enclave must run.
pub fn program_hash() -> Digest {
    hash_parts(&[&[tag::PROGRAM], b"teerollup-enclave-program/v1"])
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("enclave {0} is unavailable (crashed or suspended)")]
    Unavailable(u64),
    #[error("enclave {0} keeps its key sealed")]
    Sealed(u64),
    #[error("enclave {eid} already endorsed a different state at height {height}")]
    AlreadyVoted { eid: u64, height: u64 },
    #[error("execution refused: {0}")]
    Exec(#[from] ExecError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VoteRefusal {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error("proposal parent does not match the local tree")]
    UnknownParent,
    #[error("proposal state does not link to its parent")]
    BadLinkage,
    #[error("re-execution produced a different state or side effects")]
    Mismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationQuote {
    pub eid: u64,
    pub prog_hash: Digest,
    pub public_key: PublicKey,
    pub platform: String,
    pub endorsement: Signature,
}

impl AttestationQuote {
    fn body_digest(eid: u64, prog_hash: &Digest, pk: &PublicKey, platform: &str) -> Digest {
        let mut enc = Encoder::with_tag(tag::QUOTE);
        enc.u64(eid).bytes32(&prog_hash.0).bytes32(&pk.0).var(platform.as_bytes());
        enc.digest()
    }
}

/// Quote check against the vendor's public key; what a contract can run.
pub fn verify_quote(quote: &AttestationQuote, vendor: &PublicKey) -> bool {
    let d = AttestationQuote::body_digest(
        quote.eid,
        &quote.prog_hash,
        &quote.public_key,
        &quote.platform,
    );
    verify_digest(&d, &quote.endorsement, vendor)
}

#[derive(Debug)]
pub struct Enclave {
    eid: u64,
    prog_hash: Digest,
    platform: String,
    keypair: KeyPair,
    compromised: bool,
    crashed: bool,
    /// height → vote digest already endorsed.
    endorsed: BTreeMap<u64, Digest>,
}

impl Enclave {
    pub fn eid(&self) -> u64 {
        self.eid
    }

    pub fn prog_hash(&self) -> Digest {
        self.prog_hash
    }

    pub fn platform(&self) -> &str {
        &self.platform
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public_key
    }

    pub fn is_compromised(&self) -> bool {
        self.compromised
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    /// Host-level crash or suspension.
    pub fn set_crashed(&mut self, crashed: bool) {
        self.crashed = crashed;
    }

    fn endorse(&mut self, height: u64, state: &RollupState, effects_hash: Digest) -> Result<Vote, EnclaveError> {
        let vote = Vote::sign(state.hash(), effects_hash, &self.keypair);
        let digest = crate::rollup::vote_digest(&vote.state_hash, &vote.effects_hash);
        match self.endorsed.get(&height) {
            Some(prev) if *prev != digest => {
                Err(EnclaveError::AlreadyVoted { eid: self.eid, height })
            }
            _ => {
                self.endorsed.insert(height, digest);
                Ok(vote)
            }
        }
    }

    /// Runs the rollup program on `(parent, tree, batch)` and signs the
    /// result, counting as this enclave's endorsement for the new height.
    pub fn resume(
        &mut self,
        parent: &RollupState,
        parent_tree: &AccountTree,
        batch: &Batch,
    ) -> Result<(ExecutionOutput, Signature), EnclaveError> {
        if self.crashed {
            return Err(EnclaveError::Unavailable(self.eid));
        }
        let out = execute(parent, parent_tree, batch)?;
        let vote = self.endorse(out.state.height, &out.state, out.effects.hash())?;
        Ok((out, vote.signature))
    }

    /// Re-executes a peer's proposal and votes for it only if the result is
    /// identical; at most one endorsement per height.
    pub fn vote(&mut self, proposal: &Proposal, parent_tree: &AccountTree) -> Result<Vote, VoteRefusal> {
        self.vote_with_output(proposal, parent_tree).map(|(v, _)| v)
    }

    /// [`Enclave::vote`], also handing the execution result to the host.
    pub fn vote_with_output(
        &mut self,
        proposal: &Proposal,
        parent_tree: &AccountTree,
    ) -> Result<(Vote, ExecutionOutput), VoteRefusal> {
        if self.crashed {
            return Err(EnclaveError::Unavailable(self.eid).into());
        }
        if parent_tree.root() != proposal.parent.account_root {
            return Err(VoteRefusal::UnknownParent);
        }
        let st = &proposal.state;
        if st.height != proposal.parent.height + 1 || st.prev_hash != proposal.parent.hash() {
            return Err(VoteRefusal::BadLinkage);
        }
        let out = execute(&proposal.parent, parent_tree, &proposal.batch).map_err(EnclaveError::from)?;
        if out.state != *st || out.effects != proposal.effects {
            return Err(VoteRefusal::Mismatch);
        }
        let vote = self.endorse(st.height, st, out.effects.hash())?;
        Ok((vote, out))
    }

    /// Hands the signing key to the adversary; only a compromised enclave does.
    pub fn leak_secret(&self) -> Result<SecretKey, EnclaveError> {
        if self.compromised {
            Ok(self.keypair.secret_key().clone())
        } else {
            Err(EnclaveError::Sealed(self.eid))
        }
    }

    /// Arbitrary signature under the enclave key, for a compromised enclave.
    pub fn forge_sign(&self, digest: &Digest) -> Result<Signature, EnclaveError> {
        if self.compromised {
            Ok(sign_digest(digest, &self.keypair))
        } else {
            Err(EnclaveError::Sealed(self.eid))
        }
    }
}

/// Vendor attestation registry that installs enclaves and endorses quotes.
#[derive(Debug)]
pub struct AttestationService {
    vendor: KeyPair,
    seed: [u8; 32],
    next_eid: u64,
}

impl AttestationService {
    pub fn new(seed: [u8; 32]) -> Self {
        let vendor = gen_keypair(hash_parts(&[b"vendor", &seed]).0);
        Self { vendor, seed, next_eid: 1 }
    }

    pub fn vendor_key(&self) -> PublicKey {
        self.vendor.public_key
    }

    /// `eid ← install(prog)`. The key pair is generated inside the enclave.
    pub fn install(&mut self, prog_hash: Digest, platform: &str, compromised: bool) -> Enclave {
        let eid = self.next_eid;
        self.next_eid += 1;
        let key_seed = hash_parts(&[b"enclave-key", &self.seed, &eid.to_be_bytes()]);
        Enclave {
            eid,
            prog_hash,
            platform: platform.to_string(),
            keypair: gen_keypair(key_seed.0),
            compromised,
            crashed: false,
            endorsed: BTreeMap::new(),
        }
    }

    /// `ρ ← attest(eid, prog)`. Compromise is invisible here.
    pub fn attest(&self, enclave: &Enclave) -> AttestationQuote {
        let d = AttestationQuote::body_digest(
            enclave.eid,
            &enclave.prog_hash,
            &enclave.public_key(),
            &enclave.platform,
        );
        AttestationQuote {
            eid: enclave.eid,
            prog_hash: enclave.prog_hash,
            public_key: enclave.public_key(),
            platform: enclave.platform.clone(),
            endorsement: sign_digest(&d, &self.vendor),
        }
    }

    pub fn verify_quote(&self, quote: &AttestationQuote) -> bool {
        verify_quote(quote, &self.vendor.public_key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sign, verify, BURN_ADDRESS};
    use crate::rollup::{BatchItem, RollupTx};

    fn service() -> AttestationService {
        AttestationService::new([1; 32])
    }

    #[test]
    fn installs_are_distinct_and_attest() {
        let mut svc = service();
        let a = svc.install(program_hash(), "sgx", false);
        let b = svc.install(program_hash(), "tdx", false);
        assert_ne!(a.eid(), b.eid());
        assert_ne!(a.public_key(), b.public_key());
        assert!(svc.verify_quote(&svc.attest(&a)));
        let other = svc.install(Digest([5; 32]), "csv", false);
        assert_ne!(svc.attest(&other).prog_hash, svc.attest(&a).prog_hash);
    }

    #[test]
    fn fabricated_or_altered_quotes_fail() {
        let mut svc = service();
        let e = svc.install(program_hash(), "sgx", false);
        let mut q = svc.attest(&e);
        q.prog_hash = Digest([2; 32]);
        assert!(!svc.verify_quote(&q));
        let fake = AttestationQuote {
            eid: 99,
            prog_hash: program_hash(),
            public_key: e.public_key(),
            platform: "sgx".into(),
            endorsement: Signature::zeroed(svc.vendor_key()),
        };
        assert!(!svc.verify_quote(&fake));
        // A different vendor's quote does not verify here.
        let mut other = AttestationService::new([2; 32]);
        let e2 = other.install(program_hash(), "sgx", false);
        assert!(!svc.verify_quote(&other.attest(&e2)));
    }

    #[test]
    fn compromised_enclave_still_attests_and_leaks() {
        let mut svc = service();
        let bad = svc.install(program_hash(), "tdx", true);
        assert!(svc.verify_quote(&svc.attest(&bad)));
        let leaked = KeyPair::from_secret(bad.leak_secret().unwrap());
        assert_eq!(leaked.public_key, bad.public_key());
        let sig = sign(b"anything", &leaked);
        assert!(verify(b"anything", &sig, &bad.public_key()));
        let good = svc.install(program_hash(), "sgx", false);
        assert_eq!(good.leak_secret().unwrap_err(), EnclaveError::Sealed(good.eid()));
        assert!(good.forge_sign(&Digest::ZERO).is_err());
    }

    #[test]
    fn resume_and_crash() {
        let mut svc = service();
        let mut e = svc.install(program_hash(), "sgx", false);
        let g = RollupState::genesis(32);
        let tree = AccountTree::new();
        let (out, sig) = e.resume(&g, &tree, &Batch::default()).unwrap();
        let vote = Vote::from_signature(out.state.hash(), out.effects.hash(), sig);
        assert!(vote.signature_valid());
        e.set_crashed(true);
        assert_eq!(e.resume(&g, &tree, &Batch::default()).unwrap_err(), EnclaveError::Unavailable(e.eid()));
    }

    fn proposal_from(leader: &mut Enclave, tree: &AccountTree, batch: Batch) -> Proposal {
        let g = RollupState::genesis(32);
        let (out, sig) = leader.resume(&g, tree, &batch).unwrap();
        Proposal {
            parent: g,
            state: out.state,
            effects: out.effects.clone(),
            leader_vote: Vote::from_signature(out.state.hash(), out.effects.hash(), sig),
            batch,
        }
    }

    #[test]
    fn honest_vote_rules() {
        let mut svc = service();
        let mut leader = svc.install(program_hash(), "sgx", false);
        let mut peer = svc.install(program_hash(), "sgx", false);
        let tree = AccountTree::new();
        let p = proposal_from(&mut leader, &tree, Batch::default());
        assert!(peer.vote(&p, &tree).is_ok());
        // Same proposal again is idempotent.
        assert!(peer.vote(&p, &tree).is_ok());

        let mut tampered = p.clone();
        tampered.state.account_root = Digest([8; 32]);
        let mut fresh = svc.install(program_hash(), "sgx", false);
        assert_eq!(fresh.vote(&tampered, &tree), Err(VoteRefusal::Mismatch));

        let mut inflated = p.clone();
        inflated.effects.refunds.push(crate::rollup::Refund { addr: BURN_ADDRESS, value: 1 });
        assert_eq!(fresh.vote(&inflated, &tree), Err(VoteRefusal::Mismatch));

        // A second, different proposal at the same height is refused.
        let k = gen_keypair([4; 32]);
        let mut t2 = AccountTree::new();
        t2.set_balance(k.address(), 3).unwrap();
        let g2 = RollupState { account_root: t2.root(), ..RollupState::genesis(32) };
        let batch = Batch::new(vec![BatchItem::Transfer(RollupTx::signed(&k, BURN_ADDRESS, 1, 0))]);
        let out = execute(&g2, &t2, &batch).unwrap();
        let other = Proposal {
            parent: g2,
            state: out.state,
            effects: out.effects.clone(),
            leader_vote: p.leader_vote,
            batch,
        };
        assert!(matches!(peer.vote(&other, &t2), Err(VoteRefusal::Enclave(EnclaveError::AlreadyVoted { .. }))));
        assert_eq!(peer.vote(&p, &t2), Err(VoteRefusal::UnknownParent));
    }

    #[test]
    fn compromised_enclave_signs_forgeries() {
        let mut svc = service();
        let bad = svc.install(program_hash(), "csv", true);
        let forged = RollupState { account_root: Digest([6; 32]), ..RollupState::genesis(32) };
        let sig = bad.forge_sign(&crate::rollup::vote_digest(&forged.hash(), &Digest::ZERO)).unwrap();
        assert!(Vote::from_signature(forged.hash(), Digest::ZERO, sig).signature_valid());
    }
}

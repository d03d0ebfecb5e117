//! Rollup state machine: transactions, batches, execution, votes and
//! quorum certificates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{tag, Canonical, Encoder};
use crate::crypto::{
    sign_digest, verify_digest, Address, Digest, KeyPair, PublicKey, Signature, BURN_ADDRESS,
};
use crate::merkle::{AccountTree, TreeError};

/// `st_h = ⟨h, H(st_{h-1}), R_h, H(txs_h)⟩`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RollupState {
    pub height: u64,
    pub prev_hash: Digest,
    pub account_root: Digest,
    pub txs_hash: Digest,
}

impl Canonical for RollupState {
    const TAG: u8 = tag::STATE;

    fn encode_body(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .bytes32(&self.prev_hash.0)
            .bytes32(&self.account_root.0)
            .bytes32(&self.txs_hash.0);
    }
}

impl RollupState {
    pub fn genesis(tree_depth: u8) -> Self {
        Self {
            height: 0,
            prev_hash: Digest::ZERO,
            account_root: AccountTree::with_depth(tree_depth).root(),
            txs_hash: Batch::default().hash(),
        }
    }

    pub fn hash(&self) -> Digest {
        self.canonical_hash()
    }
}

/// A signed balance transfer. Sending to [`BURN_ADDRESS`] is a redemption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollupTx {
    pub sender: Address,
    pub receiver: Address,
    pub value: u64,
    pub nonce: u64,
    pub signature: Signature,
}

impl RollupTx {
    pub fn body_hash(sender: &Address, receiver: &Address, value: u64, nonce: u64) -> Digest {
        let mut enc = Encoder::with_tag(tag::TX_BODY);
        enc.bytes32(&sender.0).bytes32(&receiver.0).u64(value).u64(nonce);
        enc.digest()
    }

    pub fn signed(key: &KeyPair, receiver: Address, value: u64, nonce: u64) -> Self {
        let sender = key.address();
        let signature = sign_digest(&Self::body_hash(&sender, &receiver, value, nonce), key);
        Self { sender, receiver, value, nonce, signature }
    }

    pub fn signature_valid(&self) -> bool {
        let body = Self::body_hash(&self.sender, &self.receiver, self.value, self.nonce);
        verify_digest(&body, &self.signature, &self.sender)
    }

    /// Identity of the transaction, covering the signature.
    pub fn hash(&self) -> Digest {
        self.canonical_hash()
    }

    pub fn is_redeem(&self) -> bool {
        self.receiver == BURN_ADDRESS
    }
}

impl Canonical for RollupTx {
    const TAG: u8 = tag::TX_ITEM;

    fn encode_body(&self, enc: &mut Encoder) {
        enc.bytes32(&self.sender.0)
            .bytes32(&self.receiver.0)
            .u64(self.value)
            .u64(self.nonce)
            .raw(&self.signature.value.0);
    }
}

/// Mint instruction for a main-chain deposit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueRecord {
    pub deposit_id: Digest,
    pub recipient: Address,
    pub value: u64,
}

impl Canonical for IssueRecord {
    const TAG: u8 = tag::ISSUE_ITEM;

    fn encode_body(&self, enc: &mut Encoder) {
        enc.bytes32(&self.deposit_id.0).bytes32(&self.recipient.0).u64(self.value);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchItem {
    Issue(IssueRecord),
    Transfer(RollupTx),
}

impl BatchItem {
    pub fn hash(&self) -> Digest {
        match self {
            BatchItem::Issue(r) => r.canonical_hash(),
            BatchItem::Transfer(t) => t.canonical_hash(),
        }
    }

    /// Modeled wire size, used by the network bandwidth model.
    pub fn wire_size(&self) -> u64 {
        match self {
            BatchItem::Issue(_) => 1 + 32 + 32 + 8,
            BatchItem::Transfer(_) => 1 + 32 + 32 + 8 + 8 + 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn new(items: Vec<BatchItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_hashes(&self) -> Vec<Digest> {
        self.items.iter().map(BatchItem::hash).collect()
    }

    /// `H(0x14 ‖ count ‖ item_hash*)`: a contract can check membership from
    /// the list of item hashes alone.
    pub fn hash_of_items(item_hashes: &[Digest]) -> Digest {
        let mut enc = Encoder::with_tag(tag::BATCH);
        enc.count(item_hashes.len());
        for h in item_hashes {
            enc.bytes32(&h.0);
        }
        enc.digest()
    }

    pub fn hash(&self) -> Digest {
        Self::hash_of_items(&self.item_hashes())
    }

    pub fn wire_size(&self) -> u64 {
        4 + self.items.iter().map(BatchItem::wire_size).sum::<u64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lock {
    pub deposit_id: Digest,
    pub recipient: Address,
    pub value: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refund {
    pub addr: Address,
    pub value: u64,
}

/// Main-chain side effects of one batch, certified together with the state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effects {
    pub locks: Vec<Lock>,
    pub refunds: Vec<Refund>,
}

impl Canonical for Effects {
    const TAG: u8 = tag::EFFECTS;

    fn encode_body(&self, enc: &mut Encoder) {
        enc.count(self.locks.len());
        for l in &self.locks {
            enc.bytes32(&l.deposit_id.0).bytes32(&l.recipient.0).u64(l.value);
        }
        enc.count(self.refunds.len());
        for r in &self.refunds {
            enc.bytes32(&r.addr.0).u64(r.value);
        }
    }
}

impl Effects {
    pub fn hash(&self) -> Digest {
        self.canonical_hash()
    }

    pub fn refund_total(&self) -> u128 {
        self.refunds.iter().map(|r| r.value as u128).sum()
    }

    pub fn lock_total(&self) -> u128 {
        self.locks.iter().map(|l| l.value as u128).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadSignature,
    WrongNonce { expected: u64, got: u64 },
    InsufficientBalance,
    ZeroValue,
    BurnSender,
    BurnRecipient,
    DuplicateIssue,
    SlotCollision,
    Overflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: u32,
    pub reason: RejectReason,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("parent tree root {tree} does not match parent state root {state}")]
    ParentMismatch { tree: Digest, state: Digest },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionOutput {
    pub state: RollupState,
    pub tree: AccountTree,
    pub effects: Effects,
    pub rejected: Vec<Rejection>,
}

fn tree_reason(e: TreeError) -> RejectReason {
    match e {
        TreeError::InsufficientBalance { .. } => RejectReason::InsufficientBalance,
        TreeError::Overflow(_) => RejectReason::Overflow,
        TreeError::SlotCollision { .. } => RejectReason::SlotCollision,
    }
}

fn apply_issue(
    tree: &mut AccountTree,
    rec: &IssueRecord,
    seen: &mut BTreeSet<Digest>,
) -> Result<(), RejectReason> {
    if rec.value == 0 {
        return Err(RejectReason::ZeroValue);
    }
    if rec.recipient == BURN_ADDRESS {
        return Err(RejectReason::BurnRecipient);
    }
    if seen.contains(&rec.deposit_id) {
        return Err(RejectReason::DuplicateIssue);
    }
    tree.credit(rec.recipient, rec.value).map_err(tree_reason)?;
    seen.insert(rec.deposit_id);
    Ok(())
}

fn apply_transfer(tree: &mut AccountTree, tx: &RollupTx) -> Result<(), RejectReason> {
    if tx.value == 0 {
        return Err(RejectReason::ZeroValue);
    }
    if tx.sender == BURN_ADDRESS {
        return Err(RejectReason::BurnSender);
    }
    if !tx.signature_valid() {
        return Err(RejectReason::BadSignature);
    }
    let from = tree.account(&tx.sender);
    if tx.nonce != from.nonce {
        return Err(RejectReason::WrongNonce { expected: from.nonce, got: tx.nonce });
    }
    if from.balance < tx.value {
        return Err(RejectReason::InsufficientBalance);
    }
    if tx.sender != tx.receiver {
        let to = tree.account(&tx.receiver);
        if to.balance.checked_add(tx.value).is_none() {
            return Err(RejectReason::Overflow);
        }
        if !tree.can_hold(&tx.receiver) {
            return Err(RejectReason::SlotCollision);
        }
    }
    // Checks above guarantee the mutations cannot fail part-way.
    tree.debit(tx.sender, tx.value).map_err(tree_reason)?;
    tree.bump_nonce(tx.sender).map_err(tree_reason)?;
    tree.credit(tx.receiver, tx.value).map_err(tree_reason)?;
    Ok(())
}

/// Deterministic batch execution. Invalid items are skipped and recorded.
pub fn execute(
    prev_state: &RollupState,
    prev_tree: &AccountTree,
    batch: &Batch,
) -> Result<ExecutionOutput, ExecError> {
    let parent_root = prev_tree.root();
    if parent_root != prev_state.account_root {
        return Err(ExecError::ParentMismatch { tree: parent_root, state: prev_state.account_root });
    }
    let mut tree = prev_tree.clone();
    let mut effects = Effects::default();
    let mut rejected = Vec::new();
    let mut seen_issues = BTreeSet::new();
    for (i, item) in batch.items.iter().enumerate() {
        let outcome = match item {
            BatchItem::Issue(rec) => apply_issue(&mut tree, rec, &mut seen_issues).map(|()| {
                effects.locks.push(Lock {
                    deposit_id: rec.deposit_id,
                    recipient: rec.recipient,
                    value: rec.value,
                })
            }),
            BatchItem::Transfer(tx) => apply_transfer(&mut tree, tx).map(|()| {
                if tx.is_redeem() {
                    effects.refunds.push(Refund { addr: tx.sender, value: tx.value });
                }
            }),
        };
        if let Err(reason) = outcome {
            rejected.push(Rejection { index: i as u32, reason });
        }
    }
    let state = RollupState {
        height: prev_state.height + 1,
        prev_hash: prev_state.hash(),
        account_root: tree.root(),
        txs_hash: batch.hash(),
    };
    Ok(ExecutionOutput { state, tree, effects, rejected })
}

/// The digest an enclave signs when endorsing a state: binds the state hash
/// and the side effects that ride with it to the contract.
pub fn vote_digest(state_hash: &Digest, effects_hash: &Digest) -> Digest {
    let mut enc = Encoder::with_tag(tag::VOTE);
    enc.bytes32(&state_hash.0).bytes32(&effects_hash.0);
    enc.digest()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub state_hash: Digest,
    pub effects_hash: Digest,
    pub voter: PublicKey,
    pub signature: Signature,
}

impl Vote {
    pub fn sign(state_hash: Digest, effects_hash: Digest, key: &KeyPair) -> Self {
        Self {
            state_hash,
            effects_hash,
            voter: key.public_key,
            signature: sign_digest(&vote_digest(&state_hash, &effects_hash), key),
        }
    }

    pub fn from_signature(state_hash: Digest, effects_hash: Digest, signature: Signature) -> Self {
        Self { state_hash, effects_hash, voter: signature.signer, signature }
    }

    pub fn signature_valid(&self) -> bool {
        verify_digest(
            &vote_digest(&self.state_hash, &self.effects_hash),
            &self.signature,
            &self.voter,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub state_hash: Digest,
    pub effects_hash: Digest,
    pub votes: Vec<Vote>,
}

impl QuorumCertificate {
    pub fn voters(&self) -> Vec<PublicKey> {
        self.votes.iter().map(|v| v.voter).collect()
    }

    pub fn wire_size(&self) -> u64 {
        64 + 4 + self.votes.len() as u64 * (32 + 64)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QcError {
    #[error("votes cover more than one (state, effects) pair")]
    MixedHashes,
    #[error("only {have} distinct valid registered votes, need {need}")]
    Insufficient { have: usize, need: usize },
    #[error("no votes")]
    Empty,
}

/// Builds a QC from ≥ f+1 distinct, registered, correctly signed votes over a
/// single `(state, effects)` pair. Invalid and duplicate votes are dropped.
pub fn aggregate_qc(
    votes: &[Vote],
    f: usize,
    registry: &[PublicKey],
) -> Result<QuorumCertificate, QcError> {
    let first = votes.first().ok_or(QcError::Empty)?;
    let (state_hash, effects_hash) = (first.state_hash, first.effects_hash);
    if votes.iter().any(|v| v.state_hash != state_hash || v.effects_hash != effects_hash) {
        return Err(QcError::MixedHashes);
    }
    let registered: BTreeSet<&PublicKey> = registry.iter().collect();
    let mut by_voter: BTreeMap<PublicKey, Vote> = BTreeMap::new();
    for v in votes {
        if registered.contains(&v.voter) && !by_voter.contains_key(&v.voter) && v.signature_valid()
        {
            by_voter.insert(v.voter, *v);
        }
    }
    let need = f + 1;
    if by_voter.len() < need {
        return Err(QcError::Insufficient { have: by_voter.len(), need });
    }
    Ok(QuorumCertificate { state_hash, effects_hash, votes: by_voter.into_values().collect() })
}

/// `true` iff every vote is over the QC's pair and at least f+1 distinct
/// registered voters signed it validly.
pub fn verify_qc(qc: &QuorumCertificate, f: usize, registry: &[PublicKey]) -> bool {
    if qc.votes.iter().any(|v| v.state_hash != qc.state_hash || v.effects_hash != qc.effects_hash)
    {
        return false;
    }
    let registered: BTreeSet<&PublicKey> = registry.iter().collect();
    let mut valid = BTreeSet::new();
    for v in &qc.votes {
        if registered.contains(&v.voter) && !valid.contains(&v.voter) && v.signature_valid() {
            valid.insert(v.voter);
        }
    }
    valid.len() > f
}

/// A leader's broadcast: the parent it extends, the batch, and its claimed result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub parent: RollupState,
    pub state: RollupState,
    pub batch: Batch,
    pub effects: Effects,
    pub leader_vote: Vote,
}

impl Proposal {
    pub fn wire_size(&self) -> u64 {
        2 * 104 + self.batch.wire_size() + 8 + (self.effects.locks.len() as u64) * 72
            + (self.effects.refunds.len() as u64) * 40
            + 160
    }
}

/// Off-chain companion of a state, held by DAPs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub state: RollupState,
    pub tree: AccountTree,
    pub batch: Batch,
    pub effects: Effects,
    pub rejected: Vec<Rejection>,
}

impl Metadata {
    pub fn from_output(batch: Batch, out: &ExecutionOutput) -> Self {
        Self {
            state: out.state,
            tree: out.tree.clone(),
            batch,
            effects: out.effects.clone(),
            rejected: out.rejected.clone(),
        }
    }

    /// `root(A_h) = st_h.account_root` and `H(txs_h) = st_h.txs_hash`.
    pub fn is_consistent(&self) -> bool {
        self.tree.root() == self.state.account_root && self.batch.hash() == self.state.txs_hash
    }

    pub fn wire_size(&self) -> u64 {
        104 + self.batch.wire_size() + self.tree.len() as u64 * 48
    }
}

/// Checks `prev_hash` links from genesis through `states` (ascending height).
pub fn verify_chain(genesis: &RollupState, states: &[RollupState]) -> bool {
    let mut prev = *genesis;
    for s in states {
        if s.height != prev.height + 1 || s.prev_hash != prev.hash() {
            return false;
        }
        prev = *s;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_keypair;

    fn key(i: u8) -> KeyPair {
        gen_keypair([i; 32])
    }

    fn funded(pairs: &[(&KeyPair, u64)]) -> (RollupState, AccountTree) {
        let mut tree = AccountTree::new();
        for (k, b) in pairs {
            tree.set_balance(k.address(), *b).unwrap();
        }
        let state = RollupState { account_root: tree.root(), ..RollupState::genesis(32) };
        (state, tree)
    }

    #[test]
    fn transfer_moves_balance() {
        let (a, b) = (key(1), key(2));
        let (st, tree) = funded(&[(&a, 10)]);
        let batch = Batch::new(vec![BatchItem::Transfer(RollupTx::signed(&a, b.address(), 5, 0))]);
        let out = execute(&st, &tree, &batch).unwrap();
        assert_eq!(out.tree.balance(&a.address()), 5);
        assert_eq!(out.tree.balance(&b.address()), 5);
        assert_eq!(out.state.height, 1);
        assert_eq!(out.state.prev_hash, st.hash());
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn empty_batch_keeps_root() {
        let a = key(1);
        let (st, tree) = funded(&[(&a, 10)]);
        let out = execute(&st, &tree, &Batch::default()).unwrap();
        assert_eq!(out.state.account_root, st.account_root);
        assert_eq!(out.state.height, st.height + 1);
        assert_eq!(out.state.txs_hash, Batch::default().hash());
    }

    #[test]
    fn redeem_emits_refund() {
        let a = key(1);
        let (st, tree) = funded(&[(&a, 10)]);
        let batch = Batch::new(vec![BatchItem::Transfer(RollupTx::signed(&a, BURN_ADDRESS, 5, 0))]);
        let out = execute(&st, &tree, &batch).unwrap();
        assert_eq!(out.tree.balance(&a.address()), 5);
        assert_eq!(out.tree.balance(&BURN_ADDRESS), 5);
        assert_eq!(out.effects.refunds, vec![Refund { addr: a.address(), value: 5 }]);
    }

    #[test]
    fn issue_mints_and_locks() {
        let a = key(1);
        let (st, tree) = funded(&[]);
        let rec = IssueRecord { deposit_id: Digest([9; 32]), recipient: a.address(), value: 40 };
        let batch = Batch::new(vec![BatchItem::Issue(rec), BatchItem::Issue(rec)]);
        let out = execute(&st, &tree, &batch).unwrap();
        assert_eq!(out.tree.balance(&a.address()), 40);
        assert_eq!(out.effects.locks.len(), 1);
        assert_eq!(out.rejected, vec![Rejection { index: 1, reason: RejectReason::DuplicateIssue }]);
    }

    #[test]
    fn invalid_transactions_are_skipped_with_reason() {
        let (a, b) = (key(1), key(2));
        let (st, tree) = funded(&[(&a, 10)]);
        let mut forged = RollupTx::signed(&a, b.address(), 1, 0);
        forged.value = 2;
        let items = vec![
            BatchItem::Transfer(forged),
            BatchItem::Transfer(RollupTx::signed(&a, b.address(), 1, 3)),
            BatchItem::Transfer(RollupTx::signed(&a, b.address(), 11, 0)),
            BatchItem::Transfer(RollupTx::signed(&a, b.address(), 0, 0)),
            BatchItem::Transfer(RollupTx::signed(&a, b.address(), 4, 0)),
            BatchItem::Transfer(RollupTx::signed(&a, b.address(), 4, 0)),
        ];
        let out = execute(&st, &tree, &Batch::new(items)).unwrap();
        let reasons: Vec<_> = out.rejected.iter().map(|r| r.reason).collect();
        assert_eq!(
            reasons,
            vec![
                RejectReason::BadSignature,
                RejectReason::WrongNonce { expected: 0, got: 3 },
                RejectReason::InsufficientBalance,
                RejectReason::ZeroValue,
                RejectReason::WrongNonce { expected: 1, got: 0 },
            ]
        );
        assert_eq!(out.tree.balance(&b.address()), 4);
    }

    #[test]
    fn burn_account_cannot_send() {
        let (st, tree) = funded(&[]);
        let mut tx = RollupTx::signed(&key(1), key(2).address(), 1, 0);
        tx.sender = BURN_ADDRESS;
        let out = execute(&st, &tree, &Batch::new(vec![BatchItem::Transfer(tx)])).unwrap();
        assert_eq!(out.rejected[0].reason, RejectReason::BurnSender);
    }

    #[test]
    fn parent_mismatch_is_refused() {
        let a = key(1);
        let (st, _) = funded(&[(&a, 10)]);
        let err = execute(&st, &AccountTree::new(), &Batch::default()).unwrap_err();
        assert!(matches!(err, ExecError::ParentMismatch { .. }));
    }

    fn votes_for(keys: &[KeyPair], st: Digest) -> Vec<Vote> {
        keys.iter().map(|k| Vote::sign(st, Digest::ZERO, k)).collect()
    }

    #[test]
    fn qc_threshold_and_distinctness() {
        let keys: Vec<_> = (1..=7).map(key).collect();
        let registry: Vec<_> = keys.iter().map(|k| k.public_key).collect();
        let st = Digest([3; 32]);
        let f = 3;
        let qc = aggregate_qc(&votes_for(&keys[..4], st), f, &registry).unwrap();
        assert!(verify_qc(&qc, f, &registry));
        assert_eq!(
            aggregate_qc(&votes_for(&keys[..3], st), f, &registry),
            Err(QcError::Insufficient { have: 3, need: 4 })
        );
        let mut dup = votes_for(&keys[..3], st);
        dup.push(dup[0]);
        assert!(aggregate_qc(&dup, f, &registry).is_err());
        let mut mixed = votes_for(&keys[..2], st);
        mixed.extend(votes_for(&keys[2..4], Digest([4; 32])));
        assert_eq!(aggregate_qc(&mixed, f, &registry), Err(QcError::MixedHashes));
    }

    #[test]
    fn verify_qc_rejects_unregistered_and_mixed() {
        let keys: Vec<_> = (1..=5).map(key).collect();
        let registry: Vec<_> = keys[..4].iter().map(|k| k.public_key).collect();
        let st = Digest([3; 32]);
        let mut votes = votes_for(&keys[..3], st);
        votes.extend(votes_for(&keys[4..5], st));
        let qc = QuorumCertificate { state_hash: st, effects_hash: Digest::ZERO, votes };
        assert!(!verify_qc(&qc, 3, &registry));
        let mut mixed = votes_for(&keys[..2], st);
        mixed.extend(votes_for(&keys[2..4], Digest([4; 32])));
        let qc = QuorumCertificate { state_hash: st, effects_hash: Digest::ZERO, votes: mixed };
        assert!(!verify_qc(&qc, 1, &registry));
    }

    #[test]
    fn chain_linkage() {
        let g = RollupState::genesis(32);
        let tree = AccountTree::new();
        let s1 = execute(&g, &tree, &Batch::default()).unwrap();
        let s2 = execute(&s1.state, &s1.tree, &Batch::default()).unwrap();
        assert!(verify_chain(&g, &[s1.state, s2.state]));
        assert!(!verify_chain(&g, &[s2.state]));
    }
}

//! Sparse fixed-depth Merkle tree over rollup accounts.
//!
//! An account's position is the top `depth` bits of `H(0x03 ‖ address)`.
//! Leaves commit to `(address, balance, nonce)`; an account with zero balance
//! and zero nonce is indistinguishable from an absent one and hashes to the
//! empty-leaf constant, which makes zero-balance proofs for strangers well
//! defined.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::tag;
use crate::crypto::{hash, hash_parts, Address, Digest};

pub const DEFAULT_DEPTH: u8 = 32;
pub const MAX_DEPTH: u8 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("balance of {addr} would go negative (has {balance}, needs {amount})")]
    InsufficientBalance { addr: Address, balance: u64, amount: u64 },
    #[error("balance overflow for {0}")]
    Overflow(Address),
    #[error("address {addr} collides with {occupant} at slot {slot:#x}")]
    SlotCollision { addr: Address, occupant: Address, slot: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub balance: u64,
    pub nonce: u64,
}

impl Account {
    pub fn is_empty(&self) -> bool {
        self.balance == 0 && self.nonce == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    /// Position of the sibling relative to the running digest.
    pub side: Side,
    pub sibling: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub key: Address,
    pub balance: u64,
    pub nonce: u64,
    /// Leaf to root.
    pub path: Vec<ProofStep>,
    pub root: Digest,
}

/// Digest of the empty leaf.
pub fn empty_leaf() -> Digest {
    hash(&[tag::EMPTY_LEAF])
}

/// `empty_subtree(h)` is the root of an empty subtree of height `h`.
pub fn empty_subtree(height: u8) -> Digest {
    static TABLE: OnceLock<Vec<Digest>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(MAX_DEPTH as usize + 1);
        t.push(empty_leaf());
        for i in 0..MAX_DEPTH as usize {
            t.push(node_digest(&t[i], &t[i]));
        }
        t
    });
    table[height as usize]
}

pub fn node_digest(left: &Digest, right: &Digest) -> Digest {
    hash_parts(&[&[tag::NODE], &left.0, &right.0])
}

pub fn leaf_digest(addr: &Address, account: &Account) -> Digest {
    if account.is_empty() {
        return empty_leaf();
    }
    hash_parts(&[
        &[tag::LEAF],
        &addr.0,
        &account.balance.to_be_bytes(),
        &account.nonce.to_be_bytes(),
    ])
}

/// Leaf position of `addr` in a tree of the given depth.
pub fn slot_of(addr: &Address, depth: u8) -> u64 {
    let h = hash_parts(&[&[tag::ACCOUNT_KEY], &addr.0]);
    let top = u64::from_be_bytes(h.0[..8].try_into().expect("8 bytes"));
    if depth == 64 {
        top
    } else {
        top >> (64 - depth as u32)
    }
}

#[derive(Clone, Debug)]
pub struct AccountTree {
    depth: u8,
    accounts: BTreeMap<Address, Account>,
    slots: BTreeMap<u64, Address>,
    root: OnceLock<Digest>,
}

impl Default for AccountTree {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for AccountTree {
    fn eq(&self, other: &Self) -> bool {
        self.depth == other.depth && self.accounts == other.accounts
    }
}

impl Eq for AccountTree {}

impl AccountTree {
    pub fn new() -> Self {
        Self::with_depth(DEFAULT_DEPTH)
    }

    pub fn with_depth(depth: u8) -> Self {
        assert!((1..=MAX_DEPTH).contains(&depth), "tree depth must be in 1..=64");
        Self {
            depth,
            accounts: BTreeMap::new(),
            slots: BTreeMap::new(),
            root: OnceLock::new(),
        }
    }

    pub fn from_accounts(
        depth: u8,
        entries: impl IntoIterator<Item = (Address, Account)>,
    ) -> Result<Self, TreeError> {
        let mut t = Self::with_depth(depth);
        for (addr, acct) in entries {
            t.set_account(addr, acct)?;
        }
        Ok(t)
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.accounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accounts.is_empty()
    }

    pub fn account(&self, addr: &Address) -> Account {
        self.accounts.get(addr).copied().unwrap_or_default()
    }

    pub fn balance(&self, addr: &Address) -> u64 {
        self.account(addr).balance
    }

    pub fn nonce(&self, addr: &Address) -> u64 {
        self.account(addr).nonce
    }

    /// Non-empty accounts in address order.
    pub fn iter(&self) -> impl Iterator<Item = (&Address, &Account)> {
        self.accounts.iter()
    }

    pub fn total_balance(&self) -> u128 {
        self.accounts.values().map(|a| a.balance as u128).sum()
    }

    /// Fails only if `addr` lands on a slot held by another non-empty account.
    pub fn can_hold(&self, addr: &Address) -> bool {
        let slot = slot_of(addr, self.depth);
        self.slots.get(&slot).is_none_or(|occ| occ == addr)
    }

    pub fn set_account(&mut self, addr: Address, account: Account) -> Result<(), TreeError> {
        let slot = slot_of(&addr, self.depth);
        if account.is_empty() {
            if self.accounts.remove(&addr).is_some() {
                self.slots.remove(&slot);
                self.root = OnceLock::new();
            }
            return Ok(());
        }
        match self.slots.get(&slot) {
            Some(occ) if *occ != addr => {
                return Err(TreeError::SlotCollision { addr, occupant: *occ, slot })
            }
            _ => {}
        }
        self.slots.insert(slot, addr);
        self.accounts.insert(addr, account);
        self.root = OnceLock::new();
        Ok(())
    }

    pub fn set_balance(&mut self, addr: Address, balance: u64) -> Result<(), TreeError> {
        let nonce = self.nonce(&addr);
        self.set_account(addr, Account { balance, nonce })
    }

    pub fn credit(&mut self, addr: Address, amount: u64) -> Result<(), TreeError> {
        let mut a = self.account(&addr);
        a.balance = a.balance.checked_add(amount).ok_or(TreeError::Overflow(addr))?;
        self.set_account(addr, a)
    }

    pub fn debit(&mut self, addr: Address, amount: u64) -> Result<(), TreeError> {
        let mut a = self.account(&addr);
        a.balance = a.balance.checked_sub(amount).ok_or(TreeError::InsufficientBalance {
            addr,
            balance: a.balance,
            amount,
        })?;
        self.set_account(addr, a)
    }

    pub fn bump_nonce(&mut self, addr: Address) -> Result<(), TreeError> {
        let mut a = self.account(&addr);
        a.nonce += 1;
        self.set_account(addr, a)
    }

    fn leaves(&self) -> Vec<(u64, Digest)> {
        self.slots
            .iter()
            .map(|(slot, addr)| (*slot, leaf_digest(addr, &self.accounts[addr])))
            .collect()
    }

    pub fn root(&self) -> Digest {
        *self.root.get_or_init(|| subtree(&self.leaves(), self.depth))
    }

    /// Membership (or zero-balance) proof for `addr` against the current root.
    pub fn prove(&self, addr: &Address) -> MerkleProof {
        let leaves = self.leaves();
        let slot = slot_of(addr, self.depth);
        let account = self.account(addr);
        let mut path = Vec::with_capacity(self.depth as usize);
        let mut lo = 0usize;
        let mut hi = leaves.len();
        let mut prefix = 0u64;
        // Walk from the root down, collecting siblings; reversed at the end.
        for level in 0..self.depth {
            let height = self.depth - level - 1;
            let bit = (slot >> height) & 1;
            let left_prefix = prefix << 1;
            let split = lo + leaves[lo..hi].partition_point(|(s, _)| (s >> height) == left_prefix);
            let (sib_range, side) = if bit == 0 {
                ((split, hi), Side::Right)
            } else {
                ((lo, split), Side::Left)
            };
            let sibling = subtree(&leaves[sib_range.0..sib_range.1], height);
            path.push(ProofStep { side, sibling });
            if bit == 0 {
                hi = split;
            } else {
                lo = split;
            }
            prefix = left_prefix | bit;
        }
        path.reverse();
        MerkleProof {
            key: *addr,
            balance: account.balance,
            nonce: account.nonce,
            path,
            root: self.root(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    depth: u8,
    accounts: Vec<(Address, Account)>,
}

impl Serialize for AccountTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TreeRepr {
            depth: self.depth,
            accounts: self.accounts.iter().map(|(a, v)| (*a, *v)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AccountTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TreeRepr::deserialize(d)?;
        if !(1..=MAX_DEPTH).contains(&repr.depth) {
            return Err(serde::de::Error::custom("tree depth out of range"));
        }
        AccountTree::from_accounts(repr.depth, repr.accounts).map_err(serde::de::Error::custom)
    }
}

/// Root of the subtree of `height` holding `leaves`, all of which share the
/// same prefix above `height`.
fn subtree(leaves: &[(u64, Digest)], height: u8) -> Digest {
    if leaves.is_empty() {
        return empty_subtree(height);
    }
    if height == 0 {
        debug_assert_eq!(leaves.len(), 1);
        return leaves[0].1;
    }
    let bit = height - 1;
    let split = leaves.partition_point(|(s, _)| (s >> bit) & 1 == 0);
    let left = subtree(&leaves[..split], bit);
    let right = subtree(&leaves[split..], bit);
    node_digest(&left, &right)
}

impl MerkleProof {
    pub fn depth(&self) -> usize {
        self.path.len()
    }

    /// Recomputes the root from the claimed leaf; also checks that every
    /// step's side agrees with the key's slot bits.
    pub fn verify(&self) -> bool {
        let depth = self.path.len();
        if depth == 0 || depth > MAX_DEPTH as usize {
            return false;
        }
        let slot = slot_of(&self.key, depth as u8);
        let account = Account { balance: self.balance, nonce: self.nonce };
        let mut acc = leaf_digest(&self.key, &account);
        for (i, step) in self.path.iter().enumerate() {
            let bit = (slot >> i) & 1;
            acc = match (bit, step.side) {
                (0, Side::Right) => node_digest(&acc, &step.sibling),
                (1, Side::Left) => node_digest(&step.sibling, &acc),
                _ => return false,
            };
        }
        acc == self.root
    }

    /// `key ‖ balance ‖ nonce ‖ depth ‖ (side, sibling)*`, side 0 = left, 1 = right.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 + 8 + 1 + self.path.len() * 33);
        out.extend_from_slice(&self.key.0);
        out.extend_from_slice(&self.balance.to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.push(self.path.len() as u8);
        for step in &self.path {
            out.push(match step.side {
                Side::Left => 0,
                Side::Right => 1,
            });
            out.extend_from_slice(&step.sibling.0);
        }
        out
    }

    /// Inverse of [`MerkleProof::to_bytes`]; the root is supplied by the verifier.
    pub fn from_bytes(bytes: &[u8], root: Digest) -> Option<Self> {
        if bytes.len() < 49 {
            return None;
        }
        let key = crate::crypto::PublicKey(bytes[..32].try_into().ok()?);
        let balance = u64::from_be_bytes(bytes[32..40].try_into().ok()?);
        let nonce = u64::from_be_bytes(bytes[40..48].try_into().ok()?);
        let depth = bytes[48] as usize;
        let rest = &bytes[49..];
        if rest.len() != depth * 33 {
            return None;
        }
        let path = rest
            .chunks_exact(33)
            .map(|c| {
                let side = match c[0] {
                    0 => Side::Left,
                    1 => Side::Right,
                    _ => return None,
                };
                Some(ProofStep { side, sibling: Digest(c[1..].try_into().ok()?) })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { key, balance, nonce, path, root })
    }
}

pub fn verify_proof(proof: &MerkleProof) -> bool {
    proof.verify()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_keypair;

    fn addr(i: u64) -> Address {
        let mut s = [7u8; 32];
        s[..8].copy_from_slice(&i.to_be_bytes());
        gen_keypair(s).address()
    }

    #[test]
    fn empty_tree_root_is_empty_constant() {
        assert_eq!(AccountTree::new().root(), empty_subtree(32));
        assert_eq!(AccountTree::with_depth(4).root(), empty_subtree(4));
    }

    #[test]
    fn set_then_read_and_zero_equals_absent() {
        let a = addr(1);
        let mut t = AccountTree::new();
        t.set_balance(a, 10).unwrap();
        assert_eq!(t.balance(&a), 10);
        let before = AccountTree::new().root();
        t.set_balance(a, 0).unwrap();
        assert_eq!(t.root(), before);
        assert!(t.is_empty());
    }

    #[test]
    fn debit_below_zero_is_rejected_without_change() {
        let a = addr(1);
        let mut t = AccountTree::new();
        t.set_balance(a, 3).unwrap();
        let root = t.root();
        assert!(matches!(t.debit(a, 4), Err(TreeError::InsufficientBalance { .. })));
        assert_eq!(t.root(), root);
    }

    /// Depth-4 single-leaf root computed by hand: leaf, then four levels with
    /// empty siblings placed according to the slot bits.
    #[test]
    fn single_entry_depth4_matches_hand_chain() {
        let a = addr(42);
        let mut t = AccountTree::with_depth(4);
        t.set_balance(a, 99).unwrap();
        let slot = slot_of(&a, 4);
        let mut acc = hash_parts(&[&[0x00], &a.0, &99u64.to_be_bytes(), &0u64.to_be_bytes()]);
        for level in 0..4u8 {
            let empty = empty_subtree(level);
            acc = if (slot >> level) & 1 == 0 {
                hash_parts(&[&[0x01], &acc.0, &empty.0])
            } else {
                hash_parts(&[&[0x01], &empty.0, &acc.0])
            };
        }
        assert_eq!(t.root(), acc);
    }

    #[test]
    fn proofs_for_present_and_absent_keys() {
        let mut t = AccountTree::new();
        for i in 0..32 {
            t.set_balance(addr(i), 10 + i).unwrap();
        }
        for i in 0..32 {
            let p = t.prove(&addr(i));
            assert_eq!(p.balance, 10 + i);
            assert!(p.verify(), "proof {i}");
            assert_eq!(p.path.len(), 32);
        }
        let stranger = t.prove(&addr(1000));
        assert_eq!(stranger.balance, 0);
        assert!(stranger.verify());
    }

    #[test]
    fn tampered_proofs_fail() {
        let mut t = AccountTree::new();
        t.set_balance(addr(1), 10).unwrap();
        t.set_balance(addr(2), 5).unwrap();
        let p = t.prove(&addr(1));
        let mut bad = p.clone();
        bad.balance = 11;
        assert!(!bad.verify());
        let mut other_root = p.clone();
        other_root.root = AccountTree::new().root();
        assert!(!other_root.verify());
        let mut short = p.clone();
        short.path.pop();
        assert!(!short.verify());
        let mut empty = p;
        empty.path.clear();
        assert!(!empty.verify());
    }

    #[test]
    fn proof_bytes_round_trip() {
        let mut t = AccountTree::new();
        t.set_balance(addr(3), 77).unwrap();
        let p = t.prove(&addr(3));
        let back = MerkleProof::from_bytes(&p.to_bytes(), p.root).unwrap();
        assert_eq!(back, p);
        assert!(MerkleProof::from_bytes(&p.to_bytes()[..60], p.root).is_none());
    }

    #[test]
    fn slot_collision_is_reported() {
        let mut t = AccountTree::with_depth(1);
        let mut placed = Vec::new();
        let mut i = 0;
        while placed.len() < 3 {
            let a = addr(i);
            match t.set_balance(a, 1) {
                Ok(()) => placed.push(a),
                Err(TreeError::SlotCollision { .. }) => {
                    assert!(!t.can_hold(&a));
                    return;
                }
                Err(e) => panic!("{e}"),
            }
            i += 1;
        }
        panic!("depth-1 tree accepted three accounts");
    }
}

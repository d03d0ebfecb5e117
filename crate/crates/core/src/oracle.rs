//! Straight-line reference interpreter for auditing accepted states.
//!
//! Shares only the hash and signature primitives with the rest of the crate.
//! Encodings and the tree root are recomputed here from scratch, level by
//! level, so a bug in the optimized execution path shows up as a mismatch.

use std::collections::BTreeMap;

use crate::crypto::{hash, verify, Address, Digest, BURN_ADDRESS};
use crate::rollup::{Batch, BatchItem};

fn h(parts: &[&[u8]]) -> Digest {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(p);
    }
    hash(&buf)
}

fn be(v: u64) -> [u8; 8] {
    v.to_be_bytes()
}

/// Outcome of applying one batch to the oracle state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleStep {
    pub height: u64,
    pub state_hash: Digest,
    pub account_root: Digest,
    pub txs_hash: Digest,
    pub effects_hash: Digest,
    pub locks: Vec<(Digest, Address, u64)>,
    pub refunds: Vec<(Address, u64)>,
    pub rejected: usize,
}

#[derive(Clone, Debug)]
pub struct Oracle {
    depth: u8,
    accounts: BTreeMap<Address, (u64, u64)>,
    owners: BTreeMap<u64, Address>,
    height: u64,
    last_hash: Digest,
}

impl Oracle {
    pub fn new(depth: u8) -> Self {
        let mut o = Self {
            depth,
            accounts: BTreeMap::new(),
            owners: BTreeMap::new(),
            height: 0,
            last_hash: Digest::ZERO,
        };
        let root = o.root();
        let txs = batch_hash(&[]);
        o.last_hash = state_hash(0, &Digest::ZERO, &root, &txs);
        o
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn last_hash(&self) -> Digest {
        self.last_hash
    }

    pub fn balance(&self, a: &Address) -> u64 {
        self.accounts.get(a).map_or(0, |x| x.0)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&Address, u64)> {
        self.accounts.iter().map(|(a, x)| (a, x.0))
    }

    fn slot(&self, a: &Address) -> u64 {
        let d = h(&[&[0x03], &a.0]);
        let top = u64::from_be_bytes(d.0[..8].try_into().unwrap());
        if self.depth == 64 {
            top
        } else {
            top >> (64 - self.depth as u32)
        }
    }

    fn slot_free_for(&self, a: &Address) -> bool {
        self.owners.get(&self.slot(a)).is_none_or(|o| o == a)
    }

    fn put(&mut self, a: Address, bal: u64, nonce: u64) {
        let s = self.slot(&a);
        if bal == 0 && nonce == 0 {
            self.accounts.remove(&a);
            self.owners.remove(&s);
        } else {
            self.accounts.insert(a, (bal, nonce));
            self.owners.insert(s, a);
        }
    }

    /// Sparse Merkle root computed one level at a time over occupied slots.
    pub fn root(&self) -> Digest {
        let mut empty = h(&[&[0x02]]);
        let mut level: BTreeMap<u64, Digest> = self
            .accounts
            .iter()
            .map(|(a, (b, n))| (self.slot(a), h(&[&[0x00], &a.0, &be(*b), &be(*n)])))
            .collect();
        for _ in 0..self.depth {
            let mut up: BTreeMap<u64, Digest> = BTreeMap::new();
            for &k in level.keys() {
                let p = k >> 1;
                if up.contains_key(&p) {
                    continue;
                }
                let l = level.get(&(p << 1)).copied().unwrap_or(empty);
                let r = level.get(&((p << 1) | 1)).copied().unwrap_or(empty);
                up.insert(p, h(&[&[0x01], &l.0, &r.0]));
            }
            empty = h(&[&[0x01], &empty.0, &empty.0]);
            level = up;
        }
        level.get(&0).copied().unwrap_or(empty)
    }

    /// Applies `batch` on top of the current state.
    pub fn apply(&mut self, batch: &Batch) -> OracleStep {
        let mut locks = Vec::new();
        let mut refunds = Vec::new();
        let mut issued = Vec::new();
        let mut rejected = 0;
        let mut item_hashes = Vec::with_capacity(batch.items.len());
        for item in &batch.items {
            match item {
                BatchItem::Issue(r) => {
                    item_hashes.push(h(&[&[0x13], &r.deposit_id.0, &r.recipient.0, &be(r.value)]));
                    let (bal, nonce) = self.accounts.get(&r.recipient).copied().unwrap_or((0, 0));
                    let ok = r.value > 0
                        && r.recipient != BURN_ADDRESS
                        && !issued.contains(&r.deposit_id)
                        && bal.checked_add(r.value).is_some()
                        && self.slot_free_for(&r.recipient);
                    if ok {
                        self.put(r.recipient, bal + r.value, nonce);
                        issued.push(r.deposit_id);
                        locks.push((r.deposit_id, r.recipient, r.value));
                    } else {
                        rejected += 1;
                    }
                }
                BatchItem::Transfer(t) => {
                    item_hashes.push(h(&[
                        &[0x12],
                        &t.sender.0,
                        &t.receiver.0,
                        &be(t.value),
                        &be(t.nonce),
                        &t.signature.value.0,
                    ]));
                    let body = h(&[&[0x11], &t.sender.0, &t.receiver.0, &be(t.value), &be(t.nonce)]);
                    let (sb, sn) = self.accounts.get(&t.sender).copied().unwrap_or((0, 0));
                    let mut ok = t.value > 0
                        && t.sender != BURN_ADDRESS
                        && verify(&body.0, &t.signature, &t.sender)
                        && t.nonce == sn
                        && sb >= t.value;
                    if ok && t.receiver != t.sender {
                        let rb = self.balance(&t.receiver);
                        ok = rb.checked_add(t.value).is_some() && self.slot_free_for(&t.receiver);
                    }
                    if !ok {
                        rejected += 1;
                        continue;
                    }
                    self.put(t.sender, sb - t.value, sn + 1);
                    let (rb, rn) = self.accounts.get(&t.receiver).copied().unwrap_or((0, 0));
                    self.put(t.receiver, rb + t.value, rn);
                    if t.receiver == BURN_ADDRESS {
                        refunds.push((t.sender, t.value));
                    }
                }
            }
        }
        let txs_hash = batch_hash(&item_hashes);
        let account_root = self.root();
        self.height += 1;
        let sh = state_hash(self.height, &self.last_hash, &account_root, &txs_hash);
        self.last_hash = sh;
        OracleStep {
            height: self.height,
            state_hash: sh,
            account_root,
            txs_hash,
            effects_hash: effects_hash(&locks, &refunds),
            locks,
            refunds,
            rejected,
        }
    }
}

fn batch_hash(items: &[Digest]) -> Digest {
    let mut buf = vec![0x14];
    buf.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for i in items {
        buf.extend_from_slice(&i.0);
    }
    hash(&buf)
}

fn state_hash(height: u64, prev: &Digest, root: &Digest, txs: &Digest) -> Digest {
    h(&[&[0x10], &be(height), &prev.0, &root.0, &txs.0])
}

fn effects_hash(locks: &[(Digest, Address, u64)], refunds: &[(Address, u64)]) -> Digest {
    let mut buf = vec![0x15];
    buf.extend_from_slice(&(locks.len() as u32).to_be_bytes());
    for (id, a, v) in locks {
        buf.extend_from_slice(&id.0);
        buf.extend_from_slice(&a.0);
        buf.extend_from_slice(&be(*v));
    }
    buf.extend_from_slice(&(refunds.len() as u32).to_be_bytes());
    for (a, v) in refunds {
        buf.extend_from_slice(&a.0);
        buf.extend_from_slice(&be(*v));
    }
    hash(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_keypair;
    use crate::merkle::AccountTree;
    use crate::rollup::{execute, IssueRecord, RollupState, RollupTx};

    #[test]
    fn genesis_matches() {
        let o = Oracle::new(32);
        assert_eq!(o.last_hash(), RollupState::genesis(32).hash());
        assert_eq!(o.root(), AccountTree::new().root());
    }

    #[test]
    fn agrees_with_execute_on_a_small_batch() {
        let a = gen_keypair([1; 32]);
        let b = gen_keypair([2; 32]).address();
        let batch = Batch::new(vec![
            BatchItem::Issue(IssueRecord { deposit_id: Digest([7; 32]), recipient: a.address(), value: 10 }),
            BatchItem::Transfer(RollupTx::signed(&a, b, 4, 0)),
            BatchItem::Transfer(RollupTx::signed(&a, b, 4, 0)),
            BatchItem::Transfer(RollupTx::signed(&a, BURN_ADDRESS, 3, 1)),
        ]);
        let g = RollupState::genesis(32);
        let out = execute(&g, &AccountTree::new(), &batch).unwrap();
        let mut o = Oracle::new(32);
        let step = o.apply(&batch);
        assert_eq!(step.state_hash, out.state.hash());
        assert_eq!(step.effects_hash, out.effects.hash());
        assert_eq!(step.rejected, out.rejected.len());
        assert_eq!(o.balance(&b), 4);
        assert_eq!(o.balance(&BURN_ADDRESS), 3);
    }
}

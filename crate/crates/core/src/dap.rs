//! Data-availability provider: stores metadata for accepted states, serves
//! proofs and state sync, and answers storage audits.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::adversary::DapBehavior;
use crate::chain::ChainTx;
use crate::contracts::{AuditResponse, ChainEvent, ContractCall};
use crate::crypto::{Address, Digest, KeyPair};
use crate::rollup::{Metadata, RollupState};
use crate::sim::actor::{Actor, Ctx, Message, Notice, Timer, US_PER_S};

pub struct DapNode {
    index: u32,
    key: KeyPair,
    behavior: DapBehavior,
    rng: ChaCha20Rng,
    sequencers: u32,
    sync_timeout_s: u64,
    store: BTreeMap<u64, Rc<Metadata>>,
    /// Accepted (state, effects hash) per height, as recorded on chain.
    onchain: BTreeMap<u64, (RollupState, Digest)>,
    /// Pushes that arrived before their state was accepted.
    early: HashMap<Digest, Rc<Metadata>>,
    skipped: BTreeMap<u64, bool>,
}

impl DapNode {
    pub fn new(
        index: u32,
        key: KeyPair,
        behavior: DapBehavior,
        rng: ChaCha20Rng,
        sequencers: u32,
        sync_timeout_s: u64,
    ) -> Self {
        Self {
            index,
            key,
            behavior,
            rng,
            sequencers,
            sync_timeout_s,
            store: BTreeMap::new(),
            onchain: BTreeMap::new(),
            early: HashMap::new(),
            skipped: BTreeMap::new(),
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn stored_heights(&self) -> impl Iterator<Item = u64> + '_ {
        self.store.keys().copied()
    }

    /// Whether this DAP keeps data for `height`, decided once per height.
    fn keeps(&mut self, height: u64) -> bool {
        if self.behavior.drop_after_height.is_some_and(|h| height > h) {
            return false;
        }
        let p = self.behavior.drop_prob;
        let rng = &mut self.rng;
        !*self.skipped.entry(height).or_insert_with(|| p > 0.0 && rng.gen_bool(p))
    }

    fn offer(&mut self, meta: Rc<Metadata>) {
        let h = meta.state.height;
        if self.store.contains_key(&h) || !self.keeps(h) {
            return;
        }
        match self.onchain.get(&h) {
            Some((state, eh)) => {
                if *state == meta.state && *eh == meta.effects.hash() && meta.is_consistent() {
                    self.store.insert(h, meta);
                }
            }
            None => {
                self.early.insert(meta.state.hash(), meta);
            }
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        if let Timer::DapSyncCheck { height } = timer {
            if !self.store.contains_key(&height) && self.keeps(height) {
                for i in 0..self.sequencers {
                    ctx.send(Actor::Seq(i), Message::SyncRequest { height });
                }
            }
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, from: Actor, msg: Message) {
        match msg {
            Message::MetadataPush(m) | Message::SyncResponse(m) => self.offer(m),
            Message::SyncRequest { height } => {
                if let Some(m) = self.store.get(&height) {
                    ctx.send(from, Message::SyncResponse(m.clone()));
                }
            }
            Message::ProofRequest { addr, height } => {
                let proof = self.store.get(&height).map(|m| m.tree.prove(&addr));
                ctx.send(from, Message::ProofResponse { addr, height, proof });
            }
            Message::Chain(notices) => {
                for n in notices.iter() {
                    self.on_notice(ctx, n);
                }
            }
            _ => {}
        }
    }

    fn on_notice(&mut self, ctx: &mut Ctx, n: &Notice) {
        match &n.event {
            ChainEvent::StateUpdated { height, state, qc, .. } => {
                self.onchain.insert(*height, (*state, qc.effects_hash));
                match self.early.remove(&state.hash()) {
                    Some(m) => self.offer(m),
                    None => ctx.timer(self.sync_timeout_s * US_PER_S, Timer::DapSyncCheck { height: *height }),
                }
                self.early.retain(|_, m| m.state.height > *height);
            }
            ChainEvent::AuditRequested { id, height, keys, daps } => {
                if !daps.contains(&self.address()) {
                    return;
                }
                let Some(meta) = self.store.get(height) else { return };
                let mut proofs: Vec<_> = keys.iter().map(|k| meta.tree.prove(k)).collect();
                if self.behavior.garbage {
                    for p in &mut proofs {
                        p.balance = p.balance.wrapping_add(1);
                    }
                }
                let response = AuditResponse { proofs, item_hashes: meta.batch.item_hashes() };
                ctx.chain(ChainTx::call(self.address(), ContractCall::AuditRespond { id: *id, response }));
            }
            _ => {}
        }
    }
}

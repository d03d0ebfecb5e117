//! The sequencer actor: mempool, proposals, votes, chain submission,
//! metadata delivery and challenge responses.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::rc::Rc;

use crate::chain::ChainTx;
use crate::contracts::{ChainEvent, ContractCall};
use crate::crypto::{Address, Digest, KeyPair, PublicKey};
use crate::merkle::AccountTree;
use crate::rollup::{
    aggregate_qc, Batch, BatchItem, Effects, IssueRecord, Metadata, Proposal, QuorumCertificate, RollupState,
    RollupTx, Vote,
};
use crate::sim::actor::{Actor, Ctx, Message, Notice, Timer, US_PER_S};
use crate::sim::config::TimingConfig;
use crate::sim::trace::TraceBody;
use crate::tee::Enclave;

#[derive(Clone, Debug)]
struct Accepted {
    state: RollupState,
    qc: QuorumCertificate,
    meta: Option<Rc<Metadata>>,
    submitter: Address,
}

pub struct SequencerNode {
    index: u32,
    n: u32,
    f: usize,
    enclave: Enclave,
    host: KeyPair,
    registry: Vec<PublicKey>,
    batch_size: usize,
    timing: TimingConfig,
    daps: u32,

    tip: RollupState,
    tip_meta: Option<Rc<Metadata>>,
    frozen: bool,
    accepted: BTreeMap<u64, Accepted>,
    snapshots: HashMap<Digest, Rc<Metadata>>,

    mempool: VecDeque<RollupTx>,
    in_pool: HashSet<Digest>,
    included: HashMap<Digest, u64>,
    issues: BTreeMap<u64, IssueRecord>,
    issue_seq: HashMap<Digest, u64>,
    next_issue: u64,
    dead_issues: HashSet<Digest>,
    /// Open challenges: id → transaction, and the height that includes it.
    challenges: BTreeMap<Digest, (RollupTx, Option<u64>)>,

    armed: Option<u64>,
    endorsed: Option<Rc<Proposal>>,
    votes: HashMap<(u64, Digest, Digest), BTreeMap<PublicKey, Vote>>,
    qcs: HashMap<Digest, QuorumCertificate>,
    submitted: HashSet<Digest>,
    waiting: Vec<Rc<Proposal>>,
}

impl SequencerNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: u32,
        n: u32,
        f: usize,
        enclave: Enclave,
        host: KeyPair,
        registry: Vec<PublicKey>,
        batch_size: usize,
        timing: TimingConfig,
        daps: u32,
        genesis: RollupState,
        genesis_tree: AccountTree,
    ) -> Self {
        let meta = Rc::new(Metadata {
            state: genesis,
            tree: genesis_tree,
            batch: Batch::default(),
            effects: Effects::default(),
            rejected: Vec::new(),
        });
        let mut snapshots = HashMap::new();
        snapshots.insert(genesis.hash(), meta.clone());
        Self {
            index,
            n,
            f,
            enclave,
            host,
            registry,
            batch_size,
            timing,
            daps,
            tip: genesis,
            tip_meta: Some(meta),
            frozen: false,
            accepted: BTreeMap::new(),
            snapshots,
            mempool: VecDeque::new(),
            in_pool: HashSet::new(),
            included: HashMap::new(),
            issues: BTreeMap::new(),
            issue_seq: HashMap::new(),
            next_issue: 0,
            dead_issues: HashSet::new(),
            challenges: BTreeMap::new(),
            armed: None,
            endorsed: None,
            votes: HashMap::new(),
            qcs: HashMap::new(),
            submitted: HashSet::new(),
            waiting: Vec::new(),
        }
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn host_address(&self) -> Address {
        self.host.address()
    }

    pub fn enclave(&self) -> &Enclave {
        &self.enclave
    }

    pub fn tip(&self) -> &RollupState {
        &self.tip
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn set_crashed(&mut self, ctx: &mut Ctx, crashed: bool) {
        self.enclave.set_crashed(crashed);
        if !crashed {
            self.armed = None;
            self.maybe_arm(ctx);
        }
    }

    fn peers(&self) -> impl Iterator<Item = Actor> + '_ {
        (0..self.n).filter(move |&i| i != self.index).map(Actor::Seq)
    }

    fn rank(&self, height: u64) -> u64 {
        let r = (self.index as u64 + self.n as u64 - height % self.n as u64) % self.n as u64;
        r.saturating_sub(self.timing.extra_leaders as u64)
    }

    fn has_work(&self) -> bool {
        !self.issues.is_empty()
            || !self.mempool.is_empty()
            || self.challenges.values().any(|(_, h)| h.is_none())
    }

    fn maybe_arm(&mut self, ctx: &mut Ctx) {
        let next = self.tip.height + 1;
        if self.frozen || self.tip_meta.is_none() || self.armed == Some(next) {
            return;
        }
        if !self.has_work() && self.endorsed.is_none() {
            return;
        }
        let delay = self.timing.propose_delay_ms * 1000 + self.rank(next) * self.timing.backup_delay_s * US_PER_S;
        self.armed = Some(next);
        ctx.timer(delay, Timer::Propose { height: next });
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Propose { height } => {
                if self.armed == Some(height) {
                    self.armed = None;
                }
                if height != self.tip.height + 1 || self.frozen {
                    self.maybe_arm(ctx);
                    return;
                }
                self.propose(ctx);
                if self.endorsed.is_some() {
                    // Retry later if the height does not advance.
                    self.armed = Some(height);
                    let again = self.n as u64 * self.timing.backup_delay_s * US_PER_S;
                    ctx.timer(again, Timer::Propose { height });
                }
            }
            Timer::BackupSubmit { height, state_hash } => {
                if height == self.tip.height + 1 && !self.frozen {
                    self.submit(ctx, state_hash);
                }
            }
            Timer::BackupResolve { id } => {
                if let Some((_, Some(h))) = self.challenges.get(&id) {
                    let h = *h;
                    self.send_resolve(ctx, id, h);
                }
            }
            Timer::SyncRetry { height } => {
                let missing = self.accepted.get(&height).is_some_and(|a| a.meta.is_none());
                if missing && !self.frozen {
                    self.request_sync(ctx, height);
                }
            }
            _ => {}
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, from: Actor, msg: Message) {
        match msg {
            Message::ClientTx(tx) => self.on_client_tx(ctx, tx),
            Message::Proposal(p) => self.on_proposal(ctx, p),
            Message::Vote { height, vote } => self.on_vote(ctx, height, vote),
            Message::SyncRequest { height } => {
                if let Some(meta) = self.accepted.get(&height).and_then(|a| a.meta.clone()) {
                    ctx.send(from, Message::SyncResponse(meta));
                }
            }
            Message::SyncResponse(meta) => self.on_sync(ctx, meta),
            Message::Chain(notices) => {
                for n in notices.iter() {
                    self.on_notice(ctx, n);
                }
            }
            _ => {}
        }
    }

    /// Queues a client transfer; duplicates and stale nonces are dropped.
    pub fn on_client_tx(&mut self, ctx: &mut Ctx, tx: RollupTx) {
        if self.frozen {
            return;
        }
        let h = tx.hash();
        if self.in_pool.contains(&h) || self.included.contains_key(&h) {
            return;
        }
        if let Some(meta) = &self.tip_meta {
            if tx.nonce < meta.tree.nonce(&tx.sender) {
                return;
            }
        }
        self.in_pool.insert(h);
        self.mempool.push_back(tx);
        self.maybe_arm(ctx);
    }

    fn build_batch(&mut self, tree: &AccountTree) -> Batch {
        let mut items: Vec<BatchItem> = Vec::new();
        for rec in self.issues.values() {
            if items.len() == self.batch_size {
                break;
            }
            items.push(BatchItem::Issue(*rec));
        }
        let forced: Vec<RollupTx> = self
            .challenges
            .values()
            .filter(|(_, h)| h.is_none())
            .map(|(tx, _)| tx.clone())
            .collect();
        let room = self.batch_size.saturating_sub(items.len() + forced.len());
        let mut next_nonce: HashMap<Address, u64> = HashMap::new();
        let mut queued: HashMap<Address, BTreeMap<u64, &RollupTx>> = HashMap::new();
        let mut stale = Vec::new();
        for tx in &self.mempool {
            let e = *next_nonce.entry(tx.sender).or_insert_with(|| tree.nonce(&tx.sender));
            if tx.nonce < e {
                stale.push(tx.hash());
            } else {
                queued.entry(tx.sender).or_default().entry(tx.nonce).or_insert(tx);
            }
        }
        // Arrival order decides who goes first; each sender then contributes
        // its run of consecutive nonces.
        let mut picked = 0;
        for tx in &self.mempool {
            if picked == room {
                break;
            }
            let Some(q) = queued.get_mut(&tx.sender) else { continue };
            let e = next_nonce.get_mut(&tx.sender).expect("seen above");
            while picked < room {
                let Some(t) = q.remove(e) else { break };
                *e += 1;
                items.push(BatchItem::Transfer(t.clone()));
                picked += 1;
            }
        }
        let mut seen: HashSet<Digest> = items.iter().map(BatchItem::hash).collect();
        for tx in forced {
            if items.len() == self.batch_size {
                break;
            }
            if seen.insert(tx.hash()) {
                items.push(BatchItem::Transfer(tx));
            }
        }
        if !stale.is_empty() {
            let stale: HashSet<Digest> = stale.into_iter().collect();
            self.mempool.retain(|t| !stale.contains(&t.hash()));
            for h in &stale {
                self.in_pool.remove(h);
            }
        }
        Batch::new(items)
    }

    fn propose(&mut self, ctx: &mut Ctx) {
        if let Some(p) = self.endorsed.clone() {
            if p.state.height == self.tip.height + 1 {
                // Already endorsed a proposal at this height: push it again.
                for peer in self.peers().collect::<Vec<_>>() {
                    ctx.send(peer, Message::Proposal(p.clone()));
                }
                return;
            }
        }
        if !self.has_work() {
            return;
        }
        let Some(meta) = self.tip_meta.clone() else { return };
        let batch = self.build_batch(&meta.tree);
        if batch.is_empty() {
            return;
        }
        ctx.work(self.timing.exec_us(batch.len()));
        let Ok((out, sig)) = self.enclave.resume(&self.tip, &meta.tree, &batch) else { return };
        let sh = out.state.hash();
        let eh = out.effects.hash();
        let vote = Vote::from_signature(sh, eh, sig);
        let snapshot = Rc::new(Metadata::from_output(batch.clone(), &out));
        self.snapshots.insert(sh, snapshot);
        let proposal = Rc::new(Proposal {
            parent: self.tip,
            state: out.state,
            batch: batch.clone(),
            effects: out.effects,
            leader_vote: vote,
        });
        ctx.trace(TraceBody::Propose {
            node: self.index,
            height: out.state.height,
            state_hash: sh,
            items: batch.len() as u32,
            started_us: ctx.now,
        });
        ctx.publish(sh, Rc::new(batch));
        self.endorsed = Some(proposal.clone());
        for peer in self.peers().collect::<Vec<_>>() {
            ctx.send(peer, Message::Proposal(proposal.clone()));
        }
        self.cast_vote(ctx, out.state.height, vote);
    }

    fn cast_vote(&mut self, ctx: &mut Ctx, height: u64, vote: Vote) {
        ctx.trace(TraceBody::Vote {
            node: self.index,
            height,
            state_hash: vote.state_hash,
            effects_hash: vote.effects_hash,
            forged: false,
        });
        for peer in self.peers().collect::<Vec<_>>() {
            ctx.send(peer, Message::Vote { height, vote });
        }
        self.on_vote(ctx, height, vote);
    }

    fn on_proposal(&mut self, ctx: &mut Ctx, p: Rc<Proposal>) {
        if self.frozen || p.state.height <= self.tip.height {
            return;
        }
        if p.state.height > self.tip.height + 1 || self.tip_meta.is_none() {
            self.waiting.push(p);
            return;
        }
        if p.parent != self.tip {
            return;
        }
        let Some(meta) = self.tip_meta.clone() else { return };
        let sh = p.state.hash();
        if self.snapshots.contains_key(&sh) && self.endorsed.as_ref().is_some_and(|e| e.state == p.state) {
            return;
        }
        ctx.work(self.timing.exec_us(p.batch.len()));
        if let Ok((vote, out)) = self.enclave.vote_with_output(&p, &meta.tree) {
            self.snapshots.insert(sh, Rc::new(Metadata::from_output(p.batch.clone(), &out)));
            self.endorsed = Some(p.clone());
            self.cast_vote(ctx, p.state.height, vote);
        }
    }

    fn on_vote(&mut self, ctx: &mut Ctx, height: u64, vote: Vote) {
        if self.frozen || height <= self.tip.height {
            return;
        }
        ctx.work(self.timing.verify_us.round() as u64);
        if !self.registry.contains(&vote.voter) || !vote.signature_valid() {
            return;
        }
        let key = (height, vote.state_hash, vote.effects_hash);
        let set = self.votes.entry(key).or_default();
        if set.contains_key(&vote.voter) {
            return;
        }
        set.insert(vote.voter, vote);
        if set.len() != self.f + 1 {
            return;
        }
        let votes: Vec<Vote> = set.values().copied().collect();
        let Ok(qc) = aggregate_qc(&votes, self.f, &self.registry) else { return };
        let sh = vote.state_hash;
        self.qcs.insert(sh, qc);
        ctx.trace(TraceBody::Qc { node: self.index, height, state_hash: sh });
        let leader = self.snapshots.contains_key(&sh)
            && self
                .endorsed
                .as_ref()
                .is_some_and(|p| p.state.hash() == sh && p.leader_vote.voter == self.enclave.public_key());
        if leader {
            self.submit(ctx, sh);
        } else {
            ctx.timer(self.timing.backup_delay_s * US_PER_S, Timer::BackupSubmit { height, state_hash: sh });
        }
    }

    fn submit(&mut self, ctx: &mut Ctx, sh: Digest) {
        if self.submitted.contains(&sh) {
            return;
        }
        let (Some(meta), Some(qc)) = (self.snapshots.get(&sh), self.qcs.get(&sh)) else { return };
        self.submitted.insert(sh);
        ctx.publish(sh, Rc::new(meta.batch.clone()));
        ctx.chain(ChainTx::call(
            self.host.address(),
            ContractCall::UpdateState { state: meta.state, qc: qc.clone(), effects: meta.effects.clone() },
        ));
    }

    fn request_sync(&mut self, ctx: &mut Ctx, height: u64) {
        for d in 0..self.daps {
            ctx.send(Actor::Dap(d), Message::SyncRequest { height });
        }
        for peer in self.peers().collect::<Vec<_>>() {
            ctx.send(peer, Message::SyncRequest { height });
        }
        ctx.timer(self.timing.sync_timeout_s * US_PER_S, Timer::SyncRetry { height });
    }

    fn on_sync(&mut self, ctx: &mut Ctx, meta: Rc<Metadata>) {
        let h = meta.state.height;
        let Some(acc) = self.accepted.get(&h) else { return };
        if acc.meta.is_some() || acc.state != meta.state || acc.qc.effects_hash != meta.effects.hash() {
            return;
        }
        ctx.work(self.timing.exec_us(meta.tree.len()));
        if !meta.is_consistent() {
            return;
        }
        self.snapshots.insert(meta.state.hash(), meta.clone());
        self.accepted.get_mut(&h).expect("present").meta = Some(meta.clone());
        self.absorb(ctx, h, &meta, false);
        if h == self.tip.height {
            self.tip_meta = Some(meta);
            self.after_tip(ctx);
        }
    }

    fn on_notice(&mut self, ctx: &mut Ctx, n: &Notice) {
        match &n.event {
            ChainEvent::Deposit { id, recipient, value, .. } => {
                if self.frozen || self.dead_issues.contains(id) || self.issue_seq.contains_key(id) {
                    return;
                }
                let seq = self.next_issue;
                self.next_issue += 1;
                self.issue_seq.insert(*id, seq);
                self.issues.insert(seq, IssueRecord { deposit_id: *id, recipient: *recipient, value: *value });
                self.maybe_arm(ctx);
            }
            ChainEvent::DepositSolved { id } | ChainEvent::DepositRefunded { id, .. } => {
                self.dead_issues.insert(*id);
                if let Some(seq) = self.issue_seq.remove(id) {
                    self.issues.remove(&seq);
                }
            }
            ChainEvent::StateUpdated { height, state, qc, .. } => {
                self.on_accepted(ctx, *height, *state, qc.clone(), n.sender);
            }
            ChainEvent::Challenge { id, tx, .. } => {
                if self.frozen {
                    return;
                }
                let at = self.included.get(&tx.hash()).copied();
                self.challenges.insert(*id, (tx.clone(), at));
                match at {
                    Some(h) => self.resolve(ctx, *id, h, false),
                    None => self.maybe_arm(ctx),
                }
            }
            ChainEvent::ChallengeResolved { id, .. } => {
                self.challenges.remove(id);
            }
            ChainEvent::Settle { .. } => {
                self.frozen = true;
                self.challenges.clear();
                self.mempool.clear();
                self.issues.clear();
            }
            _ => {}
        }
    }

    fn on_accepted(&mut self, ctx: &mut Ctx, height: u64, state: RollupState, qc: QuorumCertificate, submitter: Address) {
        if height <= self.tip.height {
            return;
        }
        let sh = state.hash();
        let meta = self.snapshots.get(&sh).cloned();
        self.accepted.insert(height, Accepted { state, qc, meta: meta.clone(), submitter });
        self.tip = state;
        self.tip_meta = meta.clone();
        self.votes.retain(|k, _| k.0 > height);
        self.snapshots.retain(|_, m| m.state.height >= height);
        self.endorsed = None;
        self.armed = None;
        match meta {
            Some(m) => {
                self.absorb(ctx, height, &m, submitter == self.host.address());
                self.after_tip(ctx);
            }
            None => self.request_sync(ctx, height),
        }
    }

    fn after_tip(&mut self, ctx: &mut Ctx) {
        let waiting = std::mem::take(&mut self.waiting);
        for p in waiting {
            if p.state.height == self.tip.height + 1 {
                self.on_proposal(ctx, p);
            } else if p.state.height > self.tip.height + 1 {
                self.waiting.push(p);
            }
        }
        self.maybe_arm(ctx);
    }

    /// Folds an accepted batch into local bookkeeping: rebase the mempool,
    /// retire issues, answer challenges, and (as submitter) deliver results.
    fn absorb(&mut self, ctx: &mut Ctx, height: u64, meta: &Rc<Metadata>, submitter: bool) {
        let rejected: HashSet<u32> = meta.rejected.iter().map(|r| r.index).collect();
        let mut hashes = HashSet::new();
        for (i, item) in meta.batch.items.iter().enumerate() {
            match item {
                BatchItem::Transfer(tx) => {
                    let h = tx.hash();
                    self.included.insert(h, height);
                    hashes.insert(h);
                    if submitter && !rejected.contains(&(i as u32)) {
                        ctx.send(Actor::Clients, Message::ClientReply { tx_hash: h, height });
                    }
                }
                BatchItem::Issue(rec) => {
                    // Rejected issues would fail forever; leave them to expire.
                    self.dead_issues.insert(rec.deposit_id);
                    if let Some(seq) = self.issue_seq.remove(&rec.deposit_id) {
                        self.issues.remove(&seq);
                    }
                }
            }
        }
        if !hashes.is_empty() {
            self.mempool.retain(|t| !hashes.contains(&t.hash()));
            self.in_pool.retain(|h| !hashes.contains(h));
        }
        let due: Vec<Digest> = self
            .challenges
            .iter()
            .filter(|(_, (tx, at))| at.is_none() && hashes.contains(&tx.hash()))
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            if let Some(c) = self.challenges.get_mut(&id) {
                c.1 = Some(height);
            }
            self.resolve(ctx, id, height, submitter);
        }
        if submitter {
            for d in 0..self.daps {
                ctx.send(Actor::Dap(d), Message::MetadataPush(meta.clone()));
            }
        }
    }

    fn resolve(&mut self, ctx: &mut Ctx, id: Digest, height: u64, now: bool) {
        if now || self.rank(height) == 0 {
            self.send_resolve(ctx, id, height);
        } else {
            let wait = self.rank(height) * self.timing.backup_delay_s * US_PER_S;
            ctx.timer(wait, Timer::BackupResolve { id });
        }
    }

    fn send_resolve(&mut self, ctx: &mut Ctx, id: Digest, height: u64) {
        let Some(acc) = self.accepted.get(&height) else { return };
        let Some(meta) = &acc.meta else { return };
        ctx.chain(ChainTx::call(
            self.host.address(),
            ContractCall::ResolveChallenge {
                id,
                height,
                qc: acc.qc.clone(),
                item_hashes: meta.batch.item_hashes(),
            },
        ));
    }

    pub fn accepted_submitter(&self, height: u64) -> Option<Address> {
        self.accepted.get(&height).map(|a| a.submitter)
    }
}

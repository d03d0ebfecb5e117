//! Discrete-event simulation of the full system.
//!
//! Time is in microseconds. Every actor handles one event at a time; work
//! declared through [`actor::Ctx::work`] delays its outputs and defers later
//! events. Chain calls travel over the network and are mined into the next
//! block slot; chain events reach every observer one network hop later.

pub mod actor;
pub mod clients;
pub mod config;
pub mod network;
pub mod report;
pub mod rng;
pub mod trace;
pub mod verify;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;

use rand::Rng;

use crate::adversary::{apply_profile, Coalition, ResolvedProfile};
use crate::chain::{ChainConfig, ChainLedger, ChainTx};
use crate::contracts::{dap_register_digest, ChainEvent, ContractCall, ContractParams};
use crate::crypto::{gen_keypair, sign_digest, Digest, KeyPair};
use crate::dap::DapNode;
use crate::merkle::AccountTree;
use crate::rollup::{Batch, RollupState};
use crate::sequencer::SequencerNode;
use crate::tee::{program_hash, AttestationService};

use actor::{Action, Actor, Ctx, Message, MsgKind, Notice, Timer, US_PER_S};
use clients::ClientPool;
use config::{ConfigError, ScenarioConfig};
use network::Network;
use report::MetricsReport;
use rng::stream;
use trace::{ReceiptSummary, Trace, TraceBody, TraceHeader, TraceRecord, TRACE_VERSION};
use verify::{verify_trace, Violation};

/// Modeled size of a chain call on the wire.
const CHAIN_CALL_BYTES: u64 = 512;

enum EventKind {
    Deliver { from: Actor, to: Actor, msg: Message },
    Timer { to: Actor, timer: Timer },
    ChainArrive(ChainTx),
    Block,
    Crash { node: u32, down: bool },
}

struct Event {
    t: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(o.t, o.seq))
    }
}

pub struct RunOutput {
    pub trace: Trace,
    pub report: MetricsReport,
    pub violations: Vec<Violation>,
}

struct World {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    busy_until: HashMap<Actor, u64>,
    network: Network,
    ledger: ChainLedger,
    block_interval_us: u64,
    block_pending: bool,
    mempool: Vec<ChainTx>,
    published: HashMap<Digest, Rc<Batch>>,
    records: Vec<TraceRecord>,
    sequencers: Vec<SequencerNode>,
    daps: Vec<DapNode>,
    clients: ClientPool,
    coalition: Option<Coalition>,
}

impl World {
    fn push(&mut self, t: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event { t, seq: self.seq, kind }));
    }

    fn observers(&self) -> Vec<Actor> {
        let mut v: Vec<Actor> = (0..self.sequencers.len() as u32).map(Actor::Seq).collect();
        v.extend((0..self.daps.len() as u32).map(Actor::Dap));
        v.push(Actor::Clients);
        if self.coalition.is_some() {
            v.push(Actor::Adversary);
        }
        v
    }

    fn dispatch(&mut self, to: Actor, f: impl FnOnce(&mut World, &mut Ctx)) {
        let mut ctx = Ctx::new(self.now, to);
        f(self, &mut ctx);
        let (work, actions) = ctx.into_parts();
        let done = self.now + work;
        if work > 0 {
            self.busy_until.insert(to, done);
        }
        self.apply_actions(to, done, actions);
    }

    fn apply_actions(&mut self, from: Actor, t: u64, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    for at in self.network.route(t, from, to, msg.kind(), msg.wire_size()) {
                        self.push(at, EventKind::Deliver { from, to, msg: msg.clone() });
                    }
                }
                Action::Chain(tx) => {
                    for at in self.network.route(t, from, Actor::Chain, MsgKind::ChainCall, CHAIN_CALL_BYTES) {
                        self.push(at, EventKind::ChainArrive(tx.clone()));
                    }
                }
                Action::Timer { after_us, timer } => self.push(t + after_us, EventKind::Timer { to: from, timer }),
                Action::Trace(body) => self.records.push(TraceRecord { t_us: t, body }),
                Action::Publish { state_hash, batch } => {
                    self.published.entry(state_hash).or_insert(batch);
                }
            }
        }
    }

    fn handle(&mut self, ev: Event) {
        self.now = ev.t;
        match ev.kind {
            EventKind::Deliver { from, to, msg } => {
                self.dispatch(to, |w, ctx| match to {
                    Actor::Seq(i) => w.sequencers[i as usize].on_message(ctx, from, msg),
                    Actor::Dap(i) => w.daps[i as usize].on_message(ctx, from, msg),
                    Actor::Clients => w.clients.on_message(ctx, from, msg),
                    Actor::Adversary => {
                        if let Some(c) = w.coalition.as_mut() {
                            c.on_message(ctx, msg)
                        }
                    }
                    Actor::Chain => {}
                });
            }
            EventKind::Timer { to, timer } => {
                self.dispatch(to, |w, ctx| match to {
                    Actor::Seq(i) => w.sequencers[i as usize].on_timer(ctx, timer),
                    Actor::Dap(i) => w.daps[i as usize].on_timer(ctx, timer),
                    Actor::Clients => w.clients.on_timer(ctx, timer),
                    Actor::Adversary => {
                        if let Some(c) = w.coalition.as_mut() {
                            c.on_timer(ctx, timer)
                        }
                    }
                    Actor::Chain => {}
                });
            }
            EventKind::ChainArrive(tx) => {
                self.mempool.push(tx);
                if !self.block_pending {
                    self.block_pending = true;
                    let slot = (self.now / self.block_interval_us + 1) * self.block_interval_us;
                    self.push(slot, EventKind::Block);
                }
            }
            EventKind::Block => {
                self.block_pending = false;
                let mut txs = std::mem::take(&mut self.mempool);
                txs.sort_by_cached_key(|tx| (tx.sender, tx.hash()));
                self.mine(self.now / US_PER_S, txs);
            }
            EventKind::Crash { node, down } => {
                self.dispatch(Actor::Seq(node), |w, ctx| w.sequencers[node as usize].set_crashed(ctx, down));
            }
        }
    }

    fn mine(&mut self, timestamp: u64, txs: Vec<ChainTx>) {
        let receipts = self.ledger.apply_block(timestamp, txs.clone()).expect("block times are monotone");
        let mut notices = Vec::new();
        let mut batches = Vec::new();
        for r in &receipts {
            for e in &r.events {
                if let ChainEvent::StateUpdated { height, state, .. } = e {
                    let sh = state.hash();
                    if let Some(b) = self.published.remove(&sh) {
                        batches.push(TraceBody::Batch { height: *height, state_hash: sh, items: b.items.clone() });
                    }
                }
                notices.push(Notice { block: r.block, timestamp: r.timestamp, sender: r.sender, event: e.clone() });
            }
        }
        self.records.push(TraceRecord {
            t_us: self.now,
            body: TraceBody::Block {
                height: self.ledger.height(),
                timestamp,
                txs,
                receipts: receipts.iter().map(ReceiptSummary::from).collect(),
            },
        });
        for b in batches {
            self.records.push(TraceRecord { t_us: self.now, body: b });
        }
        if notices.is_empty() {
            return;
        }
        let hop = self.network.one_way_us();
        for to in self.observers() {
            let seen: Vec<Notice> = notices
                .iter()
                .filter(|n| {
                    let kind = match n.event {
                        ChainEvent::Challenge { .. } => MsgKind::ChallengeEvent,
                        _ => MsgKind::ChainEvent,
                    };
                    self.network.notice_passes(to, kind)
                })
                .cloned()
                .collect();
            if !seen.is_empty() {
                let msg = Message::Chain(Rc::new(seen));
                self.push(self.now + hop, EventKind::Deliver { from: Actor::Chain, to, msg });
            }
        }
    }

    fn run(&mut self, until_us: u64) {
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.t > until_us {
                break;
            }
            let target = match &ev.kind {
                EventKind::Deliver { to, .. } | EventKind::Timer { to, .. } => Some(*to),
                EventKind::Crash { node, .. } => Some(Actor::Seq(*node)),
                _ => None,
            };
            if let Some(a) = target {
                let free = self.busy_until.get(&a).copied().unwrap_or(0);
                if free > ev.t {
                    self.push(free, ev.kind);
                    continue;
                }
            }
            self.handle(ev);
        }
    }
}

/// Contract parameters and chain configuration derived from a scenario.
pub fn chain_setup(cfg: &ScenarioConfig, vendor_key: crate::crypto::PublicKey) -> (ChainConfig, ContractParams) {
    let c = &cfg.contracts;
    (
        ChainConfig { gas: cfg.chain.gas.clone(), gas_price_units: cfg.chain.gas_price_units },
        ContractParams {
            f: cfg.committee.f,
            challenge_timeout_s: c.challenge_timeout_s,
            pledge_min: c.pledge_min,
            dap_min_collateral: c.dap_min_collateral,
            dap_response_cost: c.dap_response_cost,
            dap_epsilon: c.dap_epsilon,
            dap_response_timeout_s: c.dap_response_timeout_s,
            tree_depth: cfg.rollup.tree_depth,
            vendor_key,
            program_hash: program_hash(),
        },
    )
}

/// Runs a scenario to completion and checks the resulting trace.
pub fn run_scenario(cfg: &ScenarioConfig, allow_exceed_f: bool) -> Result<RunOutput, ConfigError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let n = cfg.committee.n;
    let f = cfg.committee.f;
    let platforms = cfg.committee.platform_list();
    let profile: ResolvedProfile = apply_profile(
        &cfg.adversary,
        &platforms,
        f,
        cfg.daps.count,
        allow_exceed_f,
        &mut stream(seed, "profile"),
    )?;

    let mut svc = AttestationService::new(stream(seed, "attest").gen());
    let (chain_cfg, params) = chain_setup(cfg, svc.vendor_key());
    let depth = cfg.rollup.tree_depth;
    let genesis = RollupState::genesis(depth);
    let mut ledger = ChainLedger::new(chain_cfg.clone(), params.clone(), genesis);
    let mut records = Vec::new();
    let funds = cfg.workload.native_funds;
    let mut mint = |ledger: &mut ChainLedger, to| {
        ledger.mint(to, funds as u128);
        records.push(TraceRecord { t_us: 0, body: TraceBody::Mint { to, value: funds } });
    };

    let mut setup_txs = Vec::new();
    let mut enclaves = Vec::new();
    let mut key_rng = stream(seed, "keys");
    for (i, platform) in platforms.iter().enumerate() {
        let enclave = svc.install(program_hash(), platform, profile.compromised.contains(&(i as u32)));
        let host = gen_keypair(key_rng.gen());
        mint(&mut ledger, host.address());
        setup_txs.push(ChainTx::call(
            host.address(),
            ContractCall::Register { quote: svc.attest(&enclave), pk: enclave.public_key(), platform: platform.clone() },
        ));
        enclaves.push((enclave, host));
    }
    let registry: Vec<_> = enclaves.iter().map(|(e, _)| e.public_key()).collect();

    let collateral = cfg.daps.collateral.unwrap_or(params.dap_min_collateral);
    let mut dap_keys: Vec<KeyPair> = Vec::new();
    for _ in 0..cfg.daps.count {
        let k = gen_keypair(key_rng.gen());
        dap_keys.push(k);
    }
    for k in &dap_keys {
        mint(&mut ledger, k.address());
        setup_txs.push(ChainTx::call(
            k.address(),
            ContractCall::DapRegister { collateral, sig: sign_digest(&dap_register_digest(&k.address(), collateral), k) },
        ));
    }

    let auditor = gen_keypair(key_rng.gen());
    let clients = ClientPool::new(
        cfg.workload.clone(),
        cfg.daps.clone(),
        params.clone(),
        n as u32,
        cfg.daps.count as u32,
        genesis,
        stream(seed, "clients"),
        auditor,
        clients::plan_for(cfg),
    );
    for a in clients.accounts() {
        mint(&mut ledger, a);
    }

    let coalition = if !profile.compromised.is_empty() && !profile.forge.is_empty() {
        let leaked = profile
            .compromised
            .iter()
            .map(|&i| (i, enclaves[i as usize].0.leak_secret().expect("compromised enclave leaks")))
            .collect();
        let chain_key = gen_keypair(key_rng.gen());
        mint(&mut ledger, chain_key.address());
        Some(Coalition::new(leaked, profile.forge.clone(), chain_key, n as u32, genesis, stream(seed, "adversary")))
    } else {
        None
    };

    let sequencers = enclaves
        .into_iter()
        .enumerate()
        .map(|(i, (enclave, host))| {
            SequencerNode::new(
                i as u32,
                n as u32,
                f,
                enclave,
                host,
                registry.clone(),
                cfg.rollup.batch_size,
                cfg.timing.clone(),
                cfg.daps.count as u32,
                genesis,
                AccountTree::with_depth(depth),
            )
        })
        .collect();
    let daps = dap_keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            DapNode::new(
                i as u32,
                k,
                profile.daps[i].clone(),
                stream(seed, &format!("dap:{i}")),
                n as u32,
                cfg.timing.sync_timeout_s,
            )
        })
        .collect();

    let mut world = World {
        now: 0,
        seq: 0,
        queue: BinaryHeap::new(),
        busy_until: HashMap::new(),
        network: Network::new(&cfg.network, profile.links.clone(), stream(seed, "net")),
        ledger,
        block_interval_us: cfg.chain.block_interval_s * US_PER_S,
        block_pending: false,
        mempool: Vec::new(),
        published: HashMap::new(),
        records,
        sequencers,
        daps,
        clients,
        coalition,
    };
    world.mine(0, setup_txs);
    for c in &profile.crashes {
        world.push(c.at_s * US_PER_S, EventKind::Crash { node: c.node, down: true });
        if let Some(u) = c.until_s {
            world.push(u * US_PER_S, EventKind::Crash { node: c.node, down: false });
        }
    }
    world.dispatch(Actor::Clients, |w, ctx| w.clients.start(ctx));
    if world.coalition.is_some() {
        world.dispatch(Actor::Adversary, |w, ctx| w.coalition.as_mut().expect("present").start(ctx));
    }
    world.run(cfg.duration_s * US_PER_S);

    let trace = Trace {
        header: TraceHeader {
            version: TRACE_VERSION,
            seed,
            unsafe_exceed_f: profile.exceeds_f(f),
            compromised: profile.compromised.iter().copied().collect(),
            config: cfg.clone(),
            chain: chain_cfg,
            contract_params: params,
        },
        records: world.records,
    };
    let report = MetricsReport::from_trace(&trace);
    let violations = verify_trace(&trace);
    Ok(RunOutput { trace, report, violations })
}

//! Actor identities, network messages, timers and the handler context.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::chain::ChainTx;
use crate::contracts::{ChainEvent, Timestamp};
use crate::crypto::{Address, Digest};
use crate::merkle::MerkleProof;
use crate::rollup::{Batch, Metadata, Proposal, RollupTx, Vote};
use crate::sim::trace::TraceBody;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Actor {
    Seq(u32),
    Dap(u32),
    Clients,
    Adversary,
    Chain,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Seq(i) => write!(f, "seq:{i}"),
            Actor::Dap(i) => write!(f, "dap:{i}"),
            Actor::Clients => f.write_str("clients"),
            Actor::Adversary => f.write_str("adversary"),
            Actor::Chain => f.write_str("chain"),
        }
    }
}

impl FromStr for Actor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown actor {s:?}");
        match s {
            "clients" => Ok(Actor::Clients),
            "adversary" => Ok(Actor::Adversary),
            "chain" => Ok(Actor::Chain),
            _ => {
                let (kind, idx) = s.split_once(':').ok_or_else(bad)?;
                let idx: u32 = idx.parse().map_err(|_| bad())?;
                match kind {
                    "seq" => Ok(Actor::Seq(idx)),
                    "dap" => Ok(Actor::Dap(idx)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Actor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Matches actors in link filters: `*`, `seq:*`, `dap:*` or an exact actor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    Any,
    AllSeq,
    AllDap,
    One(Actor),
}

impl Selector {
    pub fn matches(&self, a: Actor) -> bool {
        match self {
            Selector::Any => true,
            Selector::AllSeq => matches!(a, Actor::Seq(_)),
            Selector::AllDap => matches!(a, Actor::Dap(_)),
            Selector::One(x) => *x == a,
        }
    }
}

impl FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "*" => Ok(Selector::Any),
            "seq:*" => Ok(Selector::AllSeq),
            "dap:*" => Ok(Selector::AllDap),
            _ => s.parse().map(Selector::One),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Any => f.write_str("*"),
            Selector::AllSeq => f.write_str("seq:*"),
            Selector::AllDap => f.write_str("dap:*"),
            Selector::One(a) => a.fmt(f),
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgKind {
    ClientTx,
    Proposal,
    Vote,
    MetadataPush,
    ClientReply,
    SyncRequest,
    SyncResponse,
    ProofRequest,
    ProofResponse,
    ChainEvent,
    ChallengeEvent,
    ChainCall,
}

/// A chain event as seen by an off-chain observer.
#[derive(Clone, Debug)]
pub struct Notice {
    pub block: u64,
    pub timestamp: Timestamp,
    pub sender: Address,
    pub event: ChainEvent,
}

#[derive(Clone, Debug)]
pub enum Message {
    ClientTx(RollupTx),
    Proposal(Rc<Proposal>),
    Vote { height: u64, vote: Vote },
    MetadataPush(Rc<Metadata>),
    ClientReply { tx_hash: Digest, height: u64 },
    SyncRequest { height: u64 },
    SyncResponse(Rc<Metadata>),
    ProofRequest { addr: Address, height: u64 },
    ProofResponse { addr: Address, height: u64, proof: Option<MerkleProof> },
    Chain(Rc<Vec<Notice>>),
}

impl Message {
    pub fn kind(&self) -> MsgKind {
        match self {
            Message::ClientTx(_) => MsgKind::ClientTx,
            Message::Proposal(_) => MsgKind::Proposal,
            Message::Vote { .. } => MsgKind::Vote,
            Message::MetadataPush(_) => MsgKind::MetadataPush,
            Message::ClientReply { .. } => MsgKind::ClientReply,
            Message::SyncRequest { .. } => MsgKind::SyncRequest,
            Message::SyncResponse(_) => MsgKind::SyncResponse,
            Message::ProofRequest { .. } => MsgKind::ProofRequest,
            Message::ProofResponse { .. } => MsgKind::ProofResponse,
            Message::Chain(_) => MsgKind::ChainEvent,
        }
    }

    /// Modeled size in bytes for the bandwidth model.
    pub fn wire_size(&self) -> u64 {
        match self {
            Message::ClientTx(_) => 145,
            Message::Proposal(p) => p.wire_size(),
            Message::Vote { .. } => 8 + 64 + 32 + 64,
            Message::MetadataPush(m) | Message::SyncResponse(m) => m.wire_size(),
            Message::ClientReply { .. } => 40,
            Message::SyncRequest { .. } => 8,
            Message::ProofRequest { .. } => 40,
            Message::ProofResponse { proof, .. } => 40 + proof.as_ref().map_or(0, |p| 16 + 33 * p.path.len() as u64),
            Message::Chain(n) => 64 * n.len() as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Timer {
    Propose { height: u64 },
    BackupSubmit { height: u64, state_hash: Digest },
    BackupResolve { id: Digest },
    SyncRetry { height: u64 },
    DapSyncCheck { height: u64 },
    Workload(usize),
    Challenge(usize),
    Audit(usize),
    FinalizeAudit { id: Digest },
    ProofRetry { addr: Address, dap: u32 },
    RefundDeposits,
    Deposits,
    SettleCheck { id: Digest },
    Forge,
}

pub enum Action {
    Send { to: Actor, msg: Message },
    Chain(ChainTx),
    Timer { after_us: u64, timer: Timer },
    Trace(TraceBody),
    /// Makes a batch retrievable for the trace once its state is accepted.
    Publish { state_hash: Digest, batch: Rc<Batch> },
}

/// Per-event handle through which actors act on the world.
pub struct Ctx {
    pub now: u64,
    pub me: Actor,
    work_us: u64,
    actions: Vec<Action>,
}

impl Ctx {
    pub fn new(now: u64, me: Actor) -> Self {
        Self { now, me, work_us: 0, actions: Vec::new() }
    }

    pub fn now_s(&self) -> Timestamp {
        self.now / 1_000_000
    }

    /// Occupies the actor; outputs leave once the work is done.
    pub fn work(&mut self, us: u64) {
        self.work_us += us;
    }

    pub fn work_us(&self) -> u64 {
        self.work_us
    }

    pub fn send(&mut self, to: Actor, msg: Message) {
        self.actions.push(Action::Send { to, msg });
    }

    pub fn chain(&mut self, tx: ChainTx) {
        self.actions.push(Action::Chain(tx));
    }

    pub fn timer(&mut self, after_us: u64, timer: Timer) {
        self.actions.push(Action::Timer { after_us, timer });
    }

    pub fn trace(&mut self, body: TraceBody) {
        self.actions.push(Action::Trace(body));
    }

    pub fn publish(&mut self, state_hash: Digest, batch: Rc<Batch>) {
        self.actions.push(Action::Publish { state_hash, batch });
    }

    pub fn into_parts(self) -> (u64, Vec<Action>) {
        (self.work_us, self.actions)
    }
}

pub const US_PER_S: u64 = 1_000_000;

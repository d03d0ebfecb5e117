//! Threat profiles and the forging coalition of compromised enclaves.
//!
//! Corruption is static: [`apply_profile`] resolves a [`ThreatProfile`] into
//! per-actor behavior before the first event and nothing changes afterwards.
//! Host misbehavior toward messages is expressed as network link filters.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ChainTx;
use crate::contracts::{ChainEvent, ContractCall};
use crate::crypto::{gen_keypair, Address, Digest, KeyPair, SecretKey};
use crate::rollup::{Batch, Effects, Proposal, QuorumCertificate, Refund, RollupState, Vote};
use crate::sim::actor::{Actor, Ctx, Message, MsgKind, Selector, Timer};
use crate::sim::trace::TraceBody;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeStrategy {
    /// Correct linkage, arbitrary account root.
    TamperRoot,
    /// Extends a parent that was never accepted.
    ForgedParent,
    /// Pays the coalition a refund nobody burned for.
    InflateRefund,
    /// Pads the QC by repeating leaked votes.
    DuplicateVotes,
    /// Pads the QC with votes from keys that never registered.
    UnregisteredVoter,
}

impl ForgeStrategy {
    pub const ALL: [ForgeStrategy; 5] = [
        ForgeStrategy::TamperRoot,
        ForgeStrategy::ForgedParent,
        ForgeStrategy::InflateRefund,
        ForgeStrategy::DuplicateVotes,
        ForgeStrategy::UnregisteredVoter,
    ];
}

/// Misbehavior of a sequencer's host toward its own enclave's I/O.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostProfile {
    pub node: u32,
    pub censor_clients: bool,
    pub ignore_challenges: bool,
    pub withhold_metadata: bool,
    /// Drops every outgoing consensus message.
    pub mute: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapBehavior {
    pub dap: u32,
    /// Probability of discarding each metadata push.
    pub drop_prob: f64,
    /// Discards every push above this height.
    pub drop_after_height: Option<u64>,
    /// Answers audits with invalid proofs instead of staying silent.
    pub garbage: bool,
}

impl DapBehavior {
    pub fn diligent(dap: u32) -> Self {
        Self { dap, ..Default::default() }
    }

    pub fn is_lazy(&self) -> bool {
        self.drop_prob > 0.0 || self.drop_after_height.is_some() || self.garbage
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFilter {
    pub from: Selector,
    pub to: Selector,
    /// Message kinds affected; empty means all.
    #[serde(default)]
    pub kinds: Vec<MsgKind>,
    #[serde(default)]
    pub drop_prob: f64,
    #[serde(default)]
    pub extra_delay_ms: f64,
    /// Extra duplicate deliveries.
    #[serde(default)]
    pub replay: u32,
}

impl LinkFilter {
    pub fn applies(&self, from: Actor, to: Actor, kind: MsgKind) -> bool {
        self.from.matches(from)
            && self.to.matches(to)
            && (self.kinds.is_empty() || self.kinds.contains(&kind))
    }

    fn drop_all(from: Selector, to: Selector, kinds: Vec<MsgKind>) -> Self {
        Self { from, to, kinds, drop_prob: 1.0, extra_delay_ms: 0.0, replay: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub node: u32,
    pub at_s: u64,
    #[serde(default)]
    pub until_s: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThreatProfile {
    /// Sequencer indices whose enclaves are compromised.
    pub compromised: Vec<u32>,
    /// Additional compromised enclaves sampled at random.
    pub compromise_random: usize,
    /// Compromise every enclave on this platform.
    pub compromise_platform: Option<String>,
    pub forge: Vec<ForgeStrategy>,
    pub hosts: Vec<HostProfile>,
    pub daps: Vec<DapBehavior>,
    pub links: Vec<LinkFilter>,
    pub crashes: Vec<CrashSpec>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("{count} compromised enclaves exceed f = {f}; pass --unsafe-exceed-f to explore this")]
    ExceedsF { count: usize, f: usize },
    #[error("profile refers to sequencer {0}, which does not exist")]
    UnknownNode(u32),
    #[error("profile refers to DAP {0}, which does not exist")]
    UnknownDap(u32),
    #[error("cannot sample {want} extra compromised enclaves from {have} remaining")]
    Sample { want: usize, have: usize },
    #[error("probability {0} outside [0, 1]")]
    Probability(String),
    #[error("forging requires at least one compromised enclave")]
    NoForger,
}

/// A profile resolved against a concrete committee.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedProfile {
    pub compromised: BTreeSet<u32>,
    pub forge: Vec<ForgeStrategy>,
    pub hosts: BTreeMap<u32, HostProfile>,
    pub daps: Vec<DapBehavior>,
    pub links: Vec<LinkFilter>,
    pub crashes: Vec<CrashSpec>,
}

impl ResolvedProfile {
    pub fn host(&self, node: u32) -> HostProfile {
        self.hosts.get(&node).cloned().unwrap_or(HostProfile { node, ..Default::default() })
    }

    pub fn exceeds_f(&self, f: usize) -> bool {
        self.compromised.len() > f
    }
}

/// Validates `profile` for a committee of `platforms.len()` nodes and turns
/// host misbehavior into link filters.
pub fn apply_profile(
    profile: &ThreatProfile,
    platforms: &[String],
    f: usize,
    dap_count: usize,
    allow_exceed_f: bool,
    rng: &mut ChaCha20Rng,
) -> Result<ResolvedProfile, ProfileError> {
    let n = platforms.len() as u32;
    let check_node = |i: u32| if i < n { Ok(()) } else { Err(ProfileError::UnknownNode(i)) };
    let mut compromised = BTreeSet::new();
    for &i in &profile.compromised {
        check_node(i)?;
        compromised.insert(i);
    }
    if let Some(p) = &profile.compromise_platform {
        for (i, q) in platforms.iter().enumerate() {
            if q == p {
                compromised.insert(i as u32);
            }
        }
    }
    if profile.compromise_random > 0 {
        let rest: Vec<u32> = (0..n).filter(|i| !compromised.contains(i)).collect();
        if profile.compromise_random > rest.len() {
            return Err(ProfileError::Sample { want: profile.compromise_random, have: rest.len() });
        }
        for k in sample(rng, rest.len(), profile.compromise_random) {
            compromised.insert(rest[k]);
        }
    }
    if compromised.len() > f && !allow_exceed_f {
        return Err(ProfileError::ExceedsF { count: compromised.len(), f });
    }
    if !profile.forge.is_empty() && compromised.is_empty() {
        return Err(ProfileError::NoForger);
    }
    let prob = |p: f64| {
        if (0.0..=1.0).contains(&p) {
            Ok(())
        } else {
            Err(ProfileError::Probability(p.to_string()))
        }
    };
    let mut daps: Vec<DapBehavior> = (0..dap_count as u32).map(DapBehavior::diligent).collect();
    for d in &profile.daps {
        prob(d.drop_prob)?;
        let slot = daps.get_mut(d.dap as usize).ok_or(ProfileError::UnknownDap(d.dap))?;
        *slot = d.clone();
    }
    let mut links = profile.links.clone();
    for l in &links {
        prob(l.drop_prob)?;
    }
    let mut hosts = BTreeMap::new();
    for h in &profile.hosts {
        check_node(h.node)?;
        let me = Selector::One(Actor::Seq(h.node));
        if h.censor_clients {
            links.push(LinkFilter::drop_all(Selector::One(Actor::Clients), me.clone(), vec![MsgKind::ClientTx]));
        }
        if h.ignore_challenges {
            links.push(LinkFilter::drop_all(Selector::One(Actor::Chain), me.clone(), vec![MsgKind::ChallengeEvent]));
        }
        if h.withhold_metadata {
            links.push(LinkFilter::drop_all(
                me.clone(),
                Selector::Any,
                vec![MsgKind::MetadataPush, MsgKind::SyncResponse, MsgKind::ClientReply],
            ));
        }
        if h.mute {
            links.push(LinkFilter::drop_all(
                me.clone(),
                Selector::Any,
                vec![MsgKind::Proposal, MsgKind::Vote, MsgKind::ChainCall],
            ));
        }
        hosts.insert(h.node, h.clone());
    }
    for c in &profile.crashes {
        check_node(c.node)?;
    }
    Ok(ResolvedProfile {
        compromised,
        forge: profile.forge.clone(),
        hosts,
        daps,
        links,
        crashes: profile.crashes.clone(),
    })
}

/// The adversary pooling the leaked keys of every compromised enclave.
pub struct Coalition {
    keys: Vec<(u32, KeyPair)>,
    strategies: Vec<ForgeStrategy>,
    chain_key: KeyPair,
    n: u32,
    /// Latest accepted state as reported by the chain.
    tip: RollupState,
    frozen: bool,
    forged_for: Option<u64>,
    rng: ChaCha20Rng,
}

impl Coalition {
    pub fn new(
        leaked: Vec<(u32, SecretKey)>,
        strategies: Vec<ForgeStrategy>,
        chain_key: KeyPair,
        n: u32,
        genesis: RollupState,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            keys: leaked.into_iter().map(|(i, s)| (i, KeyPair::from_secret(s))).collect(),
            strategies,
            chain_key,
            n,
            tip: genesis,
            frozen: false,
            forged_for: None,
            rng,
        }
    }

    pub fn chain_address(&self) -> Address {
        self.chain_key.address()
    }

    pub fn start(&mut self, ctx: &mut Ctx) {
        if !self.strategies.is_empty() && !self.keys.is_empty() {
            ctx.timer(0, Timer::Forge);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        if timer == Timer::Forge {
            self.forge_round(ctx);
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, msg: Message) {
        let Message::Chain(notices) = msg else { return };
        for n in notices.iter() {
            match &n.event {
                ChainEvent::StateUpdated { state, .. } if state.height > self.tip.height => {
                    self.tip = *state;
                    ctx.timer(0, Timer::Forge);
                }
                ChainEvent::Settle { .. } => self.frozen = true,
                _ => {}
            }
        }
    }

    fn random_digest(&mut self) -> Digest {
        Digest(self.rng.gen())
    }

    fn leaked_votes(&self, state_hash: Digest, effects_hash: Digest) -> Vec<Vote> {
        self.keys.iter().map(|(_, k)| Vote::sign(state_hash, effects_hash, k)).collect()
    }

    fn forge_round(&mut self, ctx: &mut Ctx) {
        let height = self.tip.height + 1;
        if self.frozen || self.forged_for == Some(height) {
            return;
        }
        self.forged_for = Some(height);
        let empty = Batch::default();
        for s in self.strategies.clone() {
            let mut state = RollupState {
                height,
                prev_hash: self.tip.hash(),
                account_root: self.tip.account_root,
                txs_hash: empty.hash(),
            };
            let mut effects = Effects::default();
            let mut parent = self.tip;
            match s {
                ForgeStrategy::TamperRoot | ForgeStrategy::DuplicateVotes | ForgeStrategy::UnregisteredVoter => {
                    state.account_root = self.random_digest();
                }
                ForgeStrategy::ForgedParent => {
                    parent.account_root = self.random_digest();
                    state.prev_hash = parent.hash();
                }
                ForgeStrategy::InflateRefund => {
                    effects.refunds.push(Refund { addr: self.chain_key.address(), value: 1 });
                }
            }
            let (sh, eh) = (state.hash(), effects.hash());
            let mut votes = self.leaked_votes(sh, eh);
            for (i, _) in &self.keys {
                ctx.trace(TraceBody::Vote { node: *i, height, state_hash: sh, effects_hash: eh, forged: true });
            }
            match s {
                ForgeStrategy::DuplicateVotes => {
                    let copies = votes.clone();
                    votes.extend(copies);
                }
                ForgeStrategy::UnregisteredVoter => {
                    let outsider = gen_keypair(self.rng.gen());
                    votes.push(Vote::sign(sh, eh, &outsider));
                }
                _ => {}
            }
            // Honest peers get to see the forgery too; they should refuse it.
            if let Some(first) = votes.first().copied() {
                let proposal = Rc::new(Proposal {
                    parent,
                    state,
                    batch: empty.clone(),
                    effects: effects.clone(),
                    leader_vote: first,
                });
                for i in 0..self.n {
                    ctx.send(Actor::Seq(i), Message::Proposal(proposal.clone()));
                }
            }
            ctx.publish(sh, Rc::new(empty.clone()));
            let qc = QuorumCertificate { state_hash: sh, effects_hash: eh, votes };
            ctx.chain(ChainTx::call(
                self.chain_key.address(),
                ContractCall::UpdateState { state, qc, effects },
            ));
        }
    }
}

//! Offline safety checks over a trace.
//!
//! The chain is replayed from the trace's own transaction log and every
//! accepted state is re-derived by the independent [`Oracle`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::contracts::{ChainEvent, DepositStatus, Method};
use crate::crypto::{Digest, BURN_ADDRESS};
use crate::oracle::Oracle;
use crate::rollup::{verify_chain, Batch};
use crate::sim::trace::{ReceiptSummary, Trace, TraceBody, TraceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Recorded receipts differ from a re-execution of the chain.
    Receipts,
    /// Accepted states do not link back to genesis.
    Linkage,
    /// No published batch for an accepted state.
    MissingBatch,
    /// An accepted state or its effects differ from honest re-execution.
    StateMismatch,
    /// An uncompromised enclave endorsed two results at one height.
    DoubleVote,
    /// A deposit was locked twice, or both locked and refunded.
    DepositAtomicity,
    /// The rollup changed after settlement.
    FrozenAbsorbing,
    /// Escrow does not match outstanding rollup balances.
    Solvency,
    /// Native value was created or destroyed.
    Conservation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: Check,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.check, self.detail)
    }
}

/// Parses and checks a serialized trace.
pub fn verify_trace_text(text: &str) -> Result<Vec<Violation>, TraceError> {
    Ok(verify_trace(&Trace::parse(text)?))
}

pub fn verify_trace(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |check: Check, detail: String| out.push(Violation { check, detail });

    let replay = match trace.replay_chain() {
        Ok(r) => r,
        Err(e) => {
            bad(Check::Receipts, e.to_string());
            return out;
        }
    };
    let gas = &trace.header.chain.gas;
    let recorded = trace.records.iter().filter_map(|r| match &r.body {
        TraceBody::Block { height, receipts, .. } => Some((*height, receipts)),
        _ => None,
    });
    for ((height, rec), (_, re)) in recorded.zip(&replay.blocks) {
        let again: Vec<ReceiptSummary> = re.iter().map(ReceiptSummary::from).collect();
        if *rec != again {
            bad(Check::Receipts, format!("block {height}: receipts differ on replay"));
        }
        for r in re {
            let want = if r.ok() { gas.gas(r.method) } else { 0 };
            if r.gas_used != want {
                bad(Check::Receipts, format!("block {height}: {} used {} gas", r.method.name(), r.gas_used));
            }
        }
    }

    let ledger = &replay.ledger;
    let c = ledger.contracts();
    let genesis = trace.genesis();
    let states: Vec<_> = c.tsc.states.range(1..).map(|(_, s)| s.state).collect();
    if !verify_chain(&genesis, &states) {
        bad(Check::Linkage, "accepted states do not form a chain from genesis".into());
    }

    let mut batches: BTreeMap<(u64, Digest), Batch> = BTreeMap::new();
    for r in &trace.records {
        if let TraceBody::Batch { height, state_hash, items } = &r.body {
            batches.insert((*height, *state_hash), Batch::new(items.clone()));
        }
    }
    let mut oracle = Oracle::new(trace.header.contract_params.tree_depth);
    let mut oracle_ok = true;
    for (&h, rec) in c.tsc.states.range(1..) {
        let Some(batch) = batches.get(&(h, rec.state_hash)) else {
            bad(Check::MissingBatch, format!("height {h}: no batch published"));
            oracle_ok = false;
            break;
        };
        let step = oracle.apply(batch);
        if step.state_hash != rec.state_hash || step.effects_hash != rec.effects_hash {
            let what = if step.state_hash != rec.state_hash { "state" } else { "effects" };
            bad(Check::StateMismatch, format!("height {h}: accepted {what} differs from re-execution"));
            oracle_ok = false;
            break;
        }
    }

    let compromised: BTreeSet<u32> = trace.header.compromised.iter().copied().collect();
    let mut votes: BTreeMap<(u32, u64), BTreeSet<(Digest, Digest)>> = BTreeMap::new();
    for r in &trace.records {
        if let TraceBody::Vote { node, height, state_hash, effects_hash, .. } = &r.body {
            if !compromised.contains(node) {
                votes.entry((*node, *height)).or_default().insert((*state_hash, *effects_hash));
            }
        }
    }
    for ((node, height), v) in votes {
        if v.len() > 1 {
            bad(Check::DoubleVote, format!("seq:{node} endorsed {} results at height {height}", v.len()));
        }
    }

    let mut locked: BTreeMap<Digest, u32> = BTreeMap::new();
    let mut refunded: BTreeSet<Digest> = BTreeSet::new();
    let mut withdrawn: u128 = 0;
    for e in ledger.events() {
        match &e.event {
            ChainEvent::StateUpdated { effects, .. } => {
                for l in &effects.locks {
                    *locked.entry(l.deposit_id).or_default() += 1;
                }
            }
            ChainEvent::DepositRefunded { id, .. } => {
                refunded.insert(*id);
            }
            ChainEvent::Withdraw { value, .. } => withdrawn += *value as u128,
            _ => {}
        }
    }
    for (id, k) in &locked {
        if *k > 1 || refunded.contains(id) {
            bad(Check::DepositAtomicity, format!("deposit {id} locked {k} times, refunded: {}", refunded.contains(id)));
        }
    }
    for (id, d) in &c.tsc.deposits {
        let is_locked = locked.contains_key(id);
        if (d.status == DepositStatus::Solved) != is_locked {
            bad(Check::DepositAtomicity, format!("deposit {id} is {:?} but locked = {is_locked}", d.status));
        }
    }
    let pending: u128 = c
        .tsc
        .deposits
        .values()
        .filter(|d| d.status == DepositStatus::Unsolved)
        .map(|d| d.value as u128)
        .sum();
    if pending != c.tsc.pending_deposits {
        bad(Check::DepositAtomicity, format!("pending pool {} vs unsolved deposits {pending}", c.tsc.pending_deposits));
    }

    let mut frozen_at: Option<u64> = None;
    for (_, rs) in &replay.blocks {
        for r in rs {
            if let Some(b) = frozen_at {
                let mutates = matches!(
                    r.method,
                    Method::UpdateState | Method::Deposit | Method::StartChallenge | Method::ResolveChallenge | Method::SettleRollup
                );
                if r.ok() && mutates {
                    bad(Check::FrozenAbsorbing, format!("{} succeeded in block {} after freeze in block {b}", r.method.name(), r.block));
                }
            }
            if r.events.iter().any(|e| matches!(e, ChainEvent::Settle { .. })) {
                frozen_at.get_or_insert(r.block);
            }
        }
    }
    if frozen_at.is_some() != c.is_frozen() {
        bad(Check::FrozenAbsorbing, "contract state disagrees with the settlement log".into());
    }

    if oracle_ok {
        let outstanding: u128 =
            oracle.accounts().filter(|(a, _)| **a != BURN_ADDRESS).map(|(_, b)| b as u128).sum();
        if c.tsc.escrow + withdrawn != outstanding {
            bad(
                Check::Solvency,
                format!("escrow {} + withdrawn {withdrawn} != rollup balances {outstanding}", c.tsc.escrow),
            );
        }
    }
    let pledges: u128 = c.tsc.challenges.values().map(|x| x.pledge as u128).sum();
    if pledges != c.tsc.pledges_held {
        bad(Check::Solvency, format!("pledge pool {} vs open pledges {pledges}", c.tsc.pledges_held));
    }
    if ledger.circulating() != ledger.minted() {
        bad(Check::Conservation, format!("minted {} but {} in circulation", ledger.minted(), ledger.circulating()));
    }
    out
}

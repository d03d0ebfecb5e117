//! On-chain contracts: the sequencer registry (MSC) and the rollup contract
//! (TSC) with deposits, state updates, challenges, settlement and the DAP
//! collateral registry.
//!
//! Every entry point validates all of its `Require` clauses before touching
//! state, so a rejected call leaves the contracts unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{tag, Canonical, Encoder};
use crate::crypto::{verify_digest, Address, Digest, PublicKey, Signature, BURN_ADDRESS};
use crate::merkle::MerkleProof;
use crate::rollup::{verify_qc, Batch, Effects, QuorumCertificate, RollupState, RollupTx};
use crate::tee::{verify_quote, AttestationQuote};

pub type Timestamp = u64;

/// Typed failure codes for rejected contract calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "E_FROZEN")]
    Frozen,
    #[serde(rename = "E_NOT_FROZEN")]
    NotFrozen,
    #[serde(rename = "E_VALUE")]
    Value,
    #[serde(rename = "E_HEIGHT")]
    Height,
    #[serde(rename = "E_PREV_HASH")]
    PrevHash,
    #[serde(rename = "E_QC")]
    Qc,
    #[serde(rename = "E_LOCK")]
    Lock,
    #[serde(rename = "E_ESCROW")]
    Escrow,
    #[serde(rename = "E_PLEDGE")]
    Pledge,
    #[serde(rename = "E_UNKNOWN_ID")]
    UnknownId,
    #[serde(rename = "E_TIMER")]
    Timer,
    #[serde(rename = "E_NOT_INCLUDED")]
    NotIncluded,
    #[serde(rename = "E_PROOF")]
    Proof,
    #[serde(rename = "E_SIG")]
    Sig,
    #[serde(rename = "E_WITHDRAWN")]
    Withdrawn,
    #[serde(rename = "E_BURN")]
    Burn,
    #[serde(rename = "E_QUOTE")]
    Quote,
    #[serde(rename = "E_DUPLICATE")]
    Duplicate,
    #[serde(rename = "E_COLLATERAL")]
    Collateral,
    #[serde(rename = "E_SOLVED")]
    Solved,
    #[serde(rename = "E_NOT_DAP")]
    NotDap,
    #[serde(rename = "E_FUNDS")]
    Funds,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::Frozen => "E_FROZEN",
            ErrorCode::NotFrozen => "E_NOT_FROZEN",
            ErrorCode::Value => "E_VALUE",
            ErrorCode::Height => "E_HEIGHT",
            ErrorCode::PrevHash => "E_PREV_HASH",
            ErrorCode::Qc => "E_QC",
            ErrorCode::Lock => "E_LOCK",
            ErrorCode::Escrow => "E_ESCROW",
            ErrorCode::Pledge => "E_PLEDGE",
            ErrorCode::UnknownId => "E_UNKNOWN_ID",
            ErrorCode::Timer => "E_TIMER",
            ErrorCode::NotIncluded => "E_NOT_INCLUDED",
            ErrorCode::Proof => "E_PROOF",
            ErrorCode::Sig => "E_SIG",
            ErrorCode::Withdrawn => "E_WITHDRAWN",
            ErrorCode::Burn => "E_BURN",
            ErrorCode::Quote => "E_QUOTE",
            ErrorCode::Duplicate => "E_DUPLICATE",
            ErrorCode::Collateral => "E_COLLATERAL",
            ErrorCode::Solved => "E_SOLVED",
            ErrorCode::NotDap => "E_NOT_DAP",
            ErrorCode::Funds => "E_FUNDS",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Contract entry points, used as gas-table keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Deposit,
    UpdateState,
    StartChallenge,
    ResolveChallenge,
    SettleRollup,
    SettleWithdraw,
    NativeTransfer,
    Register,
    RefundDeposit,
    DapRegister,
    AuditRequest,
    AuditResponse,
    FinalizeAudit,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Deposit,
        Method::UpdateState,
        Method::StartChallenge,
        Method::ResolveChallenge,
        Method::SettleRollup,
        Method::SettleWithdraw,
        Method::NativeTransfer,
        Method::Register,
        Method::RefundDeposit,
        Method::DapRegister,
        Method::AuditRequest,
        Method::AuditResponse,
        Method::FinalizeAudit,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Deposit => "Deposit",
            Method::UpdateState => "UpdateState",
            Method::StartChallenge => "StartChallenge",
            Method::ResolveChallenge => "ResolveChallenge",
            Method::SettleRollup => "SettleRollup",
            Method::SettleWithdraw => "SettleWithdraw",
            Method::NativeTransfer => "NativeTransfer",
            Method::Register => "Register",
            Method::RefundDeposit => "RefundExpiredDeposit",
            Method::DapRegister => "DapRegister",
            Method::AuditRequest => "AuditRequest",
            Method::AuditResponse => "AuditResponse",
            Method::FinalizeAudit => "FinalizeAudit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractParams {
    pub f: usize,
    pub challenge_timeout_s: u64,
    pub pledge_min: u64,
    pub dap_min_collateral: u64,
    pub dap_response_cost: u64,
    pub dap_epsilon: u64,
    pub dap_response_timeout_s: u64,
    pub tree_depth: u8,
    pub vendor_key: PublicKey,
    pub program_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditResponse {
    pub proofs: Vec<MerkleProof>,
    pub item_hashes: Vec<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum ContractCall {
    Register { quote: AttestationQuote, pk: PublicKey, platform: String },
    Deposit { recipient: Address, value: u64 },
    UpdateState { state: RollupState, qc: QuorumCertificate, effects: Effects },
    StartChallenge { tx: RollupTx, pledge: u64 },
    ResolveChallenge { id: Digest, height: u64, qc: QuorumCertificate, item_hashes: Vec<Digest> },
    SettleRollup { id: Digest },
    SettleWithdraw { rollup_addr: Address, payout: Address, balance: u64, proof: MerkleProof, sig: Signature },
    RefundExpiredDeposit { id: Digest },
    DapRegister { collateral: u64, sig: Signature },
    AuditRequest { height: u64, keys: Vec<Address> },
    AuditRespond { id: Digest, response: AuditResponse },
    FinalizeAudit { id: Digest },
}

impl ContractCall {
    pub fn method(&self) -> Method {
        match self {
            ContractCall::Register { .. } => Method::Register,
            ContractCall::Deposit { .. } => Method::Deposit,
            ContractCall::UpdateState { .. } => Method::UpdateState,
            ContractCall::StartChallenge { .. } => Method::StartChallenge,
            ContractCall::ResolveChallenge { .. } => Method::ResolveChallenge,
            ContractCall::SettleRollup { .. } => Method::SettleRollup,
            ContractCall::SettleWithdraw { .. } => Method::SettleWithdraw,
            ContractCall::RefundExpiredDeposit { .. } => Method::RefundDeposit,
            ContractCall::DapRegister { .. } => Method::DapRegister,
            ContractCall::AuditRequest { .. } => Method::AuditRequest,
            ContractCall::AuditRespond { .. } => Method::AuditResponse,
            ContractCall::FinalizeAudit { .. } => Method::FinalizeAudit,
        }
    }

    /// Native value the caller attaches to the call.
    pub fn attached_value(&self) -> u64 {
        match self {
            ContractCall::Deposit { value, .. } => *value,
            ContractCall::StartChallenge { pledge, .. } => *pledge,
            ContractCall::DapRegister { collateral, .. } => *collateral,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChainEvent {
    Registered { pk: PublicKey, platform: String },
    Deposit { id: Digest, sender: Address, recipient: Address, value: u64 },
    StateUpdated { height: u64, state: RollupState, qc: QuorumCertificate, effects: Effects },
    DepositSolved { id: Digest },
    Refund { addr: Address, value: u64 },
    DepositRefunded { id: Digest, value: u64 },
    Challenge { id: Digest, tx: RollupTx, start: Timestamp, challenger: Address, pledge: u64 },
    ChallengeResolved { id: Digest, height: u64, pledge_returned: bool },
    Settle { id: Digest },
    Withdraw { rollup_addr: Address, payout: Address, value: u64 },
    DapRegistered { dap: Address, collateral: u64 },
    AuditRequested { id: Digest, height: u64, keys: Vec<Address>, daps: Vec<Address> },
    AuditResponded { id: Digest, dap: Address },
    AuditFinalized { id: Digest, responses: Vec<(Address, bool)>, slashes: Vec<(Address, u64)> },
}

/// Effects of a successful call that the hosting ledger applies.
#[derive(Debug, Default)]
pub struct CallOutcome {
    pub payouts: Vec<(Address, u64)>,
    pub events: Vec<ChainEvent>,
    pub output: Option<Digest>,
}

pub struct CallContext {
    pub sender: Address,
    pub timestamp: Timestamp,
    pub block: u64,
    /// Index of this call within its block, for per-block id sequencing.
    pub index_in_block: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencerEntry {
    pub pk: PublicKey,
    pub platform: String,
    pub eid: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Msc {
    pub f: usize,
    pub registry: Vec<SequencerEntry>,
}

impl Msc {
    pub fn registry_keys(&self) -> Vec<PublicKey> {
        self.registry.iter().map(|e| e.pk).collect()
    }

    pub fn verify_qc(&self, qc: &QuorumCertificate) -> bool {
        self.registry.len() > self.f && verify_qc(qc, self.f, &self.registry_keys())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractState {
    Active,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepositStatus {
    Unsolved,
    Solved,
    Refunded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositEntry {
    pub sender: Address,
    pub recipient: Address,
    pub value: u64,
    pub status: DepositStatus,
    pub created_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeEntry {
    pub tx: RollupTx,
    pub start: Timestamp,
    pub pledge: u64,
    pub challenger: Address,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedState {
    pub state: RollupState,
    pub state_hash: Digest,
    pub effects_hash: Digest,
    pub recorded_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tsc {
    pub contract_state: ContractState,
    pub height: u64,
    pub states: BTreeMap<u64, RecordedState>,
    pub deposits: BTreeMap<Digest, DepositEntry>,
    pub challenges: BTreeMap<Digest, ChallengeEntry>,
    /// Backing for issued TTokens.
    pub escrow: u128,
    /// Deposits not yet issued on the rollup.
    pub pending_deposits: u128,
    pub pledges_held: u128,
    /// Forfeited pledges.
    pub revenue: u128,
    pub withdrawn: BTreeSet<Address>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DapEntry {
    pub collateral: u64,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub height: u64,
    pub keys: Vec<Address>,
    pub requested_at: Timestamp,
    pub daps: Vec<Address>,
    pub responded: BTreeSet<Address>,
    pub finalized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DapRegistry {
    pub daps: BTreeMap<Address, DapEntry>,
    pub audits: BTreeMap<Digest, AuditEntry>,
    pub collateral_held: u128,
    pub slashed: u128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contracts {
    pub params: ContractParams,
    pub msc: Msc,
    pub tsc: Tsc,
    pub daps: DapRegistry,
}

pub fn deposit_id(sender: &Address, timestamp: Timestamp, block: u64, seq: u32) -> Digest {
    let mut enc = Encoder::with_tag(tag::DEPOSIT_ID);
    enc.bytes32(&sender.0).u64(timestamp).u64(block).u32(seq);
    enc.digest()
}

pub fn challenge_id(challenger: &Address, tx: &RollupTx, timestamp: Timestamp) -> Digest {
    let mut enc = Encoder::with_tag(tag::CHALLENGE_ID);
    enc.bytes32(&challenger.0).bytes32(&tx.canonical_hash().0).u64(timestamp);
    enc.digest()
}

pub fn audit_id(requester: &Address, height: u64, timestamp: Timestamp, block: u64, seq: u32) -> Digest {
    let mut enc = Encoder::with_tag(tag::AUDIT_ID);
    enc.bytes32(&requester.0).u64(height).u64(timestamp).u64(block).u32(seq);
    enc.digest()
}

/// Message a rollup account holder signs to withdraw after settlement.
pub fn withdraw_digest(rollup_addr: &Address, payout: &Address, balance: u64) -> Digest {
    let mut enc = Encoder::with_tag(tag::WITHDRAW);
    enc.bytes32(&rollup_addr.0).bytes32(&payout.0).u64(balance);
    enc.digest()
}

/// Message a DAP signs when registering `collateral`.
pub fn dap_register_digest(dap: &Address, collateral: u64) -> Digest {
    let mut enc = Encoder::with_tag(tag::DAP_REGISTER);
    enc.bytes32(&dap.0).u64(collateral);
    enc.digest()
}

/// Laziness penalty for each DAP given who answered validly:
/// responders lose nothing; if nobody answered every DAP loses `c`;
/// otherwise each silent DAP loses `w + epsilon`.
pub fn slash_vector(responded: &[bool], c: u64, w: u64, epsilon: u64) -> Vec<u64> {
    let any = responded.iter().any(|&x| x);
    responded
        .iter()
        .map(|&x| match (x, any) {
            (true, _) => 0,
            (false, false) => c,
            (false, true) => w + epsilon,
        })
        .collect()
}

fn req(cond: bool, code: ErrorCode) -> Result<(), ErrorCode> {
    if cond {
        Ok(())
    } else {
        Err(code)
    }
}

impl Contracts {
    pub fn new(params: ContractParams, genesis: RollupState) -> Self {
        let mut states = BTreeMap::new();
        states.insert(
            0,
            RecordedState {
                state: genesis,
                state_hash: genesis.hash(),
                effects_hash: Effects::default().hash(),
                recorded_at: 0,
            },
        );
        Self {
            msc: Msc { f: params.f, registry: Vec::new() },
            tsc: Tsc {
                contract_state: ContractState::Active,
                height: 0,
                states,
                deposits: BTreeMap::new(),
                challenges: BTreeMap::new(),
                escrow: 0,
                pending_deposits: 0,
                pledges_held: 0,
                revenue: 0,
                withdrawn: BTreeSet::new(),
            },
            daps: DapRegistry {
                daps: BTreeMap::new(),
                audits: BTreeMap::new(),
                collateral_held: 0,
                slashed: 0,
            },
            params,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.tsc.contract_state == ContractState::Frozen
    }

    pub fn latest_state(&self) -> &RecordedState {
        &self.tsc.states[&self.tsc.height]
    }

    /// Total native value the contract account must hold.
    pub fn holdings(&self) -> u128 {
        self.tsc.escrow
            + self.tsc.pending_deposits
            + self.tsc.pledges_held
            + self.tsc.revenue
            + self.daps.collateral_held
            + self.daps.slashed
    }

    pub fn call(&mut self, ctx: &CallContext, call: &ContractCall) -> Result<CallOutcome, ErrorCode> {
        match call {
            ContractCall::Register { quote, pk, platform } => self.msc_register(quote, pk, platform),
            ContractCall::Deposit { recipient, value } => self.tsc_deposit(ctx, recipient, *value),
            ContractCall::UpdateState { state, qc, effects } => {
                self.tsc_update_state(ctx, state, qc, effects)
            }
            ContractCall::StartChallenge { tx, pledge } => self.tsc_start_challenge(ctx, tx, *pledge),
            ContractCall::ResolveChallenge { id, height, qc, item_hashes } => {
                self.tsc_resolve_challenge(ctx, id, *height, qc, item_hashes)
            }
            ContractCall::SettleRollup { id } => self.tsc_settle_rollup(ctx, id),
            ContractCall::SettleWithdraw { rollup_addr, payout, balance, proof, sig } => {
                self.tsc_settle_withdraw(rollup_addr, payout, *balance, proof, sig)
            }
            ContractCall::RefundExpiredDeposit { id } => self.tsc_refund_expired_deposit(ctx, id),
            ContractCall::DapRegister { collateral, sig } => self.dap_register(ctx, *collateral, sig),
            ContractCall::AuditRequest { height, keys } => self.audit_request(ctx, *height, keys),
            ContractCall::AuditRespond { id, response } => self.audit_respond(ctx, id, response),
            ContractCall::FinalizeAudit { id } => self.audit_finalize(ctx, id),
        }
    }

    pub fn msc_register(
        &mut self,
        quote: &AttestationQuote,
        pk: &PublicKey,
        platform: &str,
    ) -> Result<CallOutcome, ErrorCode> {
        req(verify_quote(quote, &self.params.vendor_key), ErrorCode::Quote)?;
        req(quote.prog_hash == self.params.program_hash, ErrorCode::Quote)?;
        req(quote.public_key == *pk && quote.platform == platform, ErrorCode::Quote)?;
        req(!self.msc.registry.iter().any(|e| e.pk == *pk), ErrorCode::Duplicate)?;
        self.msc.registry.push(SequencerEntry { pk: *pk, platform: platform.to_string(), eid: quote.eid });
        Ok(CallOutcome {
            events: vec![ChainEvent::Registered { pk: *pk, platform: platform.to_string() }],
            ..Default::default()
        })
    }

    pub fn tsc_deposit(
        &mut self,
        ctx: &CallContext,
        recipient: &Address,
        value: u64,
    ) -> Result<CallOutcome, ErrorCode> {
        req(!self.is_frozen(), ErrorCode::Frozen)?;
        req(value > 0, ErrorCode::Value)?;
        req(*recipient != BURN_ADDRESS, ErrorCode::Burn)?;
        let id = deposit_id(&ctx.sender, ctx.timestamp, ctx.block, ctx.index_in_block);
        req(!self.tsc.deposits.contains_key(&id), ErrorCode::Duplicate)?;
        self.tsc.deposits.insert(
            id,
            DepositEntry {
                sender: ctx.sender,
                recipient: *recipient,
                value,
                status: DepositStatus::Unsolved,
                created_at: ctx.timestamp,
            },
        );
        self.tsc.pending_deposits += value as u128;
        Ok(CallOutcome {
            events: vec![ChainEvent::Deposit { id, sender: ctx.sender, recipient: *recipient, value }],
            output: Some(id),
            ..Default::default()
        })
    }

    pub fn tsc_update_state(
        &mut self,
        ctx: &CallContext,
        state: &RollupState,
        qc: &QuorumCertificate,
        effects: &Effects,
    ) -> Result<CallOutcome, ErrorCode> {
        req(!self.is_frozen(), ErrorCode::Frozen)?;
        req(state.height == self.tsc.height + 1, ErrorCode::Height)?;
        req(state.prev_hash == self.latest_state().state_hash, ErrorCode::PrevHash)?;
        let state_hash = state.hash();
        let effects_hash = effects.hash();
        req(qc.state_hash == state_hash && qc.effects_hash == effects_hash, ErrorCode::Qc)?;
        req(self.msc.verify_qc(qc), ErrorCode::Qc)?;
        let mut seen = BTreeSet::new();
        for lock in &effects.locks {
            let dep = self.tsc.deposits.get(&lock.deposit_id).ok_or(ErrorCode::Lock)?;
            req(dep.status == DepositStatus::Unsolved, ErrorCode::Lock)?;
            req(dep.recipient == lock.recipient && dep.value == lock.value, ErrorCode::Lock)?;
            req(seen.insert(lock.deposit_id), ErrorCode::Lock)?;
        }
        let locked = effects.lock_total();
        req(effects.refund_total() <= self.tsc.escrow + locked, ErrorCode::Escrow)?;

        let mut events = vec![ChainEvent::StateUpdated {
            height: state.height,
            state: *state,
            qc: qc.clone(),
            effects: effects.clone(),
        }];
        for lock in &effects.locks {
            if let Some(dep) = self.tsc.deposits.get_mut(&lock.deposit_id) {
                dep.status = DepositStatus::Solved;
            }
            events.push(ChainEvent::DepositSolved { id: lock.deposit_id });
        }
        self.tsc.pending_deposits -= locked;
        self.tsc.escrow += locked;
        let mut payouts = Vec::new();
        for r in &effects.refunds {
            self.tsc.escrow -= r.value as u128;
            payouts.push((r.addr, r.value));
            events.push(ChainEvent::Refund { addr: r.addr, value: r.value });
        }
        self.tsc.height = state.height;
        self.tsc.states.insert(
            state.height,
            RecordedState { state: *state, state_hash, effects_hash, recorded_at: ctx.timestamp },
        );
        Ok(CallOutcome { payouts, events, output: Some(state_hash) })
    }

    pub fn tsc_start_challenge(
        &mut self,
        ctx: &CallContext,
        tx: &RollupTx,
        pledge: u64,
    ) -> Result<CallOutcome, ErrorCode> {
        req(!self.is_frozen(), ErrorCode::Frozen)?;
        req(pledge >= self.params.pledge_min, ErrorCode::Pledge)?;
        let id = challenge_id(&ctx.sender, tx, ctx.timestamp);
        req(!self.tsc.challenges.contains_key(&id), ErrorCode::Duplicate)?;
        self.tsc.challenges.insert(
            id,
            ChallengeEntry { tx: tx.clone(), start: ctx.timestamp, pledge, challenger: ctx.sender },
        );
        self.tsc.pledges_held += pledge as u128;
        Ok(CallOutcome {
            events: vec![ChainEvent::Challenge {
                id,
                tx: tx.clone(),
                start: ctx.timestamp,
                challenger: ctx.sender,
                pledge,
            }],
            output: Some(id),
            ..Default::default()
        })
    }

    /// Accepts a QC over any recorded state whose batch contains the
    /// challenged transaction. A pledge is forfeited when the transaction was
    /// already recorded before the challenge was raised.
    pub fn tsc_resolve_challenge(
        &mut self,
        ctx: &CallContext,
        id: &Digest,
        height: u64,
        qc: &QuorumCertificate,
        item_hashes: &[Digest],
    ) -> Result<CallOutcome, ErrorCode> {
        req(!self.is_frozen(), ErrorCode::Frozen)?;
        let chal = self.tsc.challenges.get(id).ok_or(ErrorCode::UnknownId)?;
        req(
            ctx.timestamp.saturating_sub(chal.start) <= self.params.challenge_timeout_s,
            ErrorCode::Timer,
        )?;
        let rec = self.tsc.states.get(&height).ok_or(ErrorCode::Qc)?;
        req(height > 0, ErrorCode::Qc)?;
        req(qc.state_hash == rec.state_hash && qc.effects_hash == rec.effects_hash, ErrorCode::Qc)?;
        req(self.msc.verify_qc(qc), ErrorCode::Qc)?;
        req(Batch::hash_of_items(item_hashes) == rec.state.txs_hash, ErrorCode::NotIncluded)?;
        let tx_hash = chal.tx.canonical_hash();
        req(item_hashes.contains(&tx_hash), ErrorCode::NotIncluded)?;

        let frivolous = rec.recorded_at < chal.start;
        let chal = self.tsc.challenges.remove(id).expect("checked above");
        self.tsc.pledges_held -= chal.pledge as u128;
        let mut payouts = Vec::new();
        if frivolous {
            self.tsc.revenue += chal.pledge as u128;
        } else {
            payouts.push((chal.challenger, chal.pledge));
        }
        Ok(CallOutcome {
            payouts,
            events: vec![ChainEvent::ChallengeResolved { id: *id, height, pledge_returned: !frivolous }],
            output: None,
        })
    }

    /// Freezes the contract once a challenge has gone unanswered for longer
    /// than the timeout. All outstanding pledges are returned.
    pub fn tsc_settle_rollup(&mut self, ctx: &CallContext, id: &Digest) -> Result<CallOutcome, ErrorCode> {
        req(!self.is_frozen(), ErrorCode::Frozen)?;
        let chal = self.tsc.challenges.get(id).ok_or(ErrorCode::UnknownId)?;
        req(
            ctx.timestamp.saturating_sub(chal.start) > self.params.challenge_timeout_s,
            ErrorCode::Timer,
        )?;
        self.tsc.contract_state = ContractState::Frozen;
        let mut payouts = Vec::new();
        for (_, c) in std::mem::take(&mut self.tsc.challenges) {
            self.tsc.pledges_held -= c.pledge as u128;
            payouts.push((c.challenger, c.pledge));
        }
        Ok(CallOutcome { payouts, events: vec![ChainEvent::Settle { id: *id }], output: None })
    }

    pub fn tsc_settle_withdraw(
        &mut self,
        rollup_addr: &Address,
        payout: &Address,
        balance: u64,
        proof: &MerkleProof,
        sig: &Signature,
    ) -> Result<CallOutcome, ErrorCode> {
        req(self.is_frozen(), ErrorCode::NotFrozen)?;
        req(*rollup_addr != BURN_ADDRESS, ErrorCode::Burn)?;
        req(!self.tsc.withdrawn.contains(rollup_addr), ErrorCode::Withdrawn)?;
        req(
            verify_digest(&withdraw_digest(rollup_addr, payout, balance), sig, rollup_addr),
            ErrorCode::Sig,
        )?;
        let root = self.latest_state().state.account_root;
        req(
            proof.key == *rollup_addr && proof.balance == balance && proof.root == root && proof.verify(),
            ErrorCode::Proof,
        )?;
        req(balance as u128 <= self.tsc.escrow, ErrorCode::Escrow)?;
        self.tsc.escrow -= balance as u128;
        self.tsc.withdrawn.insert(*rollup_addr);
        Ok(CallOutcome {
            payouts: vec![(*payout, balance)],
            events: vec![ChainEvent::Withdraw { rollup_addr: *rollup_addr, payout: *payout, value: balance }],
            output: None,
        })
    }

    pub fn tsc_refund_expired_deposit(
        &mut self,
        ctx: &CallContext,
        id: &Digest,
    ) -> Result<CallOutcome, ErrorCode> {
        let dep = self.tsc.deposits.get(id).ok_or(ErrorCode::UnknownId)?;
        req(dep.status == DepositStatus::Unsolved, ErrorCode::Solved)?;
        req(
            ctx.timestamp.saturating_sub(dep.created_at) > self.params.challenge_timeout_s,
            ErrorCode::Timer,
        )?;
        let dep = self.tsc.deposits.get_mut(id).expect("checked above");
        dep.status = DepositStatus::Refunded;
        self.tsc.pending_deposits -= dep.value as u128;
        Ok(CallOutcome {
            payouts: vec![(dep.sender, dep.value)],
            events: vec![ChainEvent::DepositRefunded { id: *id, value: dep.value }],
            output: None,
        })
    }

    pub fn dap_register(
        &mut self,
        ctx: &CallContext,
        collateral: u64,
        sig: &Signature,
    ) -> Result<CallOutcome, ErrorCode> {
        req(collateral >= self.params.dap_min_collateral, ErrorCode::Collateral)?;
        req(
            verify_digest(&dap_register_digest(&ctx.sender, collateral), sig, &ctx.sender),
            ErrorCode::Sig,
        )?;
        req(!self.daps.daps.contains_key(&ctx.sender), ErrorCode::Duplicate)?;
        self.daps.daps.insert(ctx.sender, DapEntry { collateral, active: true });
        self.daps.collateral_held += collateral as u128;
        Ok(CallOutcome {
            events: vec![ChainEvent::DapRegistered { dap: ctx.sender, collateral }],
            ..Default::default()
        })
    }

    pub fn audit_request(
        &mut self,
        ctx: &CallContext,
        height: u64,
        keys: &[Address],
    ) -> Result<CallOutcome, ErrorCode> {
        req(height > 0 && self.tsc.states.contains_key(&height), ErrorCode::Height)?;
        req(!keys.is_empty(), ErrorCode::Value)?;
        let id = audit_id(&ctx.sender, height, ctx.timestamp, ctx.block, ctx.index_in_block);
        req(!self.daps.audits.contains_key(&id), ErrorCode::Duplicate)?;
        let daps: Vec<Address> =
            self.daps.daps.iter().filter(|(_, e)| e.active).map(|(a, _)| *a).collect();
        self.daps.audits.insert(
            id,
            AuditEntry {
                height,
                keys: keys.to_vec(),
                requested_at: ctx.timestamp,
                daps: daps.clone(),
                responded: BTreeSet::new(),
                finalized: false,
            },
        );
        Ok(CallOutcome {
            events: vec![ChainEvent::AuditRequested { id, height, keys: keys.to_vec(), daps }],
            output: Some(id),
            ..Default::default()
        })
    }

    /// An invalid response is rejected, which leaves the DAP counted as silent.
    pub fn audit_respond(
        &mut self,
        ctx: &CallContext,
        id: &Digest,
        response: &AuditResponse,
    ) -> Result<CallOutcome, ErrorCode> {
        let audit = self.daps.audits.get(id).ok_or(ErrorCode::UnknownId)?;
        req(!audit.finalized, ErrorCode::Timer)?;
        req(audit.daps.contains(&ctx.sender), ErrorCode::NotDap)?;
        req(!audit.responded.contains(&ctx.sender), ErrorCode::Duplicate)?;
        req(
            ctx.timestamp.saturating_sub(audit.requested_at) <= self.params.dap_response_timeout_s,
            ErrorCode::Timer,
        )?;
        let rec = &self.tsc.states[&audit.height];
        req(Batch::hash_of_items(&response.item_hashes) == rec.state.txs_hash, ErrorCode::Proof)?;
        req(response.proofs.len() == audit.keys.len(), ErrorCode::Proof)?;
        for (key, proof) in audit.keys.iter().zip(&response.proofs) {
            req(
                proof.key == *key && proof.root == rec.state.account_root && proof.verify(),
                ErrorCode::Proof,
            )?;
        }
        let audit = self.daps.audits.get_mut(id).expect("checked above");
        audit.responded.insert(ctx.sender);
        Ok(CallOutcome {
            events: vec![ChainEvent::AuditResponded { id: *id, dap: ctx.sender }],
            ..Default::default()
        })
    }

    pub fn audit_finalize(&mut self, ctx: &CallContext, id: &Digest) -> Result<CallOutcome, ErrorCode> {
        let audit = self.daps.audits.get(id).ok_or(ErrorCode::UnknownId)?;
        req(!audit.finalized, ErrorCode::Duplicate)?;
        req(
            ctx.timestamp.saturating_sub(audit.requested_at) > self.params.dap_response_timeout_s,
            ErrorCode::Timer,
        )?;
        let x: Vec<bool> = audit.daps.iter().map(|d| audit.responded.contains(d)).collect();
        let p = &self.params;
        let amounts = slash_vector(&x, p.dap_min_collateral, p.dap_response_cost, p.dap_epsilon);
        let responses: Vec<(Address, bool)> = audit.daps.iter().copied().zip(x).collect();
        let mut slashes = Vec::with_capacity(amounts.len());
        for ((dap, _), amount) in responses.iter().zip(amounts) {
            let entry = self.daps.daps.get_mut(dap).expect("audited DAPs are registered");
            let taken = amount.min(entry.collateral);
            entry.collateral -= taken;
            if entry.collateral == 0 {
                entry.active = false;
            }
            self.daps.collateral_held -= taken as u128;
            self.daps.slashed += taken as u128;
            slashes.push((*dap, taken));
        }
        self.daps.audits.get_mut(id).expect("checked above").finalized = true;
        Ok(CallOutcome {
            events: vec![ChainEvent::AuditFinalized { id: *id, responses, slashes }],
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the piecewise penalty, one DAP at a time.
    fn penalty(i: usize, x: &[bool], c: u64, w: u64, eps: u64) -> u64 {
        let sum: usize = x.iter().filter(|&&b| b).count();
        if x[i] {
            0
        } else if sum < 1 {
            c
        } else {
            w + eps
        }
    }

    #[test]
    fn slash_examples() {
        let (c, w, e) = (1000, 1, 1);
        assert_eq!(slash_vector(&[false, false, false], c, w, e), vec![c, c, c]);
        assert_eq!(slash_vector(&[true, false, false], c, w, e), vec![0, w + e, w + e]);
        assert_eq!(slash_vector(&[true, true, true], c, w, e), vec![0, 0, 0]);
    }

    #[test]
    fn slash_vector_matches_piecewise_definition_exhaustively() {
        for m in 1..=4usize {
            for mask in 0u32..(1 << m) {
                let x: Vec<bool> = (0..m).map(|i| mask & (1 << i) != 0).collect();
                let got = slash_vector(&x, 100_000, 100, 1);
                let want: Vec<u64> = (0..m).map(|i| penalty(i, &x, 100_000, 100, 1)).collect();
                assert_eq!(got, want, "x = {x:?}");
            }
        }
    }
}

//! Simulated finalized main chain hosting the contracts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{tag, Encoder};
use crate::contracts::{
    CallContext, ChainEvent, ContractCall, ContractParams, Contracts, ErrorCode, Method, Timestamp,
};
use crate::crypto::{hash, Address, Digest};
use crate::rollup::RollupState;

/// Per-method gas charges and the prices used to convert them to USD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GasTable {
    pub deposit: u64,
    pub update_state: u64,
    pub start_challenge: u64,
    pub resolve_challenge: u64,
    pub settle_rollup: u64,
    pub settle_withdraw: u64,
    pub native_transfer: u64,
    /// Charge for calls without a measured cost.
    pub base_call: u64,
    pub gas_price_gwei: f64,
    pub eth_usd: f64,
}

impl Default for GasTable {
    fn default() -> Self {
        Self {
            deposit: 48_551,
            update_state: 156_263,
            start_challenge: 47_118,
            resolve_challenge: 146_618,
            settle_rollup: 29_078,
            settle_withdraw: 124_511,
            native_transfer: 21_000,
            base_call: 21_000,
            gas_price_gwei: 19.26,
            eth_usd: 3376.77,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GasTableError {
    #[error("gas entry for {0} must be positive")]
    ZeroEntry(&'static str),
    #[error("prices must be finite and non-negative")]
    BadPrice,
}

impl GasTable {
    pub fn gas(&self, method: Method) -> u64 {
        match method {
            Method::Deposit => self.deposit,
            Method::UpdateState => self.update_state,
            Method::StartChallenge => self.start_challenge,
            Method::ResolveChallenge => self.resolve_challenge,
            Method::SettleRollup => self.settle_rollup,
            Method::SettleWithdraw => self.settle_withdraw,
            Method::NativeTransfer => self.native_transfer,
            _ => self.base_call,
        }
    }

    pub fn validate(&self) -> Result<(), GasTableError> {
        for m in Method::ALL {
            if self.gas(m) == 0 {
                return Err(GasTableError::ZeroEntry(m.name()));
            }
        }
        let ok = |p: f64| p.is_finite() && p >= 0.0;
        if !ok(self.gas_price_gwei) || !ok(self.eth_usd) {
            return Err(GasTableError::BadPrice);
        }
        Ok(())
    }

    /// The measured methods in presentation order.
    pub fn rows(&self) -> Vec<(&'static str, u64)> {
        [
            Method::Deposit,
            Method::UpdateState,
            Method::StartChallenge,
            Method::ResolveChallenge,
            Method::SettleRollup,
            Method::SettleWithdraw,
        ]
        .into_iter()
        .map(|m| (m.name(), self.gas(m)))
        .chain(std::iter::once(("Simple ETH transfer", self.native_transfer)))
        .collect()
    }
}

/// `gas × price × ETH/USD`, in whole cents (rounded half away from zero).
pub fn usd_cents(gas: u64, table: &GasTable) -> u64 {
    let usd = gas as f64 * table.gas_price_gwei * 1e-9 * table.eth_usd;
    (usd * 100.0).round() as u64
}

pub fn gas_to_usd(gas: u64, table: &GasTable) -> f64 {
    usd_cents(gas, table) as f64 / 100.0
}

pub fn format_usd(gas: u64, table: &GasTable) -> String {
    let c = usd_cents(gas, table);
    format!("{}.{:02}", c / 100, c % 100)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ChainTxKind {
    Transfer { to: Address, value: u64 },
    Call { call: ContractCall },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTx {
    pub sender: Address,
    #[serde(flatten)]
    pub kind: ChainTxKind,
}

impl ChainTx {
    pub fn call(sender: Address, call: ContractCall) -> Self {
        Self { sender, kind: ChainTxKind::Call { call } }
    }

    pub fn transfer(sender: Address, to: Address, value: u64) -> Self {
        Self { sender, kind: ChainTxKind::Transfer { to, value } }
    }

    pub fn method(&self) -> Method {
        match &self.kind {
            ChainTxKind::Transfer { .. } => Method::NativeTransfer,
            ChainTxKind::Call { call } => call.method(),
        }
    }

    pub fn value(&self) -> u64 {
        match &self.kind {
            ChainTxKind::Transfer { value, .. } => *value,
            ChainTxKind::Call { call } => call.attached_value(),
        }
    }

    /// Hash over the JSON encoding; used only for deterministic tie-breaks.
    pub fn hash(&self) -> Digest {
        hash(&serde_json::to_vec(self).expect("chain tx serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub block: u64,
    pub timestamp: Timestamp,
    pub sender: Address,
    pub method: Method,
    pub gas_used: u64,
    pub fee: u128,
    pub error: Option<ErrorCode>,
    pub events: Vec<ChainEvent>,
    pub output: Option<Digest>,
}

impl Receipt {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub block: u64,
    pub timestamp: Timestamp,
    pub event: ChainEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum LogEntry {
    Mint { to: Address, value: u128 },
    Block { timestamp: Timestamp, txs: Vec<ChainTx> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasTally {
    pub calls: u64,
    pub gas: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("block timestamp {got} precedes chain time {now}")]
    TimeReversal { now: Timestamp, got: Timestamp },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub gas: GasTable,
    /// Native units charged per unit of gas.
    pub gas_price_units: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { gas: GasTable::default(), gas_price_units: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct ChainLedger {
    config: ChainConfig,
    height: u64,
    timestamp: Timestamp,
    balances: BTreeMap<Address, u128>,
    contracts: Contracts,
    events: Vec<LoggedEvent>,
    gas_by_method: BTreeMap<Method, GasTally>,
    gas_by_actor: BTreeMap<Address, u64>,
    fee_sink: u128,
    minted: u128,
    log: Vec<LogEntry>,
    genesis: (ContractParams, RollupState),
}

#[derive(Serialize)]
struct SnapshotView<'a> {
    height: u64,
    timestamp: Timestamp,
    balances: &'a BTreeMap<Address, u128>,
    contracts: &'a Contracts,
    events: usize,
    gas_by_method: Vec<(Method, GasTally)>,
    gas_by_actor: &'a BTreeMap<Address, u64>,
    fee_sink: u128,
    minted: u128,
}

impl ChainLedger {
    pub fn new(config: ChainConfig, params: ContractParams, genesis: RollupState) -> Self {
        Self {
            config,
            height: 0,
            timestamp: 0,
            balances: BTreeMap::new(),
            contracts: Contracts::new(params.clone(), genesis),
            events: Vec::new(),
            gas_by_method: BTreeMap::new(),
            gas_by_actor: BTreeMap::new(),
            fee_sink: 0,
            minted: 0,
            log: Vec::new(),
            genesis: (params, genesis),
        }
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn timestamp(&self) -> Timestamp {
        self.timestamp
    }

    pub fn contracts(&self) -> &Contracts {
        &self.contracts
    }

    pub fn balance(&self, addr: &Address) -> u128 {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.events
    }

    pub fn gas_by_method(&self) -> &BTreeMap<Method, GasTally> {
        &self.gas_by_method
    }

    pub fn gas_by_actor(&self) -> &BTreeMap<Address, u64> {
        &self.gas_by_actor
    }

    pub fn fee_sink(&self) -> u128 {
        self.fee_sink
    }

    pub fn minted(&self) -> u128 {
        self.minted
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Native value in existence: account balances, contract holdings, fees.
    pub fn circulating(&self) -> u128 {
        self.balances.values().sum::<u128>() + self.contracts.holdings() + self.fee_sink
    }

    /// Faucet mint for scenario setup.
    pub fn mint(&mut self, to: Address, value: u128) {
        *self.balances.entry(to).or_default() += value;
        self.minted += value;
        self.log.push(LogEntry::Mint { to, value });
    }

    pub fn advance_time(&mut self, delta_s: u64) {
        self.timestamp += delta_s;
    }

    /// Applies `txs` in order as one block at `timestamp`.
    pub fn apply_block(&mut self, timestamp: Timestamp, txs: Vec<ChainTx>) -> Result<Vec<Receipt>, ChainError> {
        if timestamp < self.timestamp {
            return Err(ChainError::TimeReversal { now: self.timestamp, got: timestamp });
        }
        self.timestamp = timestamp;
        self.height += 1;
        let receipts = txs.iter().enumerate().map(|(i, tx)| self.apply_tx(i as u32, tx)).collect();
        self.log.push(LogEntry::Block { timestamp, txs });
        Ok(receipts)
    }

    fn apply_tx(&mut self, index: u32, tx: &ChainTx) -> Receipt {
        let method = tx.method();
        let gas = self.config.gas.gas(method);
        let fee = gas as u128 * self.config.gas_price_units as u128;
        let mut receipt = Receipt {
            block: self.height,
            timestamp: self.timestamp,
            sender: tx.sender,
            method,
            gas_used: 0,
            fee: 0,
            error: None,
            events: Vec::new(),
            output: None,
        };
        let value = tx.value() as u128;
        if self.balance(&tx.sender) < fee + value {
            receipt.error = Some(ErrorCode::Funds);
            return receipt;
        }
        let payouts = match &tx.kind {
            ChainTxKind::Transfer { to, value } => vec![(*to, *value)],
            ChainTxKind::Call { call } => {
                let ctx = CallContext {
                    sender: tx.sender,
                    timestamp: self.timestamp,
                    block: self.height,
                    index_in_block: index,
                };
                match self.contracts.call(&ctx, call) {
                    Ok(outcome) => {
                        receipt.events = outcome.events;
                        receipt.output = outcome.output;
                        outcome.payouts
                    }
                    Err(code) => {
                        receipt.error = Some(code);
                        return receipt;
                    }
                }
            }
        };
        *self.balances.get_mut(&tx.sender).expect("sender funded") -= fee + value;
        self.fee_sink += fee;
        for (to, v) in payouts {
            *self.balances.entry(to).or_default() += v as u128;
        }
        let tally = self.gas_by_method.entry(method).or_default();
        tally.calls += 1;
        tally.gas += gas;
        *self.gas_by_actor.entry(tx.sender).or_default() += gas;
        for event in &receipt.events {
            self.events.push(LoggedEvent { block: self.height, timestamp: self.timestamp, event: event.clone() });
        }
        receipt.gas_used = gas;
        receipt.fee = fee;
        receipt
    }

    /// Digest of the full ledger state, for atomicity and replay checks.
    pub fn snapshot_digest(&self) -> Digest {
        let view = SnapshotView {
            height: self.height,
            timestamp: self.timestamp,
            balances: &self.balances,
            contracts: &self.contracts,
            events: self.events.len(),
            gas_by_method: self.gas_by_method.iter().map(|(m, t)| (*m, *t)).collect(),
            gas_by_actor: &self.gas_by_actor,
            fee_sink: self.fee_sink,
            minted: self.minted,
        };
        let mut enc = Encoder::with_tag(tag::LEDGER);
        enc.raw(&serde_json::to_vec(&view).expect("ledger serializes"));
        enc.digest()
    }

    /// Rebuilds a ledger by re-applying a transaction log.
    pub fn replay(
        config: ChainConfig,
        params: ContractParams,
        genesis: RollupState,
        log: &[LogEntry],
    ) -> Result<Self, ChainError> {
        let mut ledger = Self::new(config, params, genesis);
        for entry in log {
            match entry {
                LogEntry::Mint { to, value } => ledger.mint(*to, *value),
                LogEntry::Block { timestamp, txs } => {
                    ledger.apply_block(*timestamp, txs.clone())?;
                }
            }
        }
        Ok(ledger)
    }

    /// Re-applies this ledger's own log from genesis.
    pub fn replay_self(&self) -> Result<Self, ChainError> {
        Self::replay(self.config.clone(), self.genesis.0.clone(), self.genesis.1, &self.log)
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

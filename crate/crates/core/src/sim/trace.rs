//! Versioned JSON-lines run trace.
//!
//! Line 1 is the header, then one record per line, then a footer carrying the
//! record count and the SHA-256 of every preceding line (newline included).

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::chain::{ChainConfig, ChainError, ChainLedger, ChainTx, Receipt};
use crate::contracts::{ContractParams, ErrorCode, Method, Timestamp};
use crate::crypto::{Address, Digest};
use crate::rollup::{BatchItem, RollupState};
use crate::sim::config::ScenarioConfig;

pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub seed: u64,
    pub unsafe_exceed_f: bool,
    pub compromised: Vec<u32>,
    pub config: ScenarioConfig,
    pub chain: ChainConfig,
    pub contract_params: ContractParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptSummary {
    pub method: Method,
    pub gas: u64,
    pub error: Option<ErrorCode>,
    pub output: Option<Digest>,
}

impl From<&Receipt> for ReceiptSummary {
    fn from(r: &Receipt) -> Self {
        Self { method: r.method, gas: r.gas_used, error: r.error, output: r.output }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceBody {
    Mint { to: Address, value: u64 },
    Block { height: u64, timestamp: Timestamp, txs: Vec<ChainTx>, receipts: Vec<ReceiptSummary> },
    /// Body of an accepted state, as published by its submitter.
    Batch { height: u64, state_hash: Digest, items: Vec<BatchItem> },
    Vote { node: u32, height: u64, state_hash: Digest, effects_hash: Digest, forged: bool },
    /// A leader's proposal; `started_us` is when it began executing the batch.
    Propose { node: u32, height: u64, state_hash: Digest, items: u32, started_us: u64 },
    /// A node assembled f+1 votes for a state.
    Qc { node: u32, height: u64, state_hash: Digest },
    Submit { tx_hash: Digest },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_us: u64,
    #[serde(flatten)]
    pub body: TraceBody,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Framing {
    Header(Box<TraceHeader>),
    Footer { count: u64, digest: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("trace has no footer (truncated?)")]
    MissingFooter,
    #[error("footer counts {footer} records, found {found}")]
    Count { footer: u64, found: u64 },
    #[error("content digest mismatch")]
    Digest,
    #[error("unsupported trace version {0}")]
    Version(u32),
}

/// Chain state rebuilt from a trace, with the receipts of every block record.
pub struct Replay {
    pub ledger: ChainLedger,
    pub blocks: Vec<(u64, Vec<Receipt>)>,
}

impl Trace {
    pub fn genesis(&self) -> RollupState {
        RollupState::genesis(self.header.contract_params.tree_depth)
    }

    /// Re-executes the mint and block records from an empty chain.
    pub fn replay_chain(&self) -> Result<Replay, ChainError> {
        let h = &self.header;
        let mut ledger = ChainLedger::new(h.chain.clone(), h.contract_params.clone(), self.genesis());
        let mut blocks = Vec::new();
        for r in &self.records {
            match &r.body {
                TraceBody::Mint { to, value } => ledger.mint(*to, *value as u128),
                TraceBody::Block { timestamp, txs, .. } => {
                    blocks.push((r.t_us, ledger.apply_block(*timestamp, txs.clone())?));
                }
                _ => {}
            }
        }
        Ok(Replay { ledger, blocks })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut h = Sha256::new();
        let mut push = |line: String, out: &mut String| {
            h.update(line.as_bytes());
            h.update(b"\n");
            out.push_str(&line);
            out.push('\n');
        };
        push(serde_json::to_string(&Framing::Header(Box::new(self.header.clone()))).expect("header"), &mut out);
        for r in &self.records {
            push(serde_json::to_string(r).expect("record"), &mut out);
        }
        let footer = Framing::Footer { count: self.records.len() as u64, digest: hex::encode(h.finalize()) };
        out.push_str(&serde_json::to_string(&footer).expect("footer"));
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.is_empty() {
            return Err(TraceError::Empty);
        }
        let bad = |line: usize, e: serde_json::Error| TraceError::Malformed { line: line + 1, msg: e.to_string() };
        let last = lines.len() - 1;
        let (count, digest) = match serde_json::from_str::<Framing>(lines[last]) {
            Ok(Framing::Footer { count, digest }) if last > 0 => (count, digest),
            _ => return Err(TraceError::MissingFooter),
        };
        let found = (last - 1) as u64;
        if found != count {
            return Err(TraceError::Count { footer: count, found });
        }
        let mut h = Sha256::new();
        for l in &lines[..last] {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        if hex::encode(h.finalize()) != digest {
            return Err(TraceError::Digest);
        }
        let header = match serde_json::from_str::<Framing>(lines[0]).map_err(|e| bad(0, e))? {
            Framing::Header(h) => *h,
            Framing::Footer { .. } => {
                return Err(TraceError::Malformed { line: 1, msg: "expected header".into() })
            }
        };
        if header.version != TRACE_VERSION {
            return Err(TraceError::Version(header.version));
        }
        let records = lines[1..last]
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i + 1, e)))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, records })
    }
}

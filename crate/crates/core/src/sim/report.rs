//! Metrics computed from a trace alone.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::chain::{gas_to_usd, GasTable};
use crate::contracts::{ChainEvent, Method};
use crate::crypto::Digest;
use crate::merkle::AccountTree;
use crate::rollup::{execute, Batch, BatchItem};
use crate::sim::trace::{Trace, TraceBody};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub max_s: f64,
}

impl LatencyStats {
    pub fn from_samples(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        // Nearest-rank percentile.
        let pct = |p: f64| v[((p / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            count: v.len(),
            mean_s: v.iter().sum::<f64>() / v.len() as f64,
            p50_s: pct(50.0),
            p95_s: pct(95.0),
            p99_s: pct(99.0),
            max_s: *v.last().expect("non-empty"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GasRow {
    pub method: String,
    pub calls: u64,
    pub failed: u64,
    pub gas_per_call: u64,
    pub gas_total: u64,
    pub usd_per_call: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChallengeRow {
    pub id: Digest,
    pub start_s: u64,
    /// `resolved`, `settled` or `open`.
    pub outcome: String,
    pub closed_at_s: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettlementInfo {
    pub settled_at_s: u64,
    pub final_height: u64,
    pub rollup_balance_total: u128,
    pub accounts_with_balance: usize,
    pub withdrawals: usize,
    pub withdrawn_total: u128,
    pub deposit_refunds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DapRow {
    pub dap: String,
    pub audits: u64,
    pub responded: u64,
    pub slashed: u64,
    /// Cost of answering every audit at the response cost.
    pub diligence_cost: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub duration_s: u64,
    pub submitted: usize,
    pub finalized_transfers: usize,
    pub rejected_items: usize,
    /// First submission to last confirmation of a submitted transfer.
    pub window_s: f64,
    /// Confirmed transfers per second over the window.
    pub throughput_tps: f64,
    /// Client submission to the block that accepts its batch.
    pub latency: LatencyStats,
    /// Accepted rounds with a recorded proposal and QC.
    pub consensus_rounds: usize,
    /// Leader starts executing a batch to the first QC for it.
    pub consensus_latency: LatencyStats,
    /// Items per second of round time.
    pub consensus_throughput_tps: f64,
    pub accepted_height: u64,
    pub frozen: bool,
    pub gas: Vec<GasRow>,
    /// Mean update gas per item over batches filled to capacity.
    pub update_gas_per_item: Option<f64>,
    pub challenges: Vec<ChallengeRow>,
    pub settlement: Option<SettlementInfo>,
    pub daps: Vec<DapRow>,
    pub chain_error: Option<String>,
}

impl MetricsReport {
    pub fn from_trace(trace: &Trace) -> Self {
        let h = &trace.header;
        let cfg = &h.config;
        let mut r = MetricsReport {
            scenario: cfg.name.clone(),
            seed: h.seed,
            n: cfg.committee.n,
            f: cfg.committee.f,
            duration_s: cfg.duration_s,
            submitted: 0,
            finalized_transfers: 0,
            rejected_items: 0,
            window_s: 0.0,
            throughput_tps: 0.0,
            latency: LatencyStats::default(),
            consensus_rounds: 0,
            consensus_latency: LatencyStats::default(),
            consensus_throughput_tps: 0.0,
            accepted_height: 0,
            frozen: false,
            gas: Vec::new(),
            update_gas_per_item: None,
            challenges: Vec::new(),
            settlement: None,
            daps: Vec::new(),
            chain_error: None,
        };

        let mut submit_at: HashMap<Digest, u64> = HashMap::new();
        let mut batches: BTreeMap<u64, (u64, Digest, Batch)> = BTreeMap::new();
        let mut proposed: HashMap<Digest, (u64, u32)> = HashMap::new();
        let mut certified: HashMap<Digest, u64> = HashMap::new();
        for rec in &trace.records {
            match &rec.body {
                TraceBody::Propose { state_hash, items, started_us, .. } => {
                    proposed.entry(*state_hash).or_insert((*started_us, *items));
                }
                TraceBody::Qc { state_hash, .. } => {
                    certified.entry(*state_hash).or_insert(rec.t_us);
                }
                TraceBody::Submit { tx_hash } => {
                    submit_at.entry(*tx_hash).or_insert(rec.t_us);
                }
                TraceBody::Batch { height, state_hash, items } => {
                    batches.insert(*height, (rec.t_us, *state_hash, Batch::new(items.clone())));
                }
                _ => {}
            }
        }
        r.submitted = submit_at.len();

        let replay = match trace.replay_chain() {
            Ok(x) => x,
            Err(e) => {
                r.chain_error = Some(e.to_string());
                return r;
            }
        };
        let contracts = replay.ledger.contracts();
        r.accepted_height = contracts.tsc.height;
        r.frozen = contracts.is_frozen();

        // Re-execute accepted batches in order to learn which items applied.
        let mut state = trace.genesis();
        let mut tree = AccountTree::with_depth(h.contract_params.tree_depth);
        let mut lat = Vec::new();
        let mut first_submit = u64::MAX;
        let mut last_final = 0u64;
        let mut sizes: BTreeMap<u64, usize> = BTreeMap::new();
        for height in 1..=contracts.tsc.height {
            let Some((t, _, batch)) = batches.get(&height) else { break };
            sizes.insert(height, batch.len());
            let Ok(out) = execute(&state, &tree, batch) else { break };
            let rejected: std::collections::HashSet<u32> = out.rejected.iter().map(|x| x.index).collect();
            r.rejected_items += rejected.len();
            for (i, item) in batch.items.iter().enumerate() {
                if let BatchItem::Transfer(tx) = item {
                    if rejected.contains(&(i as u32)) {
                        continue;
                    }
                    r.finalized_transfers += 1;
                    if let Some(&s) = submit_at.get(&tx.hash()) {
                        lat.push(t.saturating_sub(s) as f64 / 1e6);
                        first_submit = first_submit.min(s);
                        last_final = last_final.max(*t);
                    }
                }
            }
            state = out.state;
            tree = out.tree;
        }
        if last_final > first_submit {
            r.window_s = (last_final - first_submit) as f64 / 1e6;
            r.throughput_tps = r.finalized_transfers as f64 / r.window_s;
        }
        r.latency = LatencyStats::from_samples(lat);

        let mut rounds = Vec::new();
        let mut items = 0u64;
        for rec in contracts.tsc.states.range(1..).map(|(_, s)| s) {
            if let (Some(&(start, n)), Some(&qc)) = (proposed.get(&rec.state_hash), certified.get(&rec.state_hash)) {
                rounds.push(qc.saturating_sub(start) as f64 / 1e6);
                items += n as u64;
            }
        }
        let busy: f64 = rounds.iter().sum();
        if busy > 0.0 {
            r.consensus_throughput_tps = items as f64 / busy;
        }
        r.consensus_rounds = rounds.len();
        r.consensus_latency = LatencyStats::from_samples(rounds);

        r.gas = gas_rows(&replay.blocks, &h.chain.gas);
        let full = cfg.rollup.batch_size;
        let per_item: Vec<f64> = replay
            .blocks
            .iter()
            .flat_map(|(_, rs)| rs.iter())
            .filter(|x| x.ok() && x.method == Method::UpdateState)
            .filter_map(|x| {
                x.events.iter().find_map(|e| match e {
                    ChainEvent::StateUpdated { height, .. } => sizes.get(height).copied(),
                    _ => None,
                })
                .filter(|&s| s == full)
                .map(|s| x.gas_used as f64 / s as f64)
            })
            .collect();
        if !per_item.is_empty() {
            r.update_gas_per_item = Some(per_item.iter().sum::<f64>() / per_item.len() as f64);
        }

        let mut challenges: BTreeMap<Digest, ChallengeRow> = BTreeMap::new();
        let mut daps: BTreeMap<String, DapRow> = BTreeMap::new();
        let mut settlement: Option<SettlementInfo> = None;
        let w = h.contract_params.dap_response_cost;
        for e in replay.ledger.events() {
            match &e.event {
                ChainEvent::Challenge { id, start, .. } => {
                    challenges.insert(
                        *id,
                        ChallengeRow { id: *id, start_s: *start, outcome: "open".into(), closed_at_s: None },
                    );
                }
                ChainEvent::ChallengeResolved { id, .. } => {
                    if let Some(c) = challenges.get_mut(id) {
                        c.outcome = "resolved".into();
                        c.closed_at_s = Some(e.timestamp);
                    }
                }
                ChainEvent::Settle { id } => {
                    if let Some(c) = challenges.get_mut(id) {
                        c.outcome = "settled".into();
                        c.closed_at_s = Some(e.timestamp);
                    }
                    settlement = Some(SettlementInfo {
                        settled_at_s: e.timestamp,
                        final_height: contracts.tsc.height,
                        rollup_balance_total: tree.total_balance(),
                        accounts_with_balance: tree.iter().filter(|(_, a)| a.balance > 0).count(),
                        ..Default::default()
                    });
                }
                ChainEvent::Withdraw { value, .. } => {
                    if let Some(s) = settlement.as_mut() {
                        s.withdrawals += 1;
                        s.withdrawn_total += *value as u128;
                    }
                }
                ChainEvent::DepositRefunded { .. } => {
                    if let Some(s) = settlement.as_mut() {
                        s.deposit_refunds += 1;
                    }
                }
                ChainEvent::DapRegistered { dap, .. } => {
                    let k = dap.to_hex();
                    daps.insert(
                        k.clone(),
                        DapRow { dap: k, audits: 0, responded: 0, slashed: 0, diligence_cost: 0 },
                    );
                }
                ChainEvent::AuditFinalized { responses, slashes, .. } => {
                    for ((d, ok), (_, s)) in responses.iter().zip(slashes) {
                        if let Some(row) = daps.get_mut(&d.to_hex()) {
                            row.audits += 1;
                            row.responded += *ok as u64;
                            row.slashed += s;
                            row.diligence_cost += w;
                        }
                    }
                }
                _ => {}
            }
        }
        r.challenges = challenges.into_values().collect();
        r.settlement = settlement;
        r.daps = daps.into_values().collect();
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `section,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,value\n");
        let mut row = |s: &str, k: &str, v: String| out.push_str(&format!("{s},{k},{v}\n"));
        row("run", "scenario", self.scenario.clone());
        row("run", "seed", self.seed.to_string());
        row("run", "n", self.n.to_string());
        row("run", "f", self.f.to_string());
        row("run", "submitted", self.submitted.to_string());
        row("run", "finalized_transfers", self.finalized_transfers.to_string());
        row("run", "rejected_items", self.rejected_items.to_string());
        row("run", "window_s", format!("{:.3}", self.window_s));
        row("run", "throughput_tps", format!("{:.3}", self.throughput_tps));
        row("consensus", "rounds", self.consensus_rounds.to_string());
        row("consensus", "throughput_tps", format!("{:.3}", self.consensus_throughput_tps));
        row("consensus", "mean_latency_ms", format!("{:.3}", self.consensus_latency.mean_s * 1e3));
        row("consensus", "p95_latency_ms", format!("{:.3}", self.consensus_latency.p95_s * 1e3));
        row("run", "accepted_height", self.accepted_height.to_string());
        row("run", "frozen", self.frozen.to_string());
        let l = &self.latency;
        for (k, v) in [("mean_s", l.mean_s), ("p50_s", l.p50_s), ("p95_s", l.p95_s), ("p99_s", l.p99_s), ("max_s", l.max_s)] {
            row("latency", k, format!("{v:.3}"));
        }
        for g in &self.gas {
            row("gas_calls", &g.method, g.calls.to_string());
            row("gas_per_call", &g.method, g.gas_per_call.to_string());
            row("usd_per_call", &g.method, format!("{:.2}", g.usd_per_call));
        }
        if let Some(x) = self.update_gas_per_item {
            row("gas", "update_per_item", format!("{x:.2}"));
        }
        for c in &self.challenges {
            row("challenge", &c.id.to_hex(), c.outcome.clone());
        }
        if let Some(s) = &self.settlement {
            row("settlement", "settled_at_s", s.settled_at_s.to_string());
            row("settlement", "withdrawals", s.withdrawals.to_string());
            row("settlement", "withdrawn_total", s.withdrawn_total.to_string());
            row("settlement", "rollup_balance_total", s.rollup_balance_total.to_string());
        }
        for d in &self.daps {
            row("dap_slashed", &d.dap, d.slashed.to_string());
            row("dap_diligence_cost", &d.dap, d.diligence_cost.to_string());
        }
        out
    }
}

fn gas_rows(blocks: &[(u64, Vec<crate::chain::Receipt>)], table: &GasTable) -> Vec<GasRow> {
    let mut by: BTreeMap<Method, (u64, u64, u64)> = BTreeMap::new();
    for (_, rs) in blocks {
        for x in rs {
            let e = by.entry(x.method).or_default();
            if x.ok() {
                e.0 += 1;
                e.2 += x.gas_used;
            } else {
                e.1 += 1;
            }
        }
    }
    by.into_iter()
        .map(|(m, (calls, failed, total))| {
            let per = total.checked_div(calls).unwrap_or_else(|| table.gas(m));
            GasRow {
                method: m.name().to_string(),
                calls,
                failed,
                gas_per_call: per,
                gas_total: total,
                usd_per_call: gas_to_usd(per, table),
            }
        })
        .collect()
}

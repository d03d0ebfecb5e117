//! Client population: deposits, the transfer stream, challenges, audits and
//! withdrawals after settlement.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::chain::ChainTx;
use crate::contracts::{withdraw_digest, ChainEvent, ContractCall, ContractParams};
use crate::crypto::{gen_keypair, sign_digest, Address, Digest, KeyPair, BURN_ADDRESS};
use crate::rollup::{RollupState, RollupTx};
use crate::sim::actor::{Actor, Ctx, Message, Notice, Timer, US_PER_S};
use crate::sim::config::{ChallengeMode, ChallengeSpec, DapSection, ScenarioConfig, WorkloadConfig};
use crate::sim::rng::stream;
use crate::sim::trace::TraceBody;

/// One entry of the generated transfer stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedTx {
    /// Wait after the previous entry.
    pub gap_us: u64,
    pub from: usize,
    /// `None` redeems to the burn address.
    pub to: Option<usize>,
    pub value: u64,
}

/// Deterministic transfer stream: `transfers` payments between distinct
/// clients and `redeems` burns, shuffled, with Poisson gaps at `rate_tps`.
pub fn generate_workload(cfg: &WorkloadConfig, rng: &mut ChaCha20Rng) -> Vec<PlannedTx> {
    let mut kinds: Vec<bool> = std::iter::repeat_n(false, cfg.transfers)
        .chain(std::iter::repeat_n(true, cfg.redeems))
        .collect();
    kinds.shuffle(rng);
    kinds
        .into_iter()
        .map(|redeem| {
            let gap_us = if cfg.rate_tps > 0.0 {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                (-u.ln() / cfg.rate_tps * US_PER_S as f64).round() as u64
            } else {
                0
            };
            let from = rng.gen_range(0..cfg.clients);
            let to = if redeem {
                None
            } else {
                let k = rng.gen_range(0..cfg.clients - 1);
                Some(if k >= from { k + 1 } else { k })
            };
            PlannedTx { gap_us, from, to, value: rng.gen_range(1..=cfg.value_max) }
        })
        .collect()
}

/// The transfer stream a scenario runs with.
pub fn plan_for(cfg: &ScenarioConfig) -> Vec<PlannedTx> {
    generate_workload(&cfg.workload, &mut stream(cfg.seed, "workload"))
}

pub struct ClientPool {
    cfg: WorkloadConfig,
    dap_cfg: DapSection,
    params: ContractParams,
    sequencers: u32,
    daps: u32,
    rng: ChaCha20Rng,
    keys: Vec<KeyPair>,
    index_of: HashMap<Address, usize>,
    auditor: KeyPair,
    nonces: Vec<u64>,
    plan: Vec<PlannedTx>,
    started: bool,
    deposits: BTreeMap<Digest, usize>,
    solved: BTreeSet<Digest>,
    sent: HashMap<Digest, (usize, u64)>,
    unconfirmed: BTreeMap<(usize, u64), RollupTx>,
    confirmed: HashMap<usize, RollupTx>,
    open_challenges: BTreeSet<Digest>,
    accepted: Vec<RollupState>,
    frozen: bool,
    withdrawing: BTreeSet<Address>,
}

impl ClientPool {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: WorkloadConfig,
        dap_cfg: DapSection,
        params: ContractParams,
        sequencers: u32,
        daps: u32,
        genesis: RollupState,
        mut rng: ChaCha20Rng,
        auditor: KeyPair,
        plan: Vec<PlannedTx>,
    ) -> Self {
        let keys: Vec<KeyPair> = (0..cfg.clients).map(|_| gen_keypair(rng.gen())).collect();
        let index_of = keys.iter().enumerate().map(|(i, k)| (k.address(), i)).collect();
        Self {
            nonces: vec![0; cfg.clients],
            cfg,
            dap_cfg,
            params,
            sequencers,
            daps,
            rng,
            keys,
            index_of,
            auditor,
            plan,
            started: false,
            deposits: BTreeMap::new(),
            solved: BTreeSet::new(),
            sent: HashMap::new(),
            unconfirmed: BTreeMap::new(),
            confirmed: HashMap::new(),
            open_challenges: BTreeSet::new(),
            accepted: vec![genesis],
            frozen: false,
            withdrawing: BTreeSet::new(),
        }
    }

    /// Chain accounts that need native funds.
    pub fn accounts(&self) -> Vec<Address> {
        let mut v: Vec<Address> = self.keys.iter().map(KeyPair::address).collect();
        v.push(self.auditor.address());
        v
    }

    pub fn client_addresses(&self) -> Vec<Address> {
        self.keys.iter().map(KeyPair::address).collect()
    }

    pub fn auditor(&self) -> Address {
        self.auditor.address()
    }

    pub fn start(&mut self, ctx: &mut Ctx) {
        if self.cfg.clients > 0 && self.cfg.deposit > 0 {
            ctx.timer(self.cfg.deposit_at_s * US_PER_S, Timer::Deposits);
        } else {
            self.begin_transfers(ctx);
        }
        for (i, ch) in self.cfg.challenges.iter().enumerate() {
            ctx.timer(ch.at_s * US_PER_S, Timer::Challenge(i));
        }
        for k in 0..self.dap_cfg.audits {
            let at = self.dap_cfg.audit_start_s + k as u64 * self.dap_cfg.audit_every_s;
            ctx.timer(at * US_PER_S, Timer::Audit(k));
        }
    }

    fn begin_transfers(&mut self, ctx: &mut Ctx) {
        if self.started || self.plan.is_empty() {
            return;
        }
        self.started = true;
        let first = self.cfg.start_after_s * US_PER_S + self.plan[0].gap_us;
        ctx.timer(first, Timer::Workload(0));
    }

    fn tip(&self) -> &RollupState {
        self.accepted.last().expect("genesis present")
    }

    fn submit(&mut self, ctx: &mut Ctx, k: usize) {
        let p = self.plan[k].clone();
        let to = p.to.map_or(BURN_ADDRESS, |i| self.keys[i].address());
        let nonce = self.nonces[p.from];
        self.nonces[p.from] += 1;
        let tx = RollupTx::signed(&self.keys[p.from], to, p.value, nonce);
        let h = tx.hash();
        for i in 0..self.sequencers {
            ctx.send(Actor::Seq(i), Message::ClientTx(tx.clone()));
        }
        ctx.trace(TraceBody::Submit { tx_hash: h });
        self.sent.insert(h, (p.from, nonce));
        self.unconfirmed.insert((p.from, nonce), tx);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Deposits => {
                for k in &self.keys {
                    ctx.chain(ChainTx::call(
                        k.address(),
                        ContractCall::Deposit { recipient: k.address(), value: self.cfg.deposit },
                    ));
                }
            }
            Timer::Workload(k) => {
                if self.frozen {
                    return;
                }
                if self.cfg.rate_tps > 0.0 {
                    self.submit(ctx, k);
                    if k + 1 < self.plan.len() {
                        ctx.timer(self.plan[k + 1].gap_us, Timer::Workload(k + 1));
                    }
                } else {
                    for i in k..self.plan.len() {
                        self.submit(ctx, i);
                    }
                }
            }
            Timer::Challenge(i) => {
                let spec = self.cfg.challenges[i].clone();
                self.challenge(ctx, &spec);
            }
            Timer::SettleCheck { id } => {
                if !self.frozen && self.open_challenges.contains(&id) {
                    ctx.chain(ChainTx::call(self.keys[0].address(), ContractCall::SettleRollup { id }));
                }
            }
            Timer::Audit(_) => self.audit(ctx),
            Timer::FinalizeAudit { id } => {
                ctx.chain(ChainTx::call(self.auditor.address(), ContractCall::FinalizeAudit { id }));
            }
            Timer::ProofRetry { addr, dap } => {
                if self.withdrawing.contains(&addr) {
                    self.request_proof(ctx, addr, dap + 1);
                }
            }
            Timer::RefundDeposits => {
                let due: Vec<(Digest, usize)> = self
                    .deposits
                    .iter()
                    .filter(|(id, _)| !self.solved.contains(id))
                    .map(|(id, c)| (*id, *c))
                    .collect();
                for (id, c) in due {
                    ctx.chain(ChainTx::call(self.keys[c].address(), ContractCall::RefundExpiredDeposit { id }));
                }
            }
            _ => {}
        }
    }

    fn challenge(&mut self, ctx: &mut Ctx, spec: &ChallengeSpec) {
        if self.frozen {
            return;
        }
        let c = spec.client;
        let pending = || self.unconfirmed.range((c, 0)..(c + 1, 0)).next().map(|(_, tx)| tx.clone());
        let tx = match spec.mode {
            ChallengeMode::Included => self.confirmed.get(&c).cloned().or_else(pending),
            ChallengeMode::Pending => pending(),
            ChallengeMode::Withheld => None,
        };
        let tx = tx.unwrap_or_else(|| {
            let to = self.keys[(c + 1) % self.keys.len()].address();
            let nonce = self.nonces[c];
            self.nonces[c] += 1;
            let tx = RollupTx::signed(&self.keys[c], to, 1, nonce);
            ctx.trace(TraceBody::Submit { tx_hash: tx.hash() });
            self.sent.insert(tx.hash(), (c, nonce));
            self.unconfirmed.insert((c, nonce), tx.clone());
            tx
        });
        ctx.chain(ChainTx::call(
            self.keys[c].address(),
            ContractCall::StartChallenge { tx, pledge: self.params.pledge_min },
        ));
    }

    fn audit(&mut self, ctx: &mut Ctx) {
        let latest = self.tip().height;
        if self.frozen || latest == 0 || self.keys.is_empty() {
            return;
        }
        let height = self.rng.gen_range(1..=latest);
        let n = self.dap_cfg.audit_keys.min(self.keys.len()).max(1);
        let keys = sample(&mut self.rng, self.keys.len(), n).into_iter().map(|i| self.keys[i].address()).collect();
        ctx.chain(ChainTx::call(self.auditor.address(), ContractCall::AuditRequest { height, keys }));
    }

    fn request_proof(&mut self, ctx: &mut Ctx, addr: Address, dap: u32) {
        if dap >= self.daps {
            self.withdrawing.remove(&addr);
            return;
        }
        let height = self.tip().height;
        ctx.send(Actor::Dap(dap), Message::ProofRequest { addr, height });
        ctx.timer(5 * US_PER_S, Timer::ProofRetry { addr, dap });
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, from: Actor, msg: Message) {
        match msg {
            Message::ClientReply { tx_hash, .. } => {
                if let Some(key) = self.sent.get(&tx_hash) {
                    if let Some(tx) = self.unconfirmed.remove(key) {
                        self.confirmed.insert(key.0, tx);
                    }
                }
            }
            Message::ProofResponse { addr, proof, .. } => {
                if !self.withdrawing.contains(&addr) {
                    return;
                }
                let Actor::Dap(d) = from else { return };
                let root = self.tip().account_root;
                match proof {
                    Some(p) if p.root == root && p.key == addr && p.verify() => {
                        self.withdrawing.remove(&addr);
                        if p.balance == 0 {
                            return;
                        }
                        let Some(&i) = self.index_of.get(&addr) else { return };
                        let sig = sign_digest(&withdraw_digest(&addr, &addr, p.balance), &self.keys[i]);
                        ctx.chain(ChainTx::call(
                            addr,
                            ContractCall::SettleWithdraw { rollup_addr: addr, payout: addr, balance: p.balance, proof: p, sig },
                        ));
                    }
                    _ => self.request_proof(ctx, addr, d + 1),
                }
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
            ChainEvent::Deposit { id, sender, .. } => {
                if let Some(&c) = self.index_of.get(sender) {
                    self.deposits.insert(*id, c);
                    ctx.timer((self.params.challenge_timeout_s + 1) * US_PER_S, Timer::RefundDeposits);
                }
            }
            ChainEvent::DepositSolved { id } | ChainEvent::DepositRefunded { id, .. } => {
                if self.deposits.contains_key(id) {
                    self.solved.insert(*id);
                    if self.solved.len() == self.keys.len() {
                        self.begin_transfers(ctx);
                    }
                }
            }
            ChainEvent::StateUpdated { state, .. } => {
                if state.height > self.tip().height {
                    self.accepted.push(*state);
                }
            }
            ChainEvent::Challenge { id, challenger, .. } => {
                if self.index_of.contains_key(challenger) {
                    self.open_challenges.insert(*id);
                    ctx.timer((self.params.challenge_timeout_s + 1) * US_PER_S, Timer::SettleCheck { id: *id });
                }
            }
            ChainEvent::ChallengeResolved { id, .. } => {
                self.open_challenges.remove(id);
            }
            ChainEvent::Settle { .. } => {
                self.frozen = true;
                self.open_challenges.clear();
                if self.cfg.withdraw_on_freeze {
                    for addr in self.client_addresses() {
                        self.withdrawing.insert(addr);
                        self.request_proof(ctx, addr, 0);
                    }
                }
            }
            ChainEvent::AuditRequested { id, .. } if n.sender == self.auditor.address() => {
                let wait = (self.params.dap_response_timeout_s + 1) * US_PER_S;
                ctx.timer(wait, Timer::FinalizeAudit { id: *id });
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_is_deterministic_and_well_formed() {
        let cfg = WorkloadConfig { clients: 5, transfers: 40, redeems: 10, rate_tps: 20.0, ..Default::default() };
        let a = generate_workload(&cfg, &mut stream(3, "w"));
        let b = generate_workload(&cfg, &mut stream(3, "w"));
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.iter().filter(|p| p.to.is_none()).count(), 10);
        assert!(a.iter().all(|p| p.to != Some(p.from) && (1..=100).contains(&p.value)));
        let mean = a.iter().map(|p| p.gap_us as f64).sum::<f64>() / 50.0;
        assert!(mean > 25_000.0 && mean < 100_000.0, "{mean}");
    }
}

//! Latency, bandwidth and link-filter model.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::adversary::LinkFilter;
use crate::sim::actor::{Actor, MsgKind};
use crate::sim::config::NetworkConfig;

/// Delivery latency is `RTT/2 ± jitter` plus serialization on the sender's
/// uplink, which carries one message at a time.
pub struct Network {
    one_way_us: f64,
    jitter_us: f64,
    bytes_per_us: f64,
    filters: Vec<LinkFilter>,
    uplink_free: HashMap<Actor, u64>,
    rng: ChaCha20Rng,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, filters: Vec<LinkFilter>, rng: ChaCha20Rng) -> Self {
        Self {
            one_way_us: cfg.rtt_ms() * 1000.0 / 2.0,
            jitter_us: cfg.jitter_ms() * 1000.0,
            bytes_per_us: cfg.bandwidth_mbps / 8.0,
            filters,
            uplink_free: HashMap::new(),
            rng,
        }
    }

    pub fn one_way_us(&self) -> u64 {
        self.one_way_us.round() as u64
    }

    fn propagation(&mut self) -> u64 {
        let j = if self.jitter_us > 0.0 { self.rng.gen_range(-self.jitter_us..=self.jitter_us) } else { 0.0 };
        (self.one_way_us + j).max(0.0).round() as u64
    }

    /// Delivery times for one message sent at `now`; empty if dropped,
    /// several entries if replayed.
    pub fn route(&mut self, now: u64, from: Actor, to: Actor, kind: MsgKind, size: u64) -> Vec<u64> {
        let mut extra_us = 0.0;
        let mut copies = 1u32;
        for f in &self.filters {
            if !f.applies(from, to, kind) {
                continue;
            }
            if f.drop_prob > 0.0 && self.rng.gen_bool(f.drop_prob) {
                return Vec::new();
            }
            extra_us += f.extra_delay_ms * 1000.0;
            copies += f.replay;
        }
        let (sent, local) = if from == to {
            (now, true)
        } else {
            let free = self.uplink_free.entry(from).or_insert(0);
            let start = (*free).max(now);
            let done = start + (size as f64 / self.bytes_per_us).ceil() as u64;
            *free = done;
            (done, false)
        };
        (0..copies)
            .map(|_| {
                let prop = if local { 0 } else { self.propagation() };
                sent + prop + extra_us.round() as u64
            })
            .collect()
    }

    /// Whether chain notices of `kind` reach `to`.
    pub fn notice_passes(&mut self, to: Actor, kind: MsgKind) -> bool {
        for f in &self.filters {
            if f.applies(Actor::Chain, to, kind) && f.drop_prob > 0.0 && self.rng.gen_bool(f.drop_prob) {
                return false;
            }
        }
        true
    }
}

//! Scenario configuration, loaded from TOML with defaults for every field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{ProfileError, ThreatProfile};
use crate::chain::{GasTable, GasTableError};
use crate::merkle::{DEFAULT_DEPTH, MAX_DEPTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated time after which the run stops.
    pub duration_s: u64,
    pub committee: CommitteeConfig,
    pub rollup: RollupConfig,
    pub chain: ChainSection,
    pub contracts: ContractSection,
    pub network: NetworkConfig,
    pub timing: TimingConfig,
    pub workload: WorkloadConfig,
    pub daps: DapSection,
    pub adversary: ThreatProfile,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 1,
            duration_s: 600,
            committee: CommitteeConfig::default(),
            rollup: RollupConfig::default(),
            chain: ChainSection::default(),
            contracts: ContractSection::default(),
            network: NetworkConfig::default(),
            timing: TimingConfig::default(),
            workload: WorkloadConfig::default(),
            daps: DapSection::default(),
            adversary: ThreatProfile::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommitteeConfig {
    pub n: usize,
    pub f: usize,
    /// Platform tags assigned round-robin to the sequencers.
    pub platforms: Vec<String>,
}

impl Default for CommitteeConfig {
    fn default() -> Self {
        Self {
            n: 4,
            f: 1,
            platforms: ["sgx", "tdx", "tdx", "csv", "csv"].map(String::from).to_vec(),
        }
    }
}

impl CommitteeConfig {
    pub fn platform_of(&self, i: usize) -> String {
        self.platforms[i % self.platforms.len()].clone()
    }

    pub fn platform_list(&self) -> Vec<String> {
        (0..self.n).map(|i| self.platform_of(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollupConfig {
    pub batch_size: usize,
    pub tree_depth: u8,
}

impl Default for RollupConfig {
    fn default() -> Self {
        Self { batch_size: 2000, tree_depth: DEFAULT_DEPTH }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub block_interval_s: u64,
    pub gas_price_units: u64,
    pub gas: GasTable,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self { block_interval_s: 12, gas_price_units: 1, gas: GasTable::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractSection {
    pub challenge_timeout_s: u64,
    pub pledge_min: u64,
    pub dap_min_collateral: u64,
    pub dap_response_cost: u64,
    pub dap_epsilon: u64,
    pub dap_response_timeout_s: u64,
}

impl Default for ContractSection {
    fn default() -> Self {
        // Token amounts are in hundredths of a unit.
        Self {
            challenge_timeout_s: 4 * 3600,
            pledge_min: 1_000,
            dap_min_collateral: 100_000,
            dap_response_cost: 100,
            dap_epsilon: 1,
            dap_response_timeout_s: 600,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lan,
    Wan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub rtt_ms: Option<f64>,
    pub jitter_ms: Option<f64>,
    pub bandwidth_mbps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { preset: Preset::Lan, rtt_ms: None, jitter_ms: None, bandwidth_mbps: 1000.0 }
    }
}

impl NetworkConfig {
    pub fn rtt_ms(&self) -> f64 {
        self.rtt_ms.unwrap_or(match self.preset {
            Preset::Lan => 0.5,
            Preset::Wan => 25.0,
        })
    }

    pub fn jitter_ms(&self) -> f64 {
        self.jitter_ms.unwrap_or(match self.preset {
            Preset::Lan => 0.03,
            Preset::Wan => 0.1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Native execution cost per batch item.
    pub exec_us_per_tx: f64,
    /// Fixed native cost of one enclave batch call (entry, root commit, signing).
    pub exec_us_per_batch: f64,
    /// Multiplier applied to enclave execution.
    pub tee_overhead: f64,
    /// Cost of checking one vote signature.
    pub verify_us: f64,
    /// Batching window of the rank-0 leader.
    pub propose_delay_ms: u64,
    /// Stagger between proposer ranks, and the wait before a non-leader
    /// submits a QC it holds.
    pub backup_delay_s: u64,
    pub sync_timeout_s: u64,
    /// Additional nodes that propose with rank 0 (leader races).
    pub extra_leaders: u32,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            exec_us_per_tx: 25.0,
            exec_us_per_batch: 8000.0,
            tee_overhead: 1.2,
            verify_us: 40.0,
            propose_delay_ms: 50,
            backup_delay_s: 24,
            sync_timeout_s: 5,
            extra_leaders: 0,
        }
    }
}

impl TimingConfig {
    pub fn exec_us(&self, items: usize) -> u64 {
        ((self.exec_us_per_batch + items as f64 * self.exec_us_per_tx) * self.tee_overhead).round() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeMode {
    /// Challenge the client's oldest unconfirmed submitted transfer.
    Pending,
    /// Challenge a fresh transfer that was never sent to any sequencer.
    Withheld,
    /// Challenge a transfer that is already confirmed.
    Included,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengeSpec {
    pub at_s: u64,
    pub client: usize,
    pub mode: ChallengeMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub clients: usize,
    /// Per-client deposit.
    pub deposit: u64,
    pub deposit_at_s: u64,
    pub transfers: usize,
    /// Seconds after all deposits are issued before transfers start.
    pub start_after_s: u64,
    /// Poisson arrival rate; 0 submits the whole stream at once.
    pub rate_tps: f64,
    pub redeems: usize,
    pub value_max: u64,
    /// Native currency minted to every actor at genesis.
    pub native_funds: u64,
    pub challenges: Vec<ChallengeSpec>,
    /// Clients withdraw every funded account once the contract freezes.
    pub withdraw_on_freeze: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            clients: 50,
            deposit: 1_000_000,
            deposit_at_s: 1,
            transfers: 500,
            start_after_s: 1,
            rate_tps: 0.0,
            redeems: 0,
            value_max: 100,
            native_funds: 1_000_000_000_000,
            challenges: Vec::new(),
            withdraw_on_freeze: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapSection {
    pub count: usize,
    /// Collateral each DAP locks; defaults to the contract minimum.
    pub collateral: Option<u64>,
    pub audits: usize,
    pub audit_start_s: u64,
    pub audit_every_s: u64,
    pub audit_keys: usize,
}

impl Default for DapSection {
    fn default() -> Self {
        Self { count: 3, collateral: None, audits: 0, audit_start_s: 120, audit_every_s: 900, audit_keys: 4 }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid threat profile: {0}")]
    Profile(#[from] ProfileError),
    #[error("invalid gas table: {0}")]
    Gas(#[from] GasTableError),
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let c = &self.committee;
        if c.n == 0 || c.n <= c.f {
            return bad(format!("need n ≥ f+1, got n = {}, f = {}", c.n, c.f));
        }
        if c.platforms.is_empty() {
            return bad("platform list is empty".into());
        }
        if self.rollup.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(1..=MAX_DEPTH).contains(&self.rollup.tree_depth) {
            return bad(format!("tree_depth must be in 1..={MAX_DEPTH}"));
        }
        if self.chain.block_interval_s == 0 {
            return bad("block_interval_s must be positive".into());
        }
        self.chain.gas.validate()?;
        if self.network.bandwidth_mbps <= 0.0 || self.network.rtt_ms() < 0.0 || self.network.jitter_ms() < 0.0 {
            return bad("network parameters must be positive".into());
        }
        let t = &self.timing;
        if t.exec_us_per_tx < 0.0 || t.exec_us_per_batch < 0.0 || t.tee_overhead < 1.0 || t.verify_us < 0.0 || t.backup_delay_s == 0 {
            return bad("timing parameters out of range".into());
        }
        let w = &self.workload;
        if w.rate_tps < 0.0 || w.value_max == 0 {
            return bad("workload rate must be ≥ 0 and value_max > 0".into());
        }
        if (w.transfers > 0 || w.redeems > 0) && w.clients < 2 {
            return bad("transfers need at least two clients".into());
        }
        for ch in &w.challenges {
            if ch.client >= w.clients {
                return bad(format!("challenge refers to client {} of {}", ch.client, w.clients));
            }
        }
        if let Some(v) = self.daps.collateral {
            if v < self.contracts.dap_min_collateral {
                return bad("DAP collateral below the contract minimum".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ScenarioConfig::from_toml("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::default();
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(ScenarioConfig::from_toml("[committee]\nn = 2\nf = 2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ScenarioConfig::from_toml("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(ScenarioConfig::from_toml("[chain.gas]\ndeposit = 0"), Err(ConfigError::Gas(_))));
    }
}

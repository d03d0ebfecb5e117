//! Canned scenarios shipped with the crate.

use crate::sim::config::{ConfigError, ScenarioConfig};

const CANNED: &[(&str, &str)] = &[
    ("all_honest", include_str!("../scenarios/all_honest.toml")),
    ("compromised_f", include_str!("../scenarios/compromised_f.toml")),
    ("censorship_settlement", include_str!("../scenarios/censorship_settlement.toml")),
    ("lazy_daps", include_str!("../scenarios/lazy_daps.toml")),
    ("race_two_leaders", include_str!("../scenarios/race_two_leaders.toml")),
    ("exceed_f_unsafe", include_str!("../scenarios/exceed_f_unsafe.toml")),
];

pub fn names() -> Vec<&'static str> {
    CANNED.iter().map(|(n, _)| *n).collect()
}

pub fn source(name: &str) -> Option<&'static str> {
    CANNED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn canned(name: &str) -> Option<Result<ScenarioConfig, ConfigError>> {
    source(name).map(ScenarioConfig::from_toml)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_canned_scenario_parses() {
        for n in names() {
            let cfg = canned(n).unwrap().unwrap();
            assert_eq!(cfg.name, n);
        }
        assert!(canned("nope").is_none());
    }
}

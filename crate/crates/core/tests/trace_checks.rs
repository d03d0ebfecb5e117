//! Trace integrity, the offline verifier, and scenario-level outcomes.

use sha2::{Digest as _, Sha256};

use teerollup_core::contracts::ChainEvent;
use teerollup_core::crypto::Digest;
use teerollup_core::scenarios;
use teerollup_core::sim::config::ScenarioConfig;
use teerollup_core::sim::run_scenario;
use teerollup_core::sim::trace::{Trace, TraceBody, TraceError};
use teerollup_core::sim::verify::{verify_trace, verify_trace_text, Check};

fn small() -> ScenarioConfig {
    let mut cfg = ScenarioConfig { name: "checks".into(), seed: 4, duration_s: 120, ..Default::default() };
    cfg.workload.clients = 6;
    cfg.workload.transfers = 30;
    cfg.workload.redeems = 2;
    cfg.daps.count = 1;
    cfg
}

fn canned(name: &str) -> ScenarioConfig {
    scenarios::canned(name).unwrap().unwrap()
}

fn checks(trace: &Trace) -> Vec<Check> {
    verify_trace(trace).into_iter().map(|v| v.check).collect()
}

#[test]
fn damaged_files_are_integrity_errors() {
    let run = run_scenario(&small(), false).unwrap();
    let text = run.trace.to_jsonl();
    assert_eq!(verify_trace_text(&text).unwrap(), vec![]);

    let lines: Vec<&str> = text.lines().collect();
    let truncated = lines[..lines.len() - 1].join("\n");
    assert_eq!(verify_trace_text(&truncated).unwrap_err(), TraceError::MissingFooter);

    let dropped: String = lines.iter().enumerate().filter(|(i, _)| *i != 3).map(|(_, l)| format!("{l}\n")).collect();
    assert!(matches!(verify_trace_text(&dropped), Err(TraceError::Count { .. })));

    let edited = text.replacen("\"t_us\":0", "\"t_us\":1", 1);
    assert_ne!(edited, text);
    assert_eq!(verify_trace_text(&edited).unwrap_err(), TraceError::Digest);

    assert_eq!(verify_trace_text("{not json").unwrap_err(), TraceError::MissingFooter);

    // Correctly sealed, but a record line is not a record.
    let body = format!("{}\nnot a record\n", lines[0]);
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    let sealed = format!("{body}{{\"type\":\"footer\",\"count\":1,\"digest\":\"{digest}\"}}\n");
    assert!(matches!(verify_trace_text(&sealed), Err(TraceError::Malformed { line: 2, .. })));
    assert_eq!(verify_trace_text("").unwrap_err(), TraceError::Empty);
}

#[test]
fn resealed_tampering_is_caught_by_the_checks() {
    let run = run_scenario(&small(), false).unwrap();
    let clean = run.trace;
    assert!(clean.header.config.workload.transfers > 0);

    // A receipt that claims a different gas charge.
    let mut t = clean.clone();
    for r in &mut t.records {
        if let TraceBody::Block { receipts, .. } = &mut r.body {
            if let Some(x) = receipts.first_mut() {
                x.gas += 1;
                break;
            }
        }
    }
    assert!(checks(&t).contains(&Check::Receipts));

    // A published batch that differs from what was certified.
    let mut t = clean.clone();
    let batch = t.records.iter_mut().find_map(|r| match &mut r.body {
        TraceBody::Batch { items, .. } if items.len() > 1 => Some(items),
        _ => None,
    });
    batch.expect("a batch with transfers").pop();
    assert!(checks(&t).contains(&Check::StateMismatch));

    // A batch record that is missing altogether.
    let mut t = clean.clone();
    let i = t.records.iter().position(|r| matches!(r.body, TraceBody::Batch { .. })).unwrap();
    t.records.remove(i);
    assert!(checks(&t).contains(&Check::MissingBatch));

    // An honest node endorsing a second result at a height.
    let mut t = clean.clone();
    let vote = t
        .records
        .iter()
        .find_map(|r| match &r.body {
            TraceBody::Vote { node, height, state_hash, effects_hash, forged } => {
                Some((r.t_us, *node, *height, *state_hash, *effects_hash, *forged))
            }
            _ => None,
        })
        .unwrap();
    let (t_us, node, height, _, effects_hash, forged) = vote;
    t.records.push(teerollup_core::sim::trace::TraceRecord {
        t_us,
        body: TraceBody::Vote { node, height, state_hash: Digest([7; 32]), effects_hash, forged },
    });
    assert_eq!(checks(&t), vec![Check::DoubleVote]);

    // Re-serializing the tampered trace gives a well-formed file that the
    // verifier still rejects.
    let text = t.to_jsonl();
    let v = verify_trace_text(&text).unwrap();
    assert_eq!(v.len(), 1);
}

#[test]
fn lazy_daps_are_slashed_and_the_diligent_one_is_not() {
    let cfg = canned("lazy_daps");
    let run = run_scenario(&cfg, false).unwrap();
    assert!(run.violations.is_empty(), "{:?}", run.violations);
    let daps = &run.report.daps;
    assert_eq!(daps.len(), 3);
    assert!(daps.iter().all(|d| d.audits > 0));
    // Rows are keyed by address; one DAP is diligent, the other two are not.
    let w_eps = cfg.contracts.dap_response_cost + cfg.contracts.dap_epsilon;
    let diligent: Vec<_> = daps.iter().filter(|d| d.responded == d.audits).collect();
    assert_eq!(diligent.len(), 1);
    assert_eq!(diligent[0].slashed, 0);
    for d in daps.iter().filter(|d| d.responded == 0) {
        assert_eq!(d.slashed, d.audits * w_eps);
    }
    assert_eq!(daps.iter().filter(|d| d.responded == 0).count(), 2);
}

#[test]
fn racing_leaders_stay_safe() {
    let run = run_scenario(&canned("race_two_leaders"), false).unwrap();
    assert!(run.violations.is_empty(), "{:?}", run.violations);
    let updates = run.report.gas.iter().find(|g| g.method == "UpdateState").unwrap();
    assert!(updates.failed > 0, "the second leader should lose some races");
    assert_eq!(run.report.finalized_transfers as usize, run.report.submitted);
}

#[test]
fn compromised_minority_cannot_get_a_forgery_accepted() {
    let run = run_scenario(&canned("compromised_f"), false).unwrap();
    assert!(run.violations.is_empty(), "{:?}", run.violations);
    let forged = run.trace.records.iter().filter(|r| matches!(r.body, TraceBody::Vote { forged: true, .. })).count();
    assert!(forged > 0);
    let updates = run.report.gas.iter().find(|g| g.method == "UpdateState").unwrap();
    assert!(updates.failed > 0);
    assert!(run.report.accepted_height > 0);
}

#[test]
fn unresolved_challenge_settles_and_empties_escrow() {
    let run = run_scenario(&canned("censorship_settlement"), false).unwrap();
    assert!(run.violations.is_empty(), "{:?}", run.violations);
    let replay = run.trace.replay_chain().unwrap();
    assert!(replay.ledger.contracts().is_frozen());
    assert_eq!(replay.ledger.contracts().tsc.escrow, 0);
    assert_eq!(run.report.finalized_transfers, 0);
    let s = run.report.settlement.unwrap();
    assert_eq!(s.withdrawals, s.accounts_with_balance);
    assert!(replay.ledger.events().iter().any(|e| matches!(e.event, ChainEvent::Settle { .. })));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn teerollup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teerollup")).args(args).env_remove("TEEROLLUP_OUT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out]);
    teerollup(&args)
}

#[test]
fn gas_table_prints_costs() {
    let o = teerollup(&["gas-table"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap().split_whitespace().skip(1).collect::<Vec<_>>().join(" ");
    assert_eq!(row("Deposit"), "48551 3.16");
    assert_eq!(row("UpdateState"), "156263 10.16");
    assert_eq!(row("SettleWithdraw"), "124511 8.10");

    let free = stdout(&teerollup(&["gas-table", "--gas-price-gwei", "0"]));
    assert!(free.lines().skip(1).all(|l| l.ends_with(" 0.00")), "{free}");

    assert_eq!(teerollup(&["gas-table", "--eth-usd", "-1"]).status.code(), Some(2));
}

#[test]
fn run_writes_outputs_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(dir.path(), &["race_two_leaders", "--duration-s", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("invariants: ok"));
    for f in ["report.json", "report.csv", "trace.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenario"], "race_two_leaders");
    assert_eq!(report["duration_s"], 200);

    let trace = dir.path().join("trace.jsonl");
    let v = teerollup(&["verify-trace", trace.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0));
    assert_eq!(stdout(&v).trim(), "ok");

    // Flipping a byte breaks the content digest.
    let mut text = fs::read_to_string(&trace).unwrap();
    let at = text.find("\"t_us\":").unwrap() + 7;
    text.replace_range(at..at + 1, if &text[at..at + 1] == "9" { "8" } else { "9" });
    fs::write(&trace, text).unwrap();
    let v = teerollup(&["verify-trace", trace.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(1));

    assert_eq!(teerollup(&["verify-trace", "/nonexistent/trace.jsonl"]).status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_traces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run_into(a.path(), &["lazy_daps", "--seed", "5"]).status.code(), Some(0));
    assert_eq!(run_into(b.path(), &["lazy_daps", "--seed", "5"]).status.code(), Some(0));
    let ta = fs::read(a.path().join("trace.jsonl")).unwrap();
    let tb = fs::read(b.path().join("trace.jsonl")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn exceeding_f_needs_opt_in_and_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let refused = run_into(dir.path(), &["exceed_f_unsafe"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--unsafe-exceed-f"));

    let o = run_into(dir.path(), &["exceed_f_unsafe", "--unsafe-exceed-f"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("VIOLATION StateMismatch"));
    let trace = dir.path().join("trace.jsonl");
    let v = teerollup(&["verify-trace", trace.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(3));
    assert!(stdout(&v).contains("StateMismatch"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[committee]\nn = 3\nf = 3\n").unwrap();
    assert_eq!(run_into(dir.path(), &[bad.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(run_into(dir.path(), &[bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run_into(dir.path(), &["no_such_scenario"]).status.code(), Some(2));
}

#[test]
fn custom_scenario_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mine.toml");
    fs::write(&cfg, "name = \"mine\"\nseed = 3\nduration_s = 60\n[workload]\nclients = 4\ntransfers = 10\n").unwrap();
    let o = run_into(&dir.path().join("out"), &[cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("scenario mine seed 3"));
}

#[test]
fn workload_and_listing() {
    let o = teerollup(&["workload", "race_two_leaders"]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 600);
    assert!(lines.iter().all(|l| l["gap_us"].is_u64() && l["value"].is_u64()));
    assert_eq!(stdout(&teerollup(&["workload", "race_two_leaders"])), stdout(&o));
    assert_ne!(stdout(&teerollup(&["workload", "race_two_leaders", "--seed", "2"])), stdout(&o));

    let names = stdout(&teerollup(&["list-scenarios"]));
    for n in ["all_honest", "compromised_f", "censorship_settlement", "lazy_daps", "race_two_leaders", "exceed_f_unsafe"] {
        assert!(names.lines().any(|l| l == n), "{n}");
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use teerollup_core::chain::{format_usd, GasTable};
use teerollup_core::scenarios;
use teerollup_core::sim::clients::plan_for;
use teerollup_core::sim::config::ScenarioConfig;
use teerollup_core::sim::run_scenario;
use teerollup_core::sim::verify::verify_trace_text;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "teerollup", version, about = "TEE-committee rollup simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (canned name or TOML path) and write report and trace.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration_s: Option<u64>,
        #[arg(long, env = "TEEROLLUP_OUT", default_value = "out")]
        out: PathBuf,
        /// Permit more than f compromised enclaves.
        #[arg(long)]
        unsafe_exceed_f: bool,
    },
    /// Check a trace file's integrity and safety invariants.
    VerifyTrace { path: PathBuf },
    /// Print per-method gas and USD cost.
    GasTable {
        #[arg(long)]
        gas_price_gwei: Option<f64>,
        #[arg(long)]
        eth_usd: Option<f64>,
    },
    /// Print the generated transfer stream of a scenario as JSON lines.
    Workload {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the canned scenarios.
    ListScenarios,
}

fn load(scenario: &str) -> Result<ScenarioConfig, String> {
    if let Some(cfg) = scenarios::canned(scenario) {
        return cfg.map_err(|e| e.to_string());
    }
    let text = fs::read_to_string(scenario).map_err(|e| format!("cannot read {scenario}: {e}"))?;
    ScenarioConfig::from_toml(&text).map_err(|e| e.to_string())
}

fn write(dir: &Path, name: &str, body: &str) -> Result<(), String> {
    fs::write(dir.join(name), body).map_err(|e| format!("cannot write {}: {e}", dir.join(name).display()))
}

fn run(scenario: &str, seed: Option<u64>, duration_s: Option<u64>, out: &Path, unsafe_exceed_f: bool) -> ExitCode {
    let mut cfg = match load(scenario) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = duration_s {
        cfg.duration_s = d;
    }
    let res = match run_scenario(&cfg, unsafe_exceed_f) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let written = fs::create_dir_all(out)
        .map_err(|e| format!("cannot create {}: {e}", out.display()))
        .and_then(|_| write(out, "report.json", &res.report.to_json()))
        .and_then(|_| write(out, "report.csv", &res.report.to_csv()))
        .and_then(|_| write(out, "trace.jsonl", &res.trace.to_jsonl()));
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    let r = &res.report;
    println!("scenario {} seed {}", r.scenario, r.seed);
    println!("accepted height {}  frozen {}", r.accepted_height, r.frozen);
    println!("transfers finalized {}/{}  throughput {:.2} tx/s", r.finalized_transfers, r.submitted, r.throughput_tps);
    println!("latency p50 {:.2}s  p95 {:.2}s  p99 {:.2}s", r.latency.p50_s, r.latency.p95_s, r.latency.p99_s);
    println!(
        "consensus rounds {}  mean {:.1} ms  throughput {:.0} tx/s",
        r.consensus_rounds,
        r.consensus_latency.mean_s * 1e3,
        r.consensus_throughput_tps
    );
    if let Some(g) = r.update_gas_per_item {
        println!("UpdateState gas per item (full batches) {g:.2}");
    }
    println!("outputs in {}", out.display());
    if res.violations.is_empty() {
        println!("invariants: ok");
        ExitCode::SUCCESS
    } else {
        for v in &res.violations {
            println!("VIOLATION {v}");
        }
        ExitCode::from(EXIT_VIOLATION)
    }
}

fn verify(path: &Path) -> ExitCode {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    match verify_trace_text(&text) {
        Err(e) => {
            eprintln!("integrity error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Ok(v) if v.is_empty() => {
            println!("ok");
            ExitCode::SUCCESS
        }
        Ok(v) => {
            for x in &v {
                println!("VIOLATION {x}");
            }
            ExitCode::from(EXIT_VIOLATION)
        }
    }
}

fn gas_table(gwei: Option<f64>, eth_usd: Option<f64>) -> ExitCode {
    let mut t = GasTable::default();
    if let Some(g) = gwei {
        t.gas_price_gwei = g;
    }
    if let Some(p) = eth_usd {
        t.eth_usd = p;
    }
    if let Err(e) = t.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    println!("{:<22} {:>10} {:>10}", "function", "gas", "usd");
    for (name, gas) in t.rows() {
        println!("{name:<22} {gas:>10} {:>10}", format_usd(gas, &t));
    }
    ExitCode::SUCCESS
}

fn workload(scenario: &str, seed: Option<u64>) -> ExitCode {
    let mut cfg = match load(scenario) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    for p in plan_for(&cfg) {
        println!("{}", serde_json::to_string(&p).expect("plan serializes"));
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run { scenario, seed, duration_s, out, unsafe_exceed_f } => {
            run(&scenario, seed, duration_s, &out, unsafe_exceed_f)
        }
        Cmd::VerifyTrace { path } => verify(&path),
        Cmd::GasTable { gas_price_gwei, eth_usd } => gas_table(gas_price_gwei, eth_usd),
        Cmd::Workload { scenario, seed } => workload(&scenario, seed),
        Cmd::ListScenarios => {
            for n in scenarios::names() {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use tfc_audit::{audit_full, AuditConfig, AuditError, AuditTarget, LogOnly, Report};
use tfc_bench::scenario::{run_scenario, ScenarioConfig};
use tfc_bench::{initial_data, run_bench, write_csv, BenchConfig, NetMode, Workload, WorkloadConfig};
use tfc_core::datastore::Versioning;
use tfc_core::model::LogFile;
use tfc_core::protocol::client::ClientOutput;
use tfc_core::protocol::{Cluster, Protocol};
use tfc_faults::{fault_install, parse_scenario, Records};
use tfc_net::sim::{NetConfig, Sim};
use tfc_net::tcp::TcpNet;

#[derive(Parser)]
#[command(name = "tfc", about = "Trust-free commit: benchmarks, cluster runs and audits")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure commit latency and throughput.
    Bench(BenchArgs),
    /// Audit log files, or run a fault scenario and audit the live cluster.
    Audit(AuditArgs),
    /// Run a cluster over a workload and write every server's log to disk.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtoArg {
    Tfcommit,
    #[value(name = "2pc")]
    TwoPc,
}

#[derive(Clone, Copy, ValueEnum)]
enum VersionArg {
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    Sim,
    Tcp,
}

#[derive(Args, Clone)]
struct ClusterArgs {
    #[arg(long, default_value_t = 5)]
    servers: u32,
    #[arg(long, default_value_t = 10_000)]
    items_per_shard: usize,
    #[arg(long, default_value_t = 5)]
    ops_per_txn: usize,
    #[arg(long, default_value_t = 100)]
    txns_per_block: usize,
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    #[arg(long, value_enum, default_value_t = ProtoArg::Tfcommit)]
    protocol: ProtoArg,
    #[arg(long, value_enum, default_value_t = VersionArg::Multi)]
    versioning: VersionArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = NetArg::Sim)]
    net: NetArg,
    /// Fraction of operations that only read.
    #[arg(long, default_value_t = 0.0)]
    read_ratio: f64,
}

impl ClusterArgs {
    fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            servers: self.servers,
            items_per_shard: self.items_per_shard,
            ops_per_txn: self.ops_per_txn,
            txns_per_block: self.txns_per_block,
            requests: self.requests,
            protocol: match self.protocol {
                ProtoArg::Tfcommit => Protocol::TfCommit,
                ProtoArg::TwoPc => Protocol::TwoPc,
            },
            versioning: match self.versioning {
                VersionArg::Single => Versioning::Single,
                VersionArg::Multi => Versioning::Multi,
            },
            seed: self.seed,
            net: match self.net {
                NetArg::Sim => NetMode::Sim,
                NetArg::Tcp => NetMode::Tcp,
            },
            read_ratio: self.read_ratio,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Transactions kept in flight (default: the block size).
    #[arg(long)]
    window: Option<usize>,
    /// Write the averaged report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Log files written by `serve`.
    logs: Vec<PathBuf>,
    /// Run this fault scenario in the simulator and audit the live servers.
    #[arg(long, conflicts_with = "logs")]
    faults: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    servers: u32,
    #[arg(long, default_value_t = 200)]
    requests: usize,
    #[arg(long, default_value_t = 10)]
    txns_per_block: usize,
    #[arg(long, default_value_t = 200)]
    items_per_shard: usize,
    #[arg(long, value_enum, default_value_t = VersionArg::Multi)]
    versioning: VersionArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Print findings as JSON lines.
    #[arg(long)]
    json: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Directory for the `server-<id>.log` files.
    #[arg(long, default_value = "logs")]
    out: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Bench(a) => bench(a),
        Cmd::Audit(a) => audit(a),
        Cmd::Serve(a) => serve(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn bench(a: BenchArgs) -> CliResult {
    let cfg = BenchConfig { runs: a.runs, window: a.window, ..a.cluster.bench_config() };
    let report = run_bench(&cfg)?;
    println!("{report}");
    if let Some(path) = a.csv {
        write_csv(fs::File::create(&path)?, &[(cfg, report)])?;
        println!("csv written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn finish_audit(res: Result<Report, AuditError>, json: bool, out: Option<&Path>) -> CliResult {
    let report = match res {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(2));
        }
    };
    let text = if json { report.render_json() } else { report.render_text() };
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn audit(a: AuditArgs) -> CliResult {
    let versioning = match a.versioning {
        VersionArg::Single => Versioning::Single,
        VersionArg::Multi => Versioning::Multi,
    };
    if let Some(path) = &a.faults {
        let specs = parse_scenario(&fs::read_to_string(path)?)?;
        let cfg = ScenarioConfig {
            servers: a.servers,
            txns: a.requests,
            txns_per_block: a.txns_per_block,
            items_per_shard: a.items_per_shard,
            versioning,
            seed: a.seed,
            ..Default::default()
        };
        return match run_scenario(&cfg, &specs) {
            Ok(o) => {
                for r in &o.records {
                    eprintln!("injected {} on {:?} at {:?}", r.kind, r.servers, r.index);
                }
                finish_audit(Ok(o.report), a.json, a.out.as_deref())
            }
            Err(tfc_bench::scenario::ScenarioError::Audit(e)) => finish_audit(Err(e), a.json, a.out.as_deref()),
            Err(e) => Err(e.into()),
        };
    }
    if a.logs.is_empty() {
        return Err("give log files or --faults".into());
    }
    let mut files = Vec::new();
    for p in &a.logs {
        files.push(LogFile::parse(&fs::read_to_string(p)?).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    let keys = files[0].keys.clone();
    if files.iter().any(|f| f.keys != keys) {
        return Err("log files disagree on the group keys".into());
    }
    let mut targets: Vec<LogOnly> =
        files.into_iter().enumerate().map(|(i, f)| LogOnly { id: i as u32, blocks: f.blocks }).collect();
    let cfg = AuditConfig { keys: &keys, genesis: None, versioning };
    let mut dyns: Vec<&mut dyn AuditTarget> = targets.iter_mut().map(|t| t as &mut dyn AuditTarget).collect();
    finish_audit(audit_full(&cfg, &mut dyns, &[]), a.json, a.out.as_deref())
}

fn serve(a: ServeArgs) -> CliResult {
    let cfg = a.cluster.bench_config();
    let data = initial_data(cfg.servers, cfg.items_per_shard);
    let spec = cfg.cluster_spec(cfg.seed);
    let mut cluster = Cluster::build(&spec, &data)?;
    let records: Records = Arc::new(Mutex::new(Vec::new()));
    if let Some(p) = &a.faults {
        fault_install(&mut cluster.servers, &parse_scenario(&fs::read_to_string(p)?)?, &records)?;
    }
    let wl = WorkloadConfig { ops_per_txn: cfg.ops_per_txn, read_ratio: cfg.read_ratio, seed: cfg.seed };
    let mut workload = Workload::new(&wl, data.keys().copied())?;
    let mut servers = match cfg.net {
        NetMode::Sim => {
            let mut sim = Sim::new(cluster, NetConfig { seed: cfg.seed, measure_compute: false, ..Default::default() });
            for _ in 0..cfg.requests {
                sim.client_begin(workload.next_txn());
                sim.run_until_idle();
            }
            sim.into_parts().0
        }
        NetMode::Tcp => {
            let mut net = TcpNet::start(cluster)?;
            for _ in 0..cfg.requests {
                let (ts, _) = net.begin(workload.next_txn())?;
                loop {
                    let out = net.next(Duration::from_secs(10))?;
                    if out.is_empty() {
                        return Err("cluster stopped answering".into());
                    }
                    if out.iter().any(|o| matches!(o, ClientOutput::Finished { txn, .. } if *txn == ts)) {
                        break;
                    }
                }
            }
            std::thread::sleep(Duration::from_millis(200));
            net.shutdown()
        }
    };
    fs::create_dir_all(&a.out)?;
    let keys = spec.config().keys;
    for s in servers.iter_mut() {
        let path = a.out.join(format!("server-{}.log", s.id()));
        fs::write(&path, LogFile::render(&keys, &s.serve_log()))?;
    }
    for r in records.lock().unwrap().iter() {
        eprintln!("injected {} on {:?} at {:?}", r.kind, r.servers, r.index);
    }
    println!("{} blocks written to {}", servers[0].log().len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

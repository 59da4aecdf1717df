//! Closed-loop benchmark driver over the simulated or the TCP network.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use tracing::{debug, info};

use tfc_core::datastore::Versioning;
use tfc_core::model::Timestamp;
use tfc_core::protocol::client::{ClientOutput, TxnResult};
use tfc_core::protocol::messages::ExecOp;
use tfc_core::protocol::{Cluster, ClusterSpec, Event, Protocol};
use tfc_net::sim::{NetConfig, Sim, SimEvent};
use tfc_net::tcp::TcpNet;
use tfc_net::NetError;

use crate::workload::{initial_data, Workload, WorkloadConfig, WorkloadError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    /// Discrete-event network with measured handler compute.
    Sim,
    /// Real sockets on localhost, one thread per server.
    Tcp,
}

impl FromStr for NetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(NetMode::Sim),
            "tcp" => Ok(NetMode::Tcp),
            _ => Err(format!("unknown net mode `{s}` (sim|tcp)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub servers: u32,
    pub items_per_shard: usize,
    pub ops_per_txn: usize,
    pub txns_per_block: usize,
    pub requests: usize,
    pub protocol: Protocol,
    pub versioning: Versioning,
    pub seed: u64,
    pub net: NetMode,
    pub read_ratio: f64,
    /// Transactions kept in flight; `None` means one block's worth.
    pub window: Option<usize>,
    /// How long the coordinator waits for a batch to fill.
    pub batch_wait: Duration,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            servers: 5,
            items_per_shard: 10_000,
            ops_per_txn: 5,
            txns_per_block: 100,
            requests: 1000,
            protocol: Protocol::TfCommit,
            versioning: Versioning::Multi,
            seed: 1,
            net: NetMode::Sim,
            read_ratio: 0.0,
            window: None,
            batch_wait: Duration::from_millis(2),
            runs: 3,
        }
    }
}

impl BenchConfig {
    pub fn window(&self) -> usize {
        self.window.unwrap_or(self.txns_per_block).max(1)
    }

    pub fn cluster_spec(&self, seed: u64) -> ClusterSpec {
        ClusterSpec {
            n_servers: self.servers,
            protocol: self.protocol,
            max_batch: self.txns_per_block,
            batch_wait: self.batch_wait,
            versioning: self.versioning,
            key_seed: seed,
            // Generous: a timeout here means a bug, not load.
            round_timeout: Duration::from_secs(30),
            ..Default::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("cluster setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("round failed without an installed fault: {0}")]
    RoundFailed(String),
    #[error("run stalled with {0} transactions unfinished")]
    Stalled(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub runs: usize,
    pub requests: usize,
    pub committed: usize,
    pub aborted: usize,
    pub failed: usize,
    /// Resubmissions after the coordinator rejected a stale timestamp.
    pub retries: usize,
    pub blocks: usize,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_p99_ms: f64,
    /// Mean time from begin to the end-transaction request.
    pub exec_mean_ms: f64,
    pub throughput_tps: f64,
    pub elapsed_s: f64,
    pub abort_rate: f64,
    /// Share of server compute spent building Merkle roots.
    pub mht_share: f64,
    pub mht_ms_per_block: f64,
}

impl BenchReport {
    /// Mean of the per-run reports; counts are summed.
    pub fn average(reports: &[BenchReport]) -> BenchReport {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&BenchReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        BenchReport {
            runs: reports.len(),
            requests: reports.iter().map(|r| r.requests).sum(),
            committed: reports.iter().map(|r| r.committed).sum(),
            aborted: reports.iter().map(|r| r.aborted).sum(),
            failed: reports.iter().map(|r| r.failed).sum(),
            retries: reports.iter().map(|r| r.retries).sum(),
            blocks: reports.iter().map(|r| r.blocks).sum(),
            latency_mean_ms: mean(|r| r.latency_mean_ms),
            latency_p50_ms: mean(|r| r.latency_p50_ms),
            latency_p95_ms: mean(|r| r.latency_p95_ms),
            latency_p99_ms: mean(|r| r.latency_p99_ms),
            exec_mean_ms: mean(|r| r.exec_mean_ms),
            throughput_tps: mean(|r| r.throughput_tps),
            elapsed_s: mean(|r| r.elapsed_s),
            abort_rate: mean(|r| r.abort_rate),
            mht_share: mean(|r| r.mht_share),
            mht_ms_per_block: mean(|r| r.mht_ms_per_block),
        }
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs            {}", self.runs)?;
        writeln!(
            f,
            "requests        {} (committed {}, aborted {}, failed {}, retried {})",
            self.requests, self.committed, self.aborted, self.failed, self.retries
        )?;
        writeln!(f, "blocks          {}", self.blocks)?;
        writeln!(
            f,
            "commit latency  mean {:.3} ms, p50 {:.3}, p95 {:.3}, p99 {:.3}",
            self.latency_mean_ms, self.latency_p50_ms, self.latency_p95_ms, self.latency_p99_ms
        )?;
        writeln!(f, "execution       mean {:.3} ms", self.exec_mean_ms)?;
        writeln!(f, "throughput      {:.1} txns/s over {:.3} s", self.throughput_tps, self.elapsed_s)?;
        writeln!(f, "abort rate      {:.2}%", self.abort_rate * 100.0)?;
        write!(f, "MHT share       {:.1}% ({:.3} ms per block)", self.mht_share * 100.0, self.mht_ms_per_block)
    }
}

#[derive(Serialize)]
struct ConfigColumns {
    servers: u32,
    items_per_shard: usize,
    ops_per_txn: usize,
    txns_per_block: usize,
    protocol: &'static str,
    seed: u64,
}

/// Writes reports as CSV with the configuration in the leading columns.
pub fn write_csv(w: impl Write, rows: &[(BenchConfig, BenchReport)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (c, r) in rows {
        let protocol = match c.protocol {
            Protocol::TfCommit => "tfcommit",
            Protocol::TwoPc => "2pc",
        };
        let cols = ConfigColumns {
            servers: c.servers,
            items_per_shard: c.items_per_shard,
            ops_per_txn: c.ops_per_txn,
            txns_per_block: c.txns_per_block,
            protocol,
            seed: c.seed,
        };
        out.serialize((cols, r))?;
    }
    out.flush()?;
    Ok(())
}

/// Bookkeeping shared by both network drivers.
struct Closed {
    workload: Workload,
    remaining: usize,
    ops: HashMap<Timestamp, Vec<ExecOp>>,
    began: HashMap<Timestamp, Duration>,
    submitted: HashMap<Timestamp, Duration>,
    latencies: Vec<Duration>,
    exec: Vec<Duration>,
    committed: usize,
    aborted: usize,
    failed: usize,
    retries: usize,
    first: Option<Duration>,
    last: Duration,
}

impl Closed {
    fn new(workload: Workload, requests: usize) -> Self {
        Closed {
            workload,
            remaining: requests,
            ops: HashMap::new(),
            began: HashMap::new(),
            submitted: HashMap::new(),
            latencies: Vec::new(),
            exec: Vec::new(),
            committed: 0,
            aborted: 0,
            failed: 0,
            retries: 0,
            first: None,
            last: Duration::ZERO,
        }
    }

    fn take_new(&mut self) -> Option<Vec<ExecOp>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.workload.next_txn())
    }

    fn began(&mut self, ts: Timestamp, ops: Vec<ExecOp>, at: Duration) {
        self.first.get_or_insert(at);
        self.ops.insert(ts, ops);
        self.began.insert(ts, at);
    }

    /// Records one client output; returns the operations to start next.
    fn observe(&mut self, at: Duration, out: &ClientOutput) -> Option<Vec<ExecOp>> {
        match out {
            ClientOutput::Submitted(ts) => {
                self.submitted.insert(*ts, at);
                if let Some(b) = self.began.get(ts) {
                    self.exec.push(at.saturating_sub(*b));
                }
                None
            }
            ClientOutput::Finished { txn, result } => {
                let ops = self.ops.remove(txn);
                self.began.remove(txn);
                let sent = self.submitted.remove(txn);
                match result {
                    TxnResult::Rejected => {
                        self.retries += 1;
                        return ops;
                    }
                    TxnResult::Committed { .. } => {
                        self.committed += 1;
                        self.last = self.last.max(at);
                        if let Some(s) = sent {
                            self.latencies.push(at.saturating_sub(s));
                        }
                    }
                    TxnResult::Aborted { .. } => self.aborted += 1,
                    TxnResult::Failed(why) => {
                        debug!(%txn, %why, "transaction failed");
                        self.failed += 1;
                    }
                }
                self.take_new()
            }
            ClientOutput::Send { .. } => None,
        }
    }

    fn unfinished(&self) -> usize {
        self.ops.len()
    }

    fn report(mut self, requests: usize, blocks: usize, mht: Duration, compute: Duration) -> BenchReport {
        self.latencies.sort();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let pct = |p: f64| {
            if self.latencies.is_empty() {
                return 0.0;
            }
            let i = ((self.latencies.len() as f64 - 1.0) * p).round() as usize;
            ms(self.latencies[i])
        };
        let mean =
            |v: &[Duration]| if v.is_empty() { 0.0 } else { v.iter().map(|d| ms(*d)).sum::<f64>() / v.len() as f64 };
        let elapsed = self.last.saturating_sub(self.first.unwrap_or_default()).as_secs_f64();
        let decided = (self.committed + self.aborted).max(1) as f64;
        BenchReport {
            runs: 1,
            requests,
            committed: self.committed,
            aborted: self.aborted,
            failed: self.failed,
            retries: self.retries,
            blocks,
            latency_mean_ms: mean(&self.latencies),
            latency_p50_ms: pct(0.5),
            latency_p95_ms: pct(0.95),
            latency_p99_ms: pct(0.99),
            exec_mean_ms: mean(&self.exec),
            throughput_tps: if elapsed > 0.0 { self.committed as f64 / elapsed } else { 0.0 },
            elapsed_s: elapsed,
            abort_rate: self.aborted as f64 / decided,
            mht_share: if compute.is_zero() { 0.0 } else { mht.as_secs_f64() / compute.as_secs_f64() },
            mht_ms_per_block: if blocks == 0 { 0.0 } else { ms(mht) / blocks as f64 },
        }
    }
}

fn round_failure(e: &Event) -> Option<String> {
    match e {
        Event::RoundFailed { round, index, reason } => Some(format!("round {round} at block {index}: {reason}")),
        Event::Refused { server, index, reason, .. } => {
            Some(format!("server {server} refused block {index}: {}", reason.as_str()))
        }
        _ => None,
    }
}

/// One fault-free run.
pub fn run_once(cfg: &BenchConfig, seed: u64) -> Result<BenchReport, BenchError> {
    let data = initial_data(cfg.servers, cfg.items_per_shard);
    let wl = WorkloadConfig { ops_per_txn: cfg.ops_per_txn, read_ratio: cfg.read_ratio, seed };
    let workload = Workload::new(&wl, data.keys().copied())?;
    let cluster = Cluster::build(&cfg.cluster_spec(seed), &data).map_err(|e| BenchError::Setup(e.to_string()))?;
    match cfg.net {
        NetMode::Sim => run_sim(cfg, cluster, workload, seed),
        NetMode::Tcp => run_tcp(cfg, cluster, workload),
    }
}

fn absorb(
    lp: &mut Closed,
    events: Vec<SimEvent>,
    blocks: &mut usize,
) -> Result<Vec<(Duration, Vec<ExecOp>)>, BenchError> {
    let mut next = Vec::new();
    for e in events {
        match e {
            SimEvent::Client { at, output } => next.extend(lp.observe(at, &output).map(|ops| (at, ops))),
            SimEvent::Server { event, .. } => {
                if let Some(why) = round_failure(&event) {
                    return Err(BenchError::RoundFailed(why));
                }
                if matches!(event, Event::Appended { server: 0, .. } | Event::TpcDecided { .. }) {
                    *blocks += 1;
                }
            }
        }
    }
    Ok(next)
}

fn run_sim(cfg: &BenchConfig, cluster: Cluster, workload: Workload, seed: u64) -> Result<BenchReport, BenchError> {
    let mut sim = Sim::new(cluster, NetConfig { seed, ..Default::default() });
    let mut lp = Closed::new(workload, cfg.requests);
    let mut blocks = 0;
    let mut starts: Vec<(Duration, Vec<ExecOp>)> =
        (0..cfg.window()).map_while(|_| lp.take_new()).map(|ops| (Duration::ZERO, ops)).collect();
    loop {
        while let Some((at, ops)) = starts.pop() {
            let (ts, events) = sim.client_begin_at(ops.clone(), at);
            lp.began(ts, ops, at);
            starts.extend(absorb(&mut lp, events, &mut blocks)?);
        }
        let Some(events) = sim.step() else { break };
        starts = absorb(&mut lp, events, &mut blocks)?;
    }
    if lp.unfinished() > 0 {
        return Err(BenchError::Stalled(lp.unfinished()));
    }
    let mht: Duration = sim.servers().iter().map(|s| s.stats().mht_time).sum();
    let compute: Duration = sim
        .stats()
        .compute
        .iter()
        .filter(|(e, _)| matches!(e, tfc_core::protocol::messages::Endpoint::Server(_)))
        .map(|(_, d)| *d)
        .sum();
    Ok(lp.report(cfg.requests, blocks, mht, compute))
}

fn run_tcp(cfg: &BenchConfig, cluster: Cluster, workload: Workload) -> Result<BenchReport, BenchError> {
    let mut net = TcpNet::start(cluster)?;
    let t0 = Instant::now();
    let mut lp = Closed::new(workload, cfg.requests);
    let mut starts: Vec<Vec<ExecOp>> = (0..cfg.window()).map_while(|_| lp.take_new()).collect();
    let mut blocks = 0;
    loop {
        while let Some(ops) = starts.pop() {
            let at = t0.elapsed();
            let (ts, out) = net.begin(ops.clone())?;
            lp.began(ts, ops, at);
            for o in &out {
                starts.extend(lp.observe(t0.elapsed(), o));
            }
        }
        if lp.unfinished() == 0 && starts.is_empty() {
            break;
        }
        let out = net.next(Duration::from_secs(30))?;
        if out.is_empty() {
            net.shutdown();
            return Err(BenchError::Stalled(lp.unfinished()));
        }
        let at = t0.elapsed();
        for o in &out {
            starts.extend(lp.observe(at, o));
        }
        for e in net.events() {
            if let Some(why) = round_failure(&e) {
                net.shutdown();
                return Err(BenchError::RoundFailed(why));
            }
            if matches!(e, Event::Appended { server: 0, .. } | Event::TpcDecided { .. }) {
                blocks += 1;
            }
        }
    }
    let servers = net.shutdown();
    let mht: Duration = servers.iter().map(|s| s.stats().mht_time).sum();
    let compute = t0.elapsed() * servers.len() as u32;
    Ok(lp.report(cfg.requests, blocks, mht, compute))
}

/// `cfg.runs` runs with consecutive seeds, averaged.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let mut reports = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs.max(1) {
        let rep = run_once(cfg, cfg.seed + r as u64)?;
        info!(run = r, tps = rep.throughput_tps, latency_ms = rep.latency_mean_ms, "run finished");
        reports.push(rep);
    }
    Ok(BenchReport::average(&reports))
}

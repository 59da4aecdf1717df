//! Fault scenarios: run a workload with faults installed, audit the
//! result and compare the findings with what the faults actually did.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;
use tracing::info;

use tfc_audit::{audit_full, findings_from_events, AuditConfig, AuditError, AuditTarget, Finding, FindingKind, Report};
use tfc_core::datastore::Versioning;
use tfc_core::model::{
    owner_of, Block, Decision, ItemId, ReadEntry, ServerId, Timestamp, TxnRecord, Value, WriteEntry,
};
use tfc_core::protocol::client::ClientOutput;
use tfc_core::protocol::messages::{seal, ClientRequest, Endpoint, Kind, Payload};
use tfc_core::protocol::{Cluster, ClusterSpec, Event};
use tfc_faults::{fault_install, FaultError, FaultKind, FaultSpec, InjectionRecord, Records, Trigger};
use tfc_net::sim::{NetConfig, Sim, SimEvent};

use crate::workload::{initial_data, Workload, WorkloadConfig, WorkloadError};

/// Client id the stale transaction of a skipped-validation scenario uses.
pub const STALE_CLIENT: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub servers: u32,
    pub txns: usize,
    pub txns_per_block: usize,
    pub items_per_shard: usize,
    pub ops_per_txn: usize,
    pub versioning: Versioning,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            servers: 5,
            txns: 200,
            txns_per_block: 10,
            items_per_shard: 200,
            ops_per_txn: 5,
            versioning: Versioning::Multi,
            seed: 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("cluster setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("the log offers no transaction to replay stale on server {0}")]
    NoStaleCandidate(ServerId),
}

/// What a run produced, before and after auditing.
pub struct Outcome {
    pub report: Report,
    pub records: Vec<InjectionRecord>,
    pub log: Vec<Block>,
    pub events: Vec<Event>,
}

/// The finding a fault should produce, derived from its injection record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expected {
    pub kind: FindingKind,
    pub servers: BTreeSet<ServerId>,
    pub index: u64,
    pub version: Option<Timestamp>,
}

impl Expected {
    pub fn matches(&self, f: &Finding) -> bool {
        f.kind == self.kind
            && f.servers == self.servers
            && f.index == self.index
            && (self.version.is_none() || f.version == self.version)
    }
}

fn block_of(log: &[Block], txn: Timestamp) -> Option<u64> {
    log.iter().find(|b| b.txns.iter().any(|t| t.txn_id == txn)).map(|b| b.index)
}

/// Expected finding for the first injection record, located in `log`.
pub fn expected(rec: &InjectionRecord, log: &[Block]) -> Option<Expected> {
    let index = rec.index.or_else(|| rec.txn.and_then(|t| block_of(log, t)))?;
    let coordinator: BTreeSet<ServerId> = [0].into();
    let (kind, servers, version) = match rec.kind {
        FaultKind::IncorrectRead => (FindingKind::IncorrectRead, rec.servers.clone(), None),
        FaultKind::ForgedRoot => (FindingKind::ForgedRoot, coordinator, None),
        FaultKind::DataCorruption => (FindingKind::DataCorruption, rec.servers.clone(), rec.version),
        FaultKind::SplitChallengeSameCh => (FindingKind::SplitChallenge, coordinator, None),
        FaultKind::SplitChallengeTwoCh => (FindingKind::BadCoSign, coordinator, None),
        FaultKind::BadResponse => (FindingKind::BadResponse, rec.servers.clone(), None),
        FaultKind::LogMutate => (FindingKind::LogTamper, rec.servers.clone(), None),
        FaultKind::LogTruncate => (FindingKind::LogTruncation, rec.servers.clone(), None),
        FaultKind::SkipOcc => (FindingKind::SerializabilityViolation, rec.servers.clone(), None),
    };
    Some(Expected { kind, servers, index, version })
}

/// The default placement of each fault in the matrix.
pub fn matrix_spec(kind: FaultKind, servers: u32) -> FaultSpec {
    let last = servers - 1;
    match kind {
        FaultKind::IncorrectRead => FaultSpec::new(kind, 3 % servers, 6),
        FaultKind::ForgedRoot => FaultSpec::new(kind, 0, 5),
        FaultKind::DataCorruption => FaultSpec::new(kind, 2 % servers, 7),
        FaultKind::SplitChallengeSameCh => FaultSpec::new(kind, 0, 8),
        FaultKind::SplitChallengeTwoCh => FaultSpec::new(kind, 0, 9),
        FaultKind::BadResponse => FaultSpec::new(kind, last, 6),
        FaultKind::LogMutate => FaultSpec::new(kind, 1 % servers, 10),
        FaultKind::LogTruncate => FaultSpec::new(kind, last, 12),
        FaultKind::SkipOcc => {
            FaultSpec { trigger: Trigger::ClientId(STALE_CLIENT), ..FaultSpec::new(kind, 2 % servers, 0) }
        }
    }
}

struct Driver {
    sim: Sim,
    workload: Workload,
    events: Vec<Event>,
    started: usize,
    in_flight: usize,
}

impl Driver {
    fn absorb(&mut self, evs: Vec<SimEvent>) -> usize {
        let mut done = 0;
        for e in evs {
            match e {
                SimEvent::Server { event, .. } => self.events.push(event),
                SimEvent::Client { output: ClientOutput::Finished { .. }, .. } => done += 1,
                SimEvent::Client { .. } => {}
            }
        }
        self.in_flight -= done;
        done
    }

    fn begin(&mut self) {
        let ops = self.workload.next_txn();
        self.started += 1;
        self.in_flight += 1;
        let (_, evs) = self.sim.client_begin(ops);
        self.absorb(evs);
    }

    /// Runs the closed loop until `upto` transactions have been started and
    /// everything in flight has finished.
    fn run(&mut self, upto: usize, window: usize) {
        while self.started < upto && self.in_flight < window {
            self.begin();
        }
        while let Some(evs) = self.sim.step() {
            let done = self.absorb(evs);
            for _ in 0..done {
                if self.started < upto {
                    self.begin();
                }
            }
        }
    }
}

/// A transaction that replays an already overwritten read of an item on
/// `server`, timestamped after everything committed so far.
fn stale_txn(log: &[Block], server: ServerId, n: u32) -> Option<TxnRecord> {
    let last = log.iter().filter_map(Block::max_ts).max()?;
    let read: ReadEntry = log
        .iter()
        .filter(|b| b.decision == Decision::Commit)
        .flat_map(|b| &b.txns)
        .flat_map(|t| t.read_set.iter().filter(move |r| t.write(r.item).is_some()))
        .find(|r| owner_of(r.item, n) == server)
        .copied()?;
    let write = WriteEntry { item: read.item, new_val: -1, old_val: None, r_ts: read.r_ts, w_ts: read.w_ts };
    Some(TxnRecord::new(Timestamp::new(last.counter, STALE_CLIENT), vec![read], vec![write], n))
}

/// Runs `cfg.txns` transactions with `specs` installed and audits the
/// cluster. A skipped-validation fault gets a stale transaction submitted
/// halfway through.
pub fn run_scenario(cfg: &ScenarioConfig, specs: &[FaultSpec]) -> Result<Outcome, ScenarioError> {
    let data: BTreeMap<ItemId, Value> = initial_data(cfg.servers, cfg.items_per_shard);
    let spec = ClusterSpec {
        n_servers: cfg.servers,
        max_batch: cfg.txns_per_block,
        versioning: cfg.versioning,
        key_seed: cfg.seed,
        round_timeout: Duration::from_secs(5),
        ..Default::default()
    };
    let cluster = Cluster::build(&spec, &data).map_err(|e| ScenarioError::Setup(e.to_string()))?;
    let net = NetConfig { seed: cfg.seed, measure_compute: false, ..Default::default() };
    let mut sim = Sim::new(cluster, net);
    let records: Records = Arc::new(Mutex::new(Vec::new()));
    fault_install(sim.servers_mut(), specs, &records)?;
    let wl = WorkloadConfig { ops_per_txn: cfg.ops_per_txn, read_ratio: 0.0, seed: cfg.seed };
    let workload = Workload::new(&wl, data.keys().copied())?;
    let mut d = Driver { sim, workload, events: Vec::new(), started: 0, in_flight: 0 };
    let window = 2 * cfg.txns_per_block;
    let stale_on = specs.iter().find(|s| s.trigger == Trigger::ClientId(STALE_CLIENT)).map(|s| s.target);
    match stale_on {
        Some(server) => {
            let half = cfg.txns / 2;
            d.run(half, window);
            let log = d.sim.servers()[0].log().blocks().to_vec();
            let txn = stale_txn(&log, server, cfg.servers).ok_or(ScenarioError::NoStaleCandidate(server))?;
            info!(txn = %txn.txn_id, item = txn.read_set[0].item, server, "submitting stale transaction");
            let key = spec.client_key();
            let env = seal(Endpoint::Client, &Payload::Submit(vec![ClientRequest::new(txn, &key)]), Some(&key));
            d.sim.send(Endpoint::Client, Endpoint::Server(0), Kind::Submit, Arc::new(env)).expect("coordinator exists");
            let evs = d.sim.run_until_idle();
            d.absorb(evs);
            d.run(cfg.txns.saturating_sub(1), window);
        }
        None => d.run(cfg.txns, window),
    }
    let events = d.events;
    let mut sim = d.sim;
    let keys = spec.config().keys;
    let audit_cfg = AuditConfig { keys: &keys, genesis: Some(data), versioning: cfg.versioning };
    let round = findings_from_events(&events);
    let mut targets: Vec<&mut dyn AuditTarget> =
        sim.servers_mut().iter_mut().map(|s| s as &mut dyn AuditTarget).collect();
    let report = audit_full(&audit_cfg, &mut targets, &round)?;
    let log = sim.servers()[0].log().blocks().to_vec();
    let records = records.lock().unwrap().clone();
    Ok(Outcome { report, records, log, events })
}

/// One row of the fault matrix.
pub struct MatrixRow {
    pub kind: FaultKind,
    pub expected: Option<Expected>,
    pub outcome: Outcome,
}

impl MatrixRow {
    /// The earliest findings are exactly the expected one.
    pub fn detected(&self) -> bool {
        match &self.expected {
            Some(e) => self.outcome.report.findings.len() == 1 && e.matches(&self.outcome.report.findings[0]),
            None => false,
        }
    }
}

pub fn run_matrix(cfg: &ScenarioConfig, kinds: &[FaultKind]) -> Result<Vec<MatrixRow>, ScenarioError> {
    let mut rows = Vec::new();
    for kind in kinds {
        let outcome = run_scenario(cfg, &[matrix_spec(*kind, cfg.servers)])?;
        let expected = outcome.records.first().and_then(|r| expected(r, &outcome.log));
        rows.push(MatrixRow { kind: *kind, expected, outcome });
    }
    Ok(rows)
}

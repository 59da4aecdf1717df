use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use tfc_audit::{audit_full, findings_from_events, AuditConfig, AuditTarget, Finding, FindingKind, LogOnly, Report};
use tfc_core::datastore::Versioning;
use tfc_core::model::{Block, ItemId, Timestamp, Value};
use tfc_core::protocol::client::ClientOutput;
use tfc_core::protocol::messages::ExecOp;
use tfc_core::protocol::{Cluster, ClusterSpec, Event};
use tfc_faults::{fault_install, FaultKind, FaultSpec, InjectionRecord, Records};
use tfc_net::sim::{NetConfig, Sim, SimEvent};

const ITEMS: u64 = 60;

fn data() -> BTreeMap<ItemId, Value> {
    (0..ITEMS).map(|i| (i, 1000 + i as Value)).collect()
}

/// Two items per transaction, read then written, from a fixed sequence.
fn ops(k: u64) -> Vec<ExecOp> {
    let a = (k * 17 + 5) % ITEMS;
    let mut b = (k * 29 + 11) % ITEMS;
    if b == a {
        b = (b + 1) % ITEMS;
    }
    [a, b].iter().flat_map(|i| [ExecOp::Read(*i), ExecOp::Write(*i, (k * 100 + *i) as Value)]).collect()
}

struct Run {
    sim: Sim,
    events: Vec<Event>,
    records: Records,
    spec: ClusterSpec,
}

fn run(specs: &[FaultSpec], versioning: Versioning, txns: u64) -> Run {
    let spec = ClusterSpec { n_servers: 5, max_batch: 4, versioning, ..Default::default() };
    let cfg = NetConfig { seed: 9, measure_compute: false, ..Default::default() };
    let mut sim = Sim::new(Cluster::build(&spec, &data()).unwrap(), cfg);
    let records: Records = Arc::new(Mutex::new(Vec::new()));
    fault_install(sim.servers_mut(), specs, &records).unwrap();
    let mut events = Vec::new();
    let mut started = 0;
    let take = |ev: Vec<SimEvent>, events: &mut Vec<Event>| {
        let mut done = 0;
        for e in ev {
            match e {
                SimEvent::Server { event, .. } => events.push(event),
                SimEvent::Client { output: ClientOutput::Finished { .. }, .. } => done += 1,
                _ => {}
            }
        }
        done
    };
    while started < 4 {
        let (_, ev) = sim.client_begin(ops(started));
        take(ev, &mut events);
        started += 1;
    }
    while let Some(ev) = sim.step() {
        for _ in 0..take(ev, &mut events) {
            if started < txns {
                let (_, ev) = sim.client_begin(ops(started));
                take(ev, &mut events);
                started += 1;
            }
        }
    }
    Run { sim, events, records, spec }
}

impl Run {
    fn records(&self) -> Vec<InjectionRecord> {
        self.records.lock().unwrap().clone()
    }
}

fn audit(r: &mut Run, versioning: Versioning) -> Report {
    let keys = r.spec.config().keys;
    let cfg = AuditConfig { keys: &keys, genesis: Some(data()), versioning };
    let round = findings_from_events(&r.events);
    let mut targets: Vec<&mut dyn AuditTarget> =
        r.sim.servers_mut().iter_mut().map(|s| s as &mut dyn AuditTarget).collect();
    audit_full(&cfg, &mut targets, &round).unwrap()
}

fn block_of(log: &[Block], txn: Timestamp) -> u64 {
    log.iter().find(|b| b.txns.iter().any(|t| t.txn_id == txn)).expect("txn logged").index
}

fn only(report: &Report) -> &Finding {
    assert_eq!(report.findings.len(), 1, "{}", report.render_text());
    &report.findings[0]
}

#[test]
fn honest_runs_are_clean() {
    for v in [Versioning::Multi, Versioning::Single] {
        let mut r = run(&[], v, 80);
        assert!(r.sim.servers()[0].log().len() > 10);
        let report = audit(&mut r, v);
        assert!(report.all.is_empty(), "{}", report.render_text());
    }
}

#[test]
fn stale_read_is_pinned_to_the_owner() {
    let mut r = run(&[FaultSpec::new(FaultKind::IncorrectRead, 3, 8)], Versioning::Multi, 80);
    let rec = r.records()[0].clone();
    let log = r.sim.servers()[0].log().blocks().to_vec();
    let f = only(&audit(&mut r, Versioning::Multi)).clone();
    assert_eq!(f.kind, FindingKind::IncorrectRead);
    assert_eq!(f.servers, [3].into());
    assert_eq!(f.index, block_of(&log, rec.txn.unwrap()));
}

#[test]
fn uninstalled_write_is_data_corruption_at_its_version() {
    // Batched blocks: the bad leaf also breaks its neighbours' proofs.
    for block in [4, 6, 9, 12] {
        let mut r = run(&[FaultSpec::new(FaultKind::DataCorruption, 2, block)], Versioning::Multi, 80);
        let rec = r.records()[0].clone();
        let f = only(&audit(&mut r, Versioning::Multi)).clone();
        assert_eq!(f.kind, FindingKind::DataCorruption);
        assert_eq!(f.servers, [2].into());
        assert_eq!(Some(f.index), rec.index);
        assert_eq!(f.version, rec.version, "block {block}: {}", f.evidence);
    }
}

#[test]
fn single_version_shards_are_checked_at_their_last_block() {
    let mut r = run(&[FaultSpec::new(FaultKind::DataCorruption, 1, 6)], Versioning::Single, 40);
    let report = audit(&mut r, Versioning::Single);
    assert!(report.all.iter().any(|f| f.kind == FindingKind::DataCorruption && f.servers == [1].into()));
}

#[test]
fn coordinator_faults_surface_through_evidence() {
    for (kind, want) in [
        (FaultKind::ForgedRoot, FindingKind::ForgedRoot),
        (FaultKind::SplitChallengeSameCh, FindingKind::SplitChallenge),
        (FaultKind::SplitChallengeTwoCh, FindingKind::BadCoSign),
    ] {
        let mut r = run(&[FaultSpec::new(kind, 0, 5)], Versioning::Multi, 60);
        let rec = r.records()[0].clone();
        let f = only(&audit(&mut r, Versioning::Multi)).clone();
        assert_eq!((f.kind, f.servers.clone(), Some(f.index)), (want, [0].into(), rec.index), "{kind}");
    }
}

#[test]
fn bad_response_comes_from_round_events() {
    let mut r = run(&[FaultSpec::new(FaultKind::BadResponse, 4, 5)], Versioning::Multi, 60);
    let rec = r.records()[0].clone();
    let f = only(&audit(&mut r, Versioning::Multi)).clone();
    assert_eq!((f.kind, f.servers.clone(), Some(f.index)), (FindingKind::BadResponse, [4].into(), rec.index));
}

#[test]
fn served_log_faults() {
    for (kind, want) in
        [(FaultKind::LogMutate, FindingKind::LogTamper), (FaultKind::LogTruncate, FindingKind::LogTruncation)]
    {
        let mut r = run(&[FaultSpec::new(kind, 1, 7)], Versioning::Multi, 60);
        let report = audit(&mut r, Versioning::Multi);
        let f = only(&report);
        assert_eq!((f.kind, f.servers.clone(), f.index), (want, [1].into(), 7), "{kind}");
        assert_eq!(r.records()[0].index, Some(7));
    }
}

#[test]
fn no_valid_log_is_an_error() {
    let r = run(&[], Versioning::Multi, 10);
    let keys = r.spec.config().keys;
    let mut blocks = r.sim.servers()[0].log().blocks().to_vec();
    blocks[0].decision = tfc_core::model::Decision::Abort;
    let mut a = LogOnly { id: 0, blocks: blocks.clone() };
    let mut b = LogOnly { id: 1, blocks };
    let cfg = AuditConfig { keys: &keys, genesis: None, versioning: Versioning::Multi };
    let mut targets: Vec<&mut dyn AuditTarget> = vec![&mut a, &mut b];
    assert_eq!(audit_full(&cfg, &mut targets, &[]).unwrap_err(), tfc_audit::AuditError::NoValidLog);
}

#[test]
fn report_lines_carry_the_finding() {
    let f = Finding::new(FindingKind::LogTamper, 3, 12, "block 12 does not verify");
    let line = f.to_line();
    assert!(line.starts_with("LogTamper servers=3 index=12 version=- digest="));
    let v: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
    assert_eq!(v["kind"], "LogTamper");
    assert_eq!(v["servers"][0], 3);
    assert_eq!(v["index"], 12);
    assert_eq!(v["digest"].as_str().unwrap().len(), 64);
}

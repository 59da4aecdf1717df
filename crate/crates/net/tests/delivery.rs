use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use tfc_core::crypto::keygen;
use tfc_core::model::{Block, ItemId, Timestamp, Value};
use tfc_core::protocol::client::{ClientOutput, TxnResult};
use tfc_core::protocol::messages::{seal, Endpoint, ExecOp, Kind, Payload};
use tfc_core::protocol::{Cluster, ClusterSpec, Event, FailReason};
use tfc_net::sim::{NetConfig, Sim, SimEvent};
use tfc_net::tcp::{read_frame, write_frame, TcpNet};
use tfc_net::NetError;

fn data(n: u64) -> BTreeMap<ItemId, Value> {
    (0..n).map(|i| (i, i as Value)).collect()
}

fn ops(k: u64) -> Vec<ExecOp> {
    [k % 40, (k * 7 + 3) % 40].iter().flat_map(|i| [ExecOp::Read(*i), ExecOp::Write(*i, k as Value)]).collect()
}

fn sim(spec: &ClusterSpec, seed: u64) -> Sim {
    let cfg = NetConfig { seed, measure_compute: false, record_trace: true, ..Default::default() };
    Sim::new(Cluster::build(spec, &data(40)).unwrap(), cfg)
}

fn finished(events: &[SimEvent]) -> Vec<(Timestamp, TxnResult)> {
    events
        .iter()
        .filter_map(|e| match e {
            SimEvent::Client { output: ClientOutput::Finished { txn, result }, .. } => Some((*txn, result.clone())),
            _ => None,
        })
        .collect()
}

/// Keeps `width` transactions in flight until `total` have been started.
fn closed_loop(s: &mut Sim, total: u64, width: u64) -> Vec<SimEvent> {
    let mut all = Vec::new();
    let mut started = 0;
    while started < width.min(total) {
        all.extend(s.client_begin(ops(started)).1);
        started += 1;
    }
    while let Some(ev) = s.step() {
        for _ in finished(&ev) {
            if started < total {
                all.extend(s.client_begin(ops(started)).1);
                started += 1;
            }
        }
        all.extend(ev);
    }
    all
}

fn blocks(s: &Sim) -> Vec<Block> {
    s.servers()[0].log().blocks().to_vec()
}

#[test]
fn equal_seeds_give_identical_schedules() {
    let spec = ClusterSpec { n_servers: 4, max_batch: 5, ..Default::default() };
    let mut a = sim(&spec, 7);
    let mut b = sim(&spec, 7);
    closed_loop(&mut a, 30, 6);
    closed_loop(&mut b, 30, 6);
    assert_eq!(a.trace(), b.trace());
    assert_eq!(blocks(&a), blocks(&b));
    let mut c = sim(&spec, 8);
    closed_loop(&mut c, 30, 6);
    assert_ne!(a.trace(), c.trace());
}

#[test]
fn dropped_challenge_times_out() {
    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut s = sim(&spec, 1);
    s.set_drop_hook(Box::new(|from, to, kind| {
        from == Endpoint::Server(0) && to == Endpoint::Server(2) && kind == Kind::Challenge
    }));
    let (ts, _) = s.client_begin(ops(1));
    let events = s.run_until_idle();
    assert_eq!(s.stats().dropped, 1);
    assert!(matches!(&finished(&events)[..], [(t, TxnResult::Failed(_))] if *t == ts));
    assert!(events.iter().any(|e| matches!(
        e,
        SimEvent::Server { event: Event::RoundFailed { reason: FailReason::Timeout { missing }, .. }, .. } if missing == &vec![2]
    )));
}

#[test]
fn tampered_envelopes_are_counted_and_dropped() {
    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut s = sim(&spec, 2);
    s.set_tamper_hook(Box::new(|_, to, kind, bytes| {
        if to == Endpoint::Server(1) && kind == Kind::GetVote {
            let n = bytes.len();
            bytes[n / 2] ^= 1;
            return true;
        }
        false
    }));
    s.client_begin(ops(2));
    s.run_until_idle();
    assert_eq!(s.stats().tampered, 1);
    assert_eq!(s.servers()[1].stats().invalid_envelopes, 1);
    assert_eq!(s.servers()[0].log().len(), 1);
}

#[test]
fn forged_signature_never_reaches_state() {
    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut s = sim(&spec, 3);
    let impostor = keygen(b"impostor");
    let block = s.servers()[0].log().blocks()[0].clone();
    let forged = seal(Endpoint::Server(0), &Payload::Decision { round: 0, block }, Some(&impostor));
    s.send(Endpoint::Server(0), Endpoint::Server(1), Kind::Decision, Arc::new(forged.clone())).unwrap();
    s.run_until_idle();
    assert_eq!(s.servers()[1].stats().invalid_envelopes, 1);
    assert_eq!(s.servers()[1].log().len(), 1);
    let err = s.send(Endpoint::Server(0), Endpoint::Server(9), Kind::Decision, Arc::new(forged));
    assert!(matches!(err, Err(NetError::UnknownDestination(Endpoint::Server(9)))));
}

#[test]
fn frames_roundtrip() {
    let mut buf = Vec::new();
    write_frame(&mut buf, b"abc").unwrap();
    write_frame(&mut buf, b"").unwrap();
    assert_eq!(&buf[..4], &[0, 0, 0, 3]);
    let mut r = &buf[..];
    assert_eq!(read_frame(&mut r).unwrap(), Some(b"abc".to_vec()));
    assert_eq!(read_frame(&mut r).unwrap(), Some(vec![]));
    assert_eq!(read_frame(&mut r).unwrap(), None);
}

#[test]
fn tcp_and_sim_agree_on_sequential_runs() {
    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut s = sim(&spec, 4);
    for k in 0..6 {
        s.client_begin(ops(k));
        s.run_until_idle();
    }
    let mut net = TcpNet::start(Cluster::build(&spec, &data(40)).unwrap()).unwrap();
    for k in 0..6 {
        let (ts, _) = net.begin(ops(k)).unwrap();
        loop {
            let out = net.next(Duration::from_secs(10)).unwrap();
            assert!(!out.is_empty(), "tcp run stalled");
            if out.iter().any(|o| matches!(o, ClientOutput::Finished { txn, .. } if *txn == ts)) {
                break;
            }
        }
    }
    // The coordinator has appended by the time the client hears back;
    // give the cohorts a moment to do the same.
    std::thread::sleep(Duration::from_millis(200));
    let servers = net.shutdown();
    for srv in &servers {
        assert_eq!(srv.log().blocks(), &blocks(&s)[..]);
    }
}

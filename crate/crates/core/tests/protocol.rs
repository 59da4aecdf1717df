use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use curve25519_dalek::scalar::Scalar;
use tfc_core::chainlog::log_verify;
use tfc_core::crypto::Hash;
use tfc_core::model::{Decision, ItemId, ServerId, Timestamp, Value};
use tfc_core::protocol::client::{ClientOutput, TxnResult};
use tfc_core::protocol::messages::{Endpoint, ExecOp, RefusalReason};
use tfc_core::protocol::{
    Behavior, ChallengeCtx, ChallengeGroup, Cluster, ClusterSpec, Event, FailReason, Output, Protocol,
};

struct Pump {
    cluster: Cluster,
    queue: VecDeque<(Endpoint, Arc<Vec<u8>>)>,
    events: Vec<Event>,
    results: BTreeMap<Timestamp, TxnResult>,
}

impl Pump {
    fn new(spec: &ClusterSpec, items: u64) -> Pump {
        let data: BTreeMap<ItemId, Value> = (0..items).map(|i| (i, 1000 + i as i64)).collect();
        Pump {
            cluster: Cluster::build(spec, &data).unwrap(),
            queue: VecDeque::new(),
            events: vec![],
            results: BTreeMap::new(),
        }
    }

    fn client_out(&mut self, out: Vec<ClientOutput>) {
        for o in out {
            match o {
                ClientOutput::Send { to, bytes, .. } => self.queue.push_back((to, bytes)),
                ClientOutput::Submitted(_) => {}
                ClientOutput::Finished { txn, result } => {
                    self.results.insert(txn, result);
                }
            }
        }
    }

    fn begin(&mut self, ops: Vec<ExecOp>) -> Timestamp {
        let (ts, out) = self.cluster.client.begin(ops);
        self.client_out(out);
        ts
    }

    fn run(&mut self) {
        while let Some((to, bytes)) = self.queue.pop_front() {
            match to {
                Endpoint::Client => {
                    let out = self.cluster.client.receive(&bytes);
                    self.client_out(out);
                }
                Endpoint::Server(s) => {
                    for o in self.cluster.servers[s as usize].receive(&bytes) {
                        match o {
                            Output::Send { to, bytes, .. } => self.queue.push_back((to, bytes)),
                            Output::Timer { .. } => {}
                            Output::Event(e) => self.events.push(e),
                        }
                    }
                }
            }
        }
    }
}

fn rw(items: &[ItemId], value: Value) -> Vec<ExecOp> {
    items.iter().flat_map(|i| [ExecOp::Read(*i), ExecOp::Write(*i, value)]).collect()
}

fn check_replicas(p: &Pump) {
    let first = p.cluster.servers[0].log().blocks();
    for s in &p.cluster.servers {
        assert_eq!(s.log().blocks(), first);
        assert_eq!(log_verify(s.log().blocks(), &p.cluster.cfg.keys), Ok(()));
    }
    // Each server's current root equals the last root it contributed.
    for s in &p.cluster.servers {
        let last = first.iter().rev().find_map(|b| b.roots.get(&s.id()).filter(|_| b.decision == Decision::Commit));
        assert_eq!(Some(&s.shard().root()), last);
    }
}

#[test]
fn sequential_transactions_commit() {
    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut p = Pump::new(&spec, 30);
    for k in 0..10 {
        let ts = p.begin(rw(&[k, k + 10, 29 - k], k as Value));
        p.run();
        assert!(
            matches!(p.results[&ts], TxnResult::Committed { index: Some(i) } if i == k + 1),
            "{:?}",
            p.results[&ts]
        );
    }
    assert_eq!(p.cluster.servers[0].log().len(), 11);
    check_replicas(&p);
    assert!(p.events.iter().all(|e| !matches!(e, Event::RoundFailed { .. } | Event::Refused { .. })));
    let owner = tfc_core::model::owner_of(29, 3);
    assert_eq!(p.cluster.servers[owner as usize].shard().current(29).unwrap().value, 0);
}

#[test]
fn concurrent_transactions_batch_and_conflicts_abort() {
    let spec = ClusterSpec { n_servers: 4, max_batch: 10, ..Default::default() };
    let mut p = Pump::new(&spec, 40);
    // Disjoint transactions share a block.
    let disjoint: Vec<_> = (0..5).map(|k| p.begin(rw(&[k * 2, k * 2 + 1], 7))).collect();
    // Two transactions that read the same item before either commits.
    let a = p.begin(rw(&[30], 1));
    let b = p.begin(rw(&[30], 2));
    p.run();
    for t in &disjoint {
        assert!(matches!(p.results[t], TxnResult::Committed { .. }));
    }
    assert!(matches!(p.results[&a], TxnResult::Committed { .. }));
    assert!(matches!(p.results[&b], TxnResult::Aborted { .. }));
    check_replicas(&p);
    assert!(p.cluster.servers[0].log().blocks().iter().any(|b| b.txns.len() > 1));
}

#[test]
fn two_phase_commit_baseline() {
    let spec = ClusterSpec { n_servers: 3, protocol: Protocol::TwoPc, ..Default::default() };
    let mut p = Pump::new(&spec, 20);
    let t = p.begin(rw(&[1, 2, 3], 5));
    p.run();
    assert_eq!(p.results[&t], TxnResult::Committed { index: None });
    assert!(p.cluster.servers.iter().all(|s| s.log().is_empty()));
    let owner = tfc_core::model::owner_of(2, 3) as usize;
    assert_eq!(p.cluster.servers[owner].shard().current(2).unwrap().value, 5);
}

struct RandomResponse;

impl Behavior for RandomResponse {
    fn on_response(&mut self, _index: u64, honest: Scalar) -> Scalar {
        honest + Scalar::ONE
    }
}

#[test]
fn bad_response_is_pinned_to_its_server() {
    let spec = ClusterSpec { n_servers: 5, ..Default::default() };
    let mut p = Pump::new(&spec, 20);
    p.cluster.servers[2].set_behavior(Box::new(RandomResponse));
    let t = p.begin(rw(&[4], 1));
    p.run();
    assert!(matches!(p.results[&t], TxnResult::Failed(_)));
    let faulty = p.events.iter().find_map(|e| match e {
        Event::RoundFailed { reason: FailReason::Faulty(s), index, .. } => Some((s.clone(), *index)),
        _ => None,
    });
    assert_eq!(faulty, Some(([2u32].into_iter().collect(), 1)));
}

struct SwapRoot(ServerId);

impl Behavior for SwapRoot {
    fn on_challenge(&mut self, _ctx: &ChallengeCtx<'_>, mut honest: ChallengeGroup) -> Vec<ChallengeGroup> {
        if let Some(root) = honest.block.roots.get_mut(&self.0) {
            *root = Hash([0xAB; 32]);
            let bytes = honest.block.signing_bytes();
            honest.challenge = tfc_core::crypto::sch_challenge(&honest.aggregate, &bytes).0;
        }
        vec![honest]
    }
}

#[test]
fn substituted_root_is_refused_by_its_owner() {
    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut p = Pump::new(&spec, 30);
    let victim = tfc_core::model::owner_of(5, 3);
    p.cluster.servers[0].set_behavior(Box::new(SwapRoot(victim)));
    let t = p.begin(rw(&[5], 9));
    p.run();
    assert!(matches!(p.results[&t], TxnResult::Failed(_)));
    let refusal = p.events.iter().find_map(|e| match e {
        Event::Refused { server, reason, index, .. } => Some((*server, *reason, *index)),
        _ => None,
    });
    assert_eq!(refusal, Some((victim, RefusalReason::RootMismatch, 1)));
    assert_eq!(p.cluster.servers[0].evidence().len(), usize::from(victim != 0));
    // The next round reuses the same index.
    p.cluster.servers[0].set_behavior(Box::new(tfc_core::protocol::Honest));
    let t2 = p.begin(rw(&[5], 9));
    p.run();
    assert_eq!(p.results[&t2], TxnResult::Committed { index: Some(1) });
}

#[test]
fn forged_request_is_dropped_without_failing_the_round() {
    use tfc_core::crypto::keygen;
    use tfc_core::model::{ReadEntry, TxnRecord};
    use tfc_core::protocol::messages::{seal, ClientRequest, Payload};

    let spec = ClusterSpec { n_servers: 3, ..Default::default() };
    let mut p = Pump::new(&spec, 30);
    let g = Timestamp::GENESIS;
    let read = ReadEntry { item: 5, value: 1005, r_ts: g, w_ts: g };
    let txn = TxnRecord::new(Timestamp::new(1, 99), vec![read], vec![], 3);
    let forged = ClientRequest::new(txn, &keygen(b"not-the-client"));
    let env = seal(Endpoint::Client, &Payload::Submit(vec![forged]), None);
    p.queue.push_back((Endpoint::Server(0), Arc::new(env)));
    p.run();
    assert_eq!(p.cluster.servers[0].log().len(), 1, "only genesis");
    assert!(p.events.iter().all(|e| !matches!(e, Event::RoundFailed { .. })));
    let t = p.begin(rw(&[5, 6], 3));
    p.run();
    assert!(matches!(p.results[&t], TxnResult::Committed { index: Some(1) }), "{:?}", p.results[&t]);
    check_replicas(&p);
}

//! The client side: runs a transaction's operations against the owning
//! shards, signs the resulting record and waits for a verified decision.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use tracing::debug;

use super::messages::{open, seal, ClientRequest, Endpoint, ExecOp, ExecResult, Kind, OutcomeStatus, Payload};
use super::{ClusterConfig, Protocol, COORDINATOR};
use crate::crypto::{cosi_verify, KeyPair};
use crate::model::{owner_of, Decision, ReadEntry, ServerId, Timestamp, TxnRecord, WriteEntry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxnResult {
    Committed { index: Option<u64> },
    Aborted { index: Option<u64> },
    Rejected,
    Failed(String),
}

impl TxnResult {
    pub fn is_final(&self) -> bool {
        matches!(self, TxnResult::Committed { .. } | TxnResult::Aborted { .. })
    }
}

#[derive(Clone, Debug)]
pub enum ClientOutput {
    Send {
        to: Endpoint,
        kind: Kind,
        bytes: Arc<Vec<u8>>,
    },
    /// The end-transaction request left the client.
    Submitted(Timestamp),
    Finished {
        txn: Timestamp,
        result: TxnResult,
    },
}

struct InFlight {
    ops: Vec<ExecOp>,
    waiting: usize,
    results: Vec<ExecResult>,
}

pub struct ClientNode {
    cfg: Arc<ClusterConfig>,
    kp: KeyPair,
    client_id: u32,
    clock: u64,
    executing: HashMap<Timestamp, InFlight>,
    submitted: BTreeSet<Timestamp>,
    rejected_envelopes: u64,
}

impl ClientNode {
    pub fn new(cfg: Arc<ClusterConfig>, kp: KeyPair, client_id: u32) -> Self {
        assert_eq!(*kp.public(), cfg.client_key, "client key does not match the configuration");
        ClientNode {
            cfg,
            kp,
            client_id,
            clock: 0,
            executing: HashMap::new(),
            submitted: BTreeSet::new(),
            rejected_envelopes: 0,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.executing.len() + self.submitted.len()
    }

    pub fn rejected_envelopes(&self) -> u64 {
        self.rejected_envelopes
    }

    fn observe(&mut self, ts: Timestamp) {
        self.clock = self.clock.max(ts.counter);
    }

    fn send(&self, to: Endpoint, payload: &Payload) -> ClientOutput {
        let kind = payload.kind();
        let key = kind.requires_signature().then_some(&self.kp);
        ClientOutput::Send { to, kind, bytes: Arc::new(seal(Endpoint::Client, payload, key)) }
    }

    /// Starts a transaction with a fresh timestamp.
    pub fn begin(&mut self, ops: Vec<ExecOp>) -> (Timestamp, Vec<ClientOutput>) {
        self.clock += 1;
        let txn = Timestamp::new(self.clock, self.client_id);
        let n = self.cfg.n_servers;
        let mut per_server: BTreeMap<ServerId, Vec<ExecOp>> = BTreeMap::new();
        for op in &ops {
            let item = match op {
                ExecOp::Read(i) | ExecOp::Write(i, _) => *i,
            };
            per_server.entry(owner_of(item, n)).or_default().push(*op);
        }
        let out: Vec<ClientOutput> = per_server
            .into_iter()
            .map(|(s, ops)| self.send(Endpoint::Server(s), &Payload::Exec { txn, ops }))
            .collect();
        let waiting = out.len();
        self.executing.insert(txn, InFlight { ops, waiting, results: Vec::new() });
        if waiting == 0 {
            return (txn, self.end(txn));
        }
        (txn, out)
    }

    fn end(&mut self, txn: Timestamp) -> Vec<ClientOutput> {
        let f = self.executing.remove(&txn).expect("executing");
        let mut reads: BTreeMap<u64, ReadEntry> = BTreeMap::new();
        let mut blind: BTreeMap<u64, (i64, Timestamp, Timestamp)> = BTreeMap::new();
        for r in &f.results {
            match r {
                ExecResult::Read(e) => {
                    reads.entry(e.item).or_insert(*e);
                }
                ExecResult::Written(item, Some(old)) => {
                    blind.entry(*item).or_insert(*old);
                }
                ExecResult::Written(_, None) => {}
                ExecResult::UnknownItem(i) => {
                    return vec![ClientOutput::Finished {
                        txn,
                        result: TxnResult::Failed(format!("unknown item {i}")),
                    }];
                }
            }
        }
        let mut writes: BTreeMap<u64, WriteEntry> = BTreeMap::new();
        for op in &f.ops {
            if let ExecOp::Write(item, new_val) = *op {
                let entry = match (reads.get(&item), blind.get(&item)) {
                    (Some(r), _) => WriteEntry { item, new_val, old_val: None, r_ts: r.r_ts, w_ts: r.w_ts },
                    (None, Some((v, r, w))) => WriteEntry { item, new_val, old_val: Some(*v), r_ts: *r, w_ts: *w },
                    (None, None) => unreachable!("every write is acknowledged"),
                };
                writes.insert(item, entry);
            }
        }
        for e in reads.values() {
            self.observe(e.r_ts.max(e.w_ts));
        }
        let record =
            TxnRecord::new(txn, reads.into_values().collect(), writes.into_values().collect(), self.cfg.n_servers);
        let req = ClientRequest::new(record, &self.kp);
        self.submitted.insert(txn);
        vec![ClientOutput::Submitted(txn), self.send(Endpoint::Server(COORDINATOR), &Payload::Submit(vec![req]))]
    }

    pub fn receive(&mut self, bytes: &[u8]) -> Vec<ClientOutput> {
        let env = match open(bytes, &self.cfg.keys, &self.cfg.client_key) {
            Ok(env) => env,
            Err(e) => {
                self.rejected_envelopes += 1;
                debug!(?e, "client dropping envelope");
                return vec![];
            }
        };
        let Endpoint::Server(from) = env.sender else { return vec![] };
        match env.payload {
            Payload::ExecReply { txn, results } => {
                let Some(f) = self.executing.get_mut(&txn) else { return vec![] };
                f.results.extend(results);
                f.waiting -= 1;
                if f.waiting == 0 {
                    self.end(txn)
                } else {
                    vec![]
                }
            }
            Payload::Decision { block, .. } if from == COORDINATOR && self.cfg.protocol == Protocol::TfCommit => {
                let Some(cosign) = &block.cosign else { return vec![] };
                if !cosi_verify(&block.signing_bytes(), cosign, &self.cfg.keys) {
                    self.rejected_envelopes += 1;
                    return vec![];
                }
                if let Some(t) = block.max_ts() {
                    self.observe(t);
                }
                let index = Some(block.index);
                let result = match block.decision {
                    Decision::Commit => TxnResult::Committed { index },
                    Decision::Abort => TxnResult::Aborted { index },
                };
                self.finish(block.txns.iter().map(|t| t.txn_id), result)
            }
            Payload::TpcDecision { txns, decision, .. } if from == COORDINATOR => {
                if let Some(t) = txns.iter().max() {
                    self.observe(*t);
                }
                let result = match decision {
                    Decision::Commit => TxnResult::Committed { index: None },
                    Decision::Abort => TxnResult::Aborted { index: None },
                };
                self.finish(txns.into_iter(), result)
            }
            Payload::Outcome { txns, status } if from == COORDINATOR => {
                let result = match status {
                    OutcomeStatus::Rejected => TxnResult::Rejected,
                    OutcomeStatus::Failed(why) => TxnResult::Failed(why),
                };
                self.finish(txns.into_iter(), result)
            }
            _ => vec![],
        }
    }

    fn finish(&mut self, txns: impl Iterator<Item = Timestamp>, result: TxnResult) -> Vec<ClientOutput> {
        txns.filter(|t| self.submitted.remove(t))
            .map(|txn| ClientOutput::Finished { txn, result: result.clone() })
            .collect()
    }
}

//! Server state machines for the co-signed commit protocol and the plain
//! two-phase-commit baseline.
//!
//! A [`Server`] consumes envelope bytes and timer firings and produces
//! [`Output`]s; it never blocks or touches the network itself, so the same
//! code runs under the simulator and over TCP. Server 0 is the coordinator
//! and also acts as a cohort for its own shard.

mod behavior;
pub mod client;
mod cohort;
mod coordinator;
pub mod messages;
mod setup;
mod twopc;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use tracing::debug;

use crate::chainlog::ChainLog;
use crate::crypto::{
    aggregate_commitments, aggregate_responses, sch_challenge, sch_commit, sch_respond, CoSign, GroupKeys, Hash,
    KeyPair, PublicKey, SchnorrCommit,
};
use crate::datastore::{DatastoreError, ItemProof, Shard};
use crate::model::{Block, Decision, ItemId, ServerId, Timestamp};

pub use behavior::{Behavior, ChallengeCtx, ChallengeGroup, Honest};
use coordinator::CoordState;
use messages::{open, seal, Endpoint, ExecOp, ExecResult, Kind, OpenError, Payload, RefusalReason};
pub use setup::{Cluster, ClusterSpec};

pub const COORDINATOR: ServerId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    TfCommit,
    TwoPc,
}

/// Which embedded client signatures a cohort checks during voting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientSigPolicy {
    /// Only requests for transactions that touch the cohort's shard.
    InvolvedOnly,
    /// Every request in the draft.
    All,
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub n_servers: u32,
    pub keys: GroupKeys,
    pub client_key: PublicKey,
    pub protocol: Protocol,
    pub round_timeout: Duration,
    pub max_batch: usize,
    /// How long the coordinator lets a partial batch fill before starting
    /// a round anyway. Zero starts as soon as anything is pending.
    pub batch_wait: Duration,
    pub client_sigs: ClientSigPolicy,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FailReason {
    Timeout {
        missing: Vec<ServerId>,
    },
    /// Servers whose Schnorr response failed the per-signer check.
    Faulty(BTreeSet<ServerId>),
    Refused {
        by: ServerId,
        reason: RefusalReason,
    },
    /// The coordinator sent different decisions to different groups.
    SplitDecision,
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailReason::Timeout { missing } => write!(f, "timeout waiting for {missing:?}"),
            FailReason::Faulty(s) => write!(f, "invalid responses from {s:?}"),
            FailReason::Refused { by, reason } => write!(f, "refused by {by}: {}", reason.as_str()),
            FailReason::SplitDecision => f.write_str("split decision"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Appended { server: ServerId, index: u64, decision: Decision, hash: Hash },
    RoundFailed { round: u64, index: u64, reason: FailReason },
    Refused { server: ServerId, round: u64, index: u64, reason: RefusalReason },
    AppendRejected { server: ServerId, index: u64, reason: String },
    InvalidEnvelope { server: ServerId, error: OpenError },
    TpcDecided { round: u64, decision: Decision, txns: Vec<Timestamp> },
}

#[derive(Clone, Debug)]
pub enum Output {
    Send { to: Endpoint, kind: Kind, bytes: Arc<Vec<u8>> },
    Timer { id: u64, after: Duration },
    Event(Event),
}

/// Handler results before sealing.
// Steps are consumed right after they are made; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
pub(crate) enum Step {
    Send(Vec<Endpoint>, Payload),
    Timer(u64, Duration),
    Event(Event),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub invalid_envelopes: u64,
    pub refusals_sent: u64,
    /// Time spent computing Merkle roots while voting.
    pub mht_time: Duration,
}

pub struct Server {
    id: ServerId,
    cfg: Arc<ClusterConfig>,
    kp: KeyPair,
    shard: Shard,
    log: ChainLog,
    behavior: Box<dyn Behavior>,
    cohort: cohort::CohortState,
    coord: Option<CoordState>,
    nonce_counter: u64,
    evidence: Vec<Vec<u8>>,
    stats: ServerStats,
}

impl fmt::Debug for Server {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Server").field("id", &self.id).field("log_len", &self.log.len()).finish_non_exhaustive()
    }
}

impl Server {
    pub fn new(id: ServerId, cfg: Arc<ClusterConfig>, kp: KeyPair, shard: Shard, behavior: Box<dyn Behavior>) -> Self {
        assert_eq!(cfg.keys.get(id), Some(kp.public()), "key pair does not match the group key for server {id}");
        let coord = (id == COORDINATOR).then(CoordState::default);
        Server {
            id,
            cfg,
            kp,
            shard,
            log: ChainLog::new(),
            behavior,
            cohort: cohort::CohortState::default(),
            coord,
            nonce_counter: 0,
            evidence: Vec::new(),
            stats: ServerStats::default(),
        }
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    pub fn shard_mut(&mut self) -> &mut Shard {
        &mut self.shard
    }

    pub fn log(&self) -> &ChainLog {
        &self.log
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    /// Signed messages kept as proof of someone else's misbehavior.
    pub fn evidence(&self) -> &[Vec<u8>] {
        &self.evidence
    }

    pub fn set_behavior(&mut self, behavior: Box<dyn Behavior>) {
        self.behavior = behavior;
    }

    /// Transactions waiting at the coordinator for a round.
    pub fn pending(&self) -> usize {
        self.coord.as_ref().map_or(0, |c| c.pending.len())
    }

    pub fn round_in_flight(&self) -> bool {
        self.coord.as_ref().is_some_and(|c| c.active.is_some())
    }

    fn next_nonce(&mut self, context: &[u8]) -> SchnorrCommit {
        self.nonce_counter += 1;
        let mut seed = Vec::with_capacity(80 + context.len());
        seed.extend_from_slice(b"cosi-nonce");
        seed.extend_from_slice(self.kp.secret().as_bytes());
        seed.extend_from_slice(&self.nonce_counter.to_be_bytes());
        seed.extend_from_slice(context);
        sch_commit(&seed)
    }

    /// Authenticates and handles one envelope.
    pub fn receive(&mut self, bytes: &[u8]) -> Vec<Output> {
        match open(bytes, &self.cfg.keys, &self.cfg.client_key) {
            Ok(env) => {
                let steps = self.handle(env.sender, env.payload, Some(bytes));
                self.finish(steps)
            }
            Err(error) => {
                self.stats.invalid_envelopes += 1;
                debug!(server = self.id, ?error, "dropping envelope");
                vec![Output::Event(Event::InvalidEnvelope { server: self.id, error })]
            }
        }
    }

    pub fn on_timer(&mut self, id: u64) -> Vec<Output> {
        let steps = self.coord_timeout(id);
        self.finish(steps)
    }

    fn handle(&mut self, from: Endpoint, payload: Payload, raw: Option<&[u8]>) -> Vec<Step> {
        let from_coordinator = from == Endpoint::Server(COORDINATOR);
        match (payload, self.cfg.protocol) {
            (Payload::Submit(reqs), _) if from == Endpoint::Client && self.coord.is_some() => self.coord_submit(reqs),
            (Payload::GetVote { round, index, prev_hash, requests }, Protocol::TfCommit) if from_coordinator => {
                self.cohort_get_vote(round, index, prev_hash, requests, raw)
            }
            (Payload::Vote { round, vote, commitment }, Protocol::TfCommit) => match from {
                Endpoint::Server(s) => self.coord_vote(s, round, vote, commitment),
                Endpoint::Client => vec![],
            },
            (Payload::Challenge { round, block, aggregate, challenge }, Protocol::TfCommit) if from_coordinator => {
                self.cohort_challenge(round, block, aggregate, challenge, raw)
            }
            (Payload::Response { round, response }, Protocol::TfCommit) => match from {
                Endpoint::Server(s) => self.coord_response(s, round, response),
                Endpoint::Client => vec![],
            },
            (Payload::Decision { round, block }, Protocol::TfCommit) if from_coordinator => {
                self.cohort_decision(round, block, raw)
            }
            (Payload::Refusal { round, index, reason, .. }, _) => match from {
                Endpoint::Server(s) => {
                    if let Some(r) = raw {
                        self.evidence.push(r.to_vec());
                    }
                    self.coord_refusal(s, round, index, reason)
                }
                Endpoint::Client => vec![],
            },
            (Payload::TpcPrepare { round, txns }, Protocol::TwoPc) if from_coordinator => self.tpc_prepare(round, txns),
            (Payload::TpcVote { round, decision }, Protocol::TwoPc) => match from {
                Endpoint::Server(s) => self.tpc_vote(s, round, decision),
                Endpoint::Client => vec![],
            },
            (Payload::TpcDecision { round, decision, .. }, Protocol::TwoPc) if from_coordinator => {
                self.tpc_decision(round, decision)
            }
            (Payload::Exec { txn, ops }, _) => {
                let results = self.exec(txn, &ops);
                vec![Step::Send(vec![from], Payload::ExecReply { txn, results })]
            }
            (Payload::LogRequest, _) => {
                vec![Step::Send(vec![from], Payload::LogReply { blocks: self.serve_log() })]
            }
            (Payload::ProofRequest { version, items }, _) => {
                let result = self.prove_at(version, &items).map_err(|e| e.to_string());
                vec![Step::Send(vec![from], Payload::ProofReply { result })]
            }
            (Payload::EvidenceRequest, _) => {
                vec![Step::Send(vec![from], Payload::EvidenceReply { envelopes: self.evidence.clone() })]
            }
            (other, _) => {
                debug!(server = self.id, kind = other.kind().name(), "ignoring unexpected message");
                vec![]
            }
        }
    }

    /// Seals outgoing payloads once per send and handles self-addressed
    /// ones in place.
    fn finish(&mut self, steps: Vec<Step>) -> Vec<Output> {
        let mut out = Vec::new();
        let mut queue: VecDeque<Step> = steps.into();
        let me = Endpoint::Server(self.id);
        while let Some(step) = queue.pop_front() {
            match step {
                Step::Send(to, payload) => {
                    let remote: Vec<Endpoint> = to.iter().copied().filter(|e| *e != me).collect();
                    if !remote.is_empty() {
                        let kind = payload.kind();
                        let key = kind.requires_signature().then_some(&self.kp);
                        let bytes = Arc::new(seal(me, &payload, key));
                        for e in remote {
                            out.push(Output::Send { to: e, kind, bytes: bytes.clone() });
                        }
                    }
                    if to.contains(&me) {
                        queue.extend(self.handle(me, payload, None));
                    }
                }
                Step::Timer(id, after) => out.push(Output::Timer { id, after }),
                Step::Event(e) => out.push(Output::Event(e)),
            }
        }
        out
    }

    /// Executes client operations against this shard.
    pub fn exec(&mut self, txn: Timestamp, ops: &[ExecOp]) -> Vec<ExecResult> {
        let next_index = self.log.next_index();
        ops.iter()
            .map(|op| match *op {
                ExecOp::Read(item) => match self.shard.ds_read(item, txn) {
                    Ok(entry) => ExecResult::Read(self.behavior.on_read(&self.shard, txn, next_index, entry)),
                    Err(_) => ExecResult::UnknownItem(item),
                },
                ExecOp::Write(item, value) => match self.shard.ds_buffer_write(item, value, txn) {
                    Ok(ack) => ExecResult::Written(item, ack.old),
                    Err(_) => ExecResult::UnknownItem(item),
                },
            })
            .collect()
    }

    pub fn serve_log(&mut self) -> Vec<Block> {
        self.behavior.on_serve_log(self.log.blocks())
    }

    pub fn prove_at(&self, version: Timestamp, items: &[ItemId]) -> Result<(Hash, Vec<ItemProof>), DatastoreError> {
        self.shard.prove_at(version, items)
    }

    /// Appends a co-signed block, applying it when it commits writes to this
    /// shard. Returns whether the block was accepted.
    fn accept_block(&mut self, block: Block, raw: Option<&[u8]>) -> (bool, Vec<Step>) {
        let index = block.index;
        let decision = block.decision;
        let hash = block.hash();
        let applies = decision == Decision::Commit && block.involved().contains(&self.id);
        let skip = if applies { self.behavior.on_apply(&block, &self.shard) } else { None };
        let txns = block.txns.clone();
        match self.log.log_append(block, &self.cfg.keys) {
            Ok(()) => {
                if applies {
                    self.shard.apply_with(&txns, skip);
                } else {
                    for t in &txns {
                        self.shard.clear_buffer(t.txn_id);
                    }
                }
                (true, vec![Step::Event(Event::Appended { server: self.id, index, decision, hash })])
            }
            Err(e) => {
                if let Some(r) = raw {
                    self.evidence.push(r.to_vec());
                }
                (false, vec![Step::Event(Event::AppendRejected { server: self.id, index, reason: e.to_string() })])
            }
        }
    }
}

/// Builds and co-signs the genesis block over the servers' initial shard
/// roots, appending it to every server's log.
pub fn bootstrap_genesis(servers: &mut [Server]) -> Block {
    let mut block = Block::draft(0, Vec::new(), Hash::ZERO);
    block.decision = Decision::Commit;
    block.roots = servers.iter().map(|s| (s.id, s.shard.root())).collect();
    let bytes = block.signing_bytes();
    let commits: Vec<SchnorrCommit> = servers.iter_mut().map(|s| s.next_nonce(b"genesis")).collect();
    let x = aggregate_commitments(&commits.iter().map(|c| Some(c.commitment())).collect::<Vec<_>>())
        .expect("all servers present");
    let ch = sch_challenge(&x, &bytes);
    let responses: Vec<_> =
        commits.into_iter().zip(servers.iter()).map(|(c, s)| Some(sch_respond(c, &s.kp, &ch))).collect();
    block.cosign = Some(CoSign { challenge: ch.0, response: aggregate_responses(&responses).expect("all present") });
    for s in servers.iter_mut() {
        s.log.log_append(block.clone(), &s.cfg.keys).expect("genesis verifies");
    }
    block
}

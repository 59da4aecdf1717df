//! Wire messages. Every message travels in an [`Envelope`] whose signature
//! covers the sender and the canonical payload bytes.

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;

use crate::codec::{DecodeError, Decoder, Encoder, Wire};
use crate::crypto::cosi::{PointWire, ScalarWire};
use crate::crypto::{sign, verify, GroupKeys, Hash, KeyPair, PublicKey, Signature};
use crate::datastore::ItemProof;
use crate::merkle::VerificationObject;
use crate::model::{Block, Decision, ItemId, ReadEntry, ServerId, Timestamp, TxnRecord, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Server(ServerId),
    Client,
}

impl Wire for Endpoint {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Endpoint::Server(id) => enc.u8(0).u32(*id),
            Endpoint::Client => enc.u8(1),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(Endpoint::Server(dec.u32()?)),
            1 => Ok(Endpoint::Client),
            tag => Err(DecodeError::BadTag { what: "endpoint", tag }),
        }
    }
}

/// A client's signed end-transaction request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientRequest {
    pub txn: TxnRecord,
    pub signature: Signature,
}

impl ClientRequest {
    fn message(txn: &TxnRecord) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.fixed(b"end_txn").put(txn);
        enc.finish()
    }

    pub fn new(txn: TxnRecord, client: &KeyPair) -> Self {
        let signature = sign(&Self::message(&txn), client);
        ClientRequest { txn, signature }
    }

    pub fn verify(&self, client: &PublicKey) -> bool {
        verify(&Self::message(&self.txn), &self.signature, client)
    }
}

impl Wire for ClientRequest {
    const MIN_LEN: usize = 88;
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.txn).put(&self.signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ClientRequest { txn: dec.get()?, signature: dec.get()? })
    }
}

/// A cohort's phase-2 answer. Uninvolved servers only contribute a
/// commitment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteKind {
    Uninvolved,
    Commit(Hash),
    Abort,
}

impl Wire for VoteKind {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            VoteKind::Uninvolved => enc.u8(0),
            VoteKind::Commit(h) => enc.u8(1).put(h),
            VoteKind::Abort => enc.u8(2),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(VoteKind::Uninvolved),
            1 => Ok(VoteKind::Commit(dec.get()?)),
            2 => Ok(VoteKind::Abort),
            tag => Err(DecodeError::BadTag { what: "vote", tag }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RefusalReason {
    /// Index or predecessor hash does not extend the cohort's log.
    StaleDraft,
    /// An embedded client request failed signature or ordering checks.
    InvalidRequest,
    /// The challenged block's transactions differ from the draft.
    DraftMismatch,
    /// `ch` does not equal `H(X || block)`.
    ChallengeMismatch,
    /// Decision and root set contradict each other.
    Inconsistent,
    /// The cohort's own root is missing, altered or wrongly present.
    RootMismatch,
}

impl RefusalReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefusalReason::StaleDraft => "stale-draft",
            RefusalReason::InvalidRequest => "invalid-request",
            RefusalReason::DraftMismatch => "draft-mismatch",
            RefusalReason::ChallengeMismatch => "challenge-mismatch",
            RefusalReason::Inconsistent => "inconsistent-decision",
            RefusalReason::RootMismatch => "root-mismatch",
        }
    }

    const ALL: [RefusalReason; 6] = [
        RefusalReason::StaleDraft,
        RefusalReason::InvalidRequest,
        RefusalReason::DraftMismatch,
        RefusalReason::ChallengeMismatch,
        RefusalReason::Inconsistent,
        RefusalReason::RootMismatch,
    ];
}

impl Wire for RefusalReason {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(Self::ALL.iter().position(|r| r == self).unwrap() as u8);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8()?;
        Self::ALL.get(tag as usize).copied().ok_or(DecodeError::BadTag { what: "refusal", tag })
    }
}

/// Why a client's transactions did not reach a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OutcomeStatus {
    /// Timestamp not above the last logged one, or a duplicate.
    Rejected,
    /// The round failed; the text names the reason.
    Failed(String),
}

impl Wire for OutcomeStatus {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            OutcomeStatus::Rejected => enc.u8(0),
            OutcomeStatus::Failed(s) => enc.u8(1).bytes(s.as_bytes()),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(OutcomeStatus::Rejected),
            1 => Ok(OutcomeStatus::Failed(String::from_utf8(dec.bytes()?).map_err(|_| DecodeError::Invalid("utf8"))?)),
            tag => Err(DecodeError::BadTag { what: "outcome", tag }),
        }
    }
}

/// One client operation executed against a shard before end-transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecOp {
    Read(ItemId),
    Write(ItemId, Value),
}

impl Wire for ExecOp {
    const MIN_LEN: usize = 9;
    fn encode(&self, enc: &mut Encoder) {
        match self {
            ExecOp::Read(i) => enc.u8(0).u64(*i),
            ExecOp::Write(i, v) => enc.u8(1).u64(*i).i64(*v),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(ExecOp::Read(dec.u64()?)),
            1 => Ok(ExecOp::Write(dec.u64()?, dec.i64()?)),
            tag => Err(DecodeError::BadTag { what: "exec op", tag }),
        }
    }
}

/// Result of one [`ExecOp`]: a read entry, or for writes the optional
/// blind-write observation `(old value, r_ts, w_ts)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecResult {
    Read(ReadEntry),
    Written(ItemId, Option<(Value, Timestamp, Timestamp)>),
    UnknownItem(ItemId),
}

impl Wire for ExecResult {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            ExecResult::Read(r) => enc.u8(0).put(r),
            ExecResult::Written(i, None) => enc.u8(1).u64(*i).u8(0),
            ExecResult::Written(i, Some((v, r, w))) => enc.u8(1).u64(*i).u8(1).i64(*v).put(r).put(w),
            ExecResult::UnknownItem(i) => enc.u8(2).u64(*i),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            0 => Ok(ExecResult::Read(dec.get()?)),
            1 => {
                let item = dec.u64()?;
                let old = if dec.bool()? { Some((dec.i64()?, dec.get()?, dec.get()?)) } else { None };
                Ok(ExecResult::Written(item, old))
            }
            2 => Ok(ExecResult::UnknownItem(dec.u64()?)),
            tag => Err(DecodeError::BadTag { what: "exec result", tag }),
        }
    }
}

impl Wire for ItemProof {
    fn encode(&self, enc: &mut Encoder) {
        let v = &self.version;
        enc.u64(self.item).i64(v.value).put(&v.r_ts).put(&v.w_ts).put(&v.version_ts).put(&self.vo);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let item = dec.u64()?;
        let version = crate::datastore::ItemVersion {
            value: dec.i64()?,
            r_ts: dec.get()?,
            w_ts: dec.get()?,
            version_ts: dec.get()?,
        };
        let vo: VerificationObject = dec.get()?;
        Ok(ItemProof { item, version, vo })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Submit(Vec<ClientRequest>),
    GetVote {
        round: u64,
        index: u64,
        prev_hash: Hash,
        requests: Vec<ClientRequest>,
    },
    Vote {
        round: u64,
        vote: VoteKind,
        commitment: RistrettoPoint,
    },
    Challenge {
        round: u64,
        block: Block,
        aggregate: RistrettoPoint,
        challenge: Scalar,
    },
    Response {
        round: u64,
        response: Scalar,
    },
    Decision {
        round: u64,
        block: Block,
    },
    /// `proof` holds the raw bytes of the envelope being refused.
    Refusal {
        round: u64,
        index: u64,
        reason: RefusalReason,
        proof: Vec<u8>,
    },
    Outcome {
        txns: Vec<Timestamp>,
        status: OutcomeStatus,
    },
    TpcPrepare {
        round: u64,
        txns: Vec<TxnRecord>,
    },
    TpcVote {
        round: u64,
        decision: Decision,
    },
    TpcDecision {
        round: u64,
        txns: Vec<Timestamp>,
        decision: Decision,
    },
    Exec {
        txn: Timestamp,
        ops: Vec<ExecOp>,
    },
    ExecReply {
        txn: Timestamp,
        results: Vec<ExecResult>,
    },
    LogRequest,
    LogReply {
        blocks: Vec<Block>,
    },
    ProofRequest {
        version: Timestamp,
        items: Vec<ItemId>,
    },
    ProofReply {
        result: Result<(Hash, Vec<ItemProof>), String>,
    },
    EvidenceRequest,
    EvidenceReply {
        envelopes: Vec<Vec<u8>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Submit,
    GetVote,
    Vote,
    Challenge,
    Response,
    Decision,
    Refusal,
    Outcome,
    TpcPrepare,
    TpcVote,
    TpcDecision,
    Exec,
    ExecReply,
    LogRequest,
    LogReply,
    ProofRequest,
    ProofReply,
    EvidenceRequest,
    EvidenceReply,
}

impl Kind {
    /// Kinds that must carry a valid signature to be accepted.
    pub fn requires_signature(self) -> bool {
        // A submit is not signed as a whole: every request in it is.
        matches!(self, Kind::GetVote | Kind::Vote | Kind::Challenge | Kind::Response | Kind::Decision | Kind::Refusal)
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Submit => "SUBMIT",
            Kind::GetVote => "GET_VOTE",
            Kind::Vote => "VOTE",
            Kind::Challenge => "CHALLENGE",
            Kind::Response => "RESPONSE",
            Kind::Decision => "DECISION",
            Kind::Refusal => "REFUSAL",
            Kind::Outcome => "OUTCOME",
            Kind::TpcPrepare => "TPC_PREPARE",
            Kind::TpcVote => "TPC_VOTE",
            Kind::TpcDecision => "TPC_DECISION",
            Kind::Exec => "EXEC",
            Kind::ExecReply => "EXEC_REPLY",
            Kind::LogRequest => "LOG_REQUEST",
            Kind::LogReply => "LOG_REPLY",
            Kind::ProofRequest => "PROOF_REQUEST",
            Kind::ProofReply => "PROOF_REPLY",
            Kind::EvidenceRequest => "EVIDENCE_REQUEST",
            Kind::EvidenceReply => "EVIDENCE_REPLY",
        }
    }
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Submit(_) => Kind::Submit,
            Payload::GetVote { .. } => Kind::GetVote,
            Payload::Vote { .. } => Kind::Vote,
            Payload::Challenge { .. } => Kind::Challenge,
            Payload::Response { .. } => Kind::Response,
            Payload::Decision { .. } => Kind::Decision,
            Payload::Refusal { .. } => Kind::Refusal,
            Payload::Outcome { .. } => Kind::Outcome,
            Payload::TpcPrepare { .. } => Kind::TpcPrepare,
            Payload::TpcVote { .. } => Kind::TpcVote,
            Payload::TpcDecision { .. } => Kind::TpcDecision,
            Payload::Exec { .. } => Kind::Exec,
            Payload::ExecReply { .. } => Kind::ExecReply,
            Payload::LogRequest => Kind::LogRequest,
            Payload::LogReply { .. } => Kind::LogReply,
            Payload::ProofRequest { .. } => Kind::ProofRequest,
            Payload::ProofReply { .. } => Kind::ProofReply,
            Payload::EvidenceRequest => Kind::EvidenceRequest,
            Payload::EvidenceReply { .. } => Kind::EvidenceReply,
        }
    }
}

impl Wire for Payload {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(self.kind() as u8);
        match self {
            Payload::Submit(reqs) => {
                enc.list(reqs);
            }
            Payload::GetVote { round, index, prev_hash, requests } => {
                enc.u64(*round).u64(*index).put(prev_hash).list(requests);
            }
            Payload::Vote { round, vote, commitment } => {
                enc.u64(*round).put(vote).put(&PointWire(*commitment));
            }
            Payload::Challenge { round, block, aggregate, challenge } => {
                enc.u64(*round).put(block).put(&PointWire(*aggregate)).put(&ScalarWire(*challenge));
            }
            Payload::Response { round, response } => {
                enc.u64(*round).put(&ScalarWire(*response));
            }
            Payload::Decision { round, block } => {
                enc.u64(*round).put(block);
            }
            Payload::Refusal { round, index, reason, proof } => {
                enc.u64(*round).u64(*index).put(reason).bytes(proof);
            }
            Payload::Outcome { txns, status } => {
                enc.list(txns).put(status);
            }
            Payload::TpcPrepare { round, txns } => {
                enc.u64(*round).list(txns);
            }
            Payload::TpcVote { round, decision } => {
                enc.u64(*round).put(decision);
            }
            Payload::TpcDecision { round, txns, decision } => {
                enc.u64(*round).list(txns).put(decision);
            }
            Payload::Exec { txn, ops } => {
                enc.put(txn).list(ops);
            }
            Payload::ExecReply { txn, results } => {
                enc.put(txn).list(results);
            }
            Payload::LogRequest | Payload::EvidenceRequest => {}
            Payload::LogReply { blocks } => {
                enc.list(blocks);
            }
            Payload::ProofRequest { version, items } => {
                enc.put(version).list(items);
            }
            Payload::ProofReply { result } => match result {
                Ok((root, proofs)) => {
                    enc.u8(0).put(root).list(proofs);
                }
                Err(e) => {
                    enc.u8(1).bytes(e.as_bytes());
                }
            },
            Payload::EvidenceReply { envelopes } => {
                enc.list(envelopes);
            }
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let tag = dec.u8()?;
        let p = match tag {
            0 => Payload::Submit(dec.list()?),
            1 => {
                Payload::GetVote { round: dec.u64()?, index: dec.u64()?, prev_hash: dec.get()?, requests: dec.list()? }
            }
            2 => Payload::Vote { round: dec.u64()?, vote: dec.get()?, commitment: dec.get::<PointWire>()?.0 },
            3 => Payload::Challenge {
                round: dec.u64()?,
                block: dec.get()?,
                aggregate: dec.get::<PointWire>()?.0,
                challenge: dec.get::<ScalarWire>()?.0,
            },
            4 => Payload::Response { round: dec.u64()?, response: dec.get::<ScalarWire>()?.0 },
            5 => Payload::Decision { round: dec.u64()?, block: dec.get()? },
            6 => Payload::Refusal { round: dec.u64()?, index: dec.u64()?, reason: dec.get()?, proof: dec.bytes()? },
            7 => Payload::Outcome { txns: dec.list()?, status: dec.get()? },
            8 => Payload::TpcPrepare { round: dec.u64()?, txns: dec.list()? },
            9 => Payload::TpcVote { round: dec.u64()?, decision: dec.get()? },
            10 => Payload::TpcDecision { round: dec.u64()?, txns: dec.list()?, decision: dec.get()? },
            11 => Payload::Exec { txn: dec.get()?, ops: dec.list()? },
            12 => Payload::ExecReply { txn: dec.get()?, results: dec.list()? },
            13 => Payload::LogRequest,
            14 => Payload::LogReply { blocks: dec.list()? },
            15 => Payload::ProofRequest { version: dec.get()?, items: dec.list()? },
            16 => Payload::ProofReply {
                result: match dec.u8()? {
                    0 => Ok((dec.get()?, dec.list()?)),
                    1 => Err(String::from_utf8(dec.bytes()?).map_err(|_| DecodeError::Invalid("utf8"))?),
                    tag => return Err(DecodeError::BadTag { what: "proof reply", tag }),
                },
            },
            17 => Payload::EvidenceRequest,
            18 => Payload::EvidenceReply { envelopes: dec.list()? },
            tag => return Err(DecodeError::BadTag { what: "payload", tag }),
        };
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub sender: Endpoint,
    pub payload: Payload,
    pub signature: Option<Signature>,
}

fn signing_bytes(sender: &Endpoint, payload_bytes: &[u8]) -> Vec<u8> {
    let mut enc = Encoder::with_capacity(payload_bytes.len() + 8);
    enc.fixed(b"tfc-env").put(sender).fixed(payload_bytes);
    enc.finish()
}

/// Envelope bytes: sender, length-prefixed payload, optional signature.
pub fn seal(sender: Endpoint, payload: &Payload, key: Option<&KeyPair>) -> Vec<u8> {
    let body = payload.to_bytes();
    let signature = key.map(|k| sign(&signing_bytes(&sender, &body), k));
    let mut enc = Encoder::with_capacity(body.len() + 80);
    enc.put(&sender).bytes(&body).put(&signature);
    enc.finish()
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum OpenError {
    Malformed,
    UnknownSender,
    BadSignature,
    MissingSignature,
}

/// Decodes and authenticates envelope bytes.
pub fn open(bytes: &[u8], keys: &GroupKeys, client: &PublicKey) -> Result<Envelope, OpenError> {
    open_with(bytes, keys, Some(client))
}

/// Like [`open`] but only accepts envelopes from servers.
pub fn open_server(bytes: &[u8], keys: &GroupKeys) -> Result<Envelope, OpenError> {
    open_with(bytes, keys, None)
}

fn open_with(bytes: &[u8], keys: &GroupKeys, client: Option<&PublicKey>) -> Result<Envelope, OpenError> {
    let mut dec = Decoder::new(bytes);
    let sender: Endpoint = dec.get().map_err(|_| OpenError::Malformed)?;
    let body = dec.bytes().map_err(|_| OpenError::Malformed)?;
    let signature: Option<Signature> = dec.get().map_err(|_| OpenError::Malformed)?;
    dec.finish().map_err(|_| OpenError::Malformed)?;
    let payload = Payload::from_bytes(&body).map_err(|_| OpenError::Malformed)?;
    let pk = match sender {
        Endpoint::Server(id) => keys.get(id).ok_or(OpenError::UnknownSender)?,
        Endpoint::Client => client.ok_or(OpenError::UnknownSender)?,
    };
    match &signature {
        Some(sig) => {
            if !verify(&signing_bytes(&sender, &body), sig, pk) {
                return Err(OpenError::BadSignature);
            }
        }
        None if payload.kind().requires_signature() => return Err(OpenError::MissingSignature),
        None => {}
    }
    Ok(Envelope { sender, payload, signature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, sch_commit};

    fn setup() -> (Vec<KeyPair>, GroupKeys, KeyPair) {
        let kps: Vec<_> = (0..3).map(|i| keygen(format!("m{i}").as_bytes())).collect();
        let g = GroupKeys::new(kps.iter().map(|k| *k.public()).collect());
        (kps, g, keygen(b"client"))
    }

    #[test]
    fn sealed_envelopes_open() {
        let (kps, g, c) = setup();
        let p = Payload::Vote {
            round: 3,
            vote: VoteKind::Commit(Hash([1; 32])),
            commitment: sch_commit(b"n").commitment(),
        };
        let bytes = seal(Endpoint::Server(1), &p, Some(&kps[1]));
        let env = open(&bytes, &g, c.public()).unwrap();
        assert_eq!(env.payload, p);
        assert_eq!(env.sender, Endpoint::Server(1));
        let wrong = seal(Endpoint::Server(1), &p, Some(&kps[2]));
        assert_eq!(open(&wrong, &g, c.public()), Err(OpenError::BadSignature));
        let unsigned = seal(Endpoint::Server(1), &p, None);
        assert_eq!(open(&unsigned, &g, c.public()), Err(OpenError::MissingSignature));
        let tpc = seal(Endpoint::Server(1), &Payload::TpcVote { round: 1, decision: Decision::Commit }, None);
        assert!(open(&tpc, &g, c.public()).is_ok());
        let submit = seal(Endpoint::Client, &Payload::Submit(vec![]), None);
        assert!(open(&submit, &g, c.public()).is_ok());
    }

    #[test]
    fn tampered_bytes_are_rejected() {
        let (kps, g, c) = setup();
        let p = Payload::Response { round: 9, response: Scalar::from(5u64) };
        let bytes = seal(Endpoint::Server(0), &p, Some(&kps[0]));
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(open(&b, &g, c.public()).is_err(), "byte {i}");
        }
    }

    #[test]
    fn payload_roundtrips() {
        let (_, _, c) = setup();
        let txn = TxnRecord::new(Timestamp::new(4, 1), vec![], vec![], 3);
        let payloads = vec![
            Payload::Submit(vec![ClientRequest::new(txn.clone(), &c)]),
            Payload::Refusal { round: 1, index: 2, reason: RefusalReason::RootMismatch, proof: vec![1, 2, 3] },
            Payload::Outcome { txns: vec![Timestamp::new(1, 1)], status: OutcomeStatus::Failed("timeout".into()) },
            Payload::Exec { txn: Timestamp::new(1, 0), ops: vec![ExecOp::Read(3), ExecOp::Write(4, -2)] },
            Payload::ExecReply {
                txn: Timestamp::new(1, 0),
                results: vec![
                    ExecResult::Written(4, Some((1, Timestamp::GENESIS, Timestamp::GENESIS))),
                    ExecResult::UnknownItem(9),
                ],
            },
            Payload::ProofReply { result: Err("gone".into()) },
            Payload::EvidenceReply { envelopes: vec![vec![9; 4]] },
            Payload::LogRequest,
        ];
        for p in payloads {
            assert_eq!(Payload::from_bytes(&p.to_bytes()).unwrap(), p);
        }
        let req = ClientRequest::new(txn, &c);
        assert!(req.verify(c.public()));
        assert!(!req.verify(keygen(b"other").public()));
    }
}

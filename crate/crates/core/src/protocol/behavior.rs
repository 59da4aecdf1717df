use std::collections::BTreeSet;

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;

use super::messages::VoteKind;
use crate::datastore::Shard;
use crate::model::{Block, Decision, ItemId, ReadEntry, ServerId, Timestamp, TxnRecord};

/// A challenge message and the servers it is sent to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChallengeGroup {
    pub members: BTreeSet<ServerId>,
    pub block: Block,
    pub aggregate: RistrettoPoint,
    pub challenge: Scalar,
}

/// What the coordinator knows when it builds the challenge.
pub struct ChallengeCtx<'a> {
    pub n_servers: u32,
    pub involved: &'a BTreeSet<ServerId>,
    pub votes: &'a [VoteKind],
    pub commitments: &'a [RistrettoPoint],
}

/// Hooks at every point where a server may deviate. The defaults are the
/// honest behavior; fault injection overrides individual hooks.
pub trait Behavior: Send {
    /// Value served for a client read; `next_index` is the index of the
    /// block currently being formed.
    fn on_read(&mut self, _shard: &Shard, _txn: Timestamp, _next_index: u64, entry: ReadEntry) -> ReadEntry {
        entry
    }

    fn on_vote(&mut self, _index: u64, _txns: &[TxnRecord], honest: Decision) -> Decision {
        honest
    }

    /// Coordinator only: the challenge messages to send.
    fn on_challenge(&mut self, _ctx: &ChallengeCtx<'_>, honest: ChallengeGroup) -> Vec<ChallengeGroup> {
        vec![honest]
    }

    fn on_response(&mut self, _index: u64, honest: Scalar) -> Scalar {
        honest
    }

    /// An item whose new value should not be installed for this block.
    fn on_apply(&mut self, _block: &Block, _shard: &Shard) -> Option<ItemId> {
        None
    }

    /// The log copy handed to an auditor.
    fn on_serve_log(&mut self, log: &[Block]) -> Vec<Block> {
        log.to_vec()
    }
}

pub struct Honest;

impl Behavior for Honest {}

use std::collections::BTreeSet;
use std::time::Instant;

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;
use tracing::{debug, warn};

use super::messages::{seal, ClientRequest, Endpoint, Payload, RefusalReason, VoteKind};
use super::{ClientSigPolicy, Event, Server, Step, COORDINATOR};
use crate::crypto::{sch_challenge, sch_respond, Challenge, Hash, SchnorrCommit};
use crate::model::{owner_of, Block, Decision, ServerId, TxnRecord};

pub(crate) struct Draft {
    round: u64,
    index: u64,
    prev_hash: Hash,
    txns: Vec<TxnRecord>,
    vote: VoteKind,
    commit: Option<SchnorrCommit>,
}

#[derive(Default)]
pub(crate) struct CohortState {
    pub(crate) draft: Option<Draft>,
    /// 2PC: the prepared batch.
    pub(crate) prepared: Option<(u64, Vec<TxnRecord>)>,
}

pub(crate) fn well_formed(txn: &TxnRecord, n_servers: u32) -> bool {
    let shards: BTreeSet<ServerId> = txn.items().into_iter().map(|i| owner_of(i, n_servers)).collect();
    shards == txn.shards
}

impl Server {
    fn drop_draft(&mut self) {
        if let Some(d) = self.cohort.draft.take() {
            for t in &d.txns {
                self.shard.clear_buffer(t.txn_id);
            }
        }
    }

    fn refuse(&mut self, round: u64, index: u64, reason: RefusalReason, raw: Option<&[u8]>) -> Vec<Step> {
        warn!(server = self.id, round, index, reason = reason.as_str(), "refusing");
        self.stats.refusals_sent += 1;
        let proof = raw.map(<[u8]>::to_vec).unwrap_or_default();
        let refusal = Payload::Refusal { round, index, reason, proof };
        // Keep our own signed copy in case the coordinator discards it.
        if self.id != COORDINATOR {
            self.evidence.push(seal(Endpoint::Server(self.id), &refusal, Some(&self.kp)));
        }
        vec![
            Step::Event(Event::Refused { server: self.id, round, index, reason }),
            Step::Send(vec![Endpoint::Server(COORDINATOR)], refusal),
        ]
    }

    fn check_requests(&self, requests: &[ClientRequest]) -> bool {
        let mut last = self.log.last_ts();
        for req in requests {
            let t = &req.txn;
            if last.is_some_and(|l| t.txn_id <= l) || !well_formed(t, self.cfg.n_servers) {
                return false;
            }
            last = Some(t.txn_id);
            let check = match self.cfg.client_sigs {
                ClientSigPolicy::All => true,
                ClientSigPolicy::InvolvedOnly => t.shards.contains(&self.id),
            };
            if check && !req.verify(&self.cfg.client_key) {
                return false;
            }
        }
        true
    }

    pub(crate) fn cohort_get_vote(
        &mut self,
        round: u64,
        index: u64,
        prev_hash: Hash,
        requests: Vec<ClientRequest>,
        raw: Option<&[u8]>,
    ) -> Vec<Step> {
        self.drop_draft();
        if index != self.log.next_index() || prev_hash != self.log.tail_hash() {
            return self.refuse(round, index, RefusalReason::StaleDraft, raw);
        }
        if !self.check_requests(&requests) {
            return self.refuse(round, index, RefusalReason::InvalidRequest, raw);
        }
        let txns: Vec<TxnRecord> = requests.into_iter().map(|r| r.txn).collect();
        let involved = txns.iter().any(|t| t.shards.contains(&self.id));
        let vote = if involved {
            let honest = if txns.iter().all(|t| self.shard.ds_occ_check(t) == Decision::Commit) {
                Decision::Commit
            } else {
                Decision::Abort
            };
            match self.behavior.on_vote(index, &txns, honest) {
                Decision::Commit => {
                    let start = Instant::now();
                    let root = self.shard.ds_build_mht(&txns);
                    self.stats.mht_time += start.elapsed();
                    VoteKind::Commit(root)
                }
                Decision::Abort => VoteKind::Abort,
            }
        } else {
            VoteKind::Uninvolved
        };
        let mut ctx = Vec::with_capacity(16);
        ctx.extend_from_slice(&round.to_be_bytes());
        ctx.extend_from_slice(&index.to_be_bytes());
        let commit = self.next_nonce(&ctx);
        let commitment = commit.commitment();
        self.cohort.draft = Some(Draft { round, index, prev_hash, txns, vote, commit: Some(commit) });
        vec![Step::Send(vec![Endpoint::Server(COORDINATOR)], Payload::Vote { round, vote, commitment })]
    }

    /// The cohort-side checks on a challenged block, against its own draft
    /// and vote.
    fn challenge_problem(
        &self,
        draft: &Draft,
        block: &Block,
        aggregate: &RistrettoPoint,
        challenge: &Scalar,
    ) -> Option<RefusalReason> {
        if block.index != draft.index || block.prev_hash != draft.prev_hash || block.txns != draft.txns {
            return Some(RefusalReason::DraftMismatch);
        }
        if block.cosign.is_some() || sch_challenge(aggregate, &block.signing_bytes()).0 != *challenge {
            return Some(RefusalReason::ChallengeMismatch);
        }
        let involved = block.involved();
        let rooted: BTreeSet<ServerId> = block.roots.keys().copied().collect();
        let complete = rooted == involved;
        if !rooted.is_subset(&involved)
            || (block.decision == Decision::Commit && !complete)
            || (block.decision == Decision::Abort && complete)
        {
            return Some(RefusalReason::Inconsistent);
        }
        let own = block.roots.get(&self.id);
        let ok = match draft.vote {
            VoteKind::Commit(root) => own == Some(&root),
            VoteKind::Abort | VoteKind::Uninvolved => own.is_none(),
        };
        (!ok).then_some(RefusalReason::RootMismatch)
    }

    pub(crate) fn cohort_challenge(
        &mut self,
        round: u64,
        block: Block,
        aggregate: RistrettoPoint,
        challenge: Scalar,
        raw: Option<&[u8]>,
    ) -> Vec<Step> {
        let Some(draft) = self.cohort.draft.as_ref().filter(|d| d.round == round && d.commit.is_some()) else {
            debug!(server = self.id, round, "challenge without a matching draft");
            return vec![];
        };
        let index = draft.index;
        if let Some(reason) = self.challenge_problem(draft, &block, &aggregate, &challenge) {
            self.drop_draft();
            return self.refuse(round, index, reason, raw);
        }
        let commit = self.cohort.draft.as_mut().unwrap().commit.take().unwrap();
        let honest = sch_respond(commit, &self.kp, &Challenge(challenge));
        let response = self.behavior.on_response(index, honest);
        vec![Step::Send(vec![Endpoint::Server(COORDINATOR)], Payload::Response { round, response })]
    }

    pub(crate) fn cohort_decision(&mut self, round: u64, block: Block, raw: Option<&[u8]>) -> Vec<Step> {
        if self.cohort.draft.as_ref().is_some_and(|d| d.round == round) {
            self.cohort.draft = None;
        }
        let (accepted, mut steps) = self.accept_block(block, raw);
        if accepted && self.id == COORDINATOR {
            steps.extend(self.maybe_start_round());
        }
        steps
    }
}

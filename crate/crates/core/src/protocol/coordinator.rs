use std::collections::{BTreeMap, BTreeSet};

use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;
use tracing::{debug, warn};

use super::behavior::{ChallengeCtx, ChallengeGroup};
use super::cohort::well_formed;
use super::messages::{ClientRequest, Endpoint, OutcomeStatus, Payload, RefusalReason, VoteKind};
use super::{Event, FailReason, Protocol, Server, Step};
use crate::crypto::{aggregate_commitments, cosi_identify_faulty, cosi_verify, sch_challenge, CoSign};
use crate::model::{Block, Decision, ItemId, ServerId, Timestamp, TxnRecord};

pub(crate) enum Phase {
    Voting {
        votes: Vec<Option<(VoteKind, RistrettoPoint)>>,
    },
    Challenging {
        commitments: Vec<RistrettoPoint>,
        groups: Vec<ChallengeGroup>,
        responses: Vec<Option<Scalar>>,
    },
    /// 2PC: waiting for the involved servers' votes.
    Preparing {
        involved: BTreeSet<ServerId>,
        votes: BTreeMap<ServerId, Decision>,
    },
}

pub(crate) struct Round {
    pub(crate) id: u64,
    pub(crate) txns: Vec<TxnRecord>,
    /// The signed requests behind `txns` (TFCommit only).
    pub(crate) requests: Vec<ClientRequest>,
    pub(crate) phase: Phase,
}

impl Round {
    fn txn_ids(&self) -> Vec<Timestamp> {
        self.txns.iter().map(|t| t.txn_id).collect()
    }
}

#[derive(Default)]
pub(crate) struct CoordState {
    pub(crate) pending: BTreeMap<Timestamp, ClientRequest>,
    pub(crate) next_round: u64,
    pub(crate) active: Option<Round>,
    /// Largest timestamp handed to a finished round.
    pub(crate) last_ts: Option<Timestamp>,
    /// Pending batch-fill timer, and whether it has expired.
    fill_timer: Option<u64>,
    fill_expired: bool,
}

/// Timer ids with this bit set are batch-fill timers; others are rounds.
const FILL_TIMER: u64 = 1 << 63;

impl CoordState {
    /// Takes pending requests in timestamp order, skipping any that share
    /// an item with one already taken. Skipped requests fall below the
    /// committed floor and are rejected once the batch commits.
    fn take_batch(&mut self, max: usize) -> Vec<ClientRequest> {
        let mut used: BTreeSet<ItemId> = BTreeSet::new();
        let mut chosen = Vec::new();
        for (ts, req) in &self.pending {
            if chosen.len() == max {
                break;
            }
            let items = req.txn.items();
            if items.iter().any(|i| used.contains(i)) {
                continue;
            }
            used.extend(items);
            chosen.push(*ts);
        }
        chosen.iter().map(|ts| self.pending.remove(ts).expect("pending")).collect()
    }
}

impl Server {
    fn coord(&mut self) -> &mut CoordState {
        self.coord.as_mut().expect("coordinator state")
    }

    fn committed_ts(&self) -> Option<Timestamp> {
        let c = self.coord.as_ref().expect("coordinator state");
        match self.cfg.protocol {
            Protocol::TfCommit => self.log.last_ts().max(c.last_ts),
            Protocol::TwoPc => c.last_ts,
        }
    }

    pub(crate) fn coord_submit(&mut self, reqs: Vec<ClientRequest>) -> Vec<Step> {
        let floor = self.committed_ts();
        let mut rejected = Vec::new();
        for req in reqs {
            let ts = req.txn.txn_id;
            let c = self.coord();
            if floor.is_some_and(|f| ts <= f) || c.pending.contains_key(&ts) {
                rejected.push(ts);
            } else {
                c.pending.insert(ts, req);
            }
        }
        let mut steps = Vec::new();
        if !rejected.is_empty() {
            steps.push(outcome(rejected, OutcomeStatus::Rejected));
        }
        steps.extend(self.maybe_start_round());
        steps
    }

    pub(crate) fn maybe_start_round(&mut self) -> Vec<Step> {
        let floor = self.committed_ts();
        let max = self.cfg.max_batch.max(1);
        let wait = self.cfg.batch_wait;
        let c = self.coord();
        if c.active.is_some() {
            return vec![];
        }
        let mut steps = Vec::new();
        // Requests overtaken by an earlier round can no longer be ordered.
        if let Some(f) = floor {
            let stale: Vec<Timestamp> = c.pending.range(..=f).map(|(t, _)| *t).collect();
            if !stale.is_empty() {
                for t in &stale {
                    c.pending.remove(t);
                }
                steps.push(outcome(stale, OutcomeStatus::Rejected));
            }
        }
        if c.pending.is_empty() {
            return steps;
        }
        if c.pending.len() < max && !wait.is_zero() && !c.fill_expired {
            if c.fill_timer.is_none() {
                let id = FILL_TIMER | c.next_round;
                c.fill_timer = Some(id);
                steps.push(Step::Timer(id, wait));
            }
            return steps;
        }
        c.fill_timer = None;
        c.fill_expired = false;
        let batch = c.take_batch(max);
        let id = c.next_round;
        c.next_round += 1;
        let txns: Vec<TxnRecord> = batch.iter().map(|r| r.txn.clone()).collect();
        let all: Vec<Endpoint> = (0..self.cfg.n_servers).map(Endpoint::Server).collect();
        match self.cfg.protocol {
            Protocol::TfCommit => {
                let n = self.cfg.n_servers as usize;
                self.coord().active =
                    Some(Round { id, txns, requests: batch.clone(), phase: Phase::Voting { votes: vec![None; n] } });
                let index = self.log.next_index();
                let prev_hash = self.log.tail_hash();
                debug!(round = id, index, size = batch.len(), "starting round");
                steps.push(Step::Timer(id, self.cfg.round_timeout));
                steps.push(Step::Send(all, Payload::GetVote { round: id, index, prev_hash, requests: batch }));
            }
            Protocol::TwoPc => {
                let involved: BTreeSet<ServerId> = txns.iter().flat_map(|t| t.shards.iter().copied()).collect();
                let to = involved.iter().copied().map(Endpoint::Server).collect();
                self.coord().active = Some(Round {
                    id,
                    txns: txns.clone(),
                    requests: Vec::new(),
                    phase: Phase::Preparing { involved, votes: BTreeMap::new() },
                });
                steps.push(Step::Timer(id, self.cfg.round_timeout));
                steps.push(Step::Send(to, Payload::TpcPrepare { round: id, txns }));
            }
        }
        steps
    }

    fn active_round(&mut self, round: u64) -> Option<&mut Round> {
        self.coord.as_mut()?.active.as_mut().filter(|r| r.id == round)
    }

    pub(crate) fn coord_vote(
        &mut self,
        from: ServerId,
        round: u64,
        vote: VoteKind,
        commitment: RistrettoPoint,
    ) -> Vec<Step> {
        let Some(r) = self.active_round(round) else { return vec![] };
        let Phase::Voting { votes } = &mut r.phase else { return vec![] };
        let Some(slot) = votes.get_mut(from as usize) else { return vec![] };
        if slot.is_some() {
            return vec![];
        }
        *slot = Some((vote, commitment));
        if votes.iter().any(Option::is_none) {
            return vec![];
        }
        let votes: Vec<(VoteKind, RistrettoPoint)> = votes.iter().map(|v| v.unwrap()).collect();
        self.send_challenges(round, votes)
    }

    fn send_challenges(&mut self, round: u64, votes: Vec<(VoteKind, RistrettoPoint)>) -> Vec<Step> {
        let n = self.cfg.n_servers;
        let index = self.log.next_index();
        let prev_hash = self.log.tail_hash();
        let r = self.coord().active.as_mut().unwrap();
        let mut block = Block::draft(index, r.txns.clone(), prev_hash);
        let involved = block.involved();
        let mut all_commit = true;
        for s in &involved {
            match votes[*s as usize].0 {
                VoteKind::Commit(root) => {
                    block.roots.insert(*s, root);
                }
                _ => all_commit = false,
            }
        }
        block.decision = if all_commit { Decision::Commit } else { Decision::Abort };
        let commitments: Vec<RistrettoPoint> = votes.iter().map(|v| v.1).collect();
        let aggregate = aggregate_commitments(&commitments.iter().copied().map(Some).collect::<Vec<_>>())
            .expect("all votes present");
        let challenge = sch_challenge(&aggregate, &block.signing_bytes()).0;
        let honest = ChallengeGroup { members: (0..n).collect(), block, aggregate, challenge };
        let kinds: Vec<VoteKind> = votes.iter().map(|v| v.0).collect();
        let ctx = ChallengeCtx { n_servers: n, involved: &involved, votes: &kinds, commitments: &commitments };
        let groups = self.behavior.on_challenge(&ctx, honest);
        let steps = groups
            .iter()
            .map(|g| {
                Step::Send(
                    g.members.iter().copied().map(Endpoint::Server).collect(),
                    Payload::Challenge {
                        round,
                        block: g.block.clone(),
                        aggregate: g.aggregate,
                        challenge: g.challenge,
                    },
                )
            })
            .collect();
        let r = self.coord().active.as_mut().unwrap();
        r.phase = Phase::Challenging { commitments, groups, responses: vec![None; n as usize] };
        steps
    }

    pub(crate) fn coord_response(&mut self, from: ServerId, round: u64, response: Scalar) -> Vec<Step> {
        let Some(r) = self.active_round(round) else { return vec![] };
        let Phase::Challenging { responses, .. } = &mut r.phase else { return vec![] };
        let Some(slot) = responses.get_mut(from as usize) else { return vec![] };
        if slot.is_some() {
            return vec![];
        }
        *slot = Some(response);
        if responses.iter().any(Option::is_none) {
            return vec![];
        }
        let r = self.coord().active.take().unwrap();
        let Phase::Challenging { commitments, groups, responses } = r.phase else { unreachable!() };
        let responses: Vec<Scalar> = responses.into_iter().map(Option::unwrap).collect();
        let txns = r.txns.iter().map(|t| t.txn_id).collect::<Vec<_>>();
        let mut steps = Vec::new();
        let failure = if groups.len() == 1 {
            let g = groups.into_iter().next().unwrap();
            let mut block = g.block;
            let cosign = CoSign { challenge: g.challenge, response: responses.iter().sum() };
            let bytes = block.signing_bytes();
            if cosi_verify(&bytes, &cosign, &self.cfg.keys) {
                block.cosign = Some(cosign);
                let mut to: Vec<Endpoint> = (0..self.cfg.n_servers).map(Endpoint::Server).collect();
                to.push(Endpoint::Client);
                let c = self.coord();
                c.last_ts = txns.iter().copied().max().max(c.last_ts);
                // The next round starts once our own copy is appended.
                steps.push(Step::Send(to, Payload::Decision { round, block }));
                return steps;
            }
            let faulty = cosi_identify_faulty(&bytes, &commitments, &responses, &self.cfg.keys);
            warn!(round, ?faulty, "co-sign does not verify");
            FailReason::Faulty(faulty)
        } else {
            // Each group only ever sees its own, internally consistent block.
            for g in groups {
                let response: Scalar = g.members.iter().map(|m| responses[*m as usize]).sum();
                let mut block = g.block;
                block.cosign = Some(CoSign { challenge: g.challenge, response });
                let to = g.members.iter().copied().filter(|m| *m != self.id).map(Endpoint::Server).collect();
                steps.push(Step::Send(to, Payload::Decision { round, block }));
            }
            FailReason::SplitDecision
        };
        steps.extend(self.fail_round(round, txns, failure));
        steps.extend(self.maybe_start_round());
        steps
    }

    pub(crate) fn coord_refusal(&mut self, from: ServerId, round: u64, index: u64, reason: RefusalReason) -> Vec<Step> {
        let Some(r) = self.active_round(round) else { return vec![] };
        let txns = r.txn_ids();
        let requests = std::mem::take(&mut r.requests);
        debug!(round, index, from, reason = reason.as_str(), "round refused");
        self.coord().active = None;
        if reason == RefusalReason::InvalidRequest {
            if let Some(mut steps) = self.drop_invalid(requests) {
                steps.extend(self.maybe_start_round());
                return steps;
            }
        }
        let mut steps = self.fail_round(round, txns, FailReason::Refused { by: from, reason });
        steps.extend(self.maybe_start_round());
        steps
    }

    /// Requests are admitted unchecked and the cohorts verify them. When a
    /// cohort refuses a batch over a bad request, the coordinator checks the
    /// batch itself, rejects the bad ones and queues the rest again. Returns
    /// None if every request checks out, i.e. the refusal was unfounded.
    fn drop_invalid(&mut self, requests: Vec<ClientRequest>) -> Option<Vec<Step>> {
        let (good, bad): (Vec<_>, Vec<_>) = requests
            .into_iter()
            .partition(|r| well_formed(&r.txn, self.cfg.n_servers) && r.verify(&self.cfg.client_key));
        if bad.is_empty() {
            return None;
        }
        warn!(count = bad.len(), "rejecting requests that fail verification");
        let c = self.coord();
        for r in good {
            c.pending.insert(r.txn.txn_id, r);
        }
        Some(vec![outcome(bad.iter().map(|r| r.txn.txn_id).collect(), OutcomeStatus::Rejected)])
    }

    pub(crate) fn coord_timeout(&mut self, id: u64) -> Vec<Step> {
        if id & FILL_TIMER != 0 {
            let c = self.coord();
            if c.fill_timer != Some(id) {
                return vec![];
            }
            c.fill_timer = None;
            c.fill_expired = true;
            return self.maybe_start_round();
        }
        let Some(r) = self.active_round(id) else { return vec![] };
        let missing = match &r.phase {
            Phase::Voting { votes } => missing_slots(votes),
            Phase::Challenging { responses, .. } => missing_slots(responses),
            Phase::Preparing { involved, votes } => {
                involved.iter().copied().filter(|s| !votes.contains_key(s)).collect()
            }
        };
        let txns = r.txn_ids();
        self.coord().active = None;
        let mut steps = self.fail_round(id, txns, FailReason::Timeout { missing });
        steps.extend(self.maybe_start_round());
        steps
    }

    pub(crate) fn fail_round(&mut self, round: u64, txns: Vec<Timestamp>, reason: FailReason) -> Vec<Step> {
        self.coord().active = None;
        let index = self.log.next_index();
        let status = OutcomeStatus::Failed(reason.to_string());
        vec![Step::Event(Event::RoundFailed { round, index, reason }), outcome(txns, status)]
    }
}

fn missing_slots<T>(slots: &[Option<T>]) -> Vec<ServerId> {
    slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i as ServerId).collect()
}

fn outcome(txns: Vec<Timestamp>, status: OutcomeStatus) -> Step {
    Step::Send(vec![Endpoint::Client], Payload::Outcome { txns, status })
}

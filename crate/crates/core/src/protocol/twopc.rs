//! Plain two-phase commit over the same shards, with no signatures, roots
//! or log. Used as the trusted-environment baseline.

use super::coordinator::Phase;
use super::messages::{Endpoint, Payload};
use super::{Event, Server, Step, COORDINATOR};
use crate::model::{Decision, ServerId, TxnRecord};

impl Server {
    pub(crate) fn tpc_prepare(&mut self, round: u64, txns: Vec<TxnRecord>) -> Vec<Step> {
        if let Some((_, old)) = self.cohort.prepared.take() {
            for t in &old {
                self.shard.clear_buffer(t.txn_id);
            }
        }
        let honest = if txns.iter().all(|t| self.shard.ds_occ_check(t) == Decision::Commit) {
            Decision::Commit
        } else {
            Decision::Abort
        };
        let index = self.log.next_index();
        let decision = self.behavior.on_vote(index, &txns, honest);
        self.cohort.prepared = Some((round, txns));
        vec![Step::Send(vec![Endpoint::Server(COORDINATOR)], Payload::TpcVote { round, decision })]
    }

    pub(crate) fn tpc_vote(&mut self, from: ServerId, round: u64, decision: Decision) -> Vec<Step> {
        let Some(c) = self.coord.as_mut() else { return vec![] };
        let Some(r) = c.active.as_mut().filter(|r| r.id == round) else { return vec![] };
        let Phase::Preparing { involved, votes } = &mut r.phase else { return vec![] };
        if !involved.contains(&from) {
            return vec![];
        }
        votes.insert(from, decision);
        if votes.len() < involved.len() {
            return vec![];
        }
        let decision = if votes.values().all(|d| *d == Decision::Commit) { Decision::Commit } else { Decision::Abort };
        let mut to: Vec<Endpoint> = involved.iter().copied().map(Endpoint::Server).collect();
        to.push(Endpoint::Client);
        let r = c.active.take().unwrap();
        let txns: Vec<_> = r.txns.iter().map(|t| t.txn_id).collect();
        c.last_ts = txns.iter().copied().max().max(c.last_ts);
        let mut steps = vec![
            Step::Send(to, Payload::TpcDecision { round, txns: txns.clone(), decision }),
            Step::Event(Event::TpcDecided { round, decision, txns }),
        ];
        steps.extend(self.maybe_start_round());
        steps
    }

    pub(crate) fn tpc_decision(&mut self, round: u64, decision: Decision) -> Vec<Step> {
        let Some((r, txns)) = self.cohort.prepared.take() else { return vec![] };
        if r != round {
            self.cohort.prepared = Some((r, txns));
            return vec![];
        }
        match decision {
            Decision::Commit => self.shard.ds_apply_commit(&txns),
            Decision::Abort => {
                for t in &txns {
                    self.shard.clear_buffer(t.txn_id);
                }
            }
        }
        vec![]
    }
}

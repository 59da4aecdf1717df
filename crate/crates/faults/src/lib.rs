//! Fault injection. Each fault is a [`Behavior`] override on one server,
//! so the honest code path stays the only implementation of the protocol.
//! Faults fire once, when their trigger is met and the fault is feasible,
//! and leave an [`InjectionRecord`] describing exactly what they did.

mod spec;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use curve25519_dalek::scalar::Scalar;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::info;

use tfc_core::crypto::{sch_challenge, sha256};
use tfc_core::datastore::Shard;
use tfc_core::model::{Block, Decision, ItemId, ReadEntry, ServerId, Timestamp, TxnRecord};
use tfc_core::protocol::{Behavior, ChallengeCtx, ChallengeGroup, Server, COORDINATOR};

pub use spec::{parse_scenario, FaultError, FaultKind, FaultSpec, InjectionRecord, Trigger};

/// Shared sink for injection records.
pub type Records = Arc<Mutex<Vec<InjectionRecord>>>;

struct Armed {
    spec: FaultSpec,
    fired: bool,
    rng: ChaCha8Rng,
}

impl Armed {
    fn ready(&self, kind: FaultKind, index: u64, txns: &[TxnRecord]) -> bool {
        !self.fired
            && self.spec.kind == kind
            && match self.spec.trigger {
                Trigger::FromBlock(b) => index >= b,
                Trigger::ClientId(c) => txns.iter().any(|t| t.txn_id.client_id == c),
            }
    }
}

/// A server's deviating behavior: one or more armed faults.
pub struct Faulty {
    id: ServerId,
    faults: Vec<Armed>,
    records: Records,
}

impl Faulty {
    pub fn new(id: ServerId, specs: Vec<FaultSpec>, records: Records) -> Self {
        let faults = specs
            .into_iter()
            .map(|spec| {
                let rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (u64::from(id) << 32));
                Armed { spec, fired: false, rng }
            })
            .collect();
        Faulty { id, faults, records }
    }

    fn record(&self, r: InjectionRecord) {
        info!(server = self.id, kind = %r.kind, index = ?r.index, txn = ?r.txn, "fault injected");
        self.records.lock().unwrap().push(r);
    }

    fn slot(&mut self, kind: FaultKind, index: u64, txns: &[TxnRecord]) -> Option<usize> {
        self.faults.iter().position(|f| f.ready(kind, index, txns))
    }
}

/// The most recent earlier value of `item` that differs from the current one.
fn stale_value(shard: &Shard, item: ItemId) -> Option<i64> {
    let vs = shard.versions(item).ok()?;
    let cur = vs.last()?.value;
    vs.iter().rev().map(|v| v.value).find(|v| *v != cur)
}

fn bogus_root(tag: &[u8]) -> tfc_core::crypto::Hash {
    sha256(tag)
}

impl Behavior for Faulty {
    fn on_read(&mut self, shard: &Shard, txn: Timestamp, next_index: u64, entry: ReadEntry) -> ReadEntry {
        let probe = TxnRecord { txn_id: txn, read_set: vec![], write_set: vec![], shards: BTreeSet::new() };
        let Some(i) = self.slot(FaultKind::IncorrectRead, next_index, std::slice::from_ref(&probe)) else {
            return entry;
        };
        let spec = &self.faults[i].spec;
        if spec.item.is_some_and(|it| it != entry.item) {
            return entry;
        }
        let stale = match spec.value {
            Some(v) if v != entry.value => Some(v),
            Some(_) => None,
            None => stale_value(shard, entry.item),
        };
        let Some(value) = stale else { return entry };
        self.faults[i].fired = true;
        self.record(InjectionRecord {
            kind: FaultKind::IncorrectRead,
            servers: [self.id].into(),
            index: None,
            txn: Some(txn),
            item: Some(entry.item),
            version: Some(entry.w_ts),
        });
        ReadEntry { value, ..entry }
    }

    fn on_vote(&mut self, index: u64, txns: &[TxnRecord], honest: Decision) -> Decision {
        if honest == Decision::Commit {
            return honest;
        }
        let Some(i) = self.slot(FaultKind::SkipOcc, index, txns) else { return honest };
        self.faults[i].fired = true;
        self.record(InjectionRecord::at(FaultKind::SkipOcc, self.id, index));
        Decision::Commit
    }

    fn on_challenge(&mut self, ctx: &ChallengeCtx<'_>, honest: ChallengeGroup) -> Vec<ChallengeGroup> {
        let index = honest.block.index;
        let txns = honest.block.txns.clone();
        if let Some(i) = self.slot(FaultKind::ForgedRoot, index, &txns) {
            let victim =
                self.faults[i].spec.victim.or_else(|| honest.block.roots.keys().copied().find(|s| *s != self.id));
            if let Some(v) = victim.filter(|v| honest.block.roots.contains_key(v)) {
                self.faults[i].fired = true;
                let mut g = honest;
                g.block.roots.insert(v, bogus_root(b"forged-root"));
                g.challenge = sch_challenge(&g.aggregate, &g.block.signing_bytes()).0;
                self.record(InjectionRecord::at(FaultKind::ForgedRoot, self.id, index));
                return vec![g];
            }
        }
        let committing = honest.block.decision == Decision::Commit && !honest.block.roots.is_empty();
        if let Some(i) = self.slot(FaultKind::SplitChallengeSameCh, index, &txns).filter(|_| committing) {
            let split: BTreeSet<ServerId> = self.faults[i]
                .spec
                .group
                .clone()
                .unwrap_or_else(|| [ctx.n_servers - 1].into())
                .into_iter()
                .filter(|s| *s != self.id && *s < ctx.n_servers)
                .collect();
            if !split.is_empty() {
                self.faults[i].fired = true;
                let mut b_a = honest.block.clone();
                let dropped = *b_a.roots.keys().next().unwrap();
                b_a.roots.remove(&dropped);
                b_a.decision = Decision::Abort;
                let rest = honest.members.difference(&split).copied().collect();
                let g_a = ChallengeGroup { members: split, block: b_a, ..honest.clone() };
                self.record(InjectionRecord::at(FaultKind::SplitChallengeSameCh, self.id, index));
                return vec![ChallengeGroup { members: rest, ..honest }, g_a];
            }
        }
        if let Some(i) = self.slot(FaultKind::SplitChallengeTwoCh, index, &txns).filter(|_| committing) {
            // Drop a root whose owner stays in the commit group, so neither
            // group sees anything wrong with its own block.
            let roots = &honest.block.roots;
            let dropped = if roots.contains_key(&self.id) { self.id } else { *roots.keys().next().unwrap() };
            let split: BTreeSet<ServerId> = match &self.faults[i].spec.group {
                Some(g) => g.iter().copied().filter(|s| *s != self.id && *s != dropped && *s < ctx.n_servers).collect(),
                None => (0..ctx.n_servers).filter(|s| *s != self.id && *s != dropped).collect(),
            };
            if !split.is_empty() {
                self.faults[i].fired = true;
                let rest: BTreeSet<ServerId> = honest.members.difference(&split).copied().collect();
                let sum = |g: &BTreeSet<ServerId>| g.iter().map(|s| ctx.commitments[*s as usize]).sum();
                let mut b_a = honest.block.clone();
                b_a.roots.remove(&dropped);
                b_a.decision = Decision::Abort;
                let x_a = sum(&split);
                let x_c = sum(&rest);
                let g_a = ChallengeGroup {
                    members: split,
                    challenge: sch_challenge(&x_a, &b_a.signing_bytes()).0,
                    block: b_a,
                    aggregate: x_a,
                };
                let g_c = ChallengeGroup {
                    members: rest,
                    challenge: sch_challenge(&x_c, &honest.block.signing_bytes()).0,
                    block: honest.block,
                    aggregate: x_c,
                };
                self.record(InjectionRecord::at(FaultKind::SplitChallengeTwoCh, self.id, index));
                return vec![g_c, g_a];
            }
        }
        vec![honest]
    }

    fn on_response(&mut self, index: u64, honest: Scalar) -> Scalar {
        let Some(i) = self.slot(FaultKind::BadResponse, index, &[]) else { return honest };
        let f = &mut self.faults[i];
        f.fired = true;
        let mut wide = [0u8; 64];
        f.rng.fill_bytes(&mut wide);
        self.record(InjectionRecord::at(FaultKind::BadResponse, self.id, index));
        Scalar::from_bytes_mod_order_wide(&wide)
    }

    fn on_apply(&mut self, block: &Block, shard: &Shard) -> Option<ItemId> {
        let i = self.slot(FaultKind::DataCorruption, block.index, &block.txns)?;
        let want = self.faults[i].spec.item;
        let (txn, item) = block.txns.iter().find_map(|t| {
            t.write_set
                .iter()
                .map(|w| w.item)
                .find(|it| shard.owns(*it) && want.is_none_or(|x| x == *it))
                .map(|it| (t.txn_id, it))
        })?;
        self.faults[i].fired = true;
        self.record(InjectionRecord {
            kind: FaultKind::DataCorruption,
            servers: [self.id].into(),
            index: Some(block.index),
            txn: Some(txn),
            item: Some(item),
            version: Some(txn),
        });
        Some(item)
    }

    fn on_serve_log(&mut self, log: &[Block]) -> Vec<Block> {
        let mut out = log.to_vec();
        for f in &mut self.faults {
            let Trigger::FromBlock(b) = f.spec.trigger else { continue };
            let at = if (b as usize) < out.len() { b as usize } else { out.len().saturating_sub(1) };
            if at == 0 {
                continue;
            }
            let kind = f.spec.kind;
            match kind {
                FaultKind::LogMutate => {
                    let blk = &mut out[at];
                    blk.decision = match blk.decision {
                        Decision::Commit => Decision::Abort,
                        Decision::Abort => Decision::Commit,
                    };
                }
                FaultKind::LogTruncate => out.truncate(at),
                _ => continue,
            }
            if !f.fired {
                f.fired = true;
                let r = InjectionRecord::at(kind, self.id, at as u64);
                info!(server = self.id, %kind, index = at, "fault injected");
                self.records.lock().unwrap().push(r);
            }
        }
        out
    }
}

/// Installs `specs` on their target servers; servers without a spec keep
/// their current behavior.
pub fn fault_install(servers: &mut [Server], specs: &[FaultSpec], records: &Records) -> Result<(), FaultError> {
    for s in specs {
        if s.target as usize >= servers.len() {
            return Err(FaultError::UnknownServer(s.target));
        }
        if s.kind.needs_coordinator() && s.target != COORDINATOR {
            return Err(FaultError::NeedsCoordinator { kind: s.kind, target: s.target });
        }
    }
    for server in servers.iter_mut() {
        let mine: Vec<FaultSpec> = specs.iter().filter(|s| s.target == server.id()).cloned().collect();
        if !mine.is_empty() {
            server.set_behavior(Box::new(Faulty::new(server.id(), mine, records.clone())));
        }
    }
    Ok(())
}

use std::collections::{BTreeMap, BTreeSet};

use tfc_core::datastore::{ItemProof, Versioning};
use tfc_core::merkle::mht_verify;
use tfc_core::model::{leaf_hash, owner_of, Block, Decision, ItemId, Timestamp, Value};

use crate::{AuditConfig, AuditTarget, Finding, FindingKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct State {
    value: Option<Value>,
    r_ts: Timestamp,
    w_ts: Timestamp,
}

impl Default for State {
    fn default() -> Self {
        State { value: None, r_ts: Timestamp::GENESIS, w_ts: Timestamp::GENESIS }
    }
}

/// Expected state of each item a block touched, with the last txn to touch it.
type Touched = BTreeMap<ItemId, (State, Timestamp)>;

/// Replays the log to get the state each owned item should be in after
/// every commit block that touched the target, then checks the target's
/// Merkle proofs against the roots the block records for it. Stops at the
/// first problem. Shards that keep a single version are checked at their
/// latest block only.
pub fn audit_datastore(target: &mut dyn AuditTarget, log: &[Block], cfg: &AuditConfig<'_>) -> Vec<Finding> {
    let id = target.id();
    let n_servers = cfg.keys.len() as u32;
    let genesis = cfg.genesis.as_ref();
    let mut states: BTreeMap<ItemId, State> = BTreeMap::new();
    let single = cfg.versioning == Versioning::Single;
    let mut checks: Vec<(usize, Touched)> = Vec::new();
    // A single-version shard is checked once, at its last block, for every
    // item the log ever touched there.
    let mut touched = BTreeMap::new();
    for (pos, b) in log.iter().enumerate() {
        if b.decision != Decision::Commit || !b.roots.contains_key(&id) {
            continue;
        }
        if !single {
            touched.clear();
        }
        for t in &b.txns {
            for item in t.items() {
                if owner_of(item, n_servers) != id {
                    continue;
                }
                let s = states.entry(item).or_insert_with(|| State {
                    value: genesis.and_then(|g| g.get(&item).copied()),
                    ..State::default()
                });
                match t.write(item) {
                    Some(w) => *s = State { value: Some(w.new_val), r_ts: t.txn_id, w_ts: t.txn_id },
                    None => {
                        s.r_ts = s.r_ts.max(t.txn_id);
                        if let Some(r) = t.read(item) {
                            // Learn the value when the log has not shown one yet;
                            // wrong reads are the read audit's business.
                            if s.value.is_none() && s.w_ts == r.w_ts {
                                s.value = Some(r.value);
                            }
                        }
                    }
                }
                touched.insert(item, (*s, t.txn_id));
            }
        }
        if single {
            checks.clear();
        }
        checks.push((pos, touched.clone()));
    }
    let mut todo: Vec<_> = checks.iter().collect();
    if single && !todo.is_empty() {
        todo.drain(..todo.len() - 1);
    }
    if let Some(g) = log.first().filter(|g| g.is_genesis() && !single) {
        if let Some(f) = check_genesis(target, g) {
            return vec![f];
        }
    }
    for (pos, touched) in todo {
        if let Some(f) = check_block(target, &log[*pos], touched) {
            return vec![f];
        }
    }
    Vec::new()
}

fn check_genesis(target: &mut dyn AuditTarget, genesis: &Block) -> Option<Finding> {
    let id = target.id();
    let want = genesis.roots.get(&id)?;
    match target.prove_at(Timestamp::GENESIS, &[]) {
        Ok((root, _)) if root == *want => None,
        Ok(_) => {
            let mut f =
                Finding::new(FindingKind::DataCorruption, id, 0, "initial shard root differs from the genesis block");
            f.version = Some(Timestamp::GENESIS);
            Some(f)
        }
        Err(e) => Some(Finding::new(FindingKind::AuditEvasion, id, 0, format!("no proof for the initial state: {e}"))),
    }
}

fn check_block(target: &mut dyn AuditTarget, block: &Block, touched: &Touched) -> Option<Finding> {
    let id = target.id();
    let root = block.roots[&id];
    let version = block.max_ts().unwrap_or(Timestamp::GENESIS);
    let items: Vec<ItemId> = touched.keys().copied().collect();
    let (got_root, proofs) = match target.prove_at(version, &items) {
        Ok(r) => r,
        Err(e) => {
            return Some(Finding::new(
                FindingKind::AuditEvasion,
                id,
                block.index,
                format!("no proof at version {version}: {e}"),
            ))
        }
    };
    let by_item: BTreeMap<ItemId, &ItemProof> = proofs.iter().map(|p| (p.item, p)).collect();
    let returned: BTreeSet<ItemId> = by_item.keys().copied().collect();
    if returned != touched.keys().copied().collect() {
        return Some(Finding::new(
            FindingKind::AuditEvasion,
            id,
            block.index,
            format!("proof covers {returned:?}, asked for {items:?}"),
        ));
    }
    // A wrong leaf also breaks the proofs of its neighbours, so leaves that
    // differ from the replay are reported before proofs that merely fail.
    let mut bad_proof = None;
    for (item, (want, txn)) in touched {
        let p = by_item[item];
        let value = want.value.unwrap_or(p.version.value);
        let expected = leaf_hash(*item, value, want.r_ts, want.w_ts);
        let served = leaf_hash(*item, p.version.value, p.version.r_ts, p.version.w_ts);
        let wrong_leaf = served != expected;
        if wrong_leaf || (bad_proof.is_none() && !mht_verify(&expected, &p.vo, &root)) {
            let mut f = Finding::new(
                FindingKind::DataCorruption,
                id,
                block.index,
                format!(
                    "item {item} after txn {txn}: expected ({value}, {}, {}), shard holds ({}, {}, {})",
                    want.r_ts, want.w_ts, p.version.value, p.version.r_ts, p.version.w_ts
                ),
            );
            f.version = Some(*txn);
            if wrong_leaf {
                return Some(f);
            }
            bad_proof = Some(f);
        }
    }
    if bad_proof.is_some() {
        return bad_proof;
    }
    if got_root != root {
        let mut f = Finding::new(
            FindingKind::DataCorruption,
            id,
            block.index,
            format!("shard root at version {version} differs from the logged root"),
        );
        f.version = Some(version);
        return Some(f);
    }
    None
}

use std::collections::BTreeMap;

use tfc_core::model::{owner_of, Block, Decision, ItemId, Timestamp};

use crate::{Finding, FindingKind};

/// Committed transactions must be equivalent to their timestamp order,
/// which is also their log order. A committed transaction that observed a
/// version of an item must see no other committed write of that item
/// between that version and its own timestamp.
pub fn audit_serializability(log: &[Block], n_servers: u32) -> Vec<Finding> {
    let mut writers: BTreeMap<ItemId, Vec<Timestamp>> = BTreeMap::new();
    for b in log.iter().filter(|b| b.decision == Decision::Commit) {
        for t in &b.txns {
            for w in &t.write_set {
                writers.entry(w.item).or_default().push(t.txn_id);
            }
        }
    }
    for ws in writers.values_mut() {
        ws.sort();
    }
    let mut out = Vec::new();
    for b in log.iter().filter(|b| b.decision == Decision::Commit) {
        for t in &b.txns {
            for item in t.items() {
                let Some((_, seen)) = t.observed(item) else { continue };
                let problem = if seen >= t.txn_id {
                    Some(format!("txn {} observed item {item} at version {seen}, not older than itself", t.txn_id))
                } else {
                    let ws = writers.get(&item).map(Vec::as_slice).unwrap_or(&[]);
                    let after = ws.partition_point(|w| *w <= seen);
                    ws[after..].iter().find(|w| **w != t.txn_id && **w < t.txn_id).map(|w| {
                        format!(
                            "txn {} observed item {item} at version {seen} but txn {w} overwrote it first",
                            t.txn_id
                        )
                    })
                };
                if let Some(p) = problem {
                    let mut f =
                        Finding::new(FindingKind::SerializabilityViolation, owner_of(item, n_servers), b.index, p);
                    f.version = Some(seen);
                    out.push(f);
                }
            }
        }
    }
    out
}

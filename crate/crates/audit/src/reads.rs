use std::collections::{BTreeMap, HashMap};

use tfc_core::model::{owner_of, Block, Decision, ItemId, Timestamp, Value};

use crate::{Finding, FindingKind};

/// Initial item values, when the auditor knows them. Without them the
/// first observation of an item's genesis value becomes the baseline.
pub type GenesisValues = Option<BTreeMap<ItemId, Value>>;

/// Values installed by committed writes, keyed by (item, writer).
#[derive(Default)]
pub(crate) struct Writes {
    by_writer: HashMap<(ItemId, Timestamp), Value>,
    baseline: BTreeMap<ItemId, Value>,
}

impl Writes {
    pub(crate) fn new(genesis: &GenesisValues) -> Self {
        Writes { by_writer: HashMap::new(), baseline: genesis.clone().unwrap_or_default() }
    }

    /// The value `w_ts` installed for `item`, or `None` if no such write
    /// was committed. Genesis values unknown so far are learned from `seen`.
    pub(crate) fn expect(&mut self, item: ItemId, w_ts: Timestamp, seen: Value) -> Option<Value> {
        if w_ts == Timestamp::GENESIS {
            return Some(*self.baseline.entry(item).or_insert(seen));
        }
        self.by_writer.get(&(item, w_ts)).copied()
    }

    pub(crate) fn commit(&mut self, block: &Block) {
        if block.decision != Decision::Commit {
            return;
        }
        for t in &block.txns {
            for w in &t.write_set {
                self.by_writer.insert((w.item, t.txn_id), w.new_val);
            }
        }
    }
}

/// Every read the log records, committed or not, must return the value
/// installed by the writer it names.
pub fn audit_reads(log: &[Block], n_servers: u32, genesis: &GenesisValues) -> Vec<Finding> {
    let mut writes = Writes::new(genesis);
    let mut out = Vec::new();
    for b in log {
        for t in &b.txns {
            let observed = t
                .read_set
                .iter()
                .map(|r| (r.item, r.w_ts, r.value))
                .chain(t.write_set.iter().filter_map(|w| w.old_val.map(|v| (w.item, w.w_ts, v))));
            for (item, w_ts, value) in observed {
                let problem = match writes.expect(item, w_ts, value) {
                    Some(v) if v == value => continue,
                    Some(v) => {
                        format!("txn {} read {value} for item {item} version {w_ts}, installed value is {v}", t.txn_id)
                    }
                    None => format!(
                        "txn {} read item {item} at version {w_ts}, which no committed write produced",
                        t.txn_id
                    ),
                };
                let mut f = Finding::new(FindingKind::IncorrectRead, owner_of(item, n_servers), b.index, problem);
                f.version = Some(w_ts);
                out.push(f);
            }
        }
        writes.commit(b);
    }
    out
}

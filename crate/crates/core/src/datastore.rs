//! One server's shard: versioned items with read/write timestamps, per-txn
//! write buffers, the timestamp OCC check and the shard's Merkle tree.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::crypto::Hash;
use crate::merkle::{mht_build, MerkleTree, VerificationObject};
use crate::model::{leaf_hash, owner_of, Decision, ItemId, ReadEntry, ServerId, Timestamp, TxnRecord, Value};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatastoreError {
    #[error("item {0} is not stored on this shard")]
    UnknownItem(ItemId),
    #[error("version {0} is not retained")]
    VersionUnavailable(Timestamp),
    #[error("shard has no items")]
    EmptyShard,
    #[error("initial data line {line}: {reason}")]
    InitialData { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Versioning {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemVersion {
    pub value: Value,
    pub r_ts: Timestamp,
    pub w_ts: Timestamp,
    pub version_ts: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TxnBuffer {
    pub pending_writes: BTreeMap<ItemId, Value>,
    pub observed_reads: BTreeMap<ItemId, (Value, Timestamp, Timestamp)>,
}

/// Returned for a buffered write; `old` is set for blind writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteAck {
    pub item: ItemId,
    pub old: Option<(Value, Timestamp, Timestamp)>,
}

/// Parses `item_id<TAB>value` lines.
pub fn parse_initial_data(text: &str) -> Result<BTreeMap<ItemId, Value>, DatastoreError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| DatastoreError::InitialData { line: i + 1, reason: reason.to_string() };
        let (id, value) = line.split_once('\t').ok_or_else(|| err("expected item_id<TAB>value"))?;
        let id: ItemId = id.trim().parse().map_err(|_| err("bad item id"))?;
        let value: Value = value.trim().parse().map_err(|_| err("bad value"))?;
        if out.insert(id, value).is_some() {
            return Err(err("duplicate item id"));
        }
    }
    Ok(out)
}

/// Proof material for one item at one version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemProof {
    pub item: ItemId,
    pub version: ItemVersion,
    pub vo: VerificationObject,
}

#[derive(Clone, Debug)]
pub struct Shard {
    server: ServerId,
    versioning: Versioning,
    items: Vec<ItemId>,
    position: HashMap<ItemId, usize>,
    versions: Vec<Vec<ItemVersion>>,
    tree: MerkleTree,
    buffers: HashMap<Timestamp, TxnBuffer>,
}

impl Shard {
    pub fn new(
        server: ServerId,
        initial: impl IntoIterator<Item = (ItemId, Value)>,
        versioning: Versioning,
    ) -> Result<Self, DatastoreError> {
        let data: BTreeMap<ItemId, Value> = initial.into_iter().collect();
        if data.is_empty() {
            return Err(DatastoreError::EmptyShard);
        }
        let items: Vec<ItemId> = data.keys().copied().collect();
        let position = items.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let g = Timestamp::GENESIS;
        let versions: Vec<Vec<ItemVersion>> =
            data.values().map(|&value| vec![ItemVersion { value, r_ts: g, w_ts: g, version_ts: g }]).collect();
        let leaves = items.iter().zip(&data).map(|(id, (_, v))| leaf_hash(*id, *v, g, g)).collect();
        let tree = mht_build(leaves).expect("nonempty");
        Ok(Shard { server, versioning, items, position, versions, tree, buffers: HashMap::new() })
    }

    /// Builds this server's shard from the global initial data.
    pub fn from_global(
        server: ServerId,
        n_servers: u32,
        data: &BTreeMap<ItemId, Value>,
        versioning: Versioning,
    ) -> Result<Self, DatastoreError> {
        Shard::new(
            server,
            data.iter().filter(|(id, _)| owner_of(**id, n_servers) == server).map(|(k, v)| (*k, *v)),
            versioning,
        )
    }

    pub fn server(&self) -> ServerId {
        self.server
    }

    pub fn versioning(&self) -> Versioning {
        self.versioning
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn owns(&self, item: ItemId) -> bool {
        self.position.contains_key(&item)
    }

    fn pos(&self, item: ItemId) -> Result<usize, DatastoreError> {
        self.position.get(&item).copied().ok_or(DatastoreError::UnknownItem(item))
    }

    pub fn current(&self, item: ItemId) -> Result<&ItemVersion, DatastoreError> {
        Ok(self.versions[self.pos(item)?].last().unwrap())
    }

    /// All retained versions of `item`, oldest first.
    pub fn versions(&self, item: ItemId) -> Result<&[ItemVersion], DatastoreError> {
        Ok(&self.versions[self.pos(item)?])
    }

    pub fn root(&self) -> Hash {
        self.tree.root()
    }

    pub fn tree(&self) -> &MerkleTree {
        &self.tree
    }

    pub fn ds_read(&mut self, item: ItemId, txn_id: Timestamp) -> Result<ReadEntry, DatastoreError> {
        let v = *self.current(item)?;
        self.buffers.entry(txn_id).or_default().observed_reads.insert(item, (v.value, v.r_ts, v.w_ts));
        Ok(ReadEntry { item, value: v.value, r_ts: v.r_ts, w_ts: v.w_ts })
    }

    pub fn ds_buffer_write(
        &mut self,
        item: ItemId,
        new_val: Value,
        txn_id: Timestamp,
    ) -> Result<WriteAck, DatastoreError> {
        let v = *self.current(item)?;
        let buf = self.buffers.entry(txn_id).or_default();
        buf.pending_writes.insert(item, new_val);
        let old = if buf.observed_reads.contains_key(&item) { None } else { Some((v.value, v.r_ts, v.w_ts)) };
        Ok(WriteAck { item, old })
    }

    pub fn buffer(&self, txn_id: Timestamp) -> Option<&TxnBuffer> {
        self.buffers.get(&txn_id)
    }

    pub fn clear_buffer(&mut self, txn_id: Timestamp) {
        self.buffers.remove(&txn_id);
    }

    pub fn pending_buffers(&self) -> usize {
        self.buffers.len()
    }

    /// Validates the owned part of `txn` against the current item state.
    pub fn ds_occ_check(&self, txn: &TxnRecord) -> Decision {
        for item in txn.items() {
            let Ok(cur) = self.current(item) else { continue };
            let (r_ts, w_ts) = txn.observed(item).unwrap();
            if (r_ts, w_ts) != (cur.r_ts, cur.w_ts) || txn.txn_id <= cur.w_ts {
                return Decision::Abort;
            }
            if txn.write(item).is_some() && txn.txn_id <= cur.r_ts {
                return Decision::Abort;
            }
        }
        if let Some(buf) = self.buffers.get(&txn.txn_id) {
            let owned_writes = txn.write_set.iter().filter(|w| self.owns(w.item));
            if owned_writes.clone().count() != buf.pending_writes.len()
                || owned_writes.into_iter().any(|w| buf.pending_writes.get(&w.item) != Some(&w.new_val))
            {
                return Decision::Abort;
            }
        }
        Decision::Commit
    }

    /// Item states that committing `txns` in order would produce on this
    /// shard. Only owned items appear.
    pub fn post_states(&self, txns: &[TxnRecord]) -> BTreeMap<ItemId, ItemVersion> {
        let mut out: BTreeMap<ItemId, ItemVersion> = BTreeMap::new();
        for txn in txns {
            for item in txn.items() {
                let Ok(cur) = self.current(item) else { continue };
                let prev = *out.get(&item).unwrap_or(cur);
                let next = match txn.write(item) {
                    Some(w) => {
                        ItemVersion { value: w.new_val, r_ts: txn.txn_id, w_ts: txn.txn_id, version_ts: txn.txn_id }
                    }
                    // A read by an older transaction must not move r_ts back.
                    None if txn.txn_id <= prev.r_ts => continue,
                    None => ItemVersion { r_ts: txn.txn_id, version_ts: txn.txn_id, ..prev },
                };
                out.insert(item, next);
            }
        }
        out
    }

    fn leaf_updates(&self, states: &BTreeMap<ItemId, ItemVersion>) -> Vec<(usize, Hash)> {
        states.iter().map(|(item, v)| (self.position[item], leaf_hash(*item, v.value, v.r_ts, v.w_ts))).collect()
    }

    /// Root of the shard as if `txns` had committed; the store is unchanged.
    pub fn ds_build_mht(&self, assuming: &[TxnRecord]) -> Hash {
        let states = self.post_states(assuming);
        self.tree.root_with_updates(&self.leaf_updates(&states)).expect("owned positions")
    }

    /// Installs the committed batch. Buffers of its transactions are dropped.
    pub fn ds_apply_commit(&mut self, txns: &[TxnRecord]) {
        self.apply_with(txns, None);
    }

    /// Like `ds_apply_commit` but leaves `skip_value_of`'s value as it was
    /// (timestamps still advance).
    pub fn apply_with(&mut self, txns: &[TxnRecord], skip_value_of: Option<ItemId>) {
        let mut states = self.post_states(txns);
        if let Some(item) = skip_value_of {
            if let (Some(state), Ok(cur)) = (states.get(&item).copied(), self.current(item)) {
                states.insert(item, ItemVersion { value: cur.value, ..state });
            }
        }
        for (item, v) in &states {
            let pos = self.position[item];
            match self.versioning {
                Versioning::Multi => self.versions[pos].push(*v),
                Versioning::Single => self.versions[pos] = vec![*v],
            }
        }
        for (pos, h) in self.leaf_updates(&states) {
            self.tree.update_leaf(pos, h).expect("owned position");
        }
        for t in txns {
            self.buffers.remove(&t.txn_id);
        }
    }

    /// Latest version of every item whose `version_ts <= ts`.
    pub fn ds_snapshot_at(&self, ts: Timestamp) -> Result<BTreeMap<ItemId, ItemVersion>, DatastoreError> {
        let mut out = BTreeMap::new();
        for (item, vs) in self.items.iter().zip(&self.versions) {
            let n = vs.partition_point(|v| v.version_ts <= ts);
            if n == 0 {
                return Err(DatastoreError::VersionUnavailable(ts));
            }
            out.insert(*item, vs[n - 1]);
        }
        Ok(out)
    }

    pub fn tree_at(&self, ts: Timestamp) -> Result<MerkleTree, DatastoreError> {
        let snap = self.ds_snapshot_at(ts)?;
        if self.is_latest(&snap) {
            return Ok(self.tree.clone());
        }
        let leaves = snap.iter().map(|(id, v)| leaf_hash(*id, v.value, v.r_ts, v.w_ts)).collect();
        Ok(mht_build(leaves).expect("nonempty"))
    }

    fn is_latest(&self, snap: &BTreeMap<ItemId, ItemVersion>) -> bool {
        self.versions.iter().zip(snap.values()).all(|(vs, v)| vs.last() == Some(v))
    }

    /// The shard root at `ts` together with the items' versions and VOs.
    pub fn prove_at(&self, ts: Timestamp, items: &[ItemId]) -> Result<(Hash, Vec<ItemProof>), DatastoreError> {
        let snap = self.ds_snapshot_at(ts)?;
        let tree = self.tree_at(ts)?;
        let proofs = items
            .iter()
            .map(|item| {
                let pos = self.pos(*item)?;
                Ok(ItemProof { item: *item, version: snap[item], vo: tree.prove(pos).expect("in range") })
            })
            .collect::<Result<Vec<_>, DatastoreError>>()?;
        Ok((tree.root(), proofs))
    }

    /// Position of `item` among the shard's leaves.
    pub fn leaf_index(&self, item: ItemId) -> Option<usize> {
        self.position.get(&item).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WriteEntry;

    fn ts(c: u64) -> Timestamp {
        Timestamp::new(c, 0)
    }

    fn shard(mode: Versioning) -> Shard {
        Shard::new(0, [(1, 1000), (2, 500), (3, 7)], mode).unwrap()
    }

    fn rw(s: &mut Shard, t: Timestamp, item: ItemId, new_val: Value) -> TxnRecord {
        let r = s.ds_read(item, t).unwrap();
        s.ds_buffer_write(item, new_val, t).unwrap();
        TxnRecord::new(t, vec![r], vec![WriteEntry { item, new_val, old_val: None, r_ts: r.r_ts, w_ts: r.w_ts }], 1)
    }

    #[test]
    fn fresh_read_returns_initial() {
        let mut s = shard(Versioning::Multi);
        let r = s.ds_read(1, ts(5)).unwrap();
        assert_eq!((r.value, r.r_ts, r.w_ts), (1000, Timestamp::GENESIS, Timestamp::GENESIS));
        assert_eq!(s.ds_read(1, ts(5)).unwrap(), r);
        assert_eq!(s.ds_read(9, ts(5)), Err(DatastoreError::UnknownItem(9)));
    }

    #[test]
    fn commit_then_read() {
        let mut s = shard(Versioning::Multi);
        let t = rw(&mut s, ts(100), 1, 900);
        assert_eq!(s.ds_occ_check(&t), Decision::Commit);
        s.ds_apply_commit(&[t]);
        let r = s.ds_read(1, ts(115)).unwrap();
        assert_eq!((r.value, r.r_ts, r.w_ts), (900, ts(100), ts(100)));
        assert_eq!(s.versions(1).unwrap().len(), 2);
        assert_eq!(s.pending_buffers(), 1);
    }

    #[test]
    fn blind_write_ack_and_last_write_wins() {
        let mut s = shard(Versioning::Multi);
        let ack = s.ds_buffer_write(2, 400, ts(9)).unwrap();
        assert_eq!(ack.old, Some((500, Timestamp::GENESIS, Timestamp::GENESIS)));
        s.ds_buffer_write(2, 450, ts(9)).unwrap();
        assert_eq!(s.buffer(ts(9)).unwrap().pending_writes[&2], 450);
        s.ds_read(3, ts(9)).unwrap();
        assert_eq!(s.ds_buffer_write(3, 8, ts(9)).unwrap().old, None);
    }

    #[test]
    fn stale_observation_aborts() {
        let mut s = shard(Versioning::Multi);
        let t1 = rw(&mut s, ts(100), 1, 900);
        let t2 = rw(&mut s, ts(115), 1, 800);
        s.ds_apply_commit(&[t1]);
        assert_eq!(s.ds_occ_check(&t2), Decision::Abort);
    }

    #[test]
    fn old_timestamp_aborts() {
        let mut s = shard(Versioning::Multi);
        let t1 = rw(&mut s, ts(100), 1, 900);
        s.ds_apply_commit(&[t1]);
        let t0 = rw(&mut s, ts(50), 1, 1);
        assert_eq!(s.ds_occ_check(&t0), Decision::Abort);
    }

    #[test]
    fn buffer_mismatch_aborts() {
        let mut s = shard(Versioning::Multi);
        let mut t = rw(&mut s, ts(100), 1, 900);
        t.write_set[0].new_val = 901;
        assert_eq!(s.ds_occ_check(&t), Decision::Abort);
    }

    #[test]
    fn assumed_root_equals_committed_root() {
        let mut s = shard(Versioning::Multi);
        let before = s.root();
        let t = rw(&mut s, ts(100), 1, 900);
        let assumed = s.ds_build_mht(std::slice::from_ref(&t));
        assert_eq!(s.root(), before);
        assert_ne!(assumed, before);
        let mut other = s.clone();
        let t_alt = TxnRecord { write_set: vec![WriteEntry { new_val: 901, ..t.write_set[0] }], ..t.clone() };
        assert_ne!(other.ds_build_mht(std::slice::from_ref(&t_alt)), assumed);
        s.ds_apply_commit(&[t]);
        assert_eq!(s.root(), assumed);
        other.ds_apply_commit(&[t_alt]);
        let rebuilt = mht_build(
            other
                .ds_snapshot_at(ts(1000))
                .unwrap()
                .iter()
                .map(|(id, v)| leaf_hash(*id, v.value, v.r_ts, v.w_ts))
                .collect(),
        )
        .unwrap();
        assert_eq!(other.root(), rebuilt.root());
    }

    #[test]
    fn snapshots_and_version_trees() {
        let mut s = shard(Versioning::Multi);
        let genesis_root = s.root();
        let t = rw(&mut s, ts(100), 1, 900);
        s.ds_apply_commit(&[t]);
        assert_eq!(s.ds_snapshot_at(Timestamp::GENESIS).unwrap()[&1].value, 1000);
        assert_eq!(s.ds_snapshot_at(ts(100)).unwrap()[&1].value, 900);
        assert_eq!(s.ds_snapshot_at(ts(99)).unwrap()[&1].value, 1000);
        assert_eq!(s.tree_at(Timestamp::GENESIS).unwrap().root(), genesis_root);
        assert_eq!(s.tree_at(ts(100)).unwrap().root(), s.root());
        let (root, proofs) = s.prove_at(ts(100), &[1]).unwrap();
        assert_eq!(root, s.root());
        let v = proofs[0].version;
        assert!(crate::merkle::mht_verify(&leaf_hash(1, v.value, v.r_ts, v.w_ts), &proofs[0].vo, &root));
    }

    #[test]
    fn single_version_keeps_only_latest() {
        let mut s = shard(Versioning::Single);
        let t = rw(&mut s, ts(100), 1, 900);
        s.ds_apply_commit(&[t]);
        assert_eq!(s.versions(1).unwrap().len(), 1);
        assert!(matches!(s.ds_snapshot_at(Timestamp::GENESIS), Err(DatastoreError::VersionUnavailable(_))));
        assert_eq!(s.ds_snapshot_at(ts(100)).unwrap()[&1].value, 900);
    }

    #[test]
    fn skipped_value_diverges_root() {
        let mut s = shard(Versioning::Multi);
        let t = rw(&mut s, ts(100), 1, 900);
        let expected = s.ds_build_mht(std::slice::from_ref(&t));
        s.apply_with(&[t], Some(1));
        assert_eq!(s.current(1).unwrap().value, 1000);
        assert_eq!(s.current(1).unwrap().w_ts, ts(100));
        assert_ne!(s.root(), expected);
    }

    #[test]
    fn older_read_keeps_newer_read_ts() {
        let mut s = shard(Versioning::Multi);
        let read = |s: &mut Shard, t: Timestamp| TxnRecord::new(t, vec![s.ds_read(2, t).unwrap()], vec![], 1);
        let late = read(&mut s, ts(200));
        let early = read(&mut s, ts(150));
        s.ds_apply_commit(&[late]);
        assert_eq!(s.current(2).unwrap().r_ts, ts(200));
        let before = s.root();
        s.ds_apply_commit(&[early]);
        assert_eq!(s.current(2).unwrap().r_ts, ts(200));
        assert_eq!(s.versions(2).unwrap().len(), 2);
        assert_eq!(s.root(), before);
    }

    #[test]
    fn initial_data_file() {
        let data = parse_initial_data("1\t10\n# c\n\n2\t-5\n").unwrap();
        assert_eq!(data.into_iter().collect::<Vec<_>>(), vec![(1, 10), (2, -5)]);
        assert!(matches!(parse_initial_data("1 10"), Err(DatastoreError::InitialData { line: 1, .. })));
        assert!(parse_initial_data("1\t1\n1\t2").is_err());
    }
}

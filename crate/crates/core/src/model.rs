//! Transactions, timestamps and blocks, plus their canonical encodings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder, Wire};
use crate::crypto::{sha256, CoSign, GroupKeys, Hash, PublicKey};

pub type ItemId = u64;
pub type Value = i64;
pub type ServerId = u32;

/// Lamport-style commit timestamp, totally ordered by `(counter, client_id)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Timestamp {
    pub counter: u64,
    pub client_id: u32,
}

impl Timestamp {
    pub const GENESIS: Timestamp = Timestamp { counter: 0, client_id: 0 };

    pub fn new(counter: u64, client_id: u32) -> Self {
        Self { counter, client_id }
    }
}

pub fn ts_compare(a: &Timestamp, b: &Timestamp) -> Ordering {
    (a.counter, a.client_id).cmp(&(b.counter, b.client_id))
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        ts_compare(self, other)
    }
}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ts({}.{})", self.counter, self.client_id)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.counter, self.client_id)
    }
}

impl Wire for Timestamp {
    const MIN_LEN: usize = 12;
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.counter).u32(self.client_id);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Timestamp { counter: dec.u64()?, client_id: dec.u32()? })
    }
}

/// Shard that owns `item` among `n_servers` shards.
pub fn owner_of(item: ItemId, n_servers: u32) -> ServerId {
    assert!(n_servers > 0);
    // splitmix64 finalizer
    let mut z = item.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z % n_servers as u64) as ServerId
}

/// Leaf preimage of an item in its shard's Merkle tree.
pub fn leaf_hash(item: ItemId, value: Value, r_ts: Timestamp, w_ts: Timestamp) -> Hash {
    let mut enc = Encoder::with_capacity(40);
    enc.u64(item).i64(value).put(&r_ts).put(&w_ts);
    sha256(&enc.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadEntry {
    pub item: ItemId,
    pub value: Value,
    pub r_ts: Timestamp,
    pub w_ts: Timestamp,
}

/// `old_val` is `None` when the item was read earlier in the same
/// transaction; a blind write carries the value it overwrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteEntry {
    pub item: ItemId,
    pub new_val: Value,
    pub old_val: Option<Value>,
    pub r_ts: Timestamp,
    pub w_ts: Timestamp,
}

impl Wire for ReadEntry {
    const MIN_LEN: usize = 40;
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.item).i64(self.value).put(&self.r_ts).put(&self.w_ts);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(ReadEntry { item: dec.u64()?, value: dec.i64()?, r_ts: dec.get()?, w_ts: dec.get()? })
    }
}

impl Wire for WriteEntry {
    const MIN_LEN: usize = 41;
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.item).i64(self.new_val).put(&self.old_val).put(&self.r_ts).put(&self.w_ts);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(WriteEntry {
            item: dec.u64()?,
            new_val: dec.i64()?,
            old_val: dec.get()?,
            r_ts: dec.get()?,
            w_ts: dec.get()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnRecord {
    pub txn_id: Timestamp,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
    pub shards: BTreeSet<ServerId>,
}

impl TxnRecord {
    /// Sorts both sets by item and derives the touched shards.
    pub fn new(
        txn_id: Timestamp,
        mut read_set: Vec<ReadEntry>,
        mut write_set: Vec<WriteEntry>,
        n_servers: u32,
    ) -> Self {
        read_set.sort_by_key(|r| r.item);
        write_set.sort_by_key(|w| w.item);
        let shards = read_set
            .iter()
            .map(|r| r.item)
            .chain(write_set.iter().map(|w| w.item))
            .map(|i| owner_of(i, n_servers))
            .collect();
        TxnRecord { txn_id, read_set, write_set, shards }
    }

    /// All accessed items, ascending, without duplicates.
    pub fn items(&self) -> BTreeSet<ItemId> {
        self.read_set.iter().map(|r| r.item).chain(self.write_set.iter().map(|w| w.item)).collect()
    }

    pub fn read(&self, item: ItemId) -> Option<&ReadEntry> {
        self.read_set.binary_search_by_key(&item, |r| r.item).ok().map(|i| &self.read_set[i])
    }

    pub fn write(&self, item: ItemId) -> Option<&WriteEntry> {
        self.write_set.binary_search_by_key(&item, |w| w.item).ok().map(|i| &self.write_set[i])
    }

    /// The `(r_ts, w_ts)` the transaction observed for `item`.
    pub fn observed(&self, item: ItemId) -> Option<(Timestamp, Timestamp)> {
        self.read(item).map(|r| (r.r_ts, r.w_ts)).or_else(|| self.write(item).map(|w| (w.r_ts, w.w_ts)))
    }

    pub fn conflicts_with(&self, other: &TxnRecord) -> bool {
        let mine = self.items();
        other.items().iter().any(|i| mine.contains(i))
    }
}

impl Wire for TxnRecord {
    const MIN_LEN: usize = 24;
    fn encode(&self, enc: &mut Encoder) {
        enc.put(&self.txn_id).list(&self.read_set).list(&self.write_set);
        enc.count(self.shards.len());
        for s in &self.shards {
            enc.u32(*s);
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let txn_id = dec.get()?;
        let read_set: Vec<ReadEntry> = dec.list()?;
        let write_set: Vec<WriteEntry> = dec.list()?;
        let shard_list: Vec<u32> = dec.list()?;
        let shards: BTreeSet<u32> = shard_list.iter().copied().collect();
        let sorted = |v: &[u64]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&read_set.iter().map(|r| r.item).collect::<Vec<_>>())
            || !sorted(&write_set.iter().map(|w| w.item).collect::<Vec<_>>())
            || shards.len() != shard_list.len()
            || !shard_list.windows(2).all(|w| w[0] < w[1])
        {
            return Err(DecodeError::Invalid("txn record ordering"));
        }
        Ok(TxnRecord { txn_id, read_set, write_set, shards })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    Commit,
    Abort,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Commit => "commit",
            Decision::Abort => "abort",
        })
    }
}

impl Wire for Decision {
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self {
            Decision::Commit => 1,
            Decision::Abort => 0,
        });
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        match dec.u8()? {
            1 => Ok(Decision::Commit),
            0 => Ok(Decision::Abort),
            tag => Err(DecodeError::BadTag { what: "decision", tag }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub txns: Vec<TxnRecord>,
    /// Roots of the involved shards that voted commit.
    pub roots: BTreeMap<ServerId, Hash>,
    pub decision: Decision,
    pub prev_hash: Hash,
    pub cosign: Option<CoSign>,
}

impl Block {
    pub fn draft(index: u64, txns: Vec<TxnRecord>, prev_hash: Hash) -> Self {
        Block { index, txns, roots: BTreeMap::new(), decision: Decision::Abort, prev_hash, cosign: None }
    }

    /// Union of the shards touched by the block's transactions.
    pub fn involved(&self) -> BTreeSet<ServerId> {
        self.txns.iter().flat_map(|t| t.shards.iter().copied()).collect()
    }

    pub fn max_ts(&self) -> Option<Timestamp> {
        self.txns.iter().map(|t| t.txn_id).max()
    }

    pub fn is_genesis(&self) -> bool {
        self.index == 0
    }

    /// The co-sign preimage: the encoding with the cosign field absent.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(256);
        self.encode_fields(&mut enc);
        enc.u8(0);
        enc.finish()
    }

    pub fn hash(&self) -> Hash {
        sha256(&self.to_bytes())
    }

    fn encode_fields(&self, enc: &mut Encoder) {
        enc.u64(self.index).list(&self.txns);
        enc.count(self.roots.len());
        for (s, h) in &self.roots {
            enc.u32(*s).put(h);
        }
        enc.put(&self.decision).put(&self.prev_hash);
    }
}

pub fn canonical_encode(block: &Block) -> Vec<u8> {
    block.signing_bytes()
}

pub fn block_hash(block: &Block) -> Hash {
    block.hash()
}

impl Wire for Block {
    const MIN_LEN: usize = 50;
    fn encode(&self, enc: &mut Encoder) {
        self.encode_fields(enc);
        enc.put(&self.cosign);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let index = dec.u64()?;
        let txns = dec.list()?;
        let n = dec.count(36)?;
        let mut roots = BTreeMap::new();
        let mut last = None;
        for _ in 0..n {
            let s = dec.u32()?;
            if last.is_some_and(|l| l >= s) {
                return Err(DecodeError::Invalid("root map ordering"));
            }
            last = Some(s);
            roots.insert(s, dec.get()?);
        }
        Ok(Block { index, txns, roots, decision: dec.get()?, prev_hash: dec.get()?, cosign: dec.get()? })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogFileError {
    #[error("missing or malformed key header")]
    Header,
    #[error("block line {index}: {reason}")]
    Block { index: usize, reason: String },
}

/// A log as stored on disk: the group keys and one block per line.
#[derive(Clone, Debug)]
pub struct LogFile {
    pub keys: GroupKeys,
    pub blocks: Vec<Block>,
}

impl LogFile {
    pub fn render(keys: &GroupKeys, blocks: &[Block]) -> String {
        let header: Vec<String> = keys.keys().iter().map(|k| hex::encode(k.to_bytes())).collect();
        let mut out = format!("#keys {}\n", header.join(","));
        for b in blocks {
            out.push_str(&hex::encode(b.to_bytes()));
            out.push('\n');
        }
        out
    }

    /// Lines that are not valid hex or do not decode are reported with the
    /// block index they occupy.
    pub fn parse(text: &str) -> Result<LogFile, LogFileError> {
        let mut lines = text.lines();
        let header = lines.next().and_then(|l| l.strip_prefix("#keys ")).ok_or(LogFileError::Header)?;
        let keys = header
            .split(',')
            .map(|k| {
                let bytes: [u8; 32] = hex::decode(k.trim()).ok()?.try_into().ok()?;
                PublicKey::from_bytes(&bytes)
            })
            .collect::<Option<Vec<_>>>()
            .ok_or(LogFileError::Header)?;
        let blocks = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(index, l)| {
                let bytes = hex::decode(l.trim()).map_err(|e| LogFileError::Block { index, reason: e.to_string() })?;
                Block::from_bytes(&bytes).map_err(|e| LogFileError::Block { index, reason: e.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LogFile { keys: GroupKeys::new(keys), blocks })
    }
}

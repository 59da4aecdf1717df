//! YCSB-style multi-record transactions over the global item pool.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use tfc_core::model::{owner_of, ItemId, Value};
use tfc_core::protocol::messages::ExecOp;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("{ops} distinct items per transaction but only {items} items exist")]
    TooManyOps { ops: usize, items: usize },
    #[error("read ratio {0} is outside [0, 1]")]
    BadReadRatio(String),
}

/// Item ids `0..` assigned to shards until every shard holds exactly
/// `per_shard` of them, with their initial values.
pub fn initial_data(n_servers: u32, per_shard: usize) -> BTreeMap<ItemId, Value> {
    let mut counts = vec![0usize; n_servers as usize];
    let mut full = 0;
    let mut out = BTreeMap::new();
    let mut id: ItemId = 0;
    while full < n_servers as usize {
        let s = owner_of(id, n_servers) as usize;
        if counts[s] < per_shard {
            counts[s] += 1;
            if counts[s] == per_shard {
                full += 1;
            }
            out.insert(id, (id as Value) * 10);
        }
        id += 1;
    }
    out
}

#[derive(Clone, Debug)]
pub struct WorkloadConfig {
    pub ops_per_txn: usize,
    /// Fraction of operations that only read; the rest read then write.
    pub read_ratio: f64,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig { ops_per_txn: 5, read_ratio: 0.0, seed: 1 }
    }
}

/// Draws transactions whose items are distinct and uniform over `items`.
pub struct Workload {
    items: Vec<ItemId>,
    ops: usize,
    read_ratio: f64,
    rng: ChaCha8Rng,
}

impl Workload {
    pub fn new(cfg: &WorkloadConfig, items: impl IntoIterator<Item = ItemId>) -> Result<Self, WorkloadError> {
        let items: Vec<ItemId> = items.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        if cfg.ops_per_txn > items.len() {
            return Err(WorkloadError::TooManyOps { ops: cfg.ops_per_txn, items: items.len() });
        }
        if !(0.0..=1.0).contains(&cfg.read_ratio) {
            return Err(WorkloadError::BadReadRatio(cfg.read_ratio.to_string()));
        }
        Ok(Workload {
            items,
            ops: cfg.ops_per_txn,
            read_ratio: cfg.read_ratio,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn next_txn(&mut self) -> Vec<ExecOp> {
        let picks = sample(&mut self.rng, self.items.len(), self.ops);
        let mut out = Vec::with_capacity(self.ops * 2);
        for p in picks {
            let item = self.items[p];
            out.push(ExecOp::Read(item));
            if !self.rng.gen_bool(self.read_ratio) {
                out.push(ExecOp::Write(item, self.rng.gen_range(0..1_000_000)));
            }
        }
        out
    }
}

impl Iterator for Workload {
    type Item = Vec<ExecOp>;
    fn next(&mut self) -> Option<Vec<ExecOp>> {
        Some(self.next_txn())
    }
}

/// `count` transactions from a fresh generator.
pub fn gen_workload(
    cfg: &WorkloadConfig,
    items: impl IntoIterator<Item = ItemId>,
    count: usize,
) -> Result<Vec<Vec<ExecOp>>, WorkloadError> {
    Ok(Workload::new(cfg, items)?.take(count).collect())
}

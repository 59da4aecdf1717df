//! The replicated hash-chained log of co-signed blocks.

use thiserror::Error;

use crate::crypto::{cosi_verify, GroupKeys, Hash};
use crate::model::{Block, Timestamp};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppendError {
    #[error("expected block index {expected}, got {got}")]
    BadIndex { expected: u64, got: u64 },
    #[error("prev_hash does not match the hash of the tail block")]
    BadPrevHash,
    #[error("block is not co-signed")]
    MissingCoSign,
    #[error("co-sign does not verify against the block and group keys")]
    BadCoSign,
    #[error("transaction timestamp {0} is not above the previous one")]
    NonIncreasingTs(Timestamp),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectError {
    #[error("assumption violated: no correct server (no candidate log is valid)")]
    NoValidLog,
    #[error("valid logs of equal maximal length differ (candidates {0} and {1})")]
    Divergent(usize, usize),
}

/// Checks `block` as the successor of `prev` (or as genesis when `prev` is
/// `None`), given the largest transaction timestamp seen so far.
pub fn check_successor(
    prev: Option<&Block>,
    block: &Block,
    last_ts: Option<Timestamp>,
    keys: &GroupKeys,
) -> Result<(), AppendError> {
    let (expected, prev_hash) = match prev {
        None => (0, Hash::ZERO),
        Some(p) => (p.index + 1, p.hash()),
    };
    if block.index != expected {
        return Err(AppendError::BadIndex { expected, got: block.index });
    }
    if block.prev_hash != prev_hash {
        return Err(AppendError::BadPrevHash);
    }
    let cosign = block.cosign.as_ref().ok_or(AppendError::MissingCoSign)?;
    if !cosi_verify(&block.signing_bytes(), cosign, keys) {
        return Err(AppendError::BadCoSign);
    }
    let mut last = last_ts;
    for t in &block.txns {
        if last.is_some_and(|l| t.txn_id <= l) {
            return Err(AppendError::NonIncreasingTs(t.txn_id));
        }
        last = Some(t.txn_id);
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChainLog {
    blocks: Vec<Block>,
    last_ts: Option<Timestamp>,
}

impl ChainLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps blocks without validating them; use `log_verify` on the result.
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        let last_ts = blocks.iter().flat_map(|b| b.txns.iter().map(|t| t.txn_id)).max();
        ChainLog { blocks, last_ts }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tail(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tail_hash(&self) -> Hash {
        self.tail().map(Block::hash).unwrap_or(Hash::ZERO)
    }

    pub fn next_index(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn last_ts(&self) -> Option<Timestamp> {
        self.last_ts
    }

    pub fn log_append(&mut self, block: Block, keys: &GroupKeys) -> Result<(), AppendError> {
        check_successor(self.tail(), &block, self.last_ts, keys)?;
        if let Some(t) = block.max_ts() {
            self.last_ts = Some(t);
        }
        self.blocks.push(block);
        Ok(())
    }

    /// Drops blocks from `len` on; used to model a server serving a short log.
    pub fn truncate(&mut self, len: usize) {
        self.blocks.truncate(len);
        *self = ChainLog::from_blocks(std::mem::take(&mut self.blocks));
    }
}

/// `Ok(())` when every block is a valid successor of the previous one,
/// otherwise the smallest offending index.
pub fn log_verify(blocks: &[Block], keys: &GroupKeys) -> Result<(), usize> {
    let mut last_ts = None;
    for (i, b) in blocks.iter().enumerate() {
        let prev = if i == 0 { None } else { Some(&blocks[i - 1]) };
        if check_successor(prev, b, last_ts, keys).is_err() {
            return Err(i);
        }
        if let Some(t) = b.max_ts() {
            last_ts = Some(t);
        }
    }
    Ok(())
}

/// Index of the longest fully valid candidate.
pub fn log_select(candidates: &[&[Block]], keys: &GroupKeys) -> Result<usize, SelectError> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.is_empty() || log_verify(c, keys).is_err() {
            continue;
        }
        match best {
            Some(b) if candidates[b].len() > c.len() => {}
            Some(b) if candidates[b].len() == c.len() => {
                if candidates[b] != *c {
                    return Err(SelectError::Divergent(b, i));
                }
            }
            _ => best = Some(i),
        }
    }
    best.ok_or(SelectError::NoValidLog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{
        aggregate_commitments, aggregate_responses, keygen, sch_challenge, sch_commit, sch_respond, CoSign, KeyPair,
    };
    use crate::model::{Decision, TxnRecord};

    fn keys(n: usize) -> (Vec<KeyPair>, GroupKeys) {
        let kps: Vec<_> = (0..n).map(|i| keygen(format!("k{i}").as_bytes())).collect();
        let g = GroupKeys::new(kps.iter().map(|k| *k.public()).collect());
        (kps, g)
    }

    fn cosign(block: &mut Block, kps: &[KeyPair]) {
        let bytes = block.signing_bytes();
        let commits: Vec<_> = (0..kps.len()).map(|i| sch_commit(format!("{}-{i}", block.index).as_bytes())).collect();
        let x = aggregate_commitments(&commits.iter().map(|c| Some(c.commitment())).collect::<Vec<_>>()).unwrap();
        let ch = sch_challenge(&x, &bytes);
        let rs: Vec<_> = commits.into_iter().zip(kps).map(|(c, k)| Some(sch_respond(c, k, &ch))).collect();
        block.cosign = Some(CoSign { challenge: ch.0, response: aggregate_responses(&rs).unwrap() });
    }

    fn chain(n: usize, kps: &[KeyPair]) -> Vec<Block> {
        let mut out: Vec<Block> = Vec::new();
        for i in 0..n {
            let prev = out.last().map(Block::hash).unwrap_or(Hash::ZERO);
            let txns =
                if i == 0 { vec![] } else { vec![TxnRecord::new(Timestamp::new(i as u64 * 10, 1), vec![], vec![], 3)] };
            let mut b = Block::draft(i as u64, txns, prev);
            b.decision = Decision::Commit;
            cosign(&mut b, kps);
            out.push(b);
        }
        out
    }

    #[test]
    fn append_honest_and_reject_bad() {
        let (kps, g) = keys(3);
        let blocks = chain(5, &kps);
        let mut log = ChainLog::new();
        for b in blocks.iter().take(4) {
            log.log_append(b.clone(), &g).unwrap();
        }
        let mut flipped = blocks[4].clone();
        flipped.decision = Decision::Abort;
        assert_eq!(log.log_append(flipped.clone(), &g), Err(AppendError::BadCoSign));
        let mut wrong_prev = blocks[4].clone();
        wrong_prev.prev_hash = blocks[2].hash();
        cosign(&mut wrong_prev, &kps);
        assert_eq!(log.log_append(wrong_prev, &g), Err(AppendError::BadPrevHash));
        let mut stale = blocks[4].clone();
        stale.txns[0].txn_id = Timestamp::new(5, 0);
        cosign(&mut stale, &kps);
        assert!(matches!(log.log_append(stale, &g), Err(AppendError::NonIncreasingTs(_))));
        log.log_append(blocks[4].clone(), &g).unwrap();
        assert_eq!(log.len(), 5);
    }

    #[test]
    fn verify_reports_first_bad_index() {
        let (kps, g) = keys(3);
        let mut blocks = chain(12, &kps);
        assert_eq!(log_verify(&blocks, &g), Ok(()));
        for k in 1..=blocks.len() {
            assert_eq!(log_verify(&blocks[..k], &g), Ok(()));
        }
        blocks.swap(7, 8);
        assert_eq!(log_verify(&blocks, &g), Err(7));
        let mut blocks = chain(12, &kps);
        blocks[3].roots.insert(1, Hash([9; 32]));
        assert_eq!(log_verify(&blocks, &g), Err(3));
    }

    #[test]
    fn select_longest_valid() {
        let (kps, g) = keys(3);
        let full = chain(10, &kps);
        let truncated = full[..7].to_vec();
        let mut tampered = full.clone();
        tampered[5].decision = Decision::Abort;
        let cands: Vec<&[Block]> = vec![&truncated, &tampered, &full];
        assert_eq!(log_select(&cands, &g), Ok(2));
        assert_eq!(log_select(&[&tampered[..]], &g), Err(SelectError::NoValidLog));
        let other = chain(10, &kps[..2]);
        let (_, g2) = keys(2);
        assert_eq!(log_select(&[&other[..]], &g2), Ok(0));
    }

    #[test]
    fn truncate_recomputes_tail_ts() {
        let (kps, g) = keys(2);
        let mut log = ChainLog::new();
        for b in chain(6, &kps) {
            log.log_append(b, &g).unwrap();
        }
        log.truncate(3);
        assert_eq!(log.len(), 3);
        assert_eq!(log.last_ts(), Some(Timestamp::new(20, 1)));
    }
}

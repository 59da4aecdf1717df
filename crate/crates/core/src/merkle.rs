//! Binary Merkle hash trees over a shard's items.
//!
//! Interior nodes are `h(left || right)`. A level with an odd number of nodes
//! promotes its last node unchanged, so a verification object only has a
//! step at the levels where the path node actually has a sibling.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder, Wire};
use crate::crypto::{hash_pair, Hash};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MerkleError {
    #[error("cannot build a tree with no leaves")]
    Empty,
    #[error("leaf index {index} out of range for {len} leaves")]
    OutOfRange { index: usize, len: usize },
}

/// Position of the sibling relative to the path node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoStep {
    pub side: Side,
    pub sibling: Hash,
}

/// Sibling hashes from the leaf level up to (not including) the root.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerificationObject {
    pub steps: Vec<VoStep>,
}

impl VerificationObject {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl Wire for VoStep {
    const MIN_LEN: usize = 33;
    fn encode(&self, enc: &mut Encoder) {
        enc.u8(match self.side {
            Side::Left => 0,
            Side::Right => 1,
        });
        enc.put(&self.sibling);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let side = match dec.u8()? {
            0 => Side::Left,
            1 => Side::Right,
            tag => return Err(DecodeError::BadTag { what: "vo side", tag }),
        };
        Ok(VoStep { side, sibling: dec.get()? })
    }
}

impl Wire for VerificationObject {
    const MIN_LEN: usize = 4;
    fn encode(&self, enc: &mut Encoder) {
        enc.list(&self.steps);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(VerificationObject { steps: dec.list()? })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` are the leaves, the last level holds only the root.
    levels: Vec<Vec<Hash>>,
}

fn parent_level(level: &[Hash]) -> Vec<Hash> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_pair(l, r),
            [single] => *single,
            _ => unreachable!(),
        })
        .collect()
}

pub fn mht_build(leaves: Vec<Hash>) -> Result<MerkleTree, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError::Empty);
    }
    let mut levels = vec![leaves];
    while levels.last().unwrap().len() > 1 {
        let next = parent_level(levels.last().unwrap());
        levels.push(next);
    }
    Ok(MerkleTree { levels })
}

pub fn mht_prove(tree: &MerkleTree, leaf_index: usize) -> Result<VerificationObject, MerkleError> {
    tree.prove(leaf_index)
}

/// Folds `leaf_hash` through the VO and returns the resulting root.
pub fn mht_root_with_update(vo: &VerificationObject, new_leaf_hash: &Hash) -> Hash {
    vo.steps.iter().fold(*new_leaf_hash, |acc, step| match step.side {
        Side::Left => hash_pair(&step.sibling, &acc),
        Side::Right => hash_pair(&acc, &step.sibling),
    })
}

pub fn mht_verify(leaf_hash: &Hash, vo: &VerificationObject, expected_root: &Hash) -> bool {
    mht_root_with_update(vo, leaf_hash) == *expected_root
}

impl MerkleTree {
    pub fn root(&self) -> Hash {
        self.levels.last().unwrap()[0]
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn leaves(&self) -> &[Hash] {
        &self.levels[0]
    }

    pub fn leaf(&self, index: usize) -> Option<&Hash> {
        self.levels[0].get(index)
    }

    fn check(&self, index: usize) -> Result<(), MerkleError> {
        if index >= self.len() {
            return Err(MerkleError::OutOfRange { index, len: self.len() });
        }
        Ok(())
    }

    pub fn prove(&self, leaf_index: usize) -> Result<VerificationObject, MerkleError> {
        self.check(leaf_index)?;
        let mut steps = Vec::new();
        let mut idx = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling = idx ^ 1;
            if sibling < level.len() {
                let side = if sibling < idx { Side::Left } else { Side::Right };
                steps.push(VoStep { side, sibling: level[sibling] });
            }
            idx /= 2;
        }
        Ok(VerificationObject { steps })
    }

    /// Replaces one leaf and rehashes its path to the root.
    pub fn update_leaf(&mut self, index: usize, leaf_hash: Hash) -> Result<(), MerkleError> {
        self.check(index)?;
        self.levels[0][index] = leaf_hash;
        let mut idx = index;
        for depth in 1..self.levels.len() {
            let below = &self.levels[depth - 1];
            let left = idx & !1;
            let node = match below.get(left + 1) {
                Some(r) => hash_pair(&below[left], r),
                None => below[left],
            };
            idx /= 2;
            self.levels[depth][idx] = node;
        }
        Ok(())
    }

    /// Root of this tree with the given leaves replaced, leaving the tree
    /// itself untouched. Later entries for the same index win.
    pub fn root_with_updates(&self, updates: &[(usize, Hash)]) -> Result<Hash, MerkleError> {
        let mut changed: BTreeMap<usize, Hash> = BTreeMap::new();
        for &(idx, h) in updates {
            self.check(idx)?;
            changed.insert(idx, h);
        }
        if changed.is_empty() {
            return Ok(self.root());
        }
        for level in &self.levels[..self.levels.len() - 1] {
            let get = |i: usize, changed: &BTreeMap<usize, Hash>| changed.get(&i).copied().or(level.get(i).copied());
            let mut next = BTreeMap::new();
            for &idx in changed.keys() {
                let left = idx & !1;
                if next.contains_key(&(idx / 2)) {
                    continue;
                }
                let l = get(left, &changed).unwrap();
                let node = match get(left + 1, &changed) {
                    Some(r) => hash_pair(&l, &r),
                    None => l,
                };
                next.insert(idx / 2, node);
            }
            changed = next;
        }
        Ok(changed[&0])
    }
}

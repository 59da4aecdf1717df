use std::fmt;

use curve25519_dalek::scalar::Scalar;
use sha2::{Digest, Sha256};

use crate::codec::{DecodeError, Decoder, Encoder, Wire};

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash(pub [u8; 32]);

impl Hash {
    pub const ZERO: Hash = Hash([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Hash> {
        let bytes = hex::decode(s).ok()?;
        Some(Hash(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..16])
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Wire for Hash {
    const MIN_LEN: usize = 32;
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Hash(dec.fixed()?))
    }
}

pub fn sha256(bytes: &[u8]) -> Hash {
    Hash(Sha256::digest(bytes).into())
}

/// `h(left || right)`, the interior-node rule of the Merkle tree.
pub fn hash_pair(left: &Hash, right: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update(left.0);
    h.update(right.0);
    Hash(h.finalize().into())
}

/// SHA-256 over the concatenation of `parts`, reduced modulo the group order.
pub fn hash_to_scalar(parts: &[&[u8]]) -> Scalar {
    let mut h = Sha256::new();
    for part in parts {
        h.update(part);
    }
    Scalar::from_bytes_mod_order(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_sha256_vector() {
        assert_eq!(sha256(b"abc").to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn pair_is_concatenation() {
        let a = sha256(b"a");
        let b = sha256(b"b");
        let mut cat = a.0.to_vec();
        cat.extend_from_slice(&b.0);
        assert_eq!(hash_pair(&a, &b), sha256(&cat));
        assert_ne!(hash_pair(&a, &b), hash_pair(&b, &a));
    }

    #[test]
    fn hex_roundtrip() {
        let h = sha256(b"x");
        assert_eq!(Hash::from_hex(&h.to_hex()), Some(h));
        assert_eq!(Hash::from_hex("00"), None);
    }
}

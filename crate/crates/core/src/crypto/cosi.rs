use std::collections::BTreeSet;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::RistrettoPoint;
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use thiserror::Error;

use super::{hash_to_scalar, point_from_wire, scalar_from_wire, KeyPair, PublicKey};
use crate::codec::{DecodeError, Decoder, Encoder, Wire};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CosiError {
    #[error("no contributions to aggregate")]
    Empty,
    #[error("missing contribution from server(s) {0:?}")]
    Missing(Vec<u32>),
}

/// A signer's per-round nonce and its commitment `g^nonce`.
///
/// Responding consumes the value, so a nonce cannot be used for two
/// challenges.
pub struct SchnorrCommit {
    nonce: Scalar,
    commitment: RistrettoPoint,
}

impl SchnorrCommit {
    pub fn from_nonce(nonce: Scalar) -> Self {
        Self { nonce, commitment: &nonce * RISTRETTO_BASEPOINT_TABLE }
    }

    pub fn commitment(&self) -> RistrettoPoint {
        self.commitment
    }

    pub fn nonce(&self) -> &Scalar {
        &self.nonce
    }
}

impl std::fmt::Debug for SchnorrCommit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SchnorrCommit({})", &hex::encode(self.commitment.compress().as_bytes())[..16])
    }
}

/// Derives a fresh nonce from `rng_seed`. Callers must never repeat a seed.
pub fn sch_commit(rng_seed: &[u8]) -> SchnorrCommit {
    let mut counter = 0u32;
    loop {
        let nonce = hash_to_scalar(&[b"tfc-cosi-nonce", rng_seed, &counter.to_be_bytes()]);
        if nonce != Scalar::ZERO {
            return SchnorrCommit::from_nonce(nonce);
        }
        counter += 1;
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Challenge(pub Scalar);

/// `ch = H(encode(X) || record)`.
pub fn sch_challenge(aggregate_commitment: &RistrettoPoint, record_bytes: &[u8]) -> Challenge {
    let x = aggregate_commitment.compress();
    Challenge(hash_to_scalar(&[x.as_bytes(), record_bytes]))
}

/// `r = nonce - ch * sk`.
pub fn sch_respond(commit: SchnorrCommit, kp: &KeyPair, ch: &Challenge) -> Scalar {
    commit.nonce - ch.0 * kp.secret
}

fn aggregate<T: Copy>(per_server: &[Option<T>], zero: T, add: impl Fn(T, T) -> T) -> Result<T, CosiError> {
    if per_server.is_empty() {
        return Err(CosiError::Empty);
    }
    let missing: Vec<u32> = per_server.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(i, _)| i as u32).collect();
    if !missing.is_empty() {
        return Err(CosiError::Missing(missing));
    }
    Ok(per_server.iter().flatten().fold(zero, |acc, c| add(acc, *c)))
}

/// Group product of the commitments, indexed by server id.
pub fn aggregate_commitments(per_server: &[Option<RistrettoPoint>]) -> Result<RistrettoPoint, CosiError> {
    aggregate(per_server, RistrettoPoint::identity(), |a, b| a + b)
}

/// Scalar sum of the responses, indexed by server id.
pub fn aggregate_responses(per_server: &[Option<Scalar>]) -> Result<Scalar, CosiError> {
    aggregate(per_server, Scalar::ZERO, |a, b| a + b)
}

/// The collective signature `<ch, R_sch>` stored in each block.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CoSign {
    pub challenge: Scalar,
    pub response: Scalar,
}

impl Wire for CoSign {
    const MIN_LEN: usize = 64;
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(self.challenge.as_bytes()).fixed(self.response.as_bytes());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(CoSign { challenge: scalar_from_wire(dec)?, response: scalar_from_wire(dec)? })
    }
}

/// Wire helpers for bare group elements and scalars in protocol messages.
pub(crate) struct PointWire(pub RistrettoPoint);

impl Wire for PointWire {
    const MIN_LEN: usize = 32;
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(self.0.compress().as_bytes());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        point_from_wire(dec).map(PointWire)
    }
}

pub(crate) struct ScalarWire(pub Scalar);

impl Wire for ScalarWire {
    const MIN_LEN: usize = 32;
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(self.0.as_bytes());
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        scalar_from_wire(dec).map(ScalarWire)
    }
}

/// The public keys of all servers in server-id order, plus their product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupKeys {
    keys: Vec<PublicKey>,
    aggregate: RistrettoPoint,
}

impl GroupKeys {
    pub fn new(keys: Vec<PublicKey>) -> Self {
        let aggregate = keys.iter().fold(RistrettoPoint::identity(), |acc, k| acc + k.point());
        Self { keys, aggregate }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, server: u32) -> Option<&PublicKey> {
        self.keys.get(server as usize)
    }

    pub fn keys(&self) -> &[PublicKey] {
        &self.keys
    }

    pub fn aggregate(&self) -> &RistrettoPoint {
        &self.aggregate
    }
}

impl Wire for GroupKeys {
    fn encode(&self, enc: &mut Encoder) {
        enc.list(&self.keys);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(GroupKeys::new(dec.list()?))
    }
}

/// Checks `ch == H(g^R * (prod pk_i)^ch || record)`.
pub fn cosi_verify(record_bytes: &[u8], cosign: &CoSign, group: &GroupKeys) -> bool {
    if group.is_empty() {
        return false;
    }
    let x = RistrettoPoint::vartime_double_scalar_mul_basepoint(&cosign.challenge, &group.aggregate, &cosign.response);
    sch_challenge(&x, record_bytes).0 == cosign.challenge
}

/// Per-signer check `g^r_i * pk_i^ch == X_i`.
fn signer_ok(pk: &PublicKey, commitment: &RistrettoPoint, response: &Scalar, ch: &Challenge) -> bool {
    RistrettoPoint::vartime_double_scalar_mul_basepoint(&ch.0, pk.point(), response) == *commitment
}

/// Returns the servers whose individual response does not satisfy the
/// per-signer equation, or the empty set when the aggregate verifies.
pub fn cosi_identify_faulty(
    record_bytes: &[u8],
    commitments: &[RistrettoPoint],
    responses: &[Scalar],
    group: &GroupKeys,
) -> BTreeSet<u32> {
    assert_eq!(commitments.len(), group.len());
    assert_eq!(responses.len(), group.len());
    let x: RistrettoPoint = commitments.iter().sum();
    let ch = sch_challenge(&x, record_bytes);
    let cosign = CoSign { challenge: ch.0, response: responses.iter().sum() };
    if cosi_verify(record_bytes, &cosign, group) {
        return BTreeSet::new();
    }
    (0..group.len())
        .filter(|&i| !signer_ok(&group.keys[i], &commitments[i], &responses[i], &ch))
        .map(|i| i as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::keygen;
    use super::*;

    fn group(n: usize) -> (Vec<KeyPair>, GroupKeys) {
        let kps: Vec<KeyPair> = (0..n).map(|i| keygen(format!("server-{i}").as_bytes())).collect();
        let keys = GroupKeys::new(kps.iter().map(|k| *k.public()).collect());
        (kps, keys)
    }

    #[test]
    fn commitment_is_g_to_the_nonce() {
        let c = sch_commit(b"round-1");
        assert_eq!(c.commitment(), c.nonce() * RISTRETTO_BASEPOINT_TABLE);
        assert_ne!(sch_commit(b"round-2").commitment(), c.commitment());
    }

    #[test]
    fn zero_challenge_returns_nonce() {
        let kp = keygen(b"s");
        let c = sch_commit(b"n");
        let nonce = *c.nonce();
        assert_eq!(sch_respond(c, &kp, &Challenge(Scalar::ZERO)), nonce);
    }

    #[test]
    fn singleton_and_missing_aggregation() {
        let c = sch_commit(b"x").commitment();
        assert_eq!(aggregate_commitments(&[Some(c)]).unwrap(), c);
        assert_eq!(aggregate_commitments(&[Some(c), None, Some(c), None]), Err(CosiError::Missing(vec![1, 3])));
        assert_eq!(aggregate_responses(&[]), Err(CosiError::Empty));
    }

    #[test]
    fn honest_round_verifies() {
        let (kps, keys) = group(5);
        let record = b"block bytes".to_vec();
        let commits: Vec<SchnorrCommit> = (0..5).map(|i| sch_commit(format!("n{i}").as_bytes())).collect();
        let points: Vec<_> = commits.iter().map(|c| Some(c.commitment())).collect();
        let x = aggregate_commitments(&points).unwrap();
        let ch = sch_challenge(&x, &record);
        let responses: Vec<_> = commits.into_iter().zip(&kps).map(|(c, kp)| Some(sch_respond(c, kp, &ch))).collect();
        let cosign = CoSign { challenge: ch.0, response: aggregate_responses(&responses).unwrap() };
        assert!(cosi_verify(&record, &cosign, &keys));
        assert!(!cosi_verify(b"other block", &cosign, &keys));
        let (_, other_keys) = group(4);
        assert!(!cosi_verify(&record, &cosign, &other_keys));
    }

    #[test]
    fn challenge_flip_changes_value() {
        let x = sch_commit(b"x").commitment();
        let r = b"record".to_vec();
        let base = sch_challenge(&x, &r);
        assert_eq!(base, sch_challenge(&x, &r));
        for bit in 0..r.len() * 8 {
            let mut r2 = r.clone();
            r2[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(sch_challenge(&x, &r2), base);
        }
    }

    #[test]
    fn cosign_wire_is_64_bytes() {
        let cs = CoSign { challenge: Scalar::from(3u64), response: Scalar::from(4u64) };
        let bytes = cs.to_bytes();
        assert_eq!(bytes.len(), 64);
        assert_eq!(CoSign::from_bytes(&bytes).unwrap(), cs);
        assert!(CoSign::from_bytes(&[0xff; 64]).is_err());
    }
}

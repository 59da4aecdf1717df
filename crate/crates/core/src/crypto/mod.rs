//! Schnorr signatures and collective signing over the Ristretto group.
//!
//! One sign convention is used everywhere: a response is
//! `r = nonce - challenge * secret (mod l)`, so a signer's verification
//! equation is `g^r * pk^challenge == commitment`.

pub(crate) mod cosi;
mod hash;
pub mod vectors;

use std::fmt;

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;

use crate::codec::{DecodeError, Decoder, Encoder, Wire};

pub use cosi::{
    aggregate_commitments, aggregate_responses, cosi_identify_faulty, cosi_verify, sch_challenge, sch_commit,
    sch_respond, Challenge, CoSign, CosiError, GroupKeys, SchnorrCommit,
};
pub use hash::{hash_pair, hash_to_scalar, sha256, Hash};

/// A group element in compressed and decompressed form.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey {
    point: RistrettoPoint,
    compressed: [u8; 32],
}

impl PublicKey {
    pub fn from_point(point: RistrettoPoint) -> Self {
        Self { point, compressed: point.compress().to_bytes() }
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Option<Self> {
        let point = CompressedRistretto(*bytes).decompress()?;
        if point == RistrettoPoint::identity() {
            return None;
        }
        Some(Self { point, compressed: *bytes })
    }

    pub fn point(&self) -> &RistrettoPoint {
        &self.point
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.compressed
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &hex::encode(self.compressed)[..16])
    }
}

impl Wire for PublicKey {
    const MIN_LEN: usize = 32;
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.compressed);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        PublicKey::from_bytes(&dec.fixed()?).ok_or(DecodeError::Invalid("public key"))
    }
}

#[derive(Clone)]
pub struct KeyPair {
    secret: Scalar,
    public: PublicKey,
}

impl KeyPair {
    pub fn secret(&self) -> &Scalar {
        &self.secret
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

/// Deterministic key generation from a seed.
///
/// Panics on an empty seed.
pub fn keygen(seed: &[u8]) -> KeyPair {
    assert!(!seed.is_empty(), "keygen seed must be nonempty");
    let mut counter = 0u32;
    loop {
        let secret = hash_to_scalar(&[b"tfc-keygen", seed, &counter.to_be_bytes()]);
        if secret != Scalar::ZERO {
            let public = PublicKey::from_point(&secret * RISTRETTO_BASEPOINT_TABLE);
            return KeyPair { secret, public };
        }
        counter += 1;
    }
}

/// A Schnorr signature `(R, s)` with `g^s * pk^e == R`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

impl Wire for Signature {
    const MIN_LEN: usize = 64;
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Signature(dec.fixed()?))
    }
}

fn signature_challenge(nonce_point: &[u8; 32], pk: &PublicKey, message: &[u8]) -> Scalar {
    hash_to_scalar(&[b"tfc-sig", nonce_point, &pk.compressed, message])
}

pub fn sign(message: &[u8], kp: &KeyPair) -> Signature {
    let nonce = hash_to_scalar(&[b"tfc-sig-nonce", kp.secret.as_bytes(), message]);
    let r_point = (&nonce * RISTRETTO_BASEPOINT_TABLE).compress().to_bytes();
    let e = signature_challenge(&r_point, &kp.public, message);
    let s = nonce - e * kp.secret;
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(&r_point);
    out[32..].copy_from_slice(s.as_bytes());
    Signature(out)
}

/// Never panics: malformed encodings simply fail verification.
pub fn verify(message: &[u8], sig: &Signature, pk: &PublicKey) -> bool {
    let r_bytes: [u8; 32] = sig.0[..32].try_into().unwrap();
    let s_bytes: [u8; 32] = sig.0[32..].try_into().unwrap();
    let Some(s) = Option::<Scalar>::from(Scalar::from_canonical_bytes(s_bytes)) else {
        return false;
    };
    let e = signature_challenge(&r_bytes, pk, message);
    let expected = RistrettoPoint::vartime_double_scalar_mul_basepoint(&e, &pk.point, &s);
    expected.compress().to_bytes() == r_bytes
}

pub(crate) fn scalar_from_wire(dec: &mut Decoder<'_>) -> Result<Scalar, DecodeError> {
    let bytes: [u8; 32] = dec.fixed()?;
    Option::from(Scalar::from_canonical_bytes(bytes)).ok_or(DecodeError::Invalid("scalar"))
}

pub(crate) fn point_from_wire(dec: &mut Decoder<'_>) -> Result<RistrettoPoint, DecodeError> {
    let bytes: [u8; 32] = dec.fixed()?;
    CompressedRistretto(bytes).decompress().ok_or(DecodeError::Invalid("group element"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;

    /// Double-and-add over the bits of the scalar using only point addition.
    fn slow_basepoint_mul(s: &Scalar) -> RistrettoPoint {
        let mut acc = RistrettoPoint::identity();
        let mut addend = RISTRETTO_BASEPOINT_POINT;
        for byte in s.as_bytes() {
            for bit in 0..8 {
                if (byte >> bit) & 1 == 1 {
                    acc += addend;
                }
                addend += addend;
            }
        }
        acc
    }

    #[test]
    fn keygen_is_deterministic_and_injective() {
        let a = keygen(b"s1");
        let b = keygen(b"s1");
        let c = keygen(b"s2");
        assert_eq!(a.public, b.public);
        assert_eq!(a.secret, b.secret);
        assert_ne!(a.public, c.public);
    }

    #[test]
    fn public_key_matches_independent_exponentiation() {
        for seed in [&b"s1"[..], b"s2", b"server-0", b"a much longer seed value"] {
            let kp = keygen(seed);
            assert_eq!(slow_basepoint_mul(&kp.secret), kp.public.point);
            assert_ne!(kp.public.point, RistrettoPoint::identity());
        }
    }

    #[test]
    #[should_panic]
    fn empty_seed_panics() {
        keygen(b"");
    }

    #[test]
    fn sign_verify_roundtrip_and_tamper() {
        let kp = keygen(b"s1");
        let m = b"end_transaction".to_vec();
        let sig = sign(&m, &kp);
        assert!(verify(&m, &sig, &kp.public));
        let mut m2 = m.clone();
        m2.push(0);
        assert!(!verify(&m2, &sig, &kp.public));
        assert!(!verify(&m, &sig, keygen(b"s2").public()));
    }

    #[test]
    fn malformed_signatures_fail_without_panicking() {
        let kp = keygen(b"s1");
        assert!(!verify(b"m", &Signature([0xff; 64]), &kp.public));
        assert!(!verify(b"m", &Signature([0; 64]), &kp.public));
    }

    #[test]
    fn public_key_rejects_identity_and_garbage() {
        assert!(PublicKey::from_bytes(&[0; 32]).is_none());
        assert!(PublicKey::from_bytes(&[0xff; 32]).is_none());
    }
}

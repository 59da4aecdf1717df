//! Signature test vectors: one record per line,
//! `hex(seed) hex(public_key) hex(message) hex(signature)`. An empty message
//! is written as `-`.

use super::{keygen, sign, verify, PublicKey, Signature};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vector {
    pub seed: Vec<u8>,
    pub public_key: [u8; 32],
    pub message: Vec<u8>,
    pub signature: [u8; 64],
}

impl Vector {
    pub fn generate(seed: &[u8], message: &[u8]) -> Vector {
        let kp = keygen(seed);
        Vector {
            seed: seed.to_vec(),
            public_key: kp.public().to_bytes(),
            message: message.to_vec(),
            signature: sign(message, &kp).0,
        }
    }

    /// The key must re-derive from the seed, the signature must be the
    /// deterministic one and it must verify.
    pub fn check(&self) -> bool {
        let kp = keygen(&self.seed);
        let Some(pk) = PublicKey::from_bytes(&self.public_key) else {
            return false;
        };
        kp.public().to_bytes() == self.public_key
            && sign(&self.message, &kp).0 == self.signature
            && verify(&self.message, &Signature(self.signature), &pk)
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {}",
            hex::encode(&self.seed),
            hex::encode(self.public_key),
            if self.message.is_empty() { "-".to_string() } else { hex::encode(&self.message) },
            hex::encode(self.signature)
        )
    }

    pub fn parse_line(line: &str) -> Option<Vector> {
        let mut fields = line.split_whitespace();
        let seed = hex::decode(fields.next()?).ok()?;
        let public_key = hex::decode(fields.next()?).ok()?.try_into().ok()?;
        let message = match fields.next()? {
            "-" => Vec::new(),
            m => hex::decode(m).ok()?,
        };
        let signature = hex::decode(fields.next()?).ok()?.try_into().ok()?;
        if fields.next().is_some() {
            return None;
        }
        Some(Vector { seed, public_key, message, signature })
    }
}

/// Deterministic corpus of `count` vectors with varying message lengths.
pub fn generate(count: usize) -> Vec<Vector> {
    (0..count)
        .map(|i| {
            let seed = format!("vector-seed-{i}");
            let message: Vec<u8> = (0..(i * 7) % 97).map(|j| (i * 31 + j * 17) as u8).collect();
            Vector::generate(seed.as_bytes(), &message)
        })
        .collect()
}

pub fn render(vectors: &[Vector]) -> String {
    let mut out = String::new();
    for v in vectors {
        out.push_str(&v.to_line());
        out.push('\n');
    }
    out
}

/// Parses a vector file; `#` starts a comment line. Returns the 1-based
/// number of the first malformed line on failure.
pub fn parse(text: &str) -> Result<Vec<Vector>, usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| Vector::parse_line(l).ok_or(i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let vs = generate(12);
        let parsed = parse(&render(&vs)).unwrap();
        assert_eq!(parsed, vs);
        assert!(parsed.iter().all(Vector::check));
    }

    #[test]
    fn altered_vector_fails_check() {
        let mut v = generate(3).remove(2);
        v.message.push(1);
        assert!(!v.check());
        assert_eq!(parse("zz 00 00 00\n"), Err(1));
    }
}

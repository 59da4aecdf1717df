use tfc_core::crypto::{cosi_verify, sch_challenge, GroupKeys};
use tfc_core::model::{Block, Decision};
use tfc_core::protocol::messages::{open_server, Endpoint, Payload, RefusalReason};
use tfc_core::protocol::COORDINATOR;

use crate::{normalize, Finding, FindingKind};

/// Every non-genesis block must carry the shard roots its decision implies.
pub fn audit_atomicity(log: &[Block], keys: &GroupKeys) -> Vec<Finding> {
    let mut out = Vec::new();
    for b in log.iter().filter(|b| !b.is_genesis()) {
        let involved = b.involved();
        let rooted: std::collections::BTreeSet<_> = b.roots.keys().copied().collect();
        let problem = if !b.cosign.as_ref().is_some_and(|c| cosi_verify(&b.signing_bytes(), c, keys)) {
            Some("co-sign does not verify".to_string())
        } else if !rooted.is_subset(&involved) {
            Some(format!("roots {rooted:?} include uninvolved shards of {involved:?}"))
        } else if b.decision == Decision::Commit && rooted != involved {
            Some(format!("commit without roots from all of {involved:?}"))
        } else if b.decision == Decision::Abort && rooted == involved && !involved.is_empty() {
            Some("abort although every involved shard supplied a root".to_string())
        } else {
            None
        };
        if let Some(p) = problem {
            out.push(Finding::new(FindingKind::AtomicityViolation, COORDINATOR, b.index, p));
        }
    }
    out
}

/// Checks the signed messages servers kept: decisions they rejected and
/// refusals they sent or received.
pub fn audit_evidence(envelopes: &[Vec<u8>], keys: &GroupKeys) -> Vec<Finding> {
    let mut out = Vec::new();
    for raw in envelopes {
        let Ok(env) = open_server(raw, keys) else { continue };
        match env.payload {
            Payload::Decision { block, .. } if env.sender == Endpoint::Server(COORDINATOR) => {
                let ok = block.cosign.as_ref().is_some_and(|c| cosi_verify(&block.signing_bytes(), c, keys));
                if !ok {
                    out.push(Finding::new(
                        FindingKind::BadCoSign,
                        COORDINATOR,
                        block.index,
                        format!("signed decision for block {} carries an invalid co-sign", block.index),
                    ));
                }
            }
            Payload::Refusal { reason, proof, .. } => {
                let Endpoint::Server(by) = env.sender else { continue };
                out.extend(refusal_finding(by, reason, &proof, keys));
            }
            _ => {}
        }
    }
    normalize(out)
}

fn refusal_finding(by: u32, reason: RefusalReason, proof: &[u8], keys: &GroupKeys) -> Option<Finding> {
    let env = open_server(proof, keys).ok()?;
    if env.sender != Endpoint::Server(COORDINATOR) {
        return None;
    }
    let Payload::Challenge { block, aggregate, challenge, .. } = env.payload else { return None };
    let (kind, what) = match reason {
        RefusalReason::ChallengeMismatch => {
            if sch_challenge(&aggregate, &block.signing_bytes()).0 == challenge && block.cosign.is_none() {
                return None;
            }
            (FindingKind::SplitChallenge, "challenge does not commit to the challenged block")
        }
        RefusalReason::RootMismatch => (FindingKind::ForgedRoot, "challenged block misstates the refuser's root"),
        RefusalReason::Inconsistent => (FindingKind::AtomicityViolation, "challenged block contradicts its own roots"),
        RefusalReason::DraftMismatch => {
            (FindingKind::AtomicityViolation, "challenged block differs from the voted batch")
        }
        RefusalReason::StaleDraft | RefusalReason::InvalidRequest => return None,
    };
    Some(Finding::new(kind, COORDINATOR, block.index, format!("refused by server {by}: {what}")))
}

//! The offline auditor. It collects every server's copy of the log, picks
//! the longest valid one and checks it, the servers' retained evidence and
//! the servers' shard states for the first point of misbehavior.

mod evidence;
mod integrity;
mod reads;
mod serial;
mod store;

use std::collections::BTreeSet;
use std::fmt;

use serde_json::json;
use thiserror::Error;

use tfc_core::crypto::{sha256, GroupKeys, Hash};
use tfc_core::datastore::{ItemProof, Versioning};
use tfc_core::model::{Block, ItemId, ServerId, Timestamp};
use tfc_core::protocol::{Event, FailReason, Server};

pub use evidence::{audit_atomicity, audit_evidence};
pub use integrity::audit_log_integrity;
pub use reads::{audit_reads, GenesisValues};
pub use serial::audit_serializability;
pub use store::audit_datastore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FindingKind {
    IncorrectRead,
    DataCorruption,
    SerializabilityViolation,
    BadCoSign,
    AtomicityViolation,
    LogTamper,
    LogTruncation,
    /// A cohort refused a challenge because its own root was replaced.
    ForgedRoot,
    /// A cohort was challenged with a value that does not match the block.
    SplitChallenge,
    /// A Schnorr response that fails its signer's check.
    BadResponse,
    /// A server did not answer an audit query.
    AuditEvasion,
}

impl FindingKind {
    pub fn name(self) -> &'static str {
        match self {
            FindingKind::IncorrectRead => "IncorrectRead",
            FindingKind::DataCorruption => "DataCorruption",
            FindingKind::SerializabilityViolation => "SerializabilityViolation",
            FindingKind::BadCoSign => "BadCoSign",
            FindingKind::AtomicityViolation => "AtomicityViolation",
            FindingKind::LogTamper => "LogTamper",
            FindingKind::LogTruncation => "LogTruncation",
            FindingKind::ForgedRoot => "ForgedRoot",
            FindingKind::SplitChallenge => "SplitChallenge",
            FindingKind::BadResponse => "BadResponse",
            FindingKind::AuditEvasion => "AuditEvasion",
        }
    }
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finding {
    pub kind: FindingKind,
    pub servers: BTreeSet<ServerId>,
    pub index: u64,
    /// Version timestamp, for data corruption.
    pub version: Option<Timestamp>,
    pub evidence: String,
}

impl Finding {
    pub fn new(kind: FindingKind, server: ServerId, index: u64, evidence: impl Into<String>) -> Self {
        Finding { kind, servers: [server].into(), index, version: None, evidence: evidence.into() }
    }

    pub fn digest(&self) -> Hash {
        sha256(self.evidence.as_bytes())
    }

    fn servers_str(&self) -> String {
        self.servers.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    }

    /// `kind servers index version digest evidence`, space separated.
    pub fn to_line(&self) -> String {
        let version = self.version.map_or("-".to_string(), |v| v.to_string());
        format!(
            "{} servers={} index={} version={} digest={} {}",
            self.kind,
            self.servers_str(),
            self.index,
            version,
            &self.digest().to_hex()[..16],
            self.evidence
        )
    }

    pub fn to_json(&self) -> String {
        json!({
            "kind": self.kind.name(),
            "servers": self.servers.iter().collect::<Vec<_>>(),
            "index": self.index,
            "version": self.version.map(|v| v.to_string()),
            "digest": self.digest().to_hex(),
            "evidence": self.evidence,
        })
        .to_string()
    }

    fn key(&self) -> (u64, FindingKind, BTreeSet<ServerId>, Option<Timestamp>) {
        (self.index, self.kind, self.servers.clone(), self.version)
    }
}

/// Sorts by location and drops repeats of the same (location, kind, servers).
pub fn normalize(mut findings: Vec<Finding>) -> Vec<Finding> {
    findings.sort_by_key(Finding::key);
    findings.dedup_by(|a, b| a.key() == b.key());
    findings
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("assumption violated: no correct server (no candidate log is valid)")]
    NoValidLog,
    #[error("servers {0} and {1} hold different valid logs of the same length")]
    Divergent(ServerId, ServerId),
}

/// What the auditor can ask of a server.
pub trait AuditTarget {
    fn id(&self) -> ServerId;
    fn log(&mut self) -> Vec<Block>;
    /// The shard root at `version` with proofs for `items`.
    fn prove_at(&mut self, version: Timestamp, items: &[ItemId]) -> Result<(Hash, Vec<ItemProof>), String>;
    fn evidence(&mut self) -> Vec<Vec<u8>>;
    /// Whether the shard can be queried; log-only targets skip data audits.
    fn live(&self) -> bool {
        true
    }
}

impl AuditTarget for Server {
    fn id(&self) -> ServerId {
        Server::id(self)
    }
    fn log(&mut self) -> Vec<Block> {
        self.serve_log()
    }
    fn prove_at(&mut self, version: Timestamp, items: &[ItemId]) -> Result<(Hash, Vec<ItemProof>), String> {
        Server::prove_at(self, version, items).map_err(|e| e.to_string())
    }
    fn evidence(&mut self) -> Vec<Vec<u8>> {
        Server::evidence(self).to_vec()
    }
}

/// A log copy read from disk.
#[derive(Clone, Debug)]
pub struct LogOnly {
    pub id: ServerId,
    pub blocks: Vec<Block>,
}

impl AuditTarget for LogOnly {
    fn id(&self) -> ServerId {
        self.id
    }
    fn log(&mut self) -> Vec<Block> {
        self.blocks.clone()
    }
    fn prove_at(&mut self, _: Timestamp, _: &[ItemId]) -> Result<(Hash, Vec<ItemProof>), String> {
        Err("log-only target".into())
    }
    fn evidence(&mut self) -> Vec<Vec<u8>> {
        Vec::new()
    }
    fn live(&self) -> bool {
        false
    }
}

/// Findings the coordinator established during a round: servers whose
/// Schnorr response failed the per-signer check.
pub fn findings_from_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> Vec<Finding> {
    let mut out = Vec::new();
    for e in events {
        if let Event::RoundFailed { index, reason: FailReason::Faulty(servers), round } = e {
            if !servers.is_empty() {
                out.push(Finding {
                    kind: FindingKind::BadResponse,
                    servers: servers.clone(),
                    index: *index,
                    version: None,
                    evidence: format!("round {round}: response fails g^r * pk^ch == X_i"),
                });
            }
        }
    }
    normalize(out)
}

#[derive(Clone, Debug)]
pub struct AuditConfig<'a> {
    pub keys: &'a GroupKeys,
    pub genesis: GenesisValues,
    pub versioning: Versioning,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    /// Index into the candidates of the log that was audited.
    pub selected: usize,
    pub log_len: usize,
    /// Findings at the earliest violating location only.
    pub findings: Vec<Finding>,
    /// Everything any check reported, sorted by location.
    pub all: Vec<Finding>,
}

impl Report {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn render_text(&self) -> String {
        let mut s = format!("audited log: {} blocks (copy {})\n", self.log_len, self.selected);
        if self.findings.is_empty() {
            s.push_str("no findings\n");
        }
        for f in &self.findings {
            s.push_str(&f.to_line());
            s.push('\n');
        }
        s
    }

    pub fn render_json(&self) -> String {
        self.findings.iter().map(|f| f.to_json() + "\n").collect()
    }
}

/// Runs every audit and keeps the earliest violations. `round_findings`
/// are the coordinator's in-round results, e.g. from
/// [`findings_from_events`].
pub fn audit_full(
    cfg: &AuditConfig<'_>,
    targets: &mut [&mut dyn AuditTarget],
    round_findings: &[Finding],
) -> Result<Report, AuditError> {
    let candidates: Vec<(ServerId, Vec<Block>)> = targets.iter_mut().map(|t| (t.id(), t.log())).collect();
    let (selected, mut all) = audit_log_integrity(&candidates, cfg.keys)?;
    let log = &candidates[selected].1;
    all.extend(audit_atomicity(log, cfg.keys));
    let evidence: Vec<Vec<u8>> = targets.iter_mut().flat_map(|t| t.evidence()).collect();
    all.extend(audit_evidence(&evidence, cfg.keys));
    all.extend(round_findings.iter().cloned());
    let n = cfg.keys.len() as u32;
    all.extend(audit_reads(log, n, &cfg.genesis));
    all.extend(audit_serializability(log, n));
    for t in targets.iter_mut() {
        if t.live() {
            all.extend(audit_datastore(&mut **t, log, cfg));
        }
    }
    let all = normalize(all);
    let first = all.first().map(|f| f.index);
    let findings = all.iter().filter(|f| Some(f.index) == first).cloned().collect();
    Ok(Report { selected, log_len: log.len(), findings, all })
}

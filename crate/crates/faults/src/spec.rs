use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use tfc_core::model::{ItemId, ServerId, Timestamp, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    /// F1: serve a stale value for a read.
    IncorrectRead,
    /// F2: coordinator puts a bogus root for a victim into the block.
    ForgedRoot,
    /// F3: leave one committed write uninstalled.
    DataCorruption,
    /// F4a: one group gets a different block under the same challenge.
    SplitChallengeSameCh,
    /// F4b: two groups get different blocks, each with its own challenge.
    SplitChallengeTwoCh,
    /// F5: send a random Schnorr response.
    BadResponse,
    /// F6: serve an altered log to the auditor.
    LogMutate,
    /// F7: serve a shortened log to the auditor.
    LogTruncate,
    /// F8: vote commit regardless of the OCC check.
    SkipOcc,
}

impl FaultKind {
    pub const ALL: [FaultKind; 9] = [
        FaultKind::IncorrectRead,
        FaultKind::ForgedRoot,
        FaultKind::DataCorruption,
        FaultKind::SplitChallengeSameCh,
        FaultKind::SplitChallengeTwoCh,
        FaultKind::BadResponse,
        FaultKind::LogMutate,
        FaultKind::LogTruncate,
        FaultKind::SkipOcc,
    ];

    pub fn code(self) -> &'static str {
        match self {
            FaultKind::IncorrectRead => "F1",
            FaultKind::ForgedRoot => "F2",
            FaultKind::DataCorruption => "F3",
            FaultKind::SplitChallengeSameCh => "F4a",
            FaultKind::SplitChallengeTwoCh => "F4b",
            FaultKind::BadResponse => "F5",
            FaultKind::LogMutate => "F6",
            FaultKind::LogTruncate => "F7",
            FaultKind::SkipOcc => "F8",
        }
    }

    /// Faults only the coordinator can commit.
    pub fn needs_coordinator(self) -> bool {
        matches!(self, FaultKind::ForgedRoot | FaultKind::SplitChallengeSameCh | FaultKind::SplitChallengeTwoCh)
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for FaultKind {
    type Err = FaultError;
    fn from_str(s: &str) -> Result<Self, FaultError> {
        let names = [
            ("incorrect-read", FaultKind::IncorrectRead),
            ("forged-root", FaultKind::ForgedRoot),
            ("data-corruption", FaultKind::DataCorruption),
            ("split-same-ch", FaultKind::SplitChallengeSameCh),
            ("split-two-ch", FaultKind::SplitChallengeTwoCh),
            ("bad-response", FaultKind::BadResponse),
            ("log-mutate", FaultKind::LogMutate),
            ("log-truncate", FaultKind::LogTruncate),
            ("skip-occ", FaultKind::SkipOcc),
        ];
        FaultKind::ALL
            .iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .copied()
            .or_else(|| names.iter().find(|(n, _)| n.eq_ignore_ascii_case(s)).map(|(_, k)| *k))
            .ok_or_else(|| FaultError::Parse { line: 0, reason: format!("unknown fault kind `{s}`") })
    }
}

/// When a fault becomes eligible to fire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trigger {
    /// At or after this block index.
    FromBlock(u64),
    /// Only for batches holding a transaction from this client id.
    ClientId(u32),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultSpec {
    pub target: ServerId,
    pub kind: FaultKind,
    pub trigger: Trigger,
    /// F1/F3: restrict to this item.
    pub item: Option<ItemId>,
    /// F1: serve this value instead of the previous version's.
    pub value: Option<Value>,
    /// F2: the server whose root is replaced.
    pub victim: Option<ServerId>,
    /// F4a/F4b: the servers that receive the deviating block.
    pub group: Option<BTreeSet<ServerId>>,
    /// F5: seeds the bogus response.
    pub seed: u64,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, target: ServerId, from_block: u64) -> Self {
        FaultSpec {
            target,
            kind,
            trigger: Trigger::FromBlock(from_block),
            item: None,
            value: None,
            victim: None,
            group: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FaultError {
    #[error("{kind} can only be installed on the coordinator, not server {target}")]
    NeedsCoordinator { kind: FaultKind, target: ServerId },
    #[error("no server {0}")]
    UnknownServer(ServerId),
    #[error("scenario line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// What an injected fault actually did, for comparison with audit output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionRecord {
    pub kind: FaultKind,
    pub servers: BTreeSet<ServerId>,
    /// Block index, when known at injection time.
    pub index: Option<u64>,
    /// The affected transaction, when the block is decided later.
    pub txn: Option<Timestamp>,
    pub item: Option<ItemId>,
    /// Version timestamp of the corrupted state.
    pub version: Option<Timestamp>,
}

impl InjectionRecord {
    pub(crate) fn at(kind: FaultKind, server: ServerId, index: u64) -> Self {
        InjectionRecord { kind, servers: [server].into(), index: Some(index), txn: None, item: None, version: None }
    }
}

/// Parses a scenario file: `[fault]` sections of `key = value` lines.
///
/// ```text
/// [fault]
/// kind = F3
/// target = 2
/// block = 10
/// ```
pub fn parse_scenario(text: &str) -> Result<Vec<FaultSpec>, FaultError> {
    let mut out = Vec::new();
    // Start line of the open section and its (line, key, value) entries.
    let mut cur: Option<(usize, Vec<Entry>)> = None;
    let err = |line: usize, reason: String| FaultError::Parse { line, reason };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.split('#').next().unwrap().trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('[') {
            if t != "[fault]" {
                return Err(err(line, format!("unknown section {t}")));
            }
            if let Some((start, kv)) = cur.take() {
                out.push(build(start, kv)?);
            }
            cur = Some((line, Vec::new()));
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| err(line, "expected key = value".into()))?;
        let Some((_, kv)) = cur.as_mut() else { return Err(err(line, "key outside a [fault] section".into())) };
        kv.push((line, k.trim().to_string(), v.trim().to_string()));
    }
    if let Some((start, kv)) = cur {
        out.push(build(start, kv)?);
    }
    Ok(out)
}

type Entry = (usize, String, String);

fn build(start: usize, kv: Vec<Entry>) -> Result<FaultSpec, FaultError> {
    let mut kind = None;
    let mut target = None;
    let mut spec = FaultSpec::new(FaultKind::IncorrectRead, 0, 1);
    for (line, k, v) in kv {
        let err = |reason: String| FaultError::Parse { line, reason };
        let num = |v: &str| v.parse::<u64>().map_err(|_| err(format!("`{k}` expects a number")));
        match k.as_str() {
            "kind" => kind = Some(v.parse::<FaultKind>().map_err(|_| err(format!("unknown fault kind `{v}`")))?),
            "target" => target = Some(num(&v)? as ServerId),
            "block" => spec.trigger = Trigger::FromBlock(num(&v)?),
            "client" => spec.trigger = Trigger::ClientId(num(&v)? as u32),
            "item" => spec.item = Some(num(&v)?),
            "value" => spec.value = Some(v.parse().map_err(|_| err("`value` expects an integer".into()))?),
            "victim" => spec.victim = Some(num(&v)? as ServerId),
            "seed" => spec.seed = num(&v)?,
            "group" => {
                let g = v
                    .split(',')
                    .map(|s| s.trim().parse::<ServerId>())
                    .collect::<Result<BTreeSet<_>, _>>()
                    .map_err(|_| err("`group` expects a comma-separated server list".into()))?;
                spec.group = Some(g);
            }
            _ => return Err(err(format!("unknown key `{k}`"))),
        }
    }
    spec.kind = kind.ok_or(FaultError::Parse { line: start, reason: "missing `kind`".into() })?;
    spec.target = target.ok_or(FaultError::Parse { line: start, reason: "missing `target`".into() })?;
    Ok(spec)
}

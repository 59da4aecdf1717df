use tfc_core::chainlog::{log_select, log_verify, SelectError};
use tfc_core::crypto::GroupKeys;
use tfc_core::model::{Block, ServerId};

use crate::{AuditError, Finding, FindingKind};

/// Picks the longest valid log and compares every other copy against it.
/// Returns the position of the chosen copy in `candidates`.
pub fn audit_log_integrity(
    candidates: &[(ServerId, Vec<Block>)],
    keys: &GroupKeys,
) -> Result<(usize, Vec<Finding>), AuditError> {
    let logs: Vec<&[Block]> = candidates.iter().map(|(_, b)| b.as_slice()).collect();
    let selected = log_select(&logs, keys).map_err(|e| match e {
        SelectError::NoValidLog => AuditError::NoValidLog,
        SelectError::Divergent(a, b) => AuditError::Divergent(candidates[a].0, candidates[b].0),
    })?;
    let truth = logs[selected];
    let mut out = Vec::new();
    for (server, log) in candidates {
        let first_diff = log.iter().zip(truth).position(|(a, b)| a != b);
        let finding = match (log_verify(log, keys), first_diff) {
            (Err(i), _) => Some(Finding::new(
                FindingKind::LogTamper,
                *server,
                i as u64,
                format!("block {i} of the served log does not verify"),
            )),
            (Ok(()), Some(i)) => Some(Finding::new(
                FindingKind::LogTamper,
                *server,
                i as u64,
                format!("served log is valid but departs from the selected log at block {i}"),
            )),
            (Ok(()), None) if log.len() < truth.len() => Some(Finding::new(
                FindingKind::LogTruncation,
                *server,
                log.len() as u64,
                format!("served {} of {} blocks", log.len(), truth.len()),
            )),
            _ => None,
        };
        out.extend(finding);
    }
    Ok((selected, out))
}

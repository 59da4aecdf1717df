//! Trust-free atomic commitment over a sharded, Merkle-authenticated store.
//!
//! Servers run a two-phase commit whose votes and decision are collectively
//! Schnorr-signed into a hash-chained log; an offline auditor replays that
//! log against the servers to pin down which server misbehaved and where.

pub mod chainlog;
pub mod codec;
pub mod crypto;
pub mod datastore;
pub mod merkle;
pub mod model;
pub mod protocol;

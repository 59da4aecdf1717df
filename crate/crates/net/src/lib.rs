//! Message delivery between cluster nodes.
//!
//! [`sim::Sim`] is a seeded discrete-event network with FIFO links and
//! hooks to drop or tamper with envelopes. [`tcp::TcpNet`] runs the same
//! nodes on threads over loopback sockets with length-prefixed frames.

pub mod sim;
pub mod tcp;

use tfc_core::protocol::messages::Endpoint;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("no node registered for {0:?}")]
    UnknownDestination(Endpoint),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
}

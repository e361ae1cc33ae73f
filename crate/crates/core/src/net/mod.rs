//! Live loopback cluster: stub inference nodes, the session-affinity
//! gateway, and a trace-replaying load driver, all speaking the framed
//! protocol over TCP. Nodes burn real wall-clock time according to the same
//! cost model the simulator prices, so a live run and a simulated run of the
//! same scenario can be compared line by line.

pub mod driver;
pub mod gateway;
pub mod node;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Proto(#[from] crate::proto::ProtoError),
    #[error(transparent)]
    Ring(#[from] crate::ring::RingError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),
    #[error("protocol violation: {0}")]
    Unexpected(String),
    #[error("bad cluster config: {0}")]
    Config(String),
}

pub(crate) fn micros_ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

//! Session-sticky, cache-aware inference serving: a consistent-hash routing
//! gateway, per-node prefix-cache model, parametric latency/throughput cost
//! model, clinical workload generators, and a deterministic discrete-event
//! simulator that ties them together. A live network mode (`net`) applies the
//! same routing and cost semantics to real TCP traffic against stub nodes.

pub mod cache;
pub mod cost;
pub mod hash;
pub mod health;
pub mod metrics;
pub mod net;
pub mod proto;
pub mod ring;
pub mod rngstream;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod workload;

pub use cache::{CacheOutcome, NodeCache};
pub use cost::{CostModel, CostPreset, PresetName, StageDistribution};
pub use health::{HealthConfig, NodeHealth, NodeState};
pub use metrics::{RunReport, TurnOutcome};
pub use ring::{NodeId, RemapReport, Ring, SessionId};
pub use scenario::{RoutingPolicy, Scenario};
pub use sim::{SimResult, run as simulate};
pub use workload::{TurnRequest, WorkloadProfile};

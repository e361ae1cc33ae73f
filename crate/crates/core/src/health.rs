//! Active health checking: fixed-interval probes, failure/recovery state
//! machine, and the effective ring that excludes removed nodes before
//! dispatch.

use serde::{Deserialize, Serialize};

use crate::ring::{NodeId, Ring, RingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Healthy,
    /// Probes succeed but latency exceeds the soft threshold. Stays in the
    /// ring, flagged in reports.
    Degraded,
    /// Excluded from the effective ring until it recovers.
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HealthConfig {
    pub probe_interval_ms: u64,
    pub probe_timeout_ms: u64,
    /// Consecutive failed probes before a node is Removed.
    pub fail_threshold: u32,
    /// Consecutive successful probes before a Removed node returns to Healthy.
    pub recover_threshold: u32,
    /// Probe latency above this marks a node Degraded (still routable).
    pub degraded_latency_ms: f64,
    pub enabled: bool,
}

impl Default for HealthConfig {
    fn default() -> Self {
        HealthConfig {
            probe_interval_ms: 5000,
            probe_timeout_ms: 1000,
            fail_threshold: 1,
            recover_threshold: 3,
            degraded_latency_ms: 200.0,
            enabled: true,
        }
    }
}

/// Outcome of probing one node once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeOutcome {
    Success { latency_ms: f64 },
    /// Connection refused/reset or no answer within `probe_timeout_ms`.
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeHealth {
    pub node: NodeId,
    pub state: NodeState,
    pub consecutive_failures: u32,
    pub consecutive_successes: u32,
    pub last_probe_at: u64,
}

impl NodeHealth {
    pub fn new(node: NodeId) -> Self {
        NodeHealth {
            node,
            state: NodeState::Healthy,
            consecutive_failures: 0,
            consecutive_successes: 0,
            last_probe_at: 0,
        }
    }
}

/// A state transition observed while applying probe results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub node: NodeId,
    pub from: NodeState,
    pub to: NodeState,
    pub at_ms: u64,
}

/// Apply one probe result. Total function: failures count toward
/// `fail_threshold` and then remove the node; successes reset the failure
/// count and, on a Removed node, count toward `recover_threshold`.
pub fn record_probe_result(
    health: &NodeHealth,
    outcome: ProbeOutcome,
    now_ms: u64,
    cfg: &HealthConfig,
) -> NodeHealth {
    let mut next = health.clone();
    next.last_probe_at = now_ms;
    match outcome {
        ProbeOutcome::Failure => {
            next.consecutive_successes = 0;
            next.consecutive_failures = health.consecutive_failures.saturating_add(1);
            if next.consecutive_failures >= cfg.fail_threshold {
                next.state = NodeState::Removed;
            }
        }
        ProbeOutcome::Success { latency_ms } => {
            next.consecutive_failures = 0;
            next.consecutive_successes = health.consecutive_successes.saturating_add(1);
            match health.state {
                NodeState::Removed => {
                    if next.consecutive_successes >= cfg.recover_threshold {
                        next.state = if latency_ms > cfg.degraded_latency_ms {
                            NodeState::Degraded
                        } else {
                            NodeState::Healthy
                        };
                        next.consecutive_successes = 0;
                    }
                }
                NodeState::Healthy | NodeState::Degraded => {
                    next.state = if latency_ms > cfg.degraded_latency_ms {
                        NodeState::Degraded
                    } else {
                        NodeState::Healthy
                    };
                }
            }
        }
    }
    next
}

/// Probe every node whose interval has elapsed, applying results in node-id
/// order. `probe_fn` must already account for timeouts (a timeout is a
/// `Failure`); transitions are reported in the order they were applied.
pub fn probe_cycle<F>(
    cluster: &mut [NodeHealth],
    now_ms: u64,
    mut probe_fn: F,
    cfg: &HealthConfig,
) -> Vec<Transition>
where
    F: FnMut(&NodeId) -> ProbeOutcome,
{
    let mut order: Vec<usize> = (0..cluster.len()).collect();
    order.sort_by(|&a, &b| cluster[a].node.cmp(&cluster[b].node));

    let mut transitions = Vec::new();
    for idx in order {
        let due = cluster[idx].last_probe_at + cfg.probe_interval_ms <= now_ms
            || cluster[idx].last_probe_at == 0;
        if !due {
            continue;
        }
        let outcome = probe_fn(&cluster[idx].node);
        let before = cluster[idx].state;
        let next = record_probe_result(&cluster[idx], outcome, now_ms, cfg);
        if next.state != before {
            transitions.push(Transition {
                node: next.node.clone(),
                from: before,
                to: next.state,
                at_ms: now_ms,
            });
        }
        cluster[idx] = next;
    }
    transitions
}

/// Ring restricted to members that are not Removed. Pure function of its
/// inputs; surviving members keep their exact point positions, so sessions
/// owned by them route identically to the full ring.
pub fn effective_ring(full: &Ring, cluster: &[NodeHealth]) -> Result<Ring, RingError> {
    for h in cluster {
        if !full.contains(&h.node) {
            return Err(RingError::UnknownNode(h.node.to_string()));
        }
    }
    let alive: Vec<(NodeId, u32)> = full
        .members()
        .iter()
        .filter(|(id, _)| {
            cluster
                .iter()
                .find(|h| &h.node == id)
                .is_none_or(|h| h.state != NodeState::Removed)
        })
        .cloned()
        .collect();
    Ring::build(&alive, full.vnodes_per_weight(), full.hash_seed())
}

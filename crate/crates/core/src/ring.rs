//! Consistent-hash ring with virtual nodes for sticky session routing.
//!
//! Every member owns `weight * vnodes_per_weight` points on a 64-bit ring
//! (see [`crate::hash`] for the pinned hash). A session id routes to the owner
//! of the first point at or above its hash, wrapping at the top of the ring.
//! Rings are immutable; membership changes build a new ring value so readers
//! can hold snapshots without locking.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash;

/// Identifier of an inference node. Unique within a cluster.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of a conversation session (the call id routing keys on).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(id: impl Into<String>) -> Self {
        SessionId(id.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RingError {
    #[error("ring has no members")]
    EmptyRing,
    #[error("duplicate node id: {0}")]
    DuplicateNode(String),
    #[error("node id must be non-empty")]
    EmptyNodeId,
    #[error("weight must be >= 1 (node {0})")]
    ZeroWeight(String),
    #[error("vnodes_per_weight must be >= 1")]
    ZeroVnodes,
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("removing {0} would empty the ring")]
    WouldEmptyRing(String),
}

/// How many of a sampled session population changed owner across a membership
/// change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapReport {
    pub sampled_sessions: usize,
    pub remapped: usize,
    pub fraction: f64,
}

impl RemapReport {
    fn new(sampled_sessions: usize, remapped: usize) -> Self {
        let fraction = if sampled_sessions == 0 {
            0.0
        } else {
            remapped as f64 / sampled_sessions as f64
        };
        RemapReport {
            sampled_sessions,
            remapped,
            fraction,
        }
    }
}

/// Immutable consistent-hash ring.
///
/// `points` is sorted strictly ascending by hash; equal hashes tie-break by
/// lexicographic node id (members are stored sorted by id, so the member
/// index order is the id order).
#[derive(Debug, Clone)]
pub struct Ring {
    members: Vec<(NodeId, u32)>,
    vnodes_per_weight: u32,
    hash_seed: u64,
    // (hash point, index into members)
    points: Vec<(u64, u32)>,
}

impl Ring {
    /// Build a ring from `(node, weight)` members. Deterministic: identical
    /// inputs produce an identical point list regardless of member order.
    pub fn build(
        members: &[(NodeId, u32)],
        vnodes_per_weight: u32,
        hash_seed: u64,
    ) -> Result<Ring, RingError> {
        if members.is_empty() {
            return Err(RingError::EmptyRing);
        }
        if vnodes_per_weight == 0 {
            return Err(RingError::ZeroVnodes);
        }
        let mut sorted: Vec<(NodeId, u32)> = members.to_vec();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut seen = BTreeSet::new();
        for (id, weight) in &sorted {
            if id.as_str().is_empty() {
                return Err(RingError::EmptyNodeId);
            }
            if *weight == 0 {
                return Err(RingError::ZeroWeight(id.to_string()));
            }
            if !seen.insert(id.clone()) {
                return Err(RingError::DuplicateNode(id.to_string()));
            }
        }

        let mut points = Vec::new();
        for (idx, (id, weight)) in sorted.iter().enumerate() {
            let replicas = weight * vnodes_per_weight;
            for replica in 0..replicas {
                points.push((hash::point_hash(hash_seed, id.as_str(), replica), idx as u32));
            }
        }
        // Tie-break equal hash points by node id (== member index order).
        points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

        Ok(Ring {
            members: sorted,
            vnodes_per_weight,
            hash_seed,
            points,
        })
    }

    /// Owner of the first ring point at or above the session hash, wrapping
    /// past the maximum point back to the first.
    pub fn route(&self, session: &SessionId) -> Result<&NodeId, RingError> {
        if self.points.is_empty() {
            return Err(RingError::EmptyRing);
        }
        let h = hash::seeded_hash64(self.hash_seed, session.as_str().as_bytes());
        let idx = self.points.partition_point(|&(p, _)| p < h);
        let (_, member_idx) = self.points[idx % self.points.len()];
        Ok(&self.members[member_idx as usize].0)
    }

    /// New ring without `node`, plus a remap report over `sample`. Only
    /// sessions previously owned by `node` change owner.
    pub fn remove_node(
        &self,
        node: &NodeId,
        sample: &[SessionId],
    ) -> Result<(Ring, RemapReport), RingError> {
        if !self.members.iter().any(|(id, _)| id == node) {
            return Err(RingError::UnknownNode(node.to_string()));
        }
        if self.members.len() == 1 {
            return Err(RingError::WouldEmptyRing(node.to_string()));
        }
        let remaining: Vec<(NodeId, u32)> = self
            .members
            .iter()
            .filter(|(id, _)| id != node)
            .cloned()
            .collect();
        let next = Ring::build(&remaining, self.vnodes_per_weight, self.hash_seed)?;
        let report = self.remap_report(&next, sample)?;
        Ok((next, report))
    }

    /// New ring with `node` added at `weight`, plus a remap report over
    /// `sample`. Expected remap fraction is `weight / total weight after`.
    pub fn add_node(
        &self,
        node: NodeId,
        weight: u32,
        sample: &[SessionId],
    ) -> Result<(Ring, RemapReport), RingError> {
        if self.members.iter().any(|(id, _)| *id == node) {
            return Err(RingError::DuplicateNode(node.to_string()));
        }
        if weight == 0 {
            return Err(RingError::ZeroWeight(node.to_string()));
        }
        let mut grown = self.members.clone();
        grown.push((node, weight));
        let next = Ring::build(&grown, self.vnodes_per_weight, self.hash_seed)?;
        let report = self.remap_report(&next, sample)?;
        Ok((next, report))
    }

    fn remap_report(&self, next: &Ring, sample: &[SessionId]) -> Result<RemapReport, RingError> {
        let mut remapped = 0;
        for session in sample {
            if self.route(session)? != next.route(session)? {
                remapped += 1;
            }
        }
        Ok(RemapReport::new(sample.len(), remapped))
    }

    pub fn members(&self) -> &[(NodeId, u32)] {
        &self.members
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.members.iter().any(|(id, _)| id == node)
    }

    pub fn vnodes_per_weight(&self) -> u32 {
        self.vnodes_per_weight
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn points_of(&self, node: &NodeId) -> usize {
        match self.members.iter().position(|(id, _)| id == node) {
            Some(idx) => self
                .points
                .iter()
                .filter(|(_, m)| *m as usize == idx)
                .count(),
            None => 0,
        }
    }

    /// Raw sorted point list; exposed for determinism checks and inspection.
    pub fn ring_points(&self) -> impl Iterator<Item = (u64, &NodeId)> {
        self.points
            .iter()
            .map(move |&(p, m)| (p, &self.members[m as usize].0))
    }

    /// Fraction of `sample` owned per node, in member (id) order.
    pub fn sample_shares(&self, sample: &[SessionId]) -> Result<Vec<(NodeId, f64)>, RingError> {
        let mut counts = vec![0usize; self.members.len()];
        for session in sample {
            let owner = self.route(session)?;
            let idx = self
                .members
                .iter()
                .position(|(id, _)| id == owner)
                .expect("route returns a member");
            counts[idx] += 1;
        }
        let n = sample.len().max(1) as f64;
        Ok(self
            .members
            .iter()
            .zip(counts)
            .map(|((id, _), c)| (id.clone(), c as f64 / n))
            .collect())
    }
}

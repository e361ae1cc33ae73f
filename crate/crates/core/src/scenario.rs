//! Scenario files: one TOML document describing the cluster, cost model,
//! workload mix, fault schedule, and seed for a run. Parsing is strict:
//! unknown keys anywhere in the document are rejected so config typos
//! cannot silently change an experiment.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{preset, CostError, CostModel, PresetName, StageDistribution};
use crate::hash;
use crate::health::HealthConfig;
use crate::ring::{NodeId, Ring, RingError};
use crate::workload::{
    builtin_profile, generate_trace, merge_traces, CountDistribution, TurnRequest, WorkloadError,
    WorkloadProfile,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Ring(#[from] RingError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingPolicy {
    #[default]
    StickyConsistentHash,
    RoundRobin,
}

impl RoutingPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoutingPolicy::StickyConsistentHash => "sticky_consistent_hash",
            RoutingPolicy::RoundRobin => "round_robin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    pub vnodes_per_weight: u32,
    pub hash_seed: u64,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            vnodes_per_weight: 128,
            hash_seed: 17,
        }
    }
}

/// Cost model settings: a preset name plus optional field overrides.
/// Node-level specs override scenario-level ones field by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub preset: Option<String>,
    pub prefill_base_ms: Option<f64>,
    pub prefill_ms_per_token: Option<f64>,
    pub ttft_floor: Option<StageDistribution>,
    pub tpot: Option<StageDistribution>,
    pub endpoint_asr: Option<StageDistribution>,
    pub tts: Option<StageDistribution>,
    pub playout: Option<StageDistribution>,
    pub service_rate_reqs: Option<f64>,
}

impl CostSpec {
    fn overlay(&self, over: &CostSpec) -> CostSpec {
        CostSpec {
            preset: over.preset.clone().or_else(|| self.preset.clone()),
            prefill_base_ms: over.prefill_base_ms.or(self.prefill_base_ms),
            prefill_ms_per_token: over.prefill_ms_per_token.or(self.prefill_ms_per_token),
            ttft_floor: over.ttft_floor.or(self.ttft_floor),
            tpot: over.tpot.or(self.tpot),
            endpoint_asr: over.endpoint_asr.or(self.endpoint_asr),
            tts: over.tts.or(self.tts),
            playout: over.playout.or(self.playout),
            service_rate_reqs: over.service_rate_reqs.or(self.service_rate_reqs),
        }
    }

    pub fn resolve(&self) -> Result<(CostModel, PresetName), ScenarioError> {
        let name = match &self.preset {
            Some(p) => PresetName::parse(p)?,
            None => PresetName::Student300b,
        };
        let (mut model, _) = preset(name);
        if let Some(v) = self.prefill_base_ms {
            model.prefill_base_ms = v;
        }
        if let Some(v) = self.prefill_ms_per_token {
            model.prefill_ms_per_token = v;
        }
        if let Some(v) = self.ttft_floor {
            model.ttft_floor = v;
        }
        if let Some(v) = self.tpot {
            model.tpot = v;
        }
        if let Some(v) = self.endpoint_asr {
            model.stages.endpoint_asr = v;
        }
        if let Some(v) = self.tts {
            model.stages.tts = v;
        }
        if let Some(v) = self.playout {
            model.stages.playout = v;
        }
        if let Some(v) = self.service_rate_reqs {
            model.service_rate_reqs = v;
        }
        model.validate()?;
        Ok((model, name))
    }
}

fn default_weight() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    #[serde(default = "default_weight")]
    weight: u32,
    cache_capacity_tokens: u64,
    #[serde(default)]
    cost: Option<CostSpec>,
}

/// A workload entry: either a builtin profile name with optional overrides,
/// or a fully explicit profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub profile: Option<String>,
    pub name: Option<String>,
    pub arrival_rate: Option<f64>,
    pub initial_context_tokens: Option<CountDistribution>,
    pub new_tokens_per_turn: Option<CountDistribution>,
    pub output_tokens_per_turn: Option<CountDistribution>,
    pub turns_per_session: Option<CountDistribution>,
    pub inter_turn_gap_ms: Option<StageDistribution>,
}

impl WorkloadSpec {
    pub fn resolve(&self) -> Result<WorkloadProfile, ScenarioError> {
        let mut profile = match &self.profile {
            Some(name) => builtin_profile(name)?,
            None => {
                let name = self.name.clone().ok_or_else(|| {
                    ScenarioError::Invalid("explicit workload needs a name".into())
                })?;
                let missing = |field: &str| {
                    ScenarioError::Invalid(format!(
                        "workload {name} is not a builtin profile and is missing {field}"
                    ))
                };
                WorkloadProfile {
                    name: name.clone(),
                    initial_context_tokens: self
                        .initial_context_tokens
                        .ok_or_else(|| missing("initial_context_tokens"))?,
                    new_tokens_per_turn: self
                        .new_tokens_per_turn
                        .ok_or_else(|| missing("new_tokens_per_turn"))?,
                    output_tokens_per_turn: self
                        .output_tokens_per_turn
                        .ok_or_else(|| missing("output_tokens_per_turn"))?,
                    turns_per_session: self
                        .turns_per_session
                        .ok_or_else(|| missing("turns_per_session"))?,
                    inter_turn_gap_ms: self
                        .inter_turn_gap_ms
                        .ok_or_else(|| missing("inter_turn_gap_ms"))?,
                    arrival_rate: self
                        .arrival_rate
                        .ok_or_else(|| missing("arrival_rate"))?,
                }
            }
        };
        if self.profile.is_some() {
            if let Some(name) = &self.name {
                profile.name = name.clone();
            }
            if let Some(v) = self.arrival_rate {
                profile.arrival_rate = v;
            }
            if let Some(v) = self.initial_context_tokens {
                profile.initial_context_tokens = v;
            }
            if let Some(v) = self.new_tokens_per_turn {
                profile.new_tokens_per_turn = v;
            }
            if let Some(v) = self.output_tokens_per_turn {
                profile.output_tokens_per_turn = v;
            }
            if let Some(v) = self.turns_per_session {
                profile.turns_per_session = v;
            }
            if let Some(v) = self.inter_turn_gap_ms {
                profile.inter_turn_gap_ms = v;
            }
        }
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub node: String,
    pub fail_at_ms: u64,
    #[serde(default)]
    pub recover_at_ms: Option<u64>,
}

fn default_request_timeout() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    seed: u64,
    duration_s: f64,
    #[serde(default)]
    routing_policy: RoutingPolicy,
    #[serde(default = "default_request_timeout")]
    request_timeout_ms: u64,
    #[serde(default)]
    ring: RingConfig,
    #[serde(default)]
    health: HealthConfig,
    #[serde(default)]
    cost: CostSpec,
    nodes: Vec<RawNode>,
    #[serde(default, rename = "workload")]
    workloads: Vec<WorkloadSpec>,
    #[serde(default, rename = "faults")]
    faults: Vec<FaultSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeConfig {
    pub id: NodeId,
    pub weight: u32,
    pub cache_capacity_tokens: u64,
    pub cost: CostModel,
    pub preset: PresetName,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub routing_policy: RoutingPolicy,
    pub request_timeout_ms: u64,
    pub ring: RingConfig,
    pub health: HealthConfig,
    pub nodes: Vec<NodeConfig>,
    pub workloads: Vec<WorkloadProfile>,
    pub faults: Vec<FaultSpec>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Scenario::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml_str(&text)
    }

    fn resolve(raw: RawScenario) -> Result<Scenario, ScenarioError> {
        if raw.name.is_empty() {
            return Err(ScenarioError::Invalid("name must be non-empty".into()));
        }
        if !raw.duration_s.is_finite() || raw.duration_s <= 0.0 {
            return Err(ScenarioError::Invalid(format!(
                "duration_s must be > 0, got {}",
                raw.duration_s
            )));
        }
        if raw.request_timeout_ms == 0 {
            return Err(ScenarioError::Invalid(
                "request_timeout_ms must be >= 1".into(),
            ));
        }
        if raw.nodes.is_empty() {
            return Err(ScenarioError::Invalid("at least one node required".into()));
        }

        let mut nodes = Vec::with_capacity(raw.nodes.len());
        let mut seen = BTreeSet::new();
        for n in &raw.nodes {
            if n.id.is_empty() {
                return Err(ScenarioError::Invalid("node id must be non-empty".into()));
            }
            if n.id.contains(char::is_whitespace) || n.id.contains('=') {
                return Err(ScenarioError::Invalid(format!(
                    "node id {:?} must not contain whitespace or '='",
                    n.id
                )));
            }
            if !seen.insert(n.id.clone()) {
                return Err(ScenarioError::Invalid(format!("duplicate node id {}", n.id)));
            }
            if n.cache_capacity_tokens == 0 {
                return Err(ScenarioError::Invalid(format!(
                    "node {}: cache_capacity_tokens must be >= 1",
                    n.id
                )));
            }
            let spec = match &n.cost {
                Some(over) => raw.cost.overlay(over),
                None => raw.cost.clone(),
            };
            let (cost, preset) = spec.resolve()?;
            nodes.push(NodeConfig {
                id: NodeId::new(n.id.clone()),
                weight: n.weight,
                cache_capacity_tokens: n.cache_capacity_tokens,
                cost,
                preset,
            });
        }

        let mut workloads = Vec::with_capacity(raw.workloads.len());
        let mut wl_names = BTreeSet::new();
        for spec in &raw.workloads {
            let profile = spec.resolve()?;
            if !wl_names.insert(profile.name.clone()) {
                return Err(ScenarioError::Invalid(format!(
                    "duplicate workload name {}",
                    profile.name
                )));
            }
            workloads.push(profile);
        }

        for f in &raw.faults {
            if !nodes.iter().any(|n| n.id.as_str() == f.node) {
                return Err(ScenarioError::Invalid(format!(
                    "fault references unknown node {}",
                    f.node
                )));
            }
            if let Some(r) = f.recover_at_ms {
                if r <= f.fail_at_ms {
                    return Err(ScenarioError::Invalid(format!(
                        "fault on {}: recover_at_ms {} must be after fail_at_ms {}",
                        f.node, r, f.fail_at_ms
                    )));
                }
            }
        }

        let scenario = Scenario {
            name: raw.name,
            seed: raw.seed,
            duration_s: raw.duration_s,
            routing_policy: raw.routing_policy,
            request_timeout_ms: raw.request_timeout_ms,
            ring: raw.ring,
            health: raw.health,
            nodes,
            workloads,
            faults: raw.faults,
        };
        // Ring construction validates weights and ids once more.
        scenario.build_ring()?;
        Ok(scenario)
    }

    pub fn build_ring(&self) -> Result<Ring, RingError> {
        let members: Vec<(NodeId, u32)> = self
            .nodes
            .iter()
            .map(|n| (n.id.clone(), n.weight))
            .collect();
        Ring::build(&members, self.ring.vnodes_per_weight, self.ring.hash_seed)
    }

    /// Stable fingerprint of the resolved configuration (seed included).
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("scenario serializes");
        format!("{:016x}", hash::seeded_hash64(0x5ce4a11, canonical.as_bytes()))
    }

    /// Generate the full turn trace: one deterministic stream per workload,
    /// merged by arrival time.
    pub fn generate_trace(&self) -> Result<Vec<TurnRequest>, WorkloadError> {
        let mut traces = Vec::with_capacity(self.workloads.len());
        for w in &self.workloads {
            let mut rng = crate::rngstream::derive_rng(self.seed, &["arrivals", &w.name]);
            traces.push(generate_trace(w, self.duration_s, &mut rng)?);
        }
        Ok(merge_traces(traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
name = "example"
seed = 42
duration_s = 120.0
routing_policy = "sticky_consistent_hash"
request_timeout_ms = 8000

[ring]
vnodes_per_weight = 64
hash_seed = 7

[health]
probe_interval_ms = 5000
fail_threshold = 1

[cost]
preset = "student_300b"
prefill_ms_per_token = 0.2

[[nodes]]
id = "n1"
weight = 2
cache_capacity_tokens = 500000

[[nodes]]
id = "n2"
cache_capacity_tokens = 500000
cost = { preset = "teacher_405b" }

[[workload]]
profile = "discharge_followup"
arrival_rate = 0.5

[[faults]]
node = "n2"
fail_at_ms = 30000
recover_at_ms = 60000
"#;

    #[test]
    fn full_document_resolves() {
        let s = Scenario::from_toml_str(FULL).unwrap();
        assert_eq!(s.name, "example");
        assert_eq!(s.seed, 42);
        assert_eq!(s.ring.vnodes_per_weight, 64);
        assert_eq!(s.health.fail_threshold, 1);
        assert_eq!(s.health.recover_threshold, 3, "default preserved");
        assert_eq!(s.nodes.len(), 2);
        assert_eq!(s.nodes[0].weight, 2);
        assert_eq!(s.nodes[0].preset, PresetName::Student300b);
        assert_eq!(s.nodes[0].cost.prefill_ms_per_token, 0.2);
        assert_eq!(s.nodes[1].preset, PresetName::Teacher405b);
        // Scenario-level override carries into the per-node overlay.
        assert_eq!(s.nodes[1].cost.prefill_ms_per_token, 0.2);
        assert_eq!(s.nodes[1].cost.service_rate_reqs, 10.96);
        assert_eq!(s.workloads[0].arrival_rate, 0.5);
        assert_eq!(s.workloads[0].name, "discharge_followup");
        assert_eq!(s.faults[0].recover_at_ms, Some(60000));
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let s = Scenario::from_toml_str(
            r#"
name = "mini"
seed = 1
duration_s = 10.0
[[nodes]]
id = "a"
cache_capacity_tokens = 1000
"#,
        )
        .unwrap();
        assert_eq!(s.routing_policy, RoutingPolicy::StickyConsistentHash);
        assert_eq!(s.request_timeout_ms, 10_000);
        assert_eq!(s.ring.vnodes_per_weight, 128);
        assert!(s.health.enabled);
        assert_eq!(s.nodes[0].preset, PresetName::Student300b);
        assert!(s.workloads.is_empty());
        assert!(s.generate_trace().unwrap().is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let top = FULL.replace("request_timeout_ms = 8000", "request_timeoot_ms = 8000");
        assert!(matches!(
            Scenario::from_toml_str(&top),
            Err(ScenarioError::Parse(_))
        ));

        let health = FULL.replace("probe_interval_ms", "probe_intervalms");
        assert!(matches!(
            Scenario::from_toml_str(&health),
            Err(ScenarioError::Parse(_))
        ));

        let node = FULL.replace("weight = 2", "wieght = 2");
        assert!(matches!(
            Scenario::from_toml_str(&node),
            Err(ScenarioError::Parse(_))
        ));

        // Typos inside a distribution variant must fail too.
        let dist = FULL.replace(
            "prefill_ms_per_token = 0.2",
            "ttft_floor = { constant = { millis = 380.0 } }",
        );
        assert!(matches!(
            Scenario::from_toml_str(&dist),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn parse_error_names_offending_key() {
        let top = FULL.replace("duration_s", "durationz");
        match Scenario::from_toml_str(&top) {
            Err(ScenarioError::Parse(msg)) => assert!(msg.contains("durationz"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fault_on_unknown_node_is_invalid() {
        let bad = FULL.replace("node = \"n2\"", "node = \"ghost\"");
        match Scenario::from_toml_str(&bad) {
            Err(ScenarioError::Invalid(msg)) => assert!(msg.contains("ghost")),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn recover_before_fail_is_invalid() {
        let bad = FULL.replace("recover_at_ms = 60000", "recover_at_ms = 1000");
        assert!(matches!(
            Scenario::from_toml_str(&bad),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn explicit_workload_requires_all_fields() {
        let doc = r#"
name = "x"
seed = 1
duration_s = 10.0
[[nodes]]
id = "a"
cache_capacity_tokens = 1000
[[workload]]
name = "custom"
arrival_rate = 1.0
"#;
        match Scenario::from_toml_str(doc) {
            Err(ScenarioError::Invalid(msg)) => {
                assert!(msg.contains("initial_context_tokens"), "{msg}")
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn explicit_workload_resolves() {
        let doc = r#"
name = "x"
seed = 1
duration_s = 30.0
[[nodes]]
id = "a"
cache_capacity_tokens = 100000
[[workload]]
name = "custom"
arrival_rate = 1.0
initial_context_tokens = { lognormal = { median = 2450.0, sigma = 0.15 } }
new_tokens_per_turn = { constant = { value = 128 } }
output_tokens_per_turn = { uniform = { lo = 30, hi = 60 } }
turns_per_session = { shifted_geometric = { median = 13.0 } }
inter_turn_gap_ms = { constant = { ms = 4000.0 } }
"#;
        let s = Scenario::from_toml_str(doc).unwrap();
        assert_eq!(s.workloads[0].name, "custom");
        let trace = s.generate_trace().unwrap();
        assert!(!trace.is_empty());
    }

    #[test]
    fn duplicate_nodes_and_workloads_rejected() {
        let dup_node = FULL.replace("id = \"n2\"", "id = \"n1\"");
        assert!(matches!(
            Scenario::from_toml_str(&dup_node),
            Err(ScenarioError::Invalid(_))
        ));
    }

    #[test]
    fn digest_is_stable_and_seed_sensitive() {
        let a = Scenario::from_toml_str(FULL).unwrap();
        let b = Scenario::from_toml_str(FULL).unwrap();
        assert_eq!(a.digest(), b.digest());
        let mut c = Scenario::from_toml_str(FULL).unwrap();
        c.seed = 43;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn trace_generation_is_deterministic_per_seed() {
        let s = Scenario::from_toml_str(FULL).unwrap();
        assert_eq!(s.generate_trace().unwrap(), s.generate_trace().unwrap());
        let mut t = s.clone();
        t.seed = 99;
        assert_ne!(s.generate_trace().unwrap(), t.generate_trace().unwrap());
    }

    #[test]
    fn round_robin_policy_parses() {
        let doc = FULL.replace("sticky_consistent_hash", "round_robin");
        let s = Scenario::from_toml_str(&doc).unwrap();
        assert_eq!(s.routing_policy, RoutingPolicy::RoundRobin);
        assert_eq!(s.routing_policy.as_str(), "round_robin");
    }
}

//! Workload generators for the clinical conversation profiles: Poisson
//! session arrivals, per-turn context growth, and turn counts.
//!
//! Context is modeled in tokens. A session's history grows by `new_tokens`
//! each turn (turn 0 carries the whole initial context); generated output
//! tokens drive decode time and throughput but are not re-fed into the
//! context, so `required_context_tokens` of turn t equals the committed
//! history of turn t-1 plus the turn's new input.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::StageDistribution;
use crate::ring::SessionId;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("unknown workload profile: {0} (expected pcp_scheduling, discharge_followup, care_gap or insurance_benefits)")]
    UnknownProfile(String),
    #[error("invalid workload: {0}")]
    Invalid(String),
}

/// Distribution over token or turn counts. Externally tagged, e.g.
/// `{ lognormal = { median = 2450.0, sigma = 0.15 } }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CountDistribution {
    Constant { value: u64 },
    /// Inclusive integer range.
    Uniform { lo: u64, hi: u64 },
    /// Lognormal rounded to the nearest count.
    #[serde(rename = "lognormal")]
    LogNormal { median: f64, sigma: f64 },
    /// Supported on {1, 2, ...} with the given median; the natural shape
    /// for "how many turns until the conversation ends".
    ShiftedGeometric { median: f64 },
}

impl CountDistribution {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match *self {
            CountDistribution::Constant { .. } => Ok(()),
            CountDistribution::Uniform { lo, hi } => {
                if lo > hi {
                    Err(WorkloadError::Invalid(format!(
                        "uniform count needs lo <= hi, got [{lo}, {hi}]"
                    )))
                } else {
                    Ok(())
                }
            }
            CountDistribution::LogNormal { median, sigma } => {
                if !median.is_finite() || median <= 0.0 || !sigma.is_finite() || sigma < 0.0 {
                    Err(WorkloadError::Invalid(format!(
                        "lognormal count needs median > 0 and sigma >= 0, got median {median}, sigma {sigma}"
                    )))
                } else {
                    Ok(())
                }
            }
            CountDistribution::ShiftedGeometric { median } => {
                if !median.is_finite() || median < 1.0 {
                    Err(WorkloadError::Invalid(format!(
                        "shifted geometric needs median >= 1, got {median}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            CountDistribution::Constant { value } => value,
            CountDistribution::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..=hi)
                }
            }
            CountDistribution::LogNormal { median, sigma } => {
                if sigma == 0.0 {
                    median.round() as u64
                } else {
                    let dist =
                        LogNormal::new(median.ln(), sigma).expect("validated parameters");
                    dist.sample(rng).round() as u64
                }
            }
            CountDistribution::ShiftedGeometric { median } => {
                // p chosen so P(T > median) = 0.5 for T = 1 + Geometric(p).
                let p = 1.0 - 0.5f64.powf(1.0 / median);
                let u: f64 = rng.gen();
                1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
            }
        }
    }

    pub fn sample_at_least_one<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.sample(rng).max(1)
    }

    pub fn median(&self) -> f64 {
        match *self {
            CountDistribution::Constant { value } => value as f64,
            CountDistribution::Uniform { lo, hi } => (lo + hi) as f64 / 2.0,
            CountDistribution::LogNormal { median, .. } => median,
            CountDistribution::ShiftedGeometric { median } => median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub name: String,
    pub initial_context_tokens: CountDistribution,
    pub new_tokens_per_turn: CountDistribution,
    pub output_tokens_per_turn: CountDistribution,
    pub turns_per_session: CountDistribution,
    pub inter_turn_gap_ms: StageDistribution,
    /// Poisson session arrival rate, sessions per second.
    pub arrival_rate: f64,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.name.is_empty() {
            return Err(WorkloadError::Invalid("profile name must be non-empty".into()));
        }
        if !self.arrival_rate.is_finite() || self.arrival_rate < 0.0 {
            return Err(WorkloadError::Invalid(format!(
                "arrival_rate must be >= 0, got {}",
                self.arrival_rate
            )));
        }
        self.initial_context_tokens.validate()?;
        self.new_tokens_per_turn.validate()?;
        self.output_tokens_per_turn.validate()?;
        self.turns_per_session.validate()?;
        self.inter_turn_gap_ms
            .validate()
            .map_err(|e| WorkloadError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// One generated turn. `arrival_us` is when the caller finishes speaking,
/// i.e. the earliest time the turn may be dispatched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub session: SessionId,
    pub turn_index: u32,
    pub arrival_us: u64,
    pub required_context_tokens: u64,
    pub new_tokens: u64,
    pub output_tokens: u64,
}

/// Built-in profiles. Medians pin the documented qualitative thresholds:
/// appointment scheduling carries a heavy initial record payload,
/// discharge follow-up and care-gap outreach run long multi-turn dialogues,
/// insurance benefit checks are short-horizon.
pub fn builtin_profile(name: &str) -> Result<WorkloadProfile, WorkloadError> {
    let profile = match name {
        "pcp_scheduling" => WorkloadProfile {
            name: name.into(),
            initial_context_tokens: CountDistribution::LogNormal {
                median: 9000.0,
                sigma: 0.25,
            },
            new_tokens_per_turn: CountDistribution::LogNormal {
                median: 150.0,
                sigma: 0.30,
            },
            output_tokens_per_turn: CountDistribution::Uniform { lo: 30, hi: 90 },
            turns_per_session: CountDistribution::ShiftedGeometric { median: 12.0 },
            inter_turn_gap_ms: StageDistribution::lognormal_median(6000.0, 0.5),
            arrival_rate: 1.0,
        },
        "discharge_followup" => WorkloadProfile {
            name: name.into(),
            initial_context_tokens: CountDistribution::LogNormal {
                median: 2400.0,
                sigma: 0.30,
            },
            new_tokens_per_turn: CountDistribution::LogNormal {
                median: 130.0,
                sigma: 0.30,
            },
            output_tokens_per_turn: CountDistribution::Uniform { lo: 30, hi: 80 },
            turns_per_session: CountDistribution::ShiftedGeometric { median: 70.0 },
            inter_turn_gap_ms: StageDistribution::lognormal_median(5000.0, 0.5),
            arrival_rate: 0.2,
        },
        "care_gap" => WorkloadProfile {
            name: name.into(),
            initial_context_tokens: CountDistribution::LogNormal {
                median: 3000.0,
                sigma: 0.30,
            },
            new_tokens_per_turn: CountDistribution::LogNormal {
                median: 120.0,
                sigma: 0.30,
            },
            output_tokens_per_turn: CountDistribution::Uniform { lo: 20, hi: 60 },
            turns_per_session: CountDistribution::ShiftedGeometric { median: 55.0 },
            inter_turn_gap_ms: StageDistribution::lognormal_median(5000.0, 0.5),
            arrival_rate: 0.3,
        },
        "insurance_benefits" => WorkloadProfile {
            name: name.into(),
            initial_context_tokens: CountDistribution::LogNormal {
                median: 1800.0,
                sigma: 0.30,
            },
            new_tokens_per_turn: CountDistribution::LogNormal {
                median: 140.0,
                sigma: 0.30,
            },
            output_tokens_per_turn: CountDistribution::Uniform { lo: 30, hi: 80 },
            turns_per_session: CountDistribution::ShiftedGeometric { median: 6.0 },
            inter_turn_gap_ms: StageDistribution::lognormal_median(4000.0, 0.5),
            arrival_rate: 1.5,
        },
        other => return Err(WorkloadError::UnknownProfile(other.to_string())),
    };
    Ok(profile)
}

pub const BUILTIN_PROFILES: [&str; 4] = [
    "pcp_scheduling",
    "discharge_followup",
    "care_gap",
    "insurance_benefits",
];

/// Generate a trace of turns over `duration_s` seconds of arrivals. Sessions
/// arriving before the cutoff run all their turns, which may extend past it.
/// Output is sorted by (arrival, session, turn) and fully determined by the
/// rng state.
pub fn generate_trace<R: Rng + ?Sized>(
    profile: &WorkloadProfile,
    duration_s: f64,
    rng: &mut R,
) -> Result<Vec<TurnRequest>, WorkloadError> {
    profile.validate()?;
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(WorkloadError::Invalid(format!(
            "duration must be > 0, got {duration_s}"
        )));
    }
    let mut trace = Vec::new();
    if profile.arrival_rate == 0.0 {
        return Ok(trace);
    }
    let duration_us = (duration_s * 1e6).round() as u64;
    let inter_arrival = Exp::new(profile.arrival_rate).expect("validated rate > 0");

    let mut now_us: u64 = 0;
    let mut session_index: u64 = 0;
    loop {
        now_us += (inter_arrival.sample(rng) * 1e6).round() as u64;
        if now_us >= duration_us {
            break;
        }
        let session = SessionId::new(format!("{}-s{:06}", profile.name, session_index));
        session_index += 1;

        let turns = profile.turns_per_session.sample_at_least_one(rng);
        let initial = profile.initial_context_tokens.sample(rng);
        let mut required = initial;
        let mut arrival = now_us;
        for turn_index in 0..turns {
            let new_tokens = if turn_index == 0 {
                initial
            } else {
                let n = profile.new_tokens_per_turn.sample(rng);
                let gap_us = (profile.inter_turn_gap_ms.sample(rng) * 1e3).round() as u64;
                required += n;
                arrival += gap_us;
                n
            };
            let output_tokens = profile.output_tokens_per_turn.sample(rng);
            trace.push(TurnRequest {
                session: session.clone(),
                turn_index: turn_index as u32,
                arrival_us: arrival,
                required_context_tokens: required,
                new_tokens,
                output_tokens,
            });
        }
    }
    trace.sort_by(|a, b| {
        (a.arrival_us, &a.session, a.turn_index).cmp(&(b.arrival_us, &b.session, b.turn_index))
    });
    Ok(trace)
}

/// Merge per-profile traces into one globally ordered trace.
pub fn merge_traces(mut traces: Vec<Vec<TurnRequest>>) -> Vec<TurnRequest> {
    let mut all: Vec<TurnRequest> = traces.drain(..).flatten().collect();
    all.sort_by(|a, b| {
        (a.arrival_us, &a.session, a.turn_index).cmp(&(b.arrival_us, &b.session, b.turn_index))
    });
    all
}

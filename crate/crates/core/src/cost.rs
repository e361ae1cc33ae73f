//! Parametric latency and throughput model: linear prefill, lognormal
//! per-token decode (TPOT), and the voice-pipeline stage decomposition
//! endpointing/ASR + TTFT + TTS + playout that makes up time-to-first-audio.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard normal 99th percentile; ties a lognormal's median to its P99.
const Z_99: f64 = 2.3263478740408408;

/// Spread of the per-token decode time in ln-space.
pub const DEFAULT_TPOT_SIGMA: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("unknown preset: {0} (expected student_300b or teacher_405b)")]
    UnknownPreset(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid cost model: {0}")]
    InvalidModel(String),
}

/// Latency distribution for one pipeline stage, in milliseconds. Lognormal
/// is parametrized by its median so configs can state reported medians
/// directly. Externally tagged so config typos inside a variant are
/// rejected, e.g. `{ constant = { ms = 380.0 } }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StageDistribution {
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    #[serde(rename = "lognormal")]
    LogNormal { median_ms: f64, sigma: f64 },
}

impl StageDistribution {
    pub fn constant(ms: f64) -> Self {
        StageDistribution::Constant { ms }
    }

    pub fn uniform(lo_ms: f64, hi_ms: f64) -> Self {
        StageDistribution::Uniform { lo_ms, hi_ms }
    }

    /// Lognormal with the given median; `p99 = median * exp(z99 * sigma)`.
    pub fn lognormal_median(median_ms: f64, sigma: f64) -> Self {
        StageDistribution::LogNormal { median_ms, sigma }
    }

    /// Lognormal pinned to a target 99th percentile.
    pub fn lognormal_p99(p99_ms: f64, sigma: f64) -> Self {
        StageDistribution::LogNormal {
            median_ms: p99_ms * (-Z_99 * sigma).exp(),
            sigma,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: String| Err(CostError::InvalidDistribution(msg));
        match *self {
            StageDistribution::Constant { ms } => {
                if !ms.is_finite() || ms < 0.0 {
                    return bad(format!("constant ms must be finite and >= 0, got {ms}"));
                }
            }
            StageDistribution::Uniform { lo_ms, hi_ms } => {
                if !lo_ms.is_finite() || !hi_ms.is_finite() || lo_ms < 0.0 || hi_ms < lo_ms {
                    return bad(format!("uniform needs 0 <= lo <= hi, got [{lo_ms}, {hi_ms}]"));
                }
            }
            StageDistribution::LogNormal { median_ms, sigma } => {
                if !median_ms.is_finite() || median_ms <= 0.0 || !sigma.is_finite() || sigma < 0.0
                {
                    return bad(format!(
                        "lognormal needs median > 0 and sigma >= 0, got median {median_ms}, sigma {sigma}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            StageDistribution::Constant { ms } => ms,
            StageDistribution::Uniform { lo_ms, hi_ms } => {
                if lo_ms == hi_ms {
                    lo_ms
                } else {
                    rng.gen_range(lo_ms..hi_ms)
                }
            }
            StageDistribution::LogNormal { median_ms, sigma } => {
                if sigma == 0.0 {
                    median_ms
                } else {
                    let dist = LogNormal::new(median_ms.ln(), sigma)
                        .expect("validated parameters are finite");
                    dist.sample(rng)
                }
            }
        }
    }

    pub fn median(&self) -> f64 {
        match *self {
            StageDistribution::Constant { ms } => ms,
            StageDistribution::Uniform { lo_ms, hi_ms } => (lo_ms + hi_ms) / 2.0,
            StageDistribution::LogNormal { median_ms, .. } => median_ms,
        }
    }
}

/// Non-LLM stages of the voice loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub endpoint_asr: StageDistribution,
    pub tts: StageDistribution,
    pub playout: StageDistribution,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            endpoint_asr: StageDistribution::uniform(150.0, 300.0),
            tts: StageDistribution::uniform(100.0, 200.0),
            playout: StageDistribution::constant(50.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub prefill_base_ms: f64,
    pub prefill_ms_per_token: f64,
    /// Queueing-free first-token overhead added on top of prefill.
    pub ttft_floor: StageDistribution,
    /// Per-output-token decode time.
    pub tpot: StageDistribution,
    pub stages: Stages,
    /// Node request capacity; excess dispatches queue FIFO.
    pub service_rate_reqs: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        preset(PresetName::Student300b).0
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        if !self.prefill_base_ms.is_finite() || self.prefill_base_ms < 0.0 {
            return Err(CostError::InvalidModel(format!(
                "prefill_base_ms must be >= 0, got {}",
                self.prefill_base_ms
            )));
        }
        if !self.prefill_ms_per_token.is_finite() || self.prefill_ms_per_token <= 0.0 {
            return Err(CostError::InvalidModel(format!(
                "prefill_ms_per_token must be > 0, got {}",
                self.prefill_ms_per_token
            )));
        }
        if !self.service_rate_reqs.is_finite() || self.service_rate_reqs <= 0.0 {
            return Err(CostError::InvalidModel(format!(
                "service_rate_reqs must be > 0, got {}",
                self.service_rate_reqs
            )));
        }
        self.ttft_floor.validate()?;
        self.tpot.validate()?;
        self.stages.endpoint_asr.validate()?;
        self.stages.tts.validate()?;
        self.stages.playout.validate()?;
        Ok(())
    }

    /// Cost of recomputing `uncached_tokens` of context. Deterministic and
    /// linear in the token count.
    pub fn prefill_latency(&self, uncached_tokens: u64) -> f64 {
        self.prefill_base_ms + self.prefill_ms_per_token * uncached_tokens as f64
    }

    /// Sum of `output_tokens` independent per-token decode samples.
    pub fn decode_latency<R: Rng + ?Sized>(&self, output_tokens: u64, rng: &mut R) -> f64 {
        let mut total = 0.0;
        for _ in 0..output_tokens {
            total += self.tpot.sample(rng);
        }
        total
    }

    /// Time to first token: fixed overhead plus the prefill already computed
    /// by the caller (which knows the cache hit/miss split).
    pub fn ttft<R: Rng + ?Sized>(&self, prefill_ms: f64, rng: &mut R) -> f64 {
        self.ttft_floor.sample(rng) + prefill_ms
    }

    /// Time to first audio around a measured TTFT. Samples the non-LLM
    /// stages in fixed order: endpointing/ASR, TTS, playout.
    pub fn ttfa<R: Rng + ?Sized>(&self, ttft_ms: f64, rng: &mut R) -> TtfaBreakdown {
        let endpoint_asr_ms = self.stages.endpoint_asr.sample(rng);
        let tts_ms = self.stages.tts.sample(rng);
        let playout_ms = self.stages.playout.sample(rng);
        TtfaBreakdown {
            endpoint_asr_ms,
            ttft_ms,
            tts_ms,
            playout_ms,
            total_ms: endpoint_asr_ms + ttft_ms + tts_ms + playout_ms,
        }
    }
}

/// Per-stage split of one turn's time-to-first-audio. The stage fields sum
/// to `total_ms` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtfaBreakdown {
    pub endpoint_asr_ms: f64,
    pub ttft_ms: f64,
    pub tts_ms: f64,
    pub playout_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Student300b,
    Teacher405b,
}

impl PresetName {
    pub fn parse(s: &str) -> Result<Self, CostError> {
        match s {
            "student_300b" => Ok(PresetName::Student300b),
            "teacher_405b" => Ok(PresetName::Teacher405b),
            other => Err(CostError::UnknownPreset(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::Student300b => "student_300b",
            PresetName::Teacher405b => "teacher_405b",
        }
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Measured single-node serving numbers the model calibrates against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostPreset {
    pub name: PresetName,
    pub req_throughput: f64,
    pub in_tok_throughput: f64,
    pub out_tok_throughput: f64,
    pub tpot_p99_ms: f64,
}

/// Calibrated model + reference numbers for a named serving configuration.
pub fn preset(name: PresetName) -> (CostModel, CostPreset) {
    let preset = match name {
        PresetName::Student300b => CostPreset {
            name,
            req_throughput: 14.31,
            in_tok_throughput: 2888.49,
            out_tok_throughput: 3050.76,
            tpot_p99_ms: 117.69,
        },
        PresetName::Teacher405b => CostPreset {
            name,
            req_throughput: 10.96,
            in_tok_throughput: 2211.29,
            out_tok_throughput: 2335.36,
            tpot_p99_ms: 266.51,
        },
    };
    let model = CostModel {
        prefill_base_ms: 0.0,
        prefill_ms_per_token: 450.0 / 2450.0,
        ttft_floor: StageDistribution::constant(380.0),
        tpot: StageDistribution::lognormal_p99(preset.tpot_p99_ms, DEFAULT_TPOT_SIGMA),
        stages: Stages::default(),
        service_rate_reqs: preset.req_throughput,
    };
    (model, preset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn nearest_rank_p99(samples: &mut [f64]) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((0.99 * samples.len() as f64).ceil() as usize).max(1);
        samples[rank - 1]
    }

    #[test]
    fn prefill_matches_calibration_endpoints() {
        let (m, _) = preset(PresetName::Student300b);
        let cold = m.prefill_latency(2450);
        let steady = m.prefill_latency(128);
        assert!((445.0..=455.0).contains(&cold), "cold prefill {cold}");
        assert!((22.0..=26.0).contains(&steady), "steady prefill {steady}");
        assert_eq!(m.prefill_latency(0), 0.0);
        assert!(cold / steady >= 15.0, "ratio {}", cold / steady);
    }

    #[test]
    fn prefill_is_linear() {
        let (m, _) = preset(PresetName::Student300b);
        for (a, b) in [(0u64, 10u64), (100, 28), (2450, 128), (1, 999_999)] {
            let lhs = m.prefill_latency(a + b) - m.prefill_base_ms;
            let rhs =
                (m.prefill_latency(a) - m.prefill_base_ms) + (m.prefill_latency(b) - m.prefill_base_ms);
            assert!((lhs - rhs).abs() < 1e-6, "a={a} b={b}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn decode_of_zero_tokens_is_free() {
        let (m, _) = preset(PresetName::Student300b);
        assert_eq!(m.decode_latency(0, &mut rng(1)), 0.0);
    }

    #[test]
    fn student_tpot_p99_within_ten_percent() {
        let (m, p) = preset(PresetName::Student300b);
        let mut r = rng(7);
        let mut samples: Vec<f64> = (0..100_000).map(|_| m.tpot.sample(&mut r)).collect();
        let p99 = nearest_rank_p99(&mut samples);
        assert!(
            (105.9..=129.5).contains(&p99),
            "student P99 {p99} vs target {}",
            p.tpot_p99_ms
        );
    }

    #[test]
    fn teacher_tpot_p99_within_ten_percent() {
        let (m, p) = preset(PresetName::Teacher405b);
        let mut r = rng(7);
        let mut samples: Vec<f64> = (0..100_000).map(|_| m.tpot.sample(&mut r)).collect();
        let p99 = nearest_rank_p99(&mut samples);
        assert!(
            (239.9..=293.2).contains(&p99),
            "teacher P99 {p99} vs target {}",
            p.tpot_p99_ms
        );
    }

    #[test]
    fn ttfa_sums_constant_stages() {
        let m = CostModel {
            stages: Stages {
                endpoint_asr: StageDistribution::constant(225.0),
                tts: StageDistribution::constant(150.0),
                playout: StageDistribution::constant(50.0),
            },
            ..preset(PresetName::Student300b).0
        };
        let b = m.ttfa(500.0, &mut rng(1));
        assert_eq!(b.total_ms, 925.0);
        assert_eq!(b.endpoint_asr_ms, 225.0);
        assert_eq!(b.tts_ms, 150.0);
        assert_eq!(b.playout_ms, 50.0);
    }

    #[test]
    fn ttfa_of_all_zero_stages_is_zero() {
        let m = CostModel {
            stages: Stages {
                endpoint_asr: StageDistribution::constant(0.0),
                tts: StageDistribution::constant(0.0),
                playout: StageDistribution::constant(0.0),
            },
            ..preset(PresetName::Student300b).0
        };
        assert_eq!(m.ttfa(0.0, &mut rng(1)).total_ms, 0.0);
    }

    #[test]
    fn ttfa_breakdown_sums_to_total_for_sampled_stages() {
        let (m, _) = preset(PresetName::Student300b);
        let mut r = rng(3);
        for _ in 0..10_000 {
            let b = m.ttfa(431.0, &mut r);
            let sum = b.endpoint_asr_ms + b.ttft_ms + b.tts_ms + b.playout_ms;
            assert_eq!(sum, b.total_ms);
            assert!(b.endpoint_asr_ms >= 150.0 && b.endpoint_asr_ms < 300.0);
            assert!(b.tts_ms >= 100.0 && b.tts_ms < 200.0);
            assert_eq!(b.playout_ms, 50.0);
        }
    }

    #[test]
    fn ttfa_median_below_one_second_at_target_ttft() {
        let (m, _) = preset(PresetName::Student300b);
        let mut r = rng(11);
        let mut totals: Vec<f64> = (0..10_000).map(|_| m.ttfa(500.0, &mut r).total_ms).collect();
        totals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = totals[totals.len() / 2];
        assert!(median < 1000.0, "median TTFA {median}");
    }

    #[test]
    fn ttfa_strictly_increases_in_ttft_for_same_stage_samples() {
        let (m, _) = preset(PresetName::Student300b);
        for seed in 0..50 {
            let a = m.ttfa(100.0, &mut rng(seed)).total_ms;
            let b = m.ttfa(101.0, &mut rng(seed)).total_ms;
            assert!(b > a);
        }
    }

    #[test]
    fn ttft_is_floor_plus_prefill() {
        let (m, _) = preset(PresetName::Student300b);
        let t = m.ttft(23.5, &mut rng(1));
        assert!((t - 403.5).abs() < 1e-9, "steady TTFT {t}");

        let no_floor = CostModel {
            ttft_floor: StageDistribution::constant(0.0),
            ..m
        };
        assert_eq!(no_floor.ttft(450.0, &mut rng(1)), 450.0);
    }

    #[test]
    fn cold_vs_steady_ttft_gap_matches_prefill_gap() {
        let (m, _) = preset(PresetName::Student300b);
        let gap = m.prefill_latency(2450) - m.prefill_latency(128);
        assert!((gap - 426.5).abs() < 1.0, "gap {gap}");
    }

    #[test]
    fn presets_carry_reference_throughputs() {
        let (_, s) = preset(PresetName::Student300b);
        assert_eq!(s.req_throughput, 14.31);
        assert_eq!(s.in_tok_throughput, 2888.49);
        assert_eq!(s.out_tok_throughput, 3050.76);
        let (_, t) = preset(PresetName::Teacher405b);
        assert_eq!(t.req_throughput, 10.96);
        assert_eq!(t.in_tok_throughput, 2211.29);
        assert_eq!(t.out_tok_throughput, 2335.36);
        let ratio = s.req_throughput / t.req_throughput;
        assert!((ratio - 1.306).abs() < 0.001, "ratio {ratio}");
    }

    #[test]
    fn preset_name_round_trips() {
        assert_eq!(PresetName::parse("student_300b").unwrap(), PresetName::Student300b);
        assert_eq!(PresetName::parse("teacher_405b").unwrap(), PresetName::Teacher405b);
        assert!(matches!(
            PresetName::parse("gpt"),
            Err(CostError::UnknownPreset(_))
        ));
        assert_eq!(PresetName::Student300b.to_string(), "student_300b");
    }

    #[test]
    fn percentiles_are_ordered_for_every_kind() {
        let dists = [
            StageDistribution::constant(50.0),
            StageDistribution::uniform(10.0, 20.0),
            StageDistribution::lognormal_median(70.0, 0.3),
        ];
        for d in dists {
            let mut r = rng(5);
            let mut xs: Vec<f64> = (0..20_000).map(|_| d.sample(&mut r)).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q = |p: f64| xs[(((p * xs.len() as f64).ceil() as usize).max(1)) - 1];
            let (p50, p95, p99) = (q(0.50), q(0.95), q(0.99));
            assert!(p50 <= p95 && p95 <= p99, "{d:?}: {p50} {p95} {p99}");
            assert!(xs[0] > 0.0, "{d:?} sampled a non-positive value");
        }
    }

    #[test]
    fn lognormal_p99_parametrization_hits_target_median() {
        let d = StageDistribution::lognormal_p99(117.69, DEFAULT_TPOT_SIGMA);
        match d {
            StageDistribution::LogNormal { median_ms, .. } => {
                assert!((median_ms - 73.905).abs() < 0.01, "median {median_ms}");
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn validate_rejects_bad_parameters() {
        assert!(StageDistribution::constant(-1.0).validate().is_err());
        assert!(StageDistribution::uniform(5.0, 2.0).validate().is_err());
        assert!(StageDistribution::uniform(-1.0, 2.0).validate().is_err());
        assert!(StageDistribution::lognormal_median(0.0, 0.2).validate().is_err());
        assert!(StageDistribution::lognormal_median(10.0, -0.1).validate().is_err());
        assert!(StageDistribution::constant(0.0).validate().is_ok());

        let mut m = preset(PresetName::Student300b).0;
        assert!(m.validate().is_ok());
        m.service_rate_reqs = 0.0;
        assert!(m.validate().is_err());
    }
}

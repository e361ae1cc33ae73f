//! Exact-quantile latency accounting and report assembly.
//!
//! Quantiles are nearest-rank order statistics over the full sample set
//! (desk scale fits in memory; no sketches), so identical runs produce
//! identical reports byte for byte. Reports split cache behavior into a
//! cold bucket (first turn on a node, nothing cached) and a steady bucket
//! (some prefix already resident).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ring::{NodeId, SessionId};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("latency series {0} is empty")]
    EmptySeries(String),
    #[error("quantile must be in (0, 1), got {0}")]
    BadQuantile(f64),
    #[error("conservation violated: {0}")]
    Conservation(String),
    #[error("reports disagree on schema: {0}")]
    SchemaMismatch(String),
    #[error("ratio for {0} is undefined (zero denominator)")]
    UndefinedRatio(String),
}

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySeries {
    pub label: String,
    samples: Vec<f64>,
}

impl LatencySeries {
    pub fn new(label: impl Into<String>) -> Self {
        LatencySeries {
            label: label.into(),
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, ms: f64) {
        debug_assert!(ms.is_finite() && ms >= 0.0, "latency sample {ms}");
        self.samples.push(ms);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nearest-rank order statistic: the ceil(q*n)-th smallest sample.
    pub fn quantile(&self, q: f64) -> Result<f64, MetricsError> {
        if !(0.0 < q && q < 1.0) {
            return Err(MetricsError::BadQuantile(q));
        }
        if self.samples.is_empty() {
            return Err(MetricsError::EmptySeries(self.label.clone()));
        }
        let mut sorted = self.samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let rank = ((q * sorted.len() as f64).ceil() as usize).max(1);
        Ok(sorted[rank - 1])
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.samples.iter().sum::<f64>() / self.samples.len() as f64
        }
    }

    /// Zero-filled for an empty series so zero-turn runs still report.
    pub fn summary(&self) -> LatencySummary {
        if self.samples.is_empty() {
            return LatencySummary {
                count: 0,
                mean_ms: 0.0,
                p50_ms: 0.0,
                p95_ms: 0.0,
                p99_ms: 0.0,
            };
        }
        LatencySummary {
            count: self.samples.len() as u64,
            mean_ms: self.mean(),
            p50_ms: self.quantile(0.50).expect("non-empty"),
            p95_ms: self.quantile(0.95).expect("non-empty"),
            p99_ms: self.quantile(0.99).expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// How a turn ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnStatus {
    Ok,
    /// Served, but on a different node than first routed to (cold restart).
    ReroutedCold,
    /// Dropped: no healthy node available.
    NoCapacity,
}

impl TurnStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TurnStatus::Ok => "ok",
            TurnStatus::ReroutedCold => "rerouted_cold",
            TurnStatus::NoCapacity => "no_capacity",
        }
    }

    pub fn parse(s: &str) -> Option<TurnStatus> {
        match s {
            "ok" => Some(TurnStatus::Ok),
            "rerouted_cold" => Some(TurnStatus::ReroutedCold),
            "no_capacity" => Some(TurnStatus::NoCapacity),
            _ => None,
        }
    }
}

/// Everything a completed (or dropped) turn contributes to a report.
/// Produced by the simulator and by the live driver alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub session: SessionId,
    pub turn_index: u32,
    pub node: Option<NodeId>,
    pub status: TurnStatus,
    pub arrival_us: u64,
    pub done_us: u64,
    pub required_tokens: u64,
    pub new_tokens: u64,
    pub output_tokens: u64,
    pub hit_tokens: u64,
    pub miss_tokens: u64,
    pub cold_start: bool,
    pub queue_ms: f64,
    pub prefill_ms: f64,
    pub ttft_ms: f64,
    pub decode_ms: f64,
    pub endpoint_asr_ms: f64,
    pub tts_ms: f64,
    pub playout_ms: f64,
    pub ttfa_ms: f64,
    pub total_ms: f64,
    pub retries: u32,
}

/// One Table 6 style column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheBucket {
    pub lookups: u64,
    pub hit_tokens: u64,
    pub miss_tokens: u64,
    pub chr: f64,
    pub reuse_factor: Option<f64>,
    pub avg_recomputed_tokens: f64,
    pub avg_prefill_ms: f64,
}

impl CacheBucket {
    fn from_turns<'a>(turns: impl Iterator<Item = &'a TurnOutcome>) -> CacheBucket {
        let mut lookups = 0u64;
        let mut hit = 0u64;
        let mut miss = 0u64;
        let mut prefill = 0.0f64;
        for t in turns {
            lookups += 1;
            hit += t.hit_tokens;
            miss += t.miss_tokens;
            prefill += t.prefill_ms;
        }
        let total = hit + miss;
        CacheBucket {
            lookups,
            hit_tokens: hit,
            miss_tokens: miss,
            chr: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
            reuse_factor: if miss == 0 { None } else { Some(hit as f64 / miss as f64) },
            avg_recomputed_tokens: if lookups == 0 { 0.0 } else { miss as f64 / lookups as f64 },
            avg_prefill_ms: if lookups == 0 { 0.0 } else { prefill / lookups as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub cold: CacheBucket,
    pub steady: CacheBucket,
    pub overall: CacheBucket,
    pub evicted_entries: u64,
    pub evicted_tokens: u64,
    pub committed_tokens: u64,
    pub eviction_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub elapsed_s: f64,
    pub req_per_s: f64,
    pub in_tok_per_s: f64,
    pub out_tok_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub sessions: u64,
    pub turns: u64,
    pub ok_turns: u64,
    pub rerouted_turns: u64,
    pub dropped_turns: u64,
    pub retries: u64,
    pub health_transitions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub dispatches: u64,
    pub hit_tokens: u64,
    pub miss_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub scenario: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub routing_policy: String,
    pub mode: String,
    pub counts: Counts,
    pub throughput: Throughput,
    pub cache: CacheReport,
    pub latency: BTreeMap<String, LatencySummary>,
    pub per_node: BTreeMap<String, NodeReport>,
    /// Set when some turn found no healthy node to serve it.
    pub no_capacity: bool,
}

/// Metadata the assembler cannot derive from the turns themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub scenario: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub routing_policy: String,
    pub mode: String,
    pub health_transitions: u64,
    /// Eviction totals live on the nodes, not in turn outcomes.
    pub evicted_entries: u64,
    pub evicted_tokens: u64,
    pub committed_tokens: u64,
}

/// Build a report from completed turns plus the per-token decode series.
/// Re-checks conservation laws and fails rather than emit a report that
/// violates them.
pub fn assemble(
    turns: &[TurnOutcome],
    tpot: &LatencySeries,
    meta: &RunMeta,
) -> Result<RunReport, MetricsError> {
    for t in turns {
        if t.status != TurnStatus::NoCapacity && t.hit_tokens + t.miss_tokens != t.required_tokens
        {
            return Err(MetricsError::Conservation(format!(
                "turn {}#{}: hit {} + miss {} != required {}",
                t.session, t.turn_index, t.hit_tokens, t.miss_tokens, t.required_tokens
            )));
        }
        if t.cold_start && t.hit_tokens != 0 {
            return Err(MetricsError::Conservation(format!(
                "turn {}#{}: cold start with {} hit tokens",
                t.session, t.turn_index, t.hit_tokens
            )));
        }
    }

    let served: Vec<&TurnOutcome> = turns
        .iter()
        .filter(|t| t.status != TurnStatus::NoCapacity)
        .collect();

    let cold = CacheBucket::from_turns(served.iter().copied().filter(|t| t.cold_start));
    let steady = CacheBucket::from_turns(served.iter().copied().filter(|t| !t.cold_start));
    let overall = CacheBucket::from_turns(served.iter().copied());
    if cold.hit_tokens + steady.hit_tokens != overall.hit_tokens
        || cold.miss_tokens + steady.miss_tokens != overall.miss_tokens
    {
        return Err(MetricsError::Conservation(
            "cold + steady buckets do not sum to overall".into(),
        ));
    }

    let mut sessions = std::collections::BTreeSet::new();
    let mut counts = Counts {
        sessions: 0,
        turns: turns.len() as u64,
        ok_turns: 0,
        rerouted_turns: 0,
        dropped_turns: 0,
        retries: 0,
        health_transitions: meta.health_transitions,
    };
    let mut per_node: BTreeMap<String, NodeReport> = BTreeMap::new();
    let mut in_tokens = 0u64;
    let mut out_tokens = 0u64;
    let mut last_done = 0u64;

    let mut series: BTreeMap<&str, LatencySeries> = ["queue", "prefill", "ttft", "decode", "ttfa", "total"]
        .into_iter()
        .map(|l| (l, LatencySeries::new(l)))
        .collect();

    for t in turns {
        sessions.insert(&t.session);
        counts.retries += t.retries as u64;
        match t.status {
            TurnStatus::Ok => counts.ok_turns += 1,
            TurnStatus::ReroutedCold => counts.rerouted_turns += 1,
            TurnStatus::NoCapacity => {
                counts.dropped_turns += 1;
                continue;
            }
        }
        if let Some(node) = &t.node {
            let n = per_node.entry(node.to_string()).or_default();
            n.dispatches += 1;
            n.hit_tokens += t.hit_tokens;
            n.miss_tokens += t.miss_tokens;
        }
        in_tokens += t.required_tokens;
        out_tokens += t.output_tokens;
        last_done = last_done.max(t.done_us);
        series.get_mut("queue").unwrap().push(t.queue_ms);
        series.get_mut("prefill").unwrap().push(t.prefill_ms);
        series.get_mut("ttft").unwrap().push(t.ttft_ms);
        series.get_mut("decode").unwrap().push(t.decode_ms);
        series.get_mut("ttfa").unwrap().push(t.ttfa_ms);
        series.get_mut("total").unwrap().push(t.total_ms);
    }
    counts.sessions = sessions.len() as u64;

    let elapsed_s = last_done as f64 / 1e6;
    let served_count = counts.ok_turns + counts.rerouted_turns;
    let rate = |n: u64| if elapsed_s > 0.0 { n as f64 / elapsed_s } else { 0.0 };
    let throughput = Throughput {
        elapsed_s,
        req_per_s: rate(served_count),
        in_tok_per_s: rate(in_tokens),
        out_tok_per_s: rate(out_tokens),
    };

    let mut latency: BTreeMap<String, LatencySummary> = series
        .into_iter()
        .map(|(l, s)| (l.to_string(), s.summary()))
        .collect();
    latency.insert("tpot".into(), tpot.summary());

    let eviction_rate = if meta.committed_tokens == 0 {
        0.0
    } else {
        meta.evicted_tokens as f64 / meta.committed_tokens as f64
    };

    Ok(RunReport {
        schema: REPORT_SCHEMA,
        scenario: meta.scenario.clone(),
        scenario_digest: meta.scenario_digest.clone(),
        seed: meta.seed,
        routing_policy: meta.routing_policy.clone(),
        mode: meta.mode.clone(),
        counts,
        throughput,
        cache: CacheReport {
            cold,
            steady,
            overall,
            evicted_entries: meta.evicted_entries,
            evicted_tokens: meta.evicted_tokens,
            committed_tokens: meta.committed_tokens,
            eviction_rate,
        },
        latency,
        per_node,
        no_capacity: turns.iter().any(|t| t.status == TurnStatus::NoCapacity),
    })
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<RunReport, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Flat metric map used by compare and by `--assert` expressions.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("req_throughput".into(), self.throughput.req_per_s);
        m.insert("in_tok_throughput".into(), self.throughput.in_tok_per_s);
        m.insert("out_tok_throughput".into(), self.throughput.out_tok_per_s);
        m.insert("chr_overall".into(), self.cache.overall.chr);
        m.insert("chr_steady".into(), self.cache.steady.chr);
        m.insert("chr_cold".into(), self.cache.cold.chr);
        m.insert(
            "reuse_factor_steady".into(),
            self.cache.steady.reuse_factor.unwrap_or(0.0),
        );
        m.insert(
            "recomputed_steady".into(),
            self.cache.steady.avg_recomputed_tokens,
        );
        m.insert("recomputed_cold".into(), self.cache.cold.avg_recomputed_tokens);
        m.insert("eviction_rate".into(), self.cache.eviction_rate);
        m.insert("prefill_mean".into(), self.cache.overall.avg_prefill_ms);
        for (label, s) in &self.latency {
            m.insert(format!("{label}_mean"), s.mean_ms);
            m.insert(format!("{label}_p50"), s.p50_ms);
            m.insert(format!("{label}_p95"), s.p95_ms);
            m.insert(format!("{label}_p99"), s.p99_ms);
        }
        m.insert("sessions".into(), self.counts.sessions as f64);
        m.insert("turns".into(), self.counts.turns as f64);
        m.insert("dropped_turns".into(), self.counts.dropped_turns as f64);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
    Neutral,
}

fn direction_of(key: &str) -> Direction {
    if key.contains("throughput") || key.starts_with("chr") || key.starts_with("reuse") {
        Direction::HigherIsBetter
    } else if key.ends_with("_mean")
        || key.ends_with("_p50")
        || key.ends_with("_p95")
        || key.ends_with("_p99")
        || key == "eviction_rate"
        || key == "dropped_turns"
    {
        Direction::LowerIsBetter
    } else {
        Direction::Neutral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub key: String,
    pub a: f64,
    pub b: f64,
    /// a/b; None when b is zero.
    pub ratio: Option<f64>,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub a_label: String,
    pub b_label: String,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn ratio_of(&self, key: &str) -> Result<f64, MetricsError> {
        let row = self
            .rows
            .iter()
            .find(|r| r.key == key)
            .ok_or_else(|| MetricsError::SchemaMismatch(format!("no such metric: {key}")))?;
        row.ratio
            .ok_or_else(|| MetricsError::UndefinedRatio(key.to_string()))
    }
}

/// Row-by-row ratio table of two reports over the shared metric schema.
pub fn compare(a: &RunReport, b: &RunReport) -> Result<CompareTable, MetricsError> {
    if a.schema != b.schema {
        return Err(MetricsError::SchemaMismatch(format!(
            "schema {} vs {}",
            a.schema, b.schema
        )));
    }
    let ma = a.metric_map();
    let mb = b.metric_map();
    let keys_a: Vec<&String> = ma.keys().collect();
    let keys_b: Vec<&String> = mb.keys().collect();
    if keys_a != keys_b {
        let only_a: Vec<&&String> = keys_a.iter().filter(|k| !mb.contains_key(**k)).collect();
        let only_b: Vec<&&String> = keys_b.iter().filter(|k| !ma.contains_key(**k)).collect();
        return Err(MetricsError::SchemaMismatch(format!(
            "metric keys differ (only in a: {only_a:?}, only in b: {only_b:?})"
        )));
    }
    let rows = ma
        .into_iter()
        .map(|(key, va)| {
            let vb = mb[&key];
            CompareRow {
                ratio: if vb == 0.0 { None } else { Some(va / vb) },
                direction: direction_of(&key),
                key,
                a: va,
                b: vb,
            }
        })
        .collect();
    Ok(CompareTable {
        a_label: a.scenario.clone(),
        b_label: b.scenario.clone(),
        rows,
    })
}

fn fmt_ms(v: f64) -> String {
    format!("{v:.2}")
}

/// Plain-text rendering in the shape of the cold/steady cache table plus
/// latency and throughput sections.
pub fn render_text(r: &RunReport) -> String {
    let mut out = String::new();
    let push = |out: &mut String, line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push(&mut out, format!("scenario: {} (seed {})", r.scenario, r.seed));
    push(
        &mut out,
        format!(
            "mode: {}  routing: {}  digest: {}",
            r.mode, r.routing_policy, r.scenario_digest
        ),
    );
    push(
        &mut out,
        format!(
            "sessions: {}  turns: {} (ok {}, rerouted {}, dropped {})  retries: {}",
            r.counts.sessions,
            r.counts.turns,
            r.counts.ok_turns,
            r.counts.rerouted_turns,
            r.counts.dropped_turns,
            r.counts.retries
        ),
    );
    if r.no_capacity {
        push(&mut out, "WARNING: some turns found no healthy node (no capacity)".into());
    }
    push(&mut out, String::new());
    push(
        &mut out,
        format!("{:<28} {:>14} {:>14}", "cache", "cold (turn 0)", "steady state"),
    );
    let row = |label: &str, c: String, s: String| format!("{label:<28} {c:>14} {s:>14}");
    push(
        &mut out,
        row(
            "lookups",
            r.cache.cold.lookups.to_string(),
            r.cache.steady.lookups.to_string(),
        ),
    );
    push(
        &mut out,
        row(
            "cache hit rate",
            format!("{:.1}%", r.cache.cold.chr * 100.0),
            format!("{:.1}%", r.cache.steady.chr * 100.0),
        ),
    );
    push(
        &mut out,
        row(
            "avg recomputed tokens",
            format!("{:.1}", r.cache.cold.avg_recomputed_tokens),
            format!("{:.1}", r.cache.steady.avg_recomputed_tokens),
        ),
    );
    push(
        &mut out,
        row(
            "reuse factor",
            r.cache
                .cold
                .reuse_factor
                .map_or("-".into(), |v| format!("{v:.1}x")),
            r.cache
                .steady
                .reuse_factor
                .map_or("-".into(), |v| format!("{v:.1}x")),
        ),
    );
    push(
        &mut out,
        row(
            "avg prefill latency (ms)",
            fmt_ms(r.cache.cold.avg_prefill_ms),
            fmt_ms(r.cache.steady.avg_prefill_ms),
        ),
    );
    push(
        &mut out,
        format!(
            "eviction rate: {:.3}% ({} entries, {} tokens of {} committed)",
            r.cache.eviction_rate * 100.0,
            r.cache.evicted_entries,
            r.cache.evicted_tokens,
            r.cache.committed_tokens
        ),
    );
    push(&mut out, String::new());
    push(
        &mut out,
        format!(
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "latency", "count", "mean", "p50", "p95", "p99"
        ),
    );
    for (label, s) in &r.latency {
        push(
            &mut out,
            format!(
                "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                label,
                s.count,
                fmt_ms(s.mean_ms),
                fmt_ms(s.p50_ms),
                fmt_ms(s.p95_ms),
                fmt_ms(s.p99_ms)
            ),
        );
    }
    push(&mut out, String::new());
    push(
        &mut out,
        format!(
            "throughput: {:.2} req/s, {:.2} in tok/s, {:.2} out tok/s over {:.2}s",
            r.throughput.req_per_s,
            r.throughput.in_tok_per_s,
            r.throughput.out_tok_per_s,
            r.throughput.elapsed_s
        ),
    );
    for (node, n) in &r.per_node {
        push(
            &mut out,
            format!(
                "node {node}: {} dispatches, {} hit tokens, {} miss tokens",
                n.dispatches, n.hit_tokens, n.miss_tokens
            ),
        );
    }
    out
}

pub fn render_compare_text(t: &CompareTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>14} {:>14} {:>10}  direction\n",
        "metric",
        truncate(&t.a_label, 14),
        truncate(&t.b_label, 14),
        "ratio a/b"
    ));
    for row in &t.rows {
        let ratio = row
            .ratio
            .map_or("undefined".to_string(), |r| format!("{r:.3}"));
        let dir = match row.direction {
            Direction::HigherIsBetter => "higher is better",
            Direction::LowerIsBetter => "lower is better",
            Direction::Neutral => "-",
        };
        out.push_str(&format!(
            "{:<24} {:>14.4} {:>14.4} {:>10}  {}\n",
            row.key, row.a, row.b, ratio, dir
        ));
    }
    out
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        s[..n].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(label: &str, xs: &[f64]) -> LatencySeries {
        let mut s = LatencySeries::new(label);
        for &x in xs {
            s.push(x);
        }
        s
    }

    fn turn(session: &str, idx: u32, required: u64, hit: u64, prefill: f64) -> TurnOutcome {
        TurnOutcome {
            session: SessionId::new(session),
            turn_index: idx,
            node: Some(NodeId::new("n1")),
            status: TurnStatus::Ok,
            arrival_us: idx as u64 * 1000,
            done_us: idx as u64 * 1000 + 500,
            required_tokens: required,
            new_tokens: required - hit,
            output_tokens: 40,
            hit_tokens: hit,
            miss_tokens: required - hit,
            cold_start: hit == 0 && required > 0,
            queue_ms: 0.0,
            prefill_ms: prefill,
            ttft_ms: 380.0 + prefill,
            decode_ms: 100.0,
            endpoint_asr_ms: 225.0,
            tts_ms: 150.0,
            playout_ms: 50.0,
            ttfa_ms: 225.0 + 380.0 + prefill + 150.0 + 50.0,
            total_ms: 480.0 + prefill + 100.0,
            retries: 0,
        }
    }

    fn meta() -> RunMeta {
        RunMeta {
            scenario: "test".into(),
            scenario_digest: "0123456789abcdef".into(),
            seed: 42,
            routing_policy: "sticky_consistent_hash".into(),
            mode: "sim".into(),
            health_transitions: 0,
            evicted_entries: 0,
            evicted_tokens: 0,
            committed_tokens: 1000,
        }
    }

    #[test]
    fn quantile_on_known_ladder() {
        let s = series("t", &(1..=100).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(s.quantile(0.99).unwrap(), 99.0);
        assert_eq!(s.quantile(0.50).unwrap(), 50.0);
        assert_eq!(s.quantile(0.01).unwrap(), 1.0);
    }

    #[test]
    fn quantile_of_single_sample_is_that_sample() {
        let s = series("t", &[7.5]);
        for q in [0.01, 0.5, 0.99] {
            assert_eq!(s.quantile(q).unwrap(), 7.5);
        }
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        let s = series("t", &[1.0]);
        assert_eq!(s.quantile(0.0).unwrap_err(), MetricsError::BadQuantile(0.0));
        assert_eq!(s.quantile(1.0).unwrap_err(), MetricsError::BadQuantile(1.0));
        let empty = LatencySeries::new("e");
        assert_eq!(
            empty.quantile(0.5).unwrap_err(),
            MetricsError::EmptySeries("e".into())
        );
    }

    #[test]
    fn assemble_splits_cold_and_steady() {
        let turns = vec![
            turn("a", 0, 2450, 0, 450.0),
            turn("a", 1, 2578, 2450, 23.5),
            turn("a", 2, 2706, 2578, 23.5),
            turn("b", 0, 2450, 0, 450.0),
        ];
        let r = assemble(&turns, &series("tpot", &[70.0]), &meta()).unwrap();
        assert_eq!(r.counts.sessions, 2);
        assert_eq!(r.counts.turns, 4);
        assert_eq!(r.cache.cold.lookups, 2);
        assert_eq!(r.cache.steady.lookups, 2);
        assert_eq!(r.cache.cold.chr, 0.0);
        assert_eq!(r.cache.cold.avg_recomputed_tokens, 2450.0);
        assert_eq!(r.cache.steady.avg_recomputed_tokens, 128.0);
        let reuse = r.cache.steady.reuse_factor.unwrap();
        assert!((reuse - (2450.0 + 2578.0) / 256.0).abs() < 1e-12);
        assert_eq!(
            r.cache.overall.hit_tokens,
            r.cache.cold.hit_tokens + r.cache.steady.hit_tokens
        );
        assert!(r.cache.cold.avg_prefill_ms / r.cache.steady.avg_prefill_ms > 15.0);
        assert!(!r.no_capacity);
    }

    #[test]
    fn assemble_is_deterministic_bytes() {
        let turns = vec![turn("a", 0, 100, 0, 18.0), turn("a", 1, 150, 100, 9.0)];
        let tpot = series("tpot", &[70.0, 71.0]);
        let a = assemble(&turns, &tpot, &meta()).unwrap().to_json();
        let b = assemble(&turns, &tpot, &meta()).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn assemble_rejects_conservation_violation() {
        let mut bad = turn("a", 0, 100, 0, 18.0);
        bad.miss_tokens = 99;
        let err = assemble(&[bad], &LatencySeries::new("tpot"), &meta()).unwrap_err();
        assert!(matches!(err, MetricsError::Conservation(_)));
    }

    #[test]
    fn assemble_rejects_cold_start_with_hits() {
        let mut bad = turn("a", 1, 100, 50, 9.0);
        bad.cold_start = true;
        let err = assemble(&[bad], &LatencySeries::new("tpot"), &meta()).unwrap_err();
        assert!(matches!(err, MetricsError::Conservation(_)));
    }

    #[test]
    fn zero_turn_run_reports_all_zero() {
        let r = assemble(&[], &LatencySeries::new("tpot"), &meta()).unwrap();
        assert_eq!(r.counts.turns, 0);
        assert_eq!(r.throughput.req_per_s, 0.0);
        assert_eq!(r.cache.overall.chr, 0.0);
        assert_eq!(r.latency["ttfa"].p99_ms, 0.0);
    }

    #[test]
    fn dropped_turns_counted_but_not_measured() {
        let mut dropped = turn("a", 0, 100, 0, 0.0);
        dropped.status = TurnStatus::NoCapacity;
        dropped.node = None;
        dropped.hit_tokens = 0;
        dropped.miss_tokens = 0;
        let ok = turn("b", 0, 100, 0, 18.0);
        let r = assemble(&[dropped, ok], &LatencySeries::new("tpot"), &meta()).unwrap();
        assert_eq!(r.counts.dropped_turns, 1);
        assert_eq!(r.counts.ok_turns, 1);
        assert_eq!(r.latency["ttft"].count, 1);
        assert!(r.no_capacity);
        assert_eq!(r.cache.overall.lookups, 1);
    }

    #[test]
    fn compare_report_with_itself_is_identity() {
        let turns = vec![turn("a", 0, 100, 0, 18.0), turn("a", 1, 150, 100, 9.0)];
        let r = assemble(&turns, &series("tpot", &[70.0]), &meta()).unwrap();
        let table = compare(&r, &r).unwrap();
        for row in &table.rows {
            if row.b != 0.0 {
                assert_eq!(row.ratio, Some(1.0), "{}", row.key);
            } else {
                assert_eq!(row.ratio, None, "{}", row.key);
            }
        }
    }

    #[test]
    fn compare_flags_zero_denominators() {
        let turns = vec![turn("a", 0, 100, 0, 18.0)];
        let a = assemble(&turns, &series("tpot", &[70.0]), &meta()).unwrap();
        let table = compare(&a, &a).unwrap();
        // cold bucket only: steady reuse ratio has denominator 0.
        assert_eq!(table.ratio_of("chr_steady").unwrap_err(), MetricsError::UndefinedRatio("chr_steady".into()));
        assert!(table.ratio_of("req_throughput").is_ok());
    }

    #[test]
    fn report_json_round_trips() {
        let turns = vec![turn("a", 0, 100, 0, 18.0), turn("a", 1, 150, 100, 9.0)];
        let r = assemble(&turns, &series("tpot", &[70.0, 71.5]), &meta()).unwrap();
        let parsed = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(r, parsed);
    }

    #[test]
    fn direction_annotations() {
        assert_eq!(direction_of("req_throughput"), Direction::HigherIsBetter);
        assert_eq!(direction_of("chr_steady"), Direction::HigherIsBetter);
        assert_eq!(direction_of("ttfa_p99"), Direction::LowerIsBetter);
        assert_eq!(direction_of("eviction_rate"), Direction::LowerIsBetter);
        assert_eq!(direction_of("sessions"), Direction::Neutral);
    }

    #[test]
    fn render_text_mentions_key_rows() {
        let turns = vec![turn("a", 0, 2450, 0, 450.0), turn("a", 1, 2578, 2450, 23.5)];
        let r = assemble(&turns, &series("tpot", &[70.0]), &meta()).unwrap();
        let text = render_text(&r);
        assert!(text.contains("cache hit rate"));
        assert!(text.contains("steady state"));
        assert!(text.contains("reuse factor"));
        assert!(text.contains("throughput"));
    }

    proptest! {
        #[test]
        fn quantile_is_monotone_in_q(
            mut xs in prop::collection::vec(0.0f64..10_000.0, 1..200),
            q1 in 0.01f64..0.99,
            q2 in 0.01f64..0.99,
        ) {
            xs.iter_mut().for_each(|x| *x = x.abs());
            let s = series("t", &xs);
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(s.quantile(lo).unwrap() <= s.quantile(hi).unwrap());
        }

        #[test]
        fn summary_orders_percentiles(xs in prop::collection::vec(0.0f64..1_000.0, 1..300)) {
            let s = series("t", &xs).summary();
            prop_assert!(s.p50_ms <= s.p95_ms);
            prop_assert!(s.p95_ms <= s.p99_ms);
        }
    }
}

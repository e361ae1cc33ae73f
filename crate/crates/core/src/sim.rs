//! Discrete-event simulator. Replays a turn trace against a modeled cluster:
//! consistent-hash (or round-robin) routing, per-node KV caches, service-rate
//! queueing, health probing, and fault injection, all on an integer
//! microsecond clock. The same scenario and seed always produce byte-identical
//! reports.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::cache::{CacheCounters, CacheError, NodeCache};
use crate::health::{
    effective_ring, record_probe_result, NodeHealth, NodeState, ProbeOutcome,
};
use crate::metrics::{
    assemble, LatencySeries, MetricsError, RunMeta, RunReport, TurnOutcome, TurnStatus,
};
use crate::ring::{NodeId, Ring, RingError, SessionId};
use crate::rngstream::derive_rng;
use crate::scenario::{RoutingPolicy, Scenario};
use crate::workload::{TurnRequest, WorkloadError};

/// Delay before re-routing when the gateway knows a node is unreachable
/// (connection refused): effectively immediate.
const FAIL_FAST_US: u64 = 1_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cache invariant violated: {0}")]
    Cache(CacheError),
    #[error("engine invariant violated: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival,
    Dispatch,
    DispatchRetry,
    PrefillDone,
    FirstToken,
    TurnDone,
    Dropped,
    Probe,
    Transition,
    Fault,
    Eviction,
    CommitSkipped,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::Dispatch => "dispatch",
            EventKind::DispatchRetry => "dispatch_retry",
            EventKind::PrefillDone => "prefill_done",
            EventKind::FirstToken => "first_token",
            EventKind::TurnDone => "turn_done",
            EventKind::Dropped => "dropped",
            EventKind::Probe => "probe",
            EventKind::Transition => "transition",
            EventKind::Fault => "fault",
            EventKind::Eviction => "eviction",
            EventKind::CommitSkipped => "commit_skipped",
        }
    }
}

/// One line in the run's event log.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub time_us: u64,
    pub kind: EventKind,
    pub session: Option<SessionId>,
    pub turn: Option<u32>,
    pub node: Option<NodeId>,
    pub detail: String,
}

impl EventRecord {
    pub fn render_line(&self) -> String {
        let mut s = format!("t_us={} kind={}", self.time_us, self.kind.as_str());
        if let Some(sess) = &self.session {
            s.push_str(&format!(" session={sess}"));
        }
        if let Some(turn) = self.turn {
            s.push_str(&format!(" turn={turn}"));
        }
        if let Some(node) = &self.node {
            s.push_str(&format!(" node={node}"));
        }
        if !self.detail.is_empty() {
            s.push(' ');
            s.push_str(&self.detail);
        }
        s
    }
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        writeln!(f, "{}", e.render_line())?;
    }
    f.flush()
}

pub struct SimResult {
    pub report: RunReport,
    pub turns: Vec<TurnOutcome>,
    pub events: Vec<EventRecord>,
}

/// Generate the scenario's trace and simulate it.
pub fn run(scenario: &Scenario) -> Result<SimResult, SimError> {
    let trace = scenario.generate_trace()?;
    run_with_trace(scenario, &trace)
}

/// Simulate a pre-built trace (replays, saved traces, hand-built tests).
pub fn run_with_trace(scenario: &Scenario, trace: &[TurnRequest]) -> Result<SimResult, SimError> {
    Engine::new(scenario, trace)?.run()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    FaultDown { node: usize },
    FaultUp { node: usize },
    ProbeSend,
    ProbeFail { node: usize },
    PrefillDone { turn: usize, attempt: u32 },
    FirstToken { turn: usize, attempt: u32 },
    TurnDone { turn: usize, attempt: u32 },
    Arrival { turn: usize },
    Retry { turn: usize },
}

impl Ev {
    /// Tie-break class for events at the same microsecond: membership changes
    /// first, then probe machinery, then completions, then new work.
    fn class(&self) -> u8 {
        match self {
            Ev::FaultDown { .. } | Ev::FaultUp { .. } => 0,
            Ev::ProbeSend => 1,
            Ev::ProbeFail { .. } => 2,
            Ev::PrefillDone { .. } => 3,
            Ev::FirstToken { .. } => 4,
            Ev::TurnDone { .. } => 5,
            Ev::Arrival { .. } => 6,
            Ev::Retry { .. } => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HeapItem {
    time: u64,
    class: u8,
    seq: u64,
    ev: Ev,
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.class, self.seq).cmp(&(other.time, other.class, other.seq))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct NodeSim {
    id: NodeId,
    cache: NodeCache,
    up: bool,
    next_free_us: u64,
    spacing_us: u64,
    in_flight: BTreeSet<usize>,
}

struct SessState {
    turns: Vec<usize>,
    next_pos: usize,
    in_flight: bool,
}

#[derive(Default)]
struct TurnRun {
    t0: u64,
    attempt: u32,
    retries: u32,
    excluded: Vec<usize>,
    pending: Option<PendingTurn>,
    done: bool,
}

struct PendingTurn {
    node: usize,
    done_us: u64,
    queue_ms: f64,
    prefill_ms: f64,
    decode_ms: f64,
    ttft_ms: f64,
    asr_ms: f64,
    tts_ms: f64,
    playout_ms: f64,
    ttfa_ms: f64,
    hit: u64,
    miss: u64,
    cold: bool,
    tpot_samples: Vec<f64>,
}

fn round_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

fn state_name(s: NodeState) -> &'static str {
    match s {
        NodeState::Healthy => "healthy",
        NodeState::Degraded => "degraded",
        NodeState::Removed => "removed",
    }
}

struct Engine<'a> {
    sc: &'a Scenario,
    trace: &'a [TurnRequest],
    nodes: Vec<NodeSim>,
    node_idx: HashMap<String, usize>,
    probe_order: Vec<usize>,
    full_ring: Ring,
    effective: Option<Ring>,
    health: Vec<NodeHealth>,
    sessions: HashMap<SessionId, SessState>,
    turns: Vec<TurnRun>,
    outcomes: Vec<Option<TurnOutcome>>,
    tpot_series: LatencySeries,
    heap: BinaryHeap<Reverse<HeapItem>>,
    seq: u64,
    pending_turns: usize,
    next_arrival: usize,
    rr_counter: u64,
    transitions: u64,
    events: Vec<EventRecord>,
    now: u64,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, trace: &'a [TurnRequest]) -> Result<Engine<'a>, SimError> {
        let full_ring = sc.build_ring()?;

        let mut nodes = Vec::with_capacity(sc.nodes.len());
        let mut node_idx = HashMap::new();
        for (i, n) in sc.nodes.iter().enumerate() {
            nodes.push(NodeSim {
                id: n.id.clone(),
                cache: NodeCache::new(n.cache_capacity_tokens),
                up: true,
                next_free_us: 0,
                spacing_us: (1e6 / n.cost.service_rate_reqs).round() as u64,
                in_flight: BTreeSet::new(),
            });
            node_idx.insert(n.id.as_str().to_string(), i);
        }
        let mut probe_order: Vec<usize> = (0..nodes.len()).collect();
        probe_order.sort_by(|&a, &b| nodes[a].id.cmp(&nodes[b].id));

        let health: Vec<NodeHealth> = nodes.iter().map(|n| NodeHealth::new(n.id.clone())).collect();

        let mut sessions: HashMap<SessionId, SessState> = HashMap::new();
        let mut last_arrival = 0u64;
        for (i, t) in trace.iter().enumerate() {
            if t.arrival_us < last_arrival {
                return Err(SimError::Internal(format!(
                    "trace not sorted by arrival at index {i}"
                )));
            }
            last_arrival = t.arrival_us;
            let st = sessions.entry(t.session.clone()).or_insert(SessState {
                turns: Vec::new(),
                next_pos: 0,
                in_flight: false,
            });
            if t.turn_index as usize != st.turns.len() {
                return Err(SimError::Internal(format!(
                    "session {} turn {} out of order in trace",
                    t.session, t.turn_index
                )));
            }
            st.turns.push(i);
        }

        let mut eng = Engine {
            sc,
            trace,
            nodes,
            node_idx,
            probe_order,
            effective: Some(full_ring.clone()),
            full_ring,
            health,
            sessions,
            turns: (0..trace.len()).map(|_| TurnRun::default()).collect(),
            outcomes: (0..trace.len()).map(|_| None).collect(),
            tpot_series: LatencySeries::new("tpot"),
            heap: BinaryHeap::new(),
            seq: 0,
            pending_turns: trace.len(),
            next_arrival: 0,
            rr_counter: 0,
            transitions: 0,
            events: Vec::new(),
            now: 0,
        };

        if !trace.is_empty() {
            eng.push(trace[0].arrival_us, Ev::Arrival { turn: 0 });
            eng.next_arrival = 1;
        }
        for f in &sc.faults {
            let ni = eng.node_idx[f.node.as_str()];
            eng.push(f.fail_at_ms * 1000, Ev::FaultDown { node: ni });
            if let Some(r) = f.recover_at_ms {
                eng.push(r * 1000, Ev::FaultUp { node: ni });
            }
        }
        if sc.health.enabled {
            eng.push(sc.health.probe_interval_ms * 1000, Ev::ProbeSend);
        }
        Ok(eng)
    }

    fn push(&mut self, time: u64, ev: Ev) {
        let class = ev.class();
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(HeapItem {
            time,
            class,
            seq,
            ev,
        }));
    }

    fn log(
        &mut self,
        kind: EventKind,
        session: Option<&SessionId>,
        turn: Option<u32>,
        node: Option<&NodeId>,
        detail: String,
    ) {
        self.events.push(EventRecord {
            time_us: self.now,
            kind,
            session: session.cloned(),
            turn,
            node: node.cloned(),
            detail,
        });
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        while self.pending_turns > 0 {
            let item = match self.heap.pop() {
                Some(Reverse(item)) => item,
                None => {
                    return Err(SimError::Internal(format!(
                        "event queue drained with {} turns unresolved",
                        self.pending_turns
                    )))
                }
            };
            self.now = item.time;
            match item.ev {
                Ev::Arrival { turn } => self.on_arrival(turn)?,
                Ev::TurnDone { turn, attempt } => self.on_turn_done(turn, attempt)?,
                Ev::PrefillDone { turn, attempt } => self.on_stage_log(turn, attempt, EventKind::PrefillDone),
                Ev::FirstToken { turn, attempt } => self.on_stage_log(turn, attempt, EventKind::FirstToken),
                Ev::Retry { turn } => self.on_retry(turn)?,
                Ev::FaultDown { node } => self.on_fault_down(node)?,
                Ev::FaultUp { node } => self.on_fault_up(node),
                Ev::ProbeSend => self.on_probe_send()?,
                Ev::ProbeFail { node } => self.on_probe_fail(node)?,
            }
        }

        let mut counters = CacheCounters::default();
        for n in &self.nodes {
            counters.merge(n.cache.counters());
        }
        let meta = RunMeta {
            scenario: self.sc.name.clone(),
            scenario_digest: self.sc.digest(),
            seed: self.sc.seed,
            routing_policy: self.sc.routing_policy.as_str().to_string(),
            mode: "sim".to_string(),
            health_transitions: self.transitions,
            evicted_entries: counters.evicted_entries,
            evicted_tokens: counters.evicted_tokens,
            committed_tokens: counters.committed_tokens,
        };
        let turns: Vec<TurnOutcome> = self
            .outcomes
            .into_iter()
            .enumerate()
            .map(|(i, o)| o.ok_or_else(|| SimError::Internal(format!("turn {i} unresolved"))))
            .collect::<Result<_, _>>()?;
        let report = assemble(&turns, &self.tpot_series, &meta)?;
        self.events.sort_by_key(|e| e.time_us);
        Ok(SimResult {
            report,
            turns,
            events: self.events,
        })
    }

    fn on_arrival(&mut self, turn: usize) -> Result<(), SimError> {
        if self.next_arrival < self.trace.len() {
            let idx = self.next_arrival;
            self.next_arrival += 1;
            self.push(self.trace[idx].arrival_us, Ev::Arrival { turn: idx });
        }
        let tr = &self.trace[turn];
        self.log(
            EventKind::Arrival,
            Some(&tr.session),
            Some(tr.turn_index),
            None,
            format!("required={} new={}", tr.required_context_tokens, tr.new_tokens),
        );
        let st = &self.sessions[&tr.session];
        if !st.in_flight && st.turns.get(st.next_pos) == Some(&turn) {
            self.start_turn(turn)?;
        }
        Ok(())
    }

    fn start_turn(&mut self, turn: usize) -> Result<(), SimError> {
        let sess = &self.trace[turn].session;
        let st = self
            .sessions
            .get_mut(sess)
            .ok_or_else(|| SimError::Internal(format!("unknown session {sess}")))?;
        st.in_flight = true;
        st.next_pos += 1;
        self.turns[turn].t0 = self.now;
        self.attempt_dispatch(turn)
    }

    /// Pick a node for the turn under the active policy. None means no
    /// capacity is reachable right now.
    fn choose_node(&mut self, turn: usize) -> Result<Option<usize>, SimError> {
        let tr = &self.trace[turn];
        let choice = match self.sc.routing_policy {
            RoutingPolicy::StickyConsistentHash => {
                if self.sc.health.enabled {
                    match &self.effective {
                        Some(r) => Some(self.node_idx[r.route(&tr.session)?.as_str()]),
                        None => None,
                    }
                } else {
                    let excluded = &self.turns[turn].excluded;
                    if excluded.is_empty() {
                        Some(self.node_idx[self.full_ring.route(&tr.session)?.as_str()])
                    } else {
                        let members: Vec<(NodeId, u32)> = self
                            .full_ring
                            .members()
                            .iter()
                            .filter(|(id, _)| !excluded.contains(&self.node_idx[id.as_str()]))
                            .cloned()
                            .collect();
                        if members.is_empty() {
                            None
                        } else {
                            let sub = Ring::build(
                                &members,
                                self.full_ring.vnodes_per_weight(),
                                self.full_ring.hash_seed(),
                            )?;
                            Some(self.node_idx[sub.route(&tr.session)?.as_str()])
                        }
                    }
                }
            }
            RoutingPolicy::RoundRobin => {
                let excluded = &self.turns[turn].excluded;
                let live: Vec<usize> = if self.sc.health.enabled {
                    match &self.effective {
                        Some(r) => r
                            .members()
                            .iter()
                            .map(|(id, _)| self.node_idx[id.as_str()])
                            .collect(),
                        None => Vec::new(),
                    }
                } else {
                    self.full_ring
                        .members()
                        .iter()
                        .map(|(id, _)| self.node_idx[id.as_str()])
                        .filter(|i| !excluded.contains(i))
                        .collect()
                };
                if live.is_empty() {
                    None
                } else {
                    let i = live[(self.rr_counter % live.len() as u64) as usize];
                    self.rr_counter += 1;
                    Some(i)
                }
            }
        };
        Ok(choice)
    }

    fn attempt_dispatch(&mut self, turn: usize) -> Result<(), SimError> {
        let tr = &self.trace[turn];
        match self.choose_node(turn)? {
            None => self.drop_turn(turn),
            Some(ni) => {
                let node_id = self.nodes[ni].id.clone();
                let retries = self.turns[turn].retries;
                self.log(
                    EventKind::Dispatch,
                    Some(&tr.session),
                    Some(tr.turn_index),
                    Some(&node_id),
                    format!("retries={retries}"),
                );
                if !self.nodes[ni].up {
                    self.log(
                        EventKind::DispatchRetry,
                        Some(&tr.session),
                        Some(tr.turn_index),
                        Some(&node_id),
                        "reason=connect_fail".to_string(),
                    );
                    self.turns[turn].retries += 1;
                    if self.sc.health.enabled {
                        self.passive_failure(ni)?;
                        self.push(self.now + FAIL_FAST_US, Ev::Retry { turn });
                    } else {
                        self.turns[turn].excluded.push(ni);
                        self.push(
                            self.now + self.sc.request_timeout_ms * 1000,
                            Ev::Retry { turn },
                        );
                    }
                    Ok(())
                } else {
                    self.place(turn, ni)
                }
            }
        }
    }

    /// Admit the turn on a live node: reserve a service slot, consult the
    /// cache, and price every latency stage.
    fn place(&mut self, turn: usize, ni: usize) -> Result<(), SimError> {
        let tr = &self.trace[turn];
        let t_attempt = self.now;
        let (start, hit, miss, cold) = {
            let node = &mut self.nodes[ni];
            let start = t_attempt.max(node.next_free_us);
            node.next_free_us = start + node.spacing_us;
            let oc = node.cache.lookup(&tr.session, tr.required_context_tokens, start);
            (start, oc.hit_tokens, oc.miss_tokens, oc.cold_start)
        };

        let cost = &self.sc.nodes[ni].cost;
        let turn_s = tr.turn_index.to_string();
        let prefill_ms = cost.prefill_latency(miss);
        let mut floor_rng = derive_rng(self.sc.seed, &["ttft_floor", tr.session.as_str(), &turn_s]);
        let floor_ms = cost.ttft_floor.sample(&mut floor_rng);

        let mut tpot_rng = derive_rng(self.sc.seed, &["tpot", tr.session.as_str(), &turn_s]);
        let mut tpot_samples = Vec::with_capacity(tr.output_tokens as usize);
        let mut decode_ms = 0.0;
        for _ in 0..tr.output_tokens {
            let s = cost.tpot.sample(&mut tpot_rng);
            decode_ms += s;
            tpot_samples.push(s);
        }

        let t0 = self.turns[turn].t0;
        let queue_ms = (start - t_attempt) as f64 / 1000.0;
        let pending_ms = (start - t0) as f64 / 1000.0;
        let ttft_ms = pending_ms + floor_ms + prefill_ms;
        let mut stage_rng = derive_rng(self.sc.seed, &["stages", tr.session.as_str(), &turn_s]);
        let b = cost.ttfa(ttft_ms, &mut stage_rng);
        let done_us = start + round_us(prefill_ms + floor_ms + decode_ms);

        let rt = &mut self.turns[turn];
        rt.attempt += 1;
        let attempt = rt.attempt;
        rt.pending = Some(PendingTurn {
            node: ni,
            done_us,
            queue_ms,
            prefill_ms,
            decode_ms,
            ttft_ms,
            asr_ms: b.endpoint_asr_ms,
            tts_ms: b.tts_ms,
            playout_ms: b.playout_ms,
            ttfa_ms: b.total_ms,
            hit,
            miss,
            cold,
            tpot_samples,
        });
        self.nodes[ni].in_flight.insert(turn);
        self.push(start + round_us(prefill_ms), Ev::PrefillDone { turn, attempt });
        self.push(
            start + round_us(prefill_ms + floor_ms),
            Ev::FirstToken { turn, attempt },
        );
        self.push(done_us, Ev::TurnDone { turn, attempt });
        Ok(())
    }

    fn on_stage_log(&mut self, turn: usize, attempt: u32, kind: EventKind) {
        let rt = &self.turns[turn];
        if rt.done || rt.attempt != attempt || rt.pending.is_none() {
            return;
        }
        let tr = &self.trace[turn];
        let node_id = self.nodes[rt.pending.as_ref().unwrap().node].id.clone();
        self.log(kind, Some(&tr.session), Some(tr.turn_index), Some(&node_id), String::new());
    }

    fn on_turn_done(&mut self, turn: usize, attempt: u32) -> Result<(), SimError> {
        let rt = &mut self.turns[turn];
        if rt.done || rt.attempt != attempt {
            return Ok(());
        }
        let p = rt
            .pending
            .take()
            .ok_or_else(|| SimError::Internal(format!("turn {turn} completed without placement")))?;
        let retries = rt.retries;
        let t0 = rt.t0;
        rt.done = true;
        self.nodes[p.node].in_flight.remove(&turn);

        let tr = &self.trace[turn];
        let node_id = self.nodes[p.node].id.clone();
        match self.nodes[p.node]
            .cache
            .commit(&tr.session, tr.required_context_tokens, self.now)
        {
            Ok(evicted) => {
                for victim in evicted {
                    self.log(
                        EventKind::Eviction,
                        Some(&victim),
                        None,
                        Some(&node_id),
                        String::new(),
                    );
                }
            }
            Err(CacheError::EntryExceedsCapacity { tokens, capacity, .. }) => {
                self.log(
                    EventKind::CommitSkipped,
                    Some(&tr.session),
                    Some(tr.turn_index),
                    Some(&node_id),
                    format!("tokens={tokens} capacity={capacity}"),
                );
            }
            Err(e) => return Err(SimError::Cache(e)),
        }

        for s in &p.tpot_samples {
            self.tpot_series.push(*s);
        }
        let status = if retries > 0 && p.cold {
            TurnStatus::ReroutedCold
        } else {
            TurnStatus::Ok
        };
        self.log(
            EventKind::TurnDone,
            Some(&tr.session),
            Some(tr.turn_index),
            Some(&node_id),
            format!("hit={} miss={}", p.hit, p.miss),
        );
        let outcome = TurnOutcome {
            session: tr.session.clone(),
            turn_index: tr.turn_index,
            node: Some(node_id),
            status,
            arrival_us: tr.arrival_us,
            done_us: p.done_us,
            required_tokens: tr.required_context_tokens,
            new_tokens: tr.new_tokens,
            output_tokens: tr.output_tokens,
            hit_tokens: p.hit,
            miss_tokens: p.miss,
            cold_start: p.cold,
            queue_ms: p.queue_ms,
            prefill_ms: p.prefill_ms,
            ttft_ms: p.ttft_ms,
            decode_ms: p.decode_ms,
            endpoint_asr_ms: p.asr_ms,
            tts_ms: p.tts_ms,
            playout_ms: p.playout_ms,
            ttfa_ms: p.ttfa_ms,
            total_ms: (p.done_us - t0) as f64 / 1000.0,
            retries,
        };
        self.finish_turn(turn, outcome)
    }

    fn drop_turn(&mut self, turn: usize) -> Result<(), SimError> {
        let tr = &self.trace[turn];
        self.log(
            EventKind::Dropped,
            Some(&tr.session),
            Some(tr.turn_index),
            None,
            "reason=no_capacity".to_string(),
        );
        let rt = &mut self.turns[turn];
        rt.done = true;
        let retries = rt.retries;
        let outcome = TurnOutcome {
            session: tr.session.clone(),
            turn_index: tr.turn_index,
            node: None,
            status: TurnStatus::NoCapacity,
            arrival_us: tr.arrival_us,
            done_us: self.now,
            required_tokens: tr.required_context_tokens,
            new_tokens: tr.new_tokens,
            output_tokens: tr.output_tokens,
            hit_tokens: 0,
            miss_tokens: 0,
            cold_start: false,
            queue_ms: 0.0,
            prefill_ms: 0.0,
            ttft_ms: 0.0,
            decode_ms: 0.0,
            endpoint_asr_ms: 0.0,
            tts_ms: 0.0,
            playout_ms: 0.0,
            ttfa_ms: 0.0,
            total_ms: 0.0,
            retries,
        };
        self.finish_turn(turn, outcome)
    }

    /// Record the outcome and advance the session: if its next turn has
    /// already arrived, it dispatches immediately.
    fn finish_turn(&mut self, turn: usize, outcome: TurnOutcome) -> Result<(), SimError> {
        self.outcomes[turn] = Some(outcome);
        self.pending_turns -= 1;
        let sess = &self.trace[turn].session;
        let st = self
            .sessions
            .get_mut(sess)
            .ok_or_else(|| SimError::Internal(format!("unknown session {sess}")))?;
        st.in_flight = false;
        if let Some(&next) = st.turns.get(st.next_pos) {
            if self.trace[next].arrival_us <= self.now {
                self.start_turn(next)?;
            }
        }
        Ok(())
    }

    fn on_retry(&mut self, turn: usize) -> Result<(), SimError> {
        let rt = &self.turns[turn];
        if rt.done || rt.pending.is_some() {
            return Ok(());
        }
        self.attempt_dispatch(turn)
    }

    fn on_fault_down(&mut self, ni: usize) -> Result<(), SimError> {
        let node_id = self.nodes[ni].id.clone();
        self.log(EventKind::Fault, None, None, Some(&node_id), "state=down".to_string());
        self.nodes[ni].up = false;
        // A crash loses GPU-resident cache state.
        self.nodes[ni].cache.clear();
        let interrupted: Vec<usize> = self.nodes[ni].in_flight.iter().copied().collect();
        self.nodes[ni].in_flight.clear();
        for t in interrupted {
            let tr = &self.trace[t];
            let session = tr.session.clone();
            let turn_index = tr.turn_index;
            {
                let rt = &mut self.turns[t];
                rt.attempt += 1; // invalidate this attempt's scheduled events
                rt.pending = None;
                rt.retries += 1;
            }
            self.log(
                EventKind::DispatchRetry,
                Some(&session),
                Some(turn_index),
                Some(&node_id),
                "reason=node_down".to_string(),
            );
            if self.sc.health.enabled {
                // Each broken connection is a failure signal to the gateway.
                self.passive_failure(ni)?;
                self.push(self.now + FAIL_FAST_US, Ev::Retry { turn: t });
            } else {
                self.turns[t].excluded.push(ni);
                self.push(self.now + self.sc.request_timeout_ms * 1000, Ev::Retry { turn: t });
            }
        }
        Ok(())
    }

    fn on_fault_up(&mut self, ni: usize) {
        let node_id = self.nodes[ni].id.clone();
        self.nodes[ni].up = true;
        self.log(EventKind::Fault, None, None, Some(&node_id), "state=up".to_string());
    }

    fn on_probe_send(&mut self) -> Result<(), SimError> {
        if !self.sc.health.enabled {
            return Ok(());
        }
        for i in 0..self.probe_order.len() {
            let ni = self.probe_order[i];
            if self.nodes[ni].up {
                self.apply_probe(ni, ProbeOutcome::Success { latency_ms: 1.0 }, false)?;
            } else {
                // The probe hangs until its timeout, so the verdict lands late.
                self.push(
                    self.now + self.sc.health.probe_timeout_ms * 1000,
                    Ev::ProbeFail { node: ni },
                );
            }
        }
        if self.pending_turns > 0 {
            self.push(self.now + self.sc.health.probe_interval_ms * 1000, Ev::ProbeSend);
        }
        Ok(())
    }

    fn on_probe_fail(&mut self, ni: usize) -> Result<(), SimError> {
        self.apply_probe(ni, ProbeOutcome::Failure, false)
    }

    fn passive_failure(&mut self, ni: usize) -> Result<(), SimError> {
        self.apply_probe(ni, ProbeOutcome::Failure, true)
    }

    fn apply_probe(&mut self, ni: usize, outcome: ProbeOutcome, passive: bool) -> Result<(), SimError> {
        if !self.sc.health.enabled {
            return Ok(());
        }
        let before = self.health[ni].state;
        let next = record_probe_result(&self.health[ni], outcome, self.now / 1000, &self.sc.health);
        let after = next.state;
        self.health[ni] = next;
        let node_id = self.nodes[ni].id.clone();
        let verdict = match outcome {
            ProbeOutcome::Success { .. } => "ok",
            ProbeOutcome::Failure => "fail",
        };
        self.log(
            EventKind::Probe,
            None,
            None,
            Some(&node_id),
            format!("outcome={verdict} passive={passive}"),
        );
        if after != before {
            self.transitions += 1;
            self.log(
                EventKind::Transition,
                None,
                None,
                Some(&node_id),
                format!("from={} to={}", state_name(before), state_name(after)),
            );
            self.rebuild_effective()?;
        }
        Ok(())
    }

    fn rebuild_effective(&mut self) -> Result<(), SimError> {
        match effective_ring(&self.full_ring, &self.health) {
            Ok(r) => {
                self.effective = Some(r);
                Ok(())
            }
            Err(RingError::EmptyRing) => {
                self.effective = None;
                Ok(())
            }
            Err(e) => Err(SimError::Ring(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TurnStatus;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    /// Single node, fully constant cost model, for hand-checkable timings:
    /// prefill 0.2 ms/token, floor 380 ms, tpot 10 ms, asr 100, tts 100,
    /// playout 50, service rate 10/s.
    fn flat_scenario(extra: &str) -> Scenario {
        let doc = format!(
            r#"
name = "flat"
seed = 7
duration_s = 60.0

[cost]
prefill_base_ms = 0.0
prefill_ms_per_token = 0.2
ttft_floor = {{ constant = {{ ms = 380.0 }} }}
tpot = {{ constant = {{ ms = 10.0 }} }}
endpoint_asr = {{ constant = {{ ms = 100.0 }} }}
tts = {{ constant = {{ ms = 100.0 }} }}
playout = {{ constant = {{ ms = 50.0 }} }}
service_rate_reqs = 10.0

[[nodes]]
id = "a"
cache_capacity_tokens = 100000
{extra}
"#
        );
        Scenario::from_toml_str(&doc).unwrap()
    }

    fn req(sess: &str, turn: u32, arrival_us: u64, required: u64, new: u64, output: u64) -> TurnRequest {
        TurnRequest {
            session: SessionId::new(sess),
            turn_index: turn,
            arrival_us,
            required_context_tokens: required,
            new_tokens: new,
            output_tokens: output,
        }
    }

    #[test]
    fn hand_replay_two_turn_session() {
        let sc = flat_scenario("");
        let trace = vec![
            req("s1", 0, 0, 1000, 1000, 10),
            req("s1", 1, 1_000_000, 1100, 100, 10),
        ];
        let res = run_with_trace(&sc, &trace).unwrap();
        assert_eq!(res.turns.len(), 2);

        let t0 = &res.turns[0];
        assert_eq!(t0.status, TurnStatus::Ok);
        assert!(t0.cold_start);
        assert_eq!((t0.hit_tokens, t0.miss_tokens), (0, 1000));
        close(t0.prefill_ms, 200.0);
        close(t0.queue_ms, 0.0);
        close(t0.ttft_ms, 580.0);
        close(t0.decode_ms, 100.0);
        close(t0.ttfa_ms, 100.0 + 580.0 + 100.0 + 50.0);
        assert_eq!(t0.done_us, 680_000);
        close(t0.total_ms, 680.0);

        let t1 = &res.turns[1];
        assert!(!t1.cold_start);
        assert_eq!((t1.hit_tokens, t1.miss_tokens), (1000, 100));
        close(t1.prefill_ms, 20.0);
        close(t1.ttft_ms, 400.0);
        assert_eq!(t1.done_us, 1_500_000);

        let cache = &res.report.cache;
        assert_eq!(cache.overall.hit_tokens, 1000);
        assert_eq!(cache.overall.miss_tokens, 1100);
        close(cache.steady.chr, 1000.0 / 1100.0);
        close(cache.steady.reuse_factor.unwrap(), 10.0);
        assert_eq!(cache.committed_tokens, 1100);
        assert_eq!(cache.evicted_entries, 0);

        close(res.report.latency["ttft"].p50_ms, 400.0);
        close(res.report.latency["tpot"].p99_ms, 10.0);

        let kinds: Vec<EventKind> = res
            .events
            .iter()
            .filter(|e| e.turn == Some(0))
            .map(|e| e.kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                EventKind::Arrival,
                EventKind::Dispatch,
                EventKind::PrefillDone,
                EventKind::FirstToken,
                EventKind::TurnDone
            ]
        );
    }

    #[test]
    fn service_rate_queues_simultaneous_turns() {
        let sc = flat_scenario("");
        let trace = vec![
            req("s1", 0, 0, 100, 100, 1),
            req("s2", 0, 0, 100, 100, 1),
        ];
        let res = run_with_trace(&sc, &trace).unwrap();
        let by_sess = |name: &str| {
            res.turns
                .iter()
                .find(|t| t.session.as_str() == name)
                .unwrap()
        };
        close(by_sess("s1").queue_ms, 0.0);
        close(by_sess("s2").queue_ms, 100.0);
        close(by_sess("s2").ttft_ms, 100.0 + 380.0 + 20.0);
    }

    #[test]
    fn session_turns_serialize_behind_slow_predecessor() {
        let sc = flat_scenario("");
        // Turn 1 arrives while turn 0 is still decoding (done at 680ms).
        let trace = vec![
            req("s1", 0, 0, 1000, 1000, 10),
            req("s1", 1, 100_000, 1100, 100, 10),
        ];
        let res = run_with_trace(&sc, &trace).unwrap();
        let t1 = &res.turns[1];
        // Dispatched at predecessor completion, not at arrival; the node is
        // free again by then (spacing 100ms), so no queueing on top.
        assert_eq!(t1.done_us, 680_000 + 500_000);
        close(t1.total_ms, 500.0);
    }

    #[test]
    fn deterministic_across_runs() {
        let doc = r#"
name = "det"
seed = 11
duration_s = 20.0
[[nodes]]
id = "a"
cache_capacity_tokens = 2000000
[[nodes]]
id = "b"
cache_capacity_tokens = 2000000
[[workload]]
profile = "insurance_benefits"
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.events.len(), b.events.len());

        let mut sc2 = sc.clone();
        sc2.seed = 12;
        let c = run(&sc2).unwrap();
        assert_ne!(a.report.to_json(), c.report.to_json());
    }

    #[test]
    fn sticky_routing_misses_only_new_tokens_after_turn_zero() {
        let doc = r#"
name = "sticky-law"
seed = 3
duration_s = 30.0
[[nodes]]
id = "a"
cache_capacity_tokens = 5000000
[[nodes]]
id = "b"
cache_capacity_tokens = 5000000
[[nodes]]
id = "c"
cache_capacity_tokens = 5000000
[[workload]]
profile = "care_gap"
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        assert!(res.report.counts.turns > 50);
        for t in &res.turns {
            if t.turn_index == 0 {
                assert!(t.cold_start);
                assert_eq!(t.miss_tokens, t.required_tokens);
            } else {
                assert_eq!(t.retries, 0);
                assert_eq!(t.miss_tokens, t.new_tokens, "{}#{}", t.session, t.turn_index);
            }
        }
    }

    #[test]
    fn round_robin_spreads_and_costs_more_prefill() {
        let doc = r#"
name = "ablation"
seed = 5
duration_s = 40.0
[[nodes]]
id = "a"
cache_capacity_tokens = 5000000
[[nodes]]
id = "b"
cache_capacity_tokens = 5000000
[[nodes]]
id = "c"
cache_capacity_tokens = 5000000
[[nodes]]
id = "d"
cache_capacity_tokens = 5000000
[[workload]]
profile = "discharge_followup"
arrival_rate = 0.6
"#;
        let sticky = Scenario::from_toml_str(doc).unwrap();
        let mut rr = sticky.clone();
        rr.routing_policy = RoutingPolicy::RoundRobin;
        let s = run(&sticky).unwrap();
        let r = run(&rr).unwrap();
        assert!(s.report.cache.overall.chr > r.report.cache.overall.chr);
        assert!(
            s.report.latency["prefill"].mean_ms < r.report.latency["prefill"].mean_ms,
            "sticky {} vs rr {}",
            s.report.latency["prefill"].mean_ms,
            r.report.latency["prefill"].mean_ms
        );
        // Round robin still lands work on every node.
        assert_eq!(r.report.per_node.len(), 4);
    }

    #[test]
    fn fault_with_health_checks_removes_and_reroutes() {
        let doc = r#"
name = "drill"
seed = 13
duration_s = 60.0
[[nodes]]
id = "a"
cache_capacity_tokens = 2000000
[[nodes]]
id = "b"
cache_capacity_tokens = 2000000
[[workload]]
profile = "insurance_benefits"
arrival_rate = 2.0
[[faults]]
node = "b"
fail_at_ms = 10000
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        assert_eq!(res.report.counts.dropped_turns, 0);
        assert!(res.report.counts.health_transitions >= 1);

        let removal = res
            .events
            .iter()
            .find(|e| e.kind == EventKind::Transition && e.detail.contains("to=removed"))
            .expect("node b removed");
        assert_eq!(removal.node.as_ref().unwrap().as_str(), "b");
        // Detection needs at most one probe interval plus its timeout.
        assert!(
            removal.time_us
                <= 10_000_000 + (sc.health.probe_interval_ms + sc.health.probe_timeout_ms) * 1000
        );
        let late_dispatch = res.events.iter().any(|e| {
            e.kind == EventKind::Dispatch
                && e.node.as_ref().map(|n| n.as_str()) == Some("b")
                && e.time_us > removal.time_us
        });
        assert!(!late_dispatch, "dispatch to a removed node");
    }

    #[test]
    fn fault_without_health_checks_pays_timeouts() {
        let doc = r#"
name = "no-health"
seed = 13
duration_s = 40.0
[health]
enabled = false
[[nodes]]
id = "a"
cache_capacity_tokens = 2000000
[[nodes]]
id = "b"
cache_capacity_tokens = 2000000
[[workload]]
profile = "insurance_benefits"
arrival_rate = 2.0
[[faults]]
node = "b"
fail_at_ms = 10000
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        assert_eq!(res.report.counts.dropped_turns, 0);
        assert_eq!(res.report.counts.health_transitions, 0);
        let slow: Vec<&TurnOutcome> = res
            .turns
            .iter()
            .filter(|t| t.retries > 0 && t.status != TurnStatus::NoCapacity)
            .collect();
        assert!(!slow.is_empty(), "some turns hit the dead node");
        for t in &slow {
            assert!(t.ttft_ms >= 10_000.0, "failover pays the request timeout");
            assert_eq!(t.node.as_ref().unwrap().as_str(), "a");
        }
    }

    #[test]
    fn lone_node_failure_drops_turns_without_capacity() {
        let doc = r#"
name = "island"
seed = 2
duration_s = 20.0
[[nodes]]
id = "a"
cache_capacity_tokens = 2000000
[[workload]]
profile = "insurance_benefits"
arrival_rate = 1.0
[[faults]]
node = "a"
fail_at_ms = 0
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        assert!(res.report.counts.turns > 0);
        assert_eq!(res.report.counts.dropped_turns, res.report.counts.turns);
        assert!(res.report.no_capacity);
        assert_eq!(res.report.throughput.req_per_s, 0.0);
    }

    #[test]
    fn recovery_rejoins_after_probe_successes() {
        let doc = r#"
name = "rejoin"
seed = 21
duration_s = 120.0
[[nodes]]
id = "a"
cache_capacity_tokens = 2000000
[[nodes]]
id = "b"
cache_capacity_tokens = 2000000
[[workload]]
profile = "insurance_benefits"
arrival_rate = 1.0
[[faults]]
node = "b"
fail_at_ms = 10000
recover_at_ms = 30000
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        let rejoined = res
            .events
            .iter()
            .find(|e| {
                e.kind == EventKind::Transition
                    && e.detail.contains("from=removed")
                    && e.node.as_ref().map(|n| n.as_str()) == Some("b")
            })
            .expect("node b rejoins");
        // Three successful probes after recovery, 5s apart.
        assert!(rejoined.time_us >= 30_000_000);
        assert!(rejoined.time_us <= 50_000_000);
        let served_after = res.events.iter().any(|e| {
            e.kind == EventKind::Dispatch
                && e.node.as_ref().map(|n| n.as_str()) == Some("b")
                && e.time_us > rejoined.time_us
        });
        assert!(served_after, "rejoined node takes traffic again");
    }

    #[test]
    fn empty_workload_produces_empty_report() {
        let doc = r#"
name = "idle"
seed = 1
duration_s = 10.0
[[nodes]]
id = "a"
cache_capacity_tokens = 1000
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        assert_eq!(res.report.counts.turns, 0);
        assert_eq!(res.report.throughput.elapsed_s, 0.0);
        assert!(!res.report.no_capacity);
    }

    #[test]
    fn oversized_context_skips_commit_but_serves() {
        let sc = flat_scenario("");
        // Capacity is 100k; this session's context can never be cached.
        let trace = vec![
            req("s1", 0, 0, 150_000, 150_000, 1),
            req("s1", 1, 1_000_000, 150_100, 100, 1),
        ];
        let res = run_with_trace(&sc, &trace).unwrap();
        assert_eq!(res.report.counts.ok_turns, 2);
        // Nothing was cached, so the second turn recomputes everything.
        assert_eq!(res.turns[1].miss_tokens, 150_100);
        assert!(res
            .events
            .iter()
            .any(|e| e.kind == EventKind::CommitSkipped));
        assert_eq!(res.report.cache.committed_tokens, 0);
    }

    #[test]
    fn eviction_events_appear_under_pressure() {
        // Two sessions sharing a 1500-token cache: each commit evicts the other.
        let sc = flat_scenario("");
        let mut sc = sc;
        sc.nodes[0].cache_capacity_tokens = 1500;
        let trace = vec![
            req("s1", 0, 0, 1000, 1000, 1),
            req("s2", 0, 2_000_000, 1000, 1000, 1),
            req("s1", 1, 4_000_000, 1100, 100, 1),
        ];
        let res = run_with_trace(&sc, &trace).unwrap();
        assert!(res.events.iter().any(|e| e.kind == EventKind::Eviction));
        assert!(res.report.cache.evicted_entries >= 1);
        // s1 was evicted by s2's commit, so its return is a cold start.
        assert!(res.turns[2].cold_start);
    }

    #[test]
    fn events_are_time_ordered() {
        let doc = r#"
name = "ordered"
seed = 9
duration_s = 30.0
[[nodes]]
id = "a"
cache_capacity_tokens = 2000000
[[workload]]
profile = "care_gap"
arrival_rate = 1.0
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let res = run(&sc).unwrap();
        assert!(res.events.windows(2).all(|w| w[0].time_us <= w[1].time_us));
        let line = res.events[0].render_line();
        assert!(line.starts_with("t_us=") && line.contains("kind="));
    }

    #[test]
    fn trace_must_be_sorted() {
        let sc = flat_scenario("");
        let trace = vec![
            req("s1", 0, 5_000_000, 100, 100, 1),
            req("s2", 0, 0, 100, 100, 1),
        ];
        assert!(matches!(
            run_with_trace(&sc, &trace),
            Err(SimError::Internal(_))
        ));
    }
}

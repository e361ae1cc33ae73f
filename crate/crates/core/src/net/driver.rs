//! Load driver for live clusters. Replays a scenario's trace in wall-clock
//! time, one connection per session so turns stay strictly sequential,
//! measures TTFT and completion from the client side, and assembles the
//! same report shape the simulator emits (mode "live").

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use crate::metrics::{assemble, LatencySeries, RunMeta, RunReport, TurnOutcome, TurnStatus};
use crate::proto::{read_frame, write_frame, Frame};
use crate::ring::SessionId;
use crate::rngstream::derive_rng;
use crate::scenario::Scenario;
use crate::workload::TurnRequest;

use super::NetError;

pub struct LiveResult {
    pub report: RunReport,
    pub turns: Vec<TurnOutcome>,
}

/// Generate the scenario's trace and drive it against a running cluster.
/// `node_addrs` is only used to pull cache counters for the report after
/// the run; all turn traffic goes through the gateway.
pub fn drive(
    sc: &Scenario,
    gateway: SocketAddr,
    node_addrs: &BTreeMap<String, SocketAddr>,
) -> Result<LiveResult, NetError> {
    let trace = sc.generate_trace()?;
    drive_trace(sc, &trace, gateway, node_addrs)
}

pub fn drive_trace(
    sc: &Scenario,
    trace: &[TurnRequest],
    gateway: SocketAddr,
    node_addrs: &BTreeMap<String, SocketAddr>,
) -> Result<LiveResult, NetError> {
    for n in &sc.nodes {
        if !node_addrs.contains_key(n.id.as_str()) {
            return Err(NetError::Config(format!(
                "no address for node {} in the cluster map",
                n.id
            )));
        }
    }

    // Group the trace per session, keeping first-arrival order.
    let mut order: Vec<SessionId> = Vec::new();
    let mut by_session: HashMap<SessionId, Vec<&TurnRequest>> = HashMap::new();
    for tr in trace {
        by_session
            .entry(tr.session.clone())
            .or_insert_with(|| {
                order.push(tr.session.clone());
                Vec::new()
            })
            .push(tr);
    }

    let epoch = Instant::now();
    let mut per_session: Vec<(Vec<TurnOutcome>, Vec<f64>)> = Vec::with_capacity(order.len());
    std::thread::scope(|scope| -> Result<(), NetError> {
        let mut handles = Vec::with_capacity(order.len());
        for sess in &order {
            let turns = &by_session[sess];
            handles.push(scope.spawn(move || session_worker(sc, epoch, gateway, turns)));
        }
        for h in handles {
            let res = h.join().expect("session worker panicked")?;
            per_session.push(res);
        }
        Ok(())
    })?;

    let mut turns: Vec<TurnOutcome> = Vec::with_capacity(trace.len());
    let mut tpot = LatencySeries::new("tpot");
    for (outcomes, samples) in per_session {
        turns.extend(outcomes);
        for s in samples {
            tpot.push(s);
        }
    }
    turns.sort_by(|a, b| {
        (a.arrival_us, &a.session, a.turn_index).cmp(&(b.arrival_us, &b.session, b.turn_index))
    });

    // Cache counters live on the nodes; collect them for the report footer.
    let mut committed = 0u64;
    let mut evicted_entries = 0u64;
    let mut evicted_tokens = 0u64;
    for addr in node_addrs.values() {
        let mut s = TcpStream::connect_timeout(addr, Duration::from_millis(2_000))?;
        s.set_read_timeout(Some(Duration::from_millis(2_000)))?;
        write_frame(&mut s, &Frame::Stats)?;
        match read_frame(&mut s)? {
            Frame::StatsReply {
                committed_tokens,
                evicted_entries: ee,
                evicted_tokens: et,
                ..
            } => {
                committed += committed_tokens;
                evicted_entries += ee;
                evicted_tokens += et;
            }
            other => return Err(NetError::Unexpected(format!("stats reply, got {other:?}"))),
        }
    }

    let meta = RunMeta {
        scenario: sc.name.clone(),
        scenario_digest: sc.digest(),
        seed: sc.seed,
        routing_policy: sc.routing_policy.as_str().to_string(),
        mode: "live".to_string(),
        health_transitions: 0,
        evicted_entries,
        evicted_tokens,
        committed_tokens: committed,
    };
    let report = assemble(&turns, &tpot, &meta)?;
    Ok(LiveResult { report, turns })
}

fn now_us(epoch: Instant) -> u64 {
    epoch.elapsed().as_micros() as u64
}

fn session_worker(
    sc: &Scenario,
    epoch: Instant,
    gateway: SocketAddr,
    turns: &[&TurnRequest],
) -> Result<(Vec<TurnOutcome>, Vec<f64>), NetError> {
    let mut stream = TcpStream::connect(gateway)?;
    let _ = stream.set_nodelay(true);
    stream.set_read_timeout(Some(Duration::from_millis(60_000)))?;

    let mut outcomes = Vec::with_capacity(turns.len());
    let mut tpot_samples = Vec::new();
    for tr in turns {
        let now = now_us(epoch);
        if tr.arrival_us > now {
            std::thread::sleep(Duration::from_micros(tr.arrival_us - now));
        }
        let t0 = now_us(epoch);
        write_frame(
            &mut stream,
            &Frame::Turn {
                session: tr.session.clone(),
                turn: tr.turn_index,
                required: tr.required_context_tokens,
                new: tr.new_tokens,
                output: tr.output_tokens,
            },
        )?;

        let mut first: Option<(Frame, f64)> = None;
        let outcome = loop {
            match read_frame(&mut stream)? {
                f @ Frame::First { .. } => {
                    let ttft_ms = (now_us(epoch) - t0) as f64 / 1000.0;
                    first = Some((f, ttft_ms));
                }
                Frame::Done {
                    session,
                    turn,
                    node,
                    decode_ms,
                } => {
                    let done_us = now_us(epoch);
                    if session != tr.session || turn != tr.turn_index {
                        return Err(NetError::Unexpected(format!(
                            "done for {session}#{turn}, expected {}#{}",
                            tr.session, tr.turn_index
                        )));
                    }
                    let Some((
                        Frame::First {
                            queue_ms,
                            prefill_ms,
                            hit,
                            miss,
                            cold,
                            ..
                        },
                        ttft_ms,
                    )) = first.take()
                    else {
                        return Err(NetError::Unexpected("done arrived before first".into()));
                    };

                    let cost = &sc
                        .nodes
                        .iter()
                        .find(|n| n.id == node)
                        .ok_or_else(|| {
                            NetError::Unexpected(format!("turn served by unknown node {node}"))
                        })?
                        .cost;
                    let turn_s = tr.turn_index.to_string();
                    let mut stage_rng =
                        derive_rng(sc.seed, &["stages", tr.session.as_str(), &turn_s]);
                    let b = cost.ttfa(ttft_ms, &mut stage_rng);
                    let mut tpot_rng =
                        derive_rng(sc.seed, &["tpot", tr.session.as_str(), &turn_s]);
                    for _ in 0..tr.output_tokens {
                        tpot_samples.push(cost.tpot.sample(&mut tpot_rng));
                    }

                    break TurnOutcome {
                        session: tr.session.clone(),
                        turn_index: tr.turn_index,
                        node: Some(node),
                        status: TurnStatus::Ok,
                        arrival_us: tr.arrival_us,
                        done_us,
                        required_tokens: tr.required_context_tokens,
                        new_tokens: tr.new_tokens,
                        output_tokens: tr.output_tokens,
                        hit_tokens: hit,
                        miss_tokens: miss,
                        cold_start: cold,
                        queue_ms,
                        prefill_ms,
                        ttft_ms,
                        decode_ms,
                        endpoint_asr_ms: b.endpoint_asr_ms,
                        tts_ms: b.tts_ms,
                        playout_ms: b.playout_ms,
                        ttfa_ms: b.total_ms,
                        total_ms: (done_us - t0) as f64 / 1000.0,
                        retries: 0,
                    };
                }
                Frame::Error { msg } => {
                    let done_us = now_us(epoch);
                    let dropped = msg.starts_with("no capacity");
                    if !dropped {
                        return Err(NetError::Unexpected(format!("gateway error: {msg}")));
                    }
                    break TurnOutcome {
                        session: tr.session.clone(),
                        turn_index: tr.turn_index,
                        node: None,
                        status: TurnStatus::NoCapacity,
                        arrival_us: tr.arrival_us,
                        done_us,
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
                        retries: 0,
                    };
                }
                other => {
                    return Err(NetError::Unexpected(format!(
                        "unexpected frame while serving turn: {other:?}"
                    )))
                }
            }
        };
        outcomes.push(outcome);
    }
    Ok((outcomes, tpot_samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{gateway, node};
    use crate::sim;

    /// Tiny end-to-end check: three sessions over one node, live timings in
    /// the same ballpark as the simulator, token accounting identical.
    #[test]
    fn live_run_matches_sim_token_metrics() {
        let doc = r#"
name = "mini-live"
seed = 31
duration_s = 2.0

[cost]
ttft_floor = { constant = { ms = 20.0 } }
tpot = { constant = { ms = 1.0 } }

[[nodes]]
id = "a"
cache_capacity_tokens = 500000

[[workload]]
name = "chat"
arrival_rate = 2.0
initial_context_tokens = { constant = { value = 400 } }
new_tokens_per_turn = { constant = { value = 50 } }
output_tokens_per_turn = { constant = { value = 5 } }
turns_per_session = { constant = { value = 2 } }
inter_turn_gap_ms = { constant = { ms = 300.0 } }
"#;
        let sc = Scenario::from_toml_str(doc).unwrap();
        let simmed = sim::run(&sc).unwrap();

        let n = node::spawn(
            node::NodeServerConfig {
                id: sc.nodes[0].id.clone(),
                seed: sc.seed,
                cost: sc.nodes[0].cost,
                cache_capacity_tokens: sc.nodes[0].cache_capacity_tokens,
            },
            "127.0.0.1:0",
        )
        .unwrap();
        let mut upstreams = BTreeMap::new();
        upstreams.insert("a".to_string(), n.addr());
        let gw = gateway::spawn(
            gateway::GatewayConfig {
                ring: sc.build_ring().unwrap(),
                upstreams: upstreams.clone(),
                health: sc.health,
                request_timeout_ms: sc.request_timeout_ms,
            },
            "127.0.0.1:0",
        )
        .unwrap();

        let live = drive(&sc, gw.addr(), &upstreams).unwrap();
        gw.stop();
        n.stop();

        assert_eq!(live.report.mode, "live");
        assert_eq!(live.report.scenario_digest, simmed.report.scenario_digest);
        assert_eq!(live.report.counts.turns, simmed.report.counts.turns);
        assert_eq!(live.report.cache.overall, simmed.report.cache.overall);
        assert_eq!(live.report.cache.cold, simmed.report.cache.cold);
        assert_eq!(
            live.report.cache.committed_tokens,
            simmed.report.cache.committed_tokens
        );
        assert_eq!(live.report.per_node, simmed.report.per_node);
        assert_eq!(
            live.report.latency["tpot"].p99_ms,
            simmed.report.latency["tpot"].p99_ms
        );

        let d_ttft =
            (live.report.latency["ttft"].p50_ms - simmed.report.latency["ttft"].p50_ms).abs();
        assert!(d_ttft < 15.0, "ttft medians {d_ttft}ms apart");
    }
}

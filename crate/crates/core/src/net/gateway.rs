//! Session-affinity gateway. Routes each turn to a node by consistent
//! hashing of the session id, watches upstreams with periodic ping probes,
//! marks nodes that refuse connections, and retries a failed turn on the
//! next surviving node.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::health::{
    effective_ring, record_probe_result, HealthConfig, NodeHealth, ProbeOutcome,
};
use crate::proto::{read_frame, write_frame, Frame, ProtoError};
use crate::ring::{NodeId, Ring, RingError, SessionId};

use super::NetError;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub ring: Ring,
    pub upstreams: BTreeMap<String, SocketAddr>,
    pub health: HealthConfig,
    pub request_timeout_ms: u64,
}

struct Shared {
    cfg: GatewayConfig,
    epoch: Instant,
    inner: Mutex<Inner>,
}

struct Inner {
    health: Vec<NodeHealth>,
    effective: Option<Ring>,
    transitions: u64,
}

impl Shared {
    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    /// Apply a probe verdict for one node; rebuilds the routing ring when
    /// the node's state flips.
    fn apply_probe(&self, node: &NodeId, outcome: ProbeOutcome) {
        if !self.cfg.health.enabled {
            return;
        }
        let now_ms = self.now_ms();
        let mut inner = self.inner.lock().unwrap();
        let idx = match inner.health.iter().position(|h| &h.node == node) {
            Some(i) => i,
            None => return,
        };
        let before = inner.health[idx].state;
        let next = record_probe_result(&inner.health[idx], outcome, now_ms, &self.cfg.health);
        let after = next.state;
        inner.health[idx] = next;
        if after != before {
            inner.transitions += 1;
            inner.effective = effective_ring(&self.cfg.ring, &inner.health).ok();
        }
    }

    /// Next target for the session, skipping nodes already tried this turn.
    fn route(&self, session: &SessionId, tried: &[String]) -> Result<Option<NodeId>, RingError> {
        let inner = self.inner.lock().unwrap();
        let eff = match &inner.effective {
            Some(r) => r,
            None => return Ok(None),
        };
        if tried.is_empty() {
            return Ok(Some(eff.route(session)?.clone()));
        }
        let members: Vec<(NodeId, u32)> = eff
            .members()
            .iter()
            .filter(|(id, _)| !tried.iter().any(|t| t == id.as_str()))
            .cloned()
            .collect();
        if members.is_empty() {
            return Ok(None);
        }
        let sub = Ring::build(&members, eff.vnodes_per_weight(), eff.hash_seed())?;
        Ok(Some(sub.route(session)?.clone()))
    }
}

pub struct GatewayHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    joins: Vec<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for j in self.joins.drain(..) {
            let _ = j.join();
        }
    }
}

pub fn spawn(cfg: GatewayConfig, listen: &str) -> Result<GatewayHandle, NetError> {
    let member_ids: Vec<&str> = cfg.ring.members().iter().map(|(id, _)| id.as_str()).collect();
    for id in &member_ids {
        if !cfg.upstreams.contains_key(*id) {
            return Err(NetError::Config(format!("no upstream address for node {id}")));
        }
    }
    for id in cfg.upstreams.keys() {
        if !member_ids.contains(&id.as_str()) {
            return Err(NetError::Config(format!("upstream {id} is not on the ring")));
        }
    }

    let listener = TcpListener::bind(listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));

    let health: Vec<NodeHealth> = cfg
        .ring
        .members()
        .iter()
        .map(|(id, _)| NodeHealth::new(id.clone()))
        .collect();
    let shared = Arc::new(Shared {
        inner: Mutex::new(Inner {
            health,
            effective: Some(cfg.ring.clone()),
            transitions: 0,
        }),
        epoch: Instant::now(),
        cfg,
    });

    let mut joins = Vec::new();

    if shared.cfg.health.enabled {
        let mon_shared = shared.clone();
        let mon_stop = stop.clone();
        joins.push(thread::spawn(move || monitor_loop(mon_shared, mon_stop)));
    }

    let acc_shared = shared.clone();
    let acc_stop = stop.clone();
    joins.push(thread::spawn(move || {
        while !acc_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nodelay(true);
                    let shared = acc_shared.clone();
                    thread::spawn(move || handle_driver(shared, stream));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
        }
    }));

    Ok(GatewayHandle { addr, stop, joins })
}

fn monitor_loop(shared: Arc<Shared>, stop: Arc<AtomicBool>) {
    let interval = Duration::from_millis(shared.cfg.health.probe_interval_ms);
    loop {
        // Sleep first so a freshly started cluster gets a grace period, then
        // poll in small steps to stop promptly.
        let slept_until = Instant::now() + interval;
        while Instant::now() < slept_until {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            thread::sleep(Duration::from_millis(20));
        }
        // BTreeMap iteration gives node-id order.
        for (id, addr) in &shared.cfg.upstreams {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            let outcome = probe_node(*addr, shared.cfg.health.probe_timeout_ms);
            shared.apply_probe(&NodeId::new(id.clone()), outcome);
        }
    }
}

fn probe_node(addr: SocketAddr, timeout_ms: u64) -> ProbeOutcome {
    let timeout = Duration::from_millis(timeout_ms.max(1));
    let started = Instant::now();
    let mut stream = match TcpStream::connect_timeout(&addr, timeout) {
        Ok(s) => s,
        Err(_) => return ProbeOutcome::Failure,
    };
    if stream.set_read_timeout(Some(timeout)).is_err()
        || stream.set_write_timeout(Some(timeout)).is_err()
        || write_frame(&mut stream, &Frame::Ping).is_err()
    {
        return ProbeOutcome::Failure;
    }
    match read_frame(&mut stream) {
        Ok(Frame::Pong) => ProbeOutcome::Success {
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
        },
        _ => ProbeOutcome::Failure,
    }
}

fn handle_driver(shared: Arc<Shared>, stream: TcpStream) {
    let mut reader = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut writer = stream;
    loop {
        match read_frame(&mut reader) {
            Ok(Frame::Ping) => {
                if write_frame(&mut writer, &Frame::Pong).is_err() {
                    return;
                }
            }
            Ok(frame @ Frame::Turn { .. }) => {
                if serve_turn(&shared, &mut writer, frame).is_err() {
                    return;
                }
            }
            Ok(_) => {
                let _ = write_frame(
                    &mut writer,
                    &Frame::Error {
                        msg: "unexpected frame".to_string(),
                    },
                );
                return;
            }
            Err(ProtoError::Closed) => return,
            Err(_) => return,
        }
    }
}

fn serve_turn(shared: &Shared, writer: &mut TcpStream, frame: Frame) -> Result<(), NetError> {
    let session = match &frame {
        Frame::Turn { session, .. } => session.clone(),
        _ => return Err(NetError::Unexpected("serve_turn needs a turn frame".into())),
    };
    let mut tried: Vec<String> = Vec::new();
    loop {
        let target = shared.route(&session, &tried)?;
        let Some(node_id) = target else {
            write_frame(
                writer,
                &Frame::Error {
                    msg: format!("no capacity for session {session}"),
                },
            )?;
            return Ok(());
        };
        let addr = shared.cfg.upstreams[node_id.as_str()];
        match forward(shared, addr, &frame, writer) {
            Ok(()) => return Ok(()),
            Err(ForwardError::MidTurn(e)) => {
                // The driver already saw the first-token frame; a silent
                // retry would duplicate it.
                shared.apply_probe(&node_id, ProbeOutcome::Failure);
                write_frame(
                    writer,
                    &Frame::Error {
                        msg: format!("upstream {node_id} failed mid-turn: {e}"),
                    },
                )?;
                return Ok(());
            }
            Err(ForwardError::Driver(e)) => return Err(e),
            Err(ForwardError::Upstream) => {
                shared.apply_probe(&node_id, ProbeOutcome::Failure);
                tried.push(node_id.as_str().to_string());
            }
        }
    }
}

enum ForwardError {
    /// Upstream never produced a first token; safe to retry elsewhere.
    Upstream,
    /// Upstream died after the first token was already relayed.
    MidTurn(NetError),
    /// The driver side failed; give up on the connection.
    Driver(NetError),
}

fn forward(
    shared: &Shared,
    addr: SocketAddr,
    frame: &Frame,
    writer: &mut TcpStream,
) -> Result<(), ForwardError> {
    let connect_timeout = Duration::from_millis(shared.cfg.health.probe_timeout_ms.max(1));
    let mut upstream = TcpStream::connect_timeout(&addr, connect_timeout)
        .map_err(|_| ForwardError::Upstream)?;
    let _ = upstream.set_nodelay(true);
    upstream
        .set_read_timeout(Some(Duration::from_millis(shared.cfg.request_timeout_ms)))
        .map_err(|_| ForwardError::Upstream)?;
    write_frame(&mut upstream, frame).map_err(|_| ForwardError::Upstream)?;

    let mut saw_first = false;
    loop {
        let reply = read_frame(&mut upstream).map_err(|e| {
            if saw_first {
                ForwardError::MidTurn(NetError::Proto(e))
            } else {
                ForwardError::Upstream
            }
        })?;
        match reply {
            f @ Frame::First { .. } => {
                write_frame(writer, &f).map_err(|e| ForwardError::Driver(NetError::Io(e)))?;
                saw_first = true;
            }
            f @ Frame::Done { .. } => {
                write_frame(writer, &f).map_err(|e| ForwardError::Driver(NetError::Io(e)))?;
                return Ok(());
            }
            other => {
                return Err(if saw_first {
                    ForwardError::MidTurn(NetError::Unexpected(format!(
                        "upstream sent {other:?}"
                    )))
                } else {
                    ForwardError::Upstream
                });
            }
        }
    }
}

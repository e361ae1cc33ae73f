//! Stub inference node. Holds a real KV-cache ledger and spends wall-clock
//! time per the cost model: a turn sleeps through its queue slot, prefill,
//! TTFT floor, and decode, then commits the session's context. Randomness
//! comes from the run seed and the (session, turn) pair, so a node's timings
//! reproduce the simulator's exactly.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::cache::NodeCache;
use crate::cost::CostModel;
use crate::proto::{read_frame, write_frame, Frame, ProtoError};
use crate::ring::{NodeId, SessionId};
use crate::rngstream::derive_rng;

use super::NetError;

#[derive(Debug, Clone)]
pub struct NodeServerConfig {
    pub id: NodeId,
    pub seed: u64,
    pub cost: CostModel,
    pub cache_capacity_tokens: u64,
}

struct Shared {
    cfg: NodeServerConfig,
    spacing_us: u64,
    epoch: Instant,
    inner: Mutex<Inner>,
}

struct Inner {
    cache: NodeCache,
    next_free_us: u64,
}

impl Shared {
    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    fn sleep_until(&self, target_us: u64) {
        let now = self.now_us();
        if target_us > now {
            thread::sleep(Duration::from_micros(target_us - now));
        }
    }
}

pub struct NodeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl NodeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Bind and serve in background threads. `listen` may use port 0 to let the
/// OS pick; the actual address is on the handle.
pub fn spawn(cfg: NodeServerConfig, listen: &str) -> Result<NodeHandle, NetError> {
    cfg.cost.validate().map_err(|e| NetError::Config(e.to_string()))?;
    let listener = TcpListener::bind(listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(Shared {
        spacing_us: (1e6 / cfg.cost.service_rate_reqs).round() as u64,
        inner: Mutex::new(Inner {
            cache: NodeCache::new(cfg.cache_capacity_tokens),
            next_free_us: 0,
        }),
        epoch: Instant::now(),
        cfg,
    });

    let accept_stop = stop.clone();
    let join = thread::spawn(move || {
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nodelay(true);
                    let shared = shared.clone();
                    thread::spawn(move || handle_conn(shared, stream));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(_) => break,
            }
        }
    });

    Ok(NodeHandle {
        addr,
        stop,
        join: Some(join),
    })
}

fn handle_conn(shared: Arc<Shared>, stream: TcpStream) {
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
            Ok(Frame::Stats) => {
                let reply = {
                    let inner = shared.inner.lock().unwrap();
                    let c = inner.cache.counters();
                    Frame::StatsReply {
                        lookups: c.lookups,
                        hit_tokens: c.hits_tokens,
                        miss_tokens: c.miss_tokens,
                        committed_tokens: c.committed_tokens,
                        evicted_entries: c.evicted_entries,
                        evicted_tokens: c.evicted_tokens,
                        resident_tokens: inner.cache.resident_tokens(),
                        entries: inner.cache.entry_count() as u64,
                    }
                };
                if write_frame(&mut writer, &reply).is_err() {
                    return;
                }
            }
            Ok(Frame::Turn {
                session,
                turn,
                required,
                output,
                ..
            }) => {
                if serve_turn(&shared, &mut writer, session, turn, required, output).is_err() {
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

fn round_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

fn serve_turn(
    shared: &Shared,
    writer: &mut TcpStream,
    session: SessionId,
    turn: u32,
    required: u64,
    output: u64,
) -> Result<(), NetError> {
    let recv_us = shared.now_us();
    let (start_us, hit, miss, cold) = {
        let mut inner = shared.inner.lock().unwrap();
        let start = recv_us.max(inner.next_free_us);
        inner.next_free_us = start + shared.spacing_us;
        let oc = inner.cache.lookup(&session, required, start);
        (start, oc.hit_tokens, oc.miss_tokens, oc.cold_start)
    };

    let cost = &shared.cfg.cost;
    let turn_s = turn.to_string();
    let prefill_ms = cost.prefill_latency(miss);
    let mut floor_rng = derive_rng(shared.cfg.seed, &["ttft_floor", session.as_str(), &turn_s]);
    let floor_ms = cost.ttft_floor.sample(&mut floor_rng);
    let mut tpot_rng = derive_rng(shared.cfg.seed, &["tpot", session.as_str(), &turn_s]);
    let mut decode_ms = 0.0;
    for _ in 0..output {
        decode_ms += cost.tpot.sample(&mut tpot_rng);
    }

    // First token goes out after the queue slot, prefill, and the floor.
    shared.sleep_until(start_us + round_us(prefill_ms + floor_ms));
    write_frame(
        writer,
        &Frame::First {
            session: session.clone(),
            turn,
            node: shared.cfg.id.clone(),
            queue_ms: super::micros_ms(start_us - recv_us),
            prefill_ms,
            hit,
            miss,
            cold,
        },
    )?;

    shared.sleep_until(start_us + round_us(prefill_ms + floor_ms + decode_ms));
    {
        let mut inner = shared.inner.lock().unwrap();
        let now = shared.now_us();
        // An over-capacity context simply isn't cached; anything else here
        // is an engine bug worth surfacing to the peer.
        if let Err(e) = inner.cache.commit(&session, required, now) {
            if !matches!(e, crate::cache::CacheError::EntryExceedsCapacity { .. }) {
                drop(inner);
                write_frame(
                    writer,
                    &Frame::Error {
                        msg: format!("commit failed: {e}"),
                    },
                )?;
                return Err(NetError::Unexpected(e.to_string()));
            }
        }
    }
    write_frame(
        writer,
        &Frame::Done {
            session,
            turn,
            node: shared.cfg.id.clone(),
            decode_ms,
        },
    )?;
    Ok(())
}

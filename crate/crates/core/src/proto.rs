//! Wire protocol shared by the gateway, node servers, and the load driver.
//! A frame is a big-endian u32 byte length followed by one line of UTF-8
//! `key=value` text: human-readable in a packet capture, trivially parsed,
//! and strict about unknown or missing keys.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::ring::{NodeId, SessionId};

pub const MAX_FRAME_BYTES: u32 = 64 * 1024;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("connection closed")]
    Closed,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad frame: {0}")]
    Bad(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    /// Serve one turn (driver -> gateway -> node).
    Turn {
        session: SessionId,
        turn: u32,
        required: u64,
        new: u64,
        output: u64,
    },
    /// First token is out; carries the node-side cache verdict.
    First {
        session: SessionId,
        turn: u32,
        node: NodeId,
        queue_ms: f64,
        prefill_ms: f64,
        hit: u64,
        miss: u64,
        cold: bool,
    },
    /// Turn fully decoded and committed.
    Done {
        session: SessionId,
        turn: u32,
        node: NodeId,
        decode_ms: f64,
    },
    Ping,
    Pong,
    Stats,
    StatsReply {
        lookups: u64,
        hit_tokens: u64,
        miss_tokens: u64,
        committed_tokens: u64,
        evicted_entries: u64,
        evicted_tokens: u64,
        resident_tokens: u64,
        entries: u64,
    },
    Error {
        msg: String,
    },
}

struct Kv<'a> {
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Kv<'a> {
    fn parse(rest: &'a str) -> Result<Kv<'a>, ProtoError> {
        let mut map = BTreeMap::new();
        for part in rest.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| ProtoError::Bad(format!("field {part:?} is not key=value")))?;
            if map.insert(k, v).is_some() {
                return Err(ProtoError::Bad(format!("duplicate key {k}")));
            }
        }
        Ok(Kv { map })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<T, ProtoError> {
        let raw = self
            .map
            .remove(key)
            .ok_or_else(|| ProtoError::Bad(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| ProtoError::Bad(format!("bad value for {key}: {raw:?}")))
    }

    fn finish(self) -> Result<(), ProtoError> {
        match self.map.into_iter().next() {
            Some((k, _)) => Err(ProtoError::Bad(format!("unexpected key {k}"))),
            None => Ok(()),
        }
    }
}

impl Frame {
    pub fn encode_line(&self) -> String {
        match self {
            Frame::Turn {
                session,
                turn,
                required,
                new,
                output,
            } => format!("turn session={session} turn={turn} required={required} new={new} output={output}"),
            Frame::First {
                session,
                turn,
                node,
                queue_ms,
                prefill_ms,
                hit,
                miss,
                cold,
            } => format!(
                "first session={session} turn={turn} node={node} queue_ms={queue_ms} prefill_ms={prefill_ms} hit={hit} miss={miss} cold={cold}"
            ),
            Frame::Done {
                session,
                turn,
                node,
                decode_ms,
            } => format!("done session={session} turn={turn} node={node} decode_ms={decode_ms}"),
            Frame::Ping => "ping".to_string(),
            Frame::Pong => "pong".to_string(),
            Frame::Stats => "stats".to_string(),
            Frame::StatsReply {
                lookups,
                hit_tokens,
                miss_tokens,
                committed_tokens,
                evicted_entries,
                evicted_tokens,
                resident_tokens,
                entries,
            } => format!(
                "stats_reply lookups={lookups} hit_tokens={hit_tokens} miss_tokens={miss_tokens} committed_tokens={committed_tokens} evicted_entries={evicted_entries} evicted_tokens={evicted_tokens} resident_tokens={resident_tokens} entries={entries}"
            ),
            Frame::Error { msg } => format!("error msg={msg}"),
        }
    }

    pub fn parse_line(line: &str) -> Result<Frame, ProtoError> {
        let line = line.trim_end_matches(['\r', '\n']);
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "ping" | "pong" | "stats" => {
                if !rest.trim().is_empty() {
                    return Err(ProtoError::Bad(format!("{tag} takes no fields")));
                }
                Ok(match tag {
                    "ping" => Frame::Ping,
                    "pong" => Frame::Pong,
                    _ => Frame::Stats,
                })
            }
            // The message is free text: everything after "msg=".
            "error" => match rest.strip_prefix("msg=") {
                Some(msg) => Ok(Frame::Error { msg: msg.to_string() }),
                None => Err(ProtoError::Bad("error frame needs msg=".into())),
            },
            "turn" => {
                let mut kv = Kv::parse(rest)?;
                let f = Frame::Turn {
                    session: SessionId::new(kv.take::<String>("session")?),
                    turn: kv.take("turn")?,
                    required: kv.take("required")?,
                    new: kv.take("new")?,
                    output: kv.take("output")?,
                };
                kv.finish()?;
                Ok(f)
            }
            "first" => {
                let mut kv = Kv::parse(rest)?;
                let f = Frame::First {
                    session: SessionId::new(kv.take::<String>("session")?),
                    turn: kv.take("turn")?,
                    node: NodeId::new(kv.take::<String>("node")?),
                    queue_ms: kv.take("queue_ms")?,
                    prefill_ms: kv.take("prefill_ms")?,
                    hit: kv.take("hit")?,
                    miss: kv.take("miss")?,
                    cold: kv.take("cold")?,
                };
                kv.finish()?;
                Ok(f)
            }
            "done" => {
                let mut kv = Kv::parse(rest)?;
                let f = Frame::Done {
                    session: SessionId::new(kv.take::<String>("session")?),
                    turn: kv.take("turn")?,
                    node: NodeId::new(kv.take::<String>("node")?),
                    decode_ms: kv.take("decode_ms")?,
                };
                kv.finish()?;
                Ok(f)
            }
            "stats_reply" => {
                let mut kv = Kv::parse(rest)?;
                let f = Frame::StatsReply {
                    lookups: kv.take("lookups")?,
                    hit_tokens: kv.take("hit_tokens")?,
                    miss_tokens: kv.take("miss_tokens")?,
                    committed_tokens: kv.take("committed_tokens")?,
                    evicted_entries: kv.take("evicted_entries")?,
                    evicted_tokens: kv.take("evicted_tokens")?,
                    resident_tokens: kv.take("resident_tokens")?,
                    entries: kv.take("entries")?,
                };
                kv.finish()?;
                Ok(f)
            }
            other => Err(ProtoError::Bad(format!("unknown frame tag {other:?}"))),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let line = frame.encode_line();
    let bytes = line.as_bytes();
    debug_assert!(bytes.len() <= MAX_FRAME_BYTES as usize);
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

/// Read one frame. A clean EOF before any length byte is `Closed`; anything
/// truncated mid-frame is an error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, ProtoError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) => {
                if got == 0 {
                    return Err(ProtoError::Closed);
                }
                return Err(ProtoError::Bad("truncated frame length".into()));
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(ProtoError::Io(e)),
        }
    }
    let len = u32::from_be_bytes(len_buf);
    if len == 0 || len > MAX_FRAME_BYTES {
        return Err(ProtoError::Bad(format!("frame length {len} out of range")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    let text = std::str::from_utf8(&payload)
        .map_err(|_| ProtoError::Bad("frame is not utf-8".into()))?;
    Frame::parse_line(text)
}

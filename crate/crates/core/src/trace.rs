//! Line-delimited trace files: one turn per line, fixed field order
//!
//! ```text
//! session=<id> turn=<n> arrival_us=<n> required=<n> new=<n> output=<n>
//! ```
//!
//! Lines starting with `#` and blank lines are skipped. Loading validates
//! per-session shape (dense turn indices, monotone context) and returns the
//! trace sorted by arrival, so a loaded trace replays exactly like the
//! generated one.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::ring::SessionId;
use crate::workload::TurnRequest;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("session {session} line {line}: {reason}")]
    Shape {
        session: String,
        line: usize,
        reason: String,
    },
}

fn field<'a>(
    token: Option<&'a str>,
    key: &str,
    line: usize,
) -> Result<&'a str, TraceError> {
    let token = token.ok_or_else(|| TraceError::Parse {
        line,
        reason: format!("missing field {key}"),
    })?;
    token.strip_prefix(key).and_then(|t| t.strip_prefix('=')).ok_or_else(|| {
        TraceError::Parse {
            line,
            reason: format!("expected {key}=<value>, got {token:?}"),
        }
    })
}

fn number<T: std::str::FromStr>(raw: &str, key: &str, line: usize) -> Result<T, TraceError> {
    raw.parse().map_err(|_| TraceError::Parse {
        line,
        reason: format!("{key} is not a valid number: {raw:?}"),
    })
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TurnRequest]) -> io::Result<()> {
    for t in trace {
        writeln!(
            w,
            "session={} turn={} arrival_us={} required={} new={} output={}",
            t.session, t.turn_index, t.arrival_us, t.required_context_tokens, t.new_tokens,
            t.output_tokens
        )?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TurnRequest>, TraceError> {
    let mut trace = Vec::new();
    let mut line_of: Vec<usize> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let session = field(tokens.next(), "session", line_no)?;
        if session.is_empty() {
            return Err(TraceError::Parse {
                line: line_no,
                reason: "session id must be non-empty".into(),
            });
        }
        let turn: u32 = number(field(tokens.next(), "turn", line_no)?, "turn", line_no)?;
        let arrival_us: u64 = number(
            field(tokens.next(), "arrival_us", line_no)?,
            "arrival_us",
            line_no,
        )?;
        let required: u64 = number(
            field(tokens.next(), "required", line_no)?,
            "required",
            line_no,
        )?;
        let new: u64 = number(field(tokens.next(), "new", line_no)?, "new", line_no)?;
        let output: u64 = number(field(tokens.next(), "output", line_no)?, "output", line_no)?;
        if let Some(extra) = tokens.next() {
            return Err(TraceError::Parse {
                line: line_no,
                reason: format!("unexpected trailing field {extra:?}"),
            });
        }
        trace.push(TurnRequest {
            session: SessionId::new(session),
            turn_index: turn,
            arrival_us,
            required_context_tokens: required,
            new_tokens: new,
            output_tokens: output,
        });
        line_of.push(line_no);
    }
    validate_shape(&trace, &line_of)?;
    trace.sort_by(|a, b| {
        (a.arrival_us, &a.session, a.turn_index).cmp(&(b.arrival_us, &b.session, b.turn_index))
    });
    Ok(trace)
}

/// Dense 0-based turn indices and non-decreasing context per session,
/// regardless of line order.
fn validate_shape(trace: &[TurnRequest], line_of: &[usize]) -> Result<(), TraceError> {
    let mut by_session: HashMap<&SessionId, Vec<usize>> = HashMap::new();
    for (i, t) in trace.iter().enumerate() {
        by_session.entry(&t.session).or_default().push(i);
    }
    for (session, mut idxs) in by_session {
        idxs.sort_by_key(|&i| trace[i].turn_index);
        let mut prev: Option<&TurnRequest> = None;
        for (expected, &i) in idxs.iter().enumerate() {
            let t = &trace[i];
            if t.turn_index as usize != expected {
                return Err(TraceError::Shape {
                    session: session.to_string(),
                    line: line_of[i],
                    reason: format!("expected turn {expected}, got {}", t.turn_index),
                });
            }
            if let Some(p) = prev {
                if t.required_context_tokens < p.required_context_tokens {
                    return Err(TraceError::Shape {
                        session: session.to_string(),
                        line: line_of[i],
                        reason: format!(
                            "context shrinks from {} to {}",
                            p.required_context_tokens, t.required_context_tokens
                        ),
                    });
                }
                if t.arrival_us < p.arrival_us {
                    return Err(TraceError::Shape {
                        session: session.to_string(),
                        line: line_of[i],
                        reason: format!(
                            "arrival goes backwards from {} to {}",
                            p.arrival_us, t.arrival_us
                        ),
                    });
                }
            }
            prev = Some(t);
        }
    }
    Ok(())
}

pub fn save_trace(path: &Path, trace: &[TurnRequest]) -> Result<(), TraceError> {
    let file = std::fs::File::create(path)?;
    write_trace(io::BufWriter::new(file), trace)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<TurnRequest>, TraceError> {
    let file = std::fs::File::open(path)?;
    read_trace(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::derive_rng;
    use crate::workload::{builtin_profile, generate_trace};

    #[test]
    fn round_trip_preserves_trace_exactly() {
        let p = builtin_profile("insurance_benefits").unwrap();
        let trace = generate_trace(&p, 120.0, &mut derive_rng(7, &["arrivals"])).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let loaded = read_trace(buf.as_slice()).unwrap();
        assert_eq!(trace, loaded);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "# header\n\nsession=a turn=0 arrival_us=10 required=100 new=100 output=5\n";
        let trace = read_trace(text.as_bytes()).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].session.as_str(), "a");
        assert_eq!(trace[0].required_context_tokens, 100);
    }

    #[test]
    fn truncated_line_reports_its_line_number() {
        let text = "session=a turn=0 arrival_us=10 required=100 new=100 output=5\n\
                    session=a turn=1 arrival_us=20\n";
        match read_trace(text.as_bytes()) {
            Err(TraceError::Parse { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("required"), "{reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line_and_field() {
        let text = "session=a turn=zero arrival_us=10 required=100 new=100 output=5\n";
        match read_trace(text.as_bytes()) {
            Err(TraceError::Parse { line, reason }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("turn"), "{reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_field_order_is_rejected() {
        let text = "turn=0 session=a arrival_us=10 required=100 new=100 output=5\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn trailing_field_is_rejected() {
        let text = "session=a turn=0 arrival_us=10 required=100 new=100 output=5 extra=1\n";
        assert!(matches!(
            read_trace(text.as_bytes()),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn shrinking_context_is_rejected() {
        let text = "session=a turn=0 arrival_us=10 required=100 new=100 output=5\n\
                    session=a turn=1 arrival_us=20 required=90 new=10 output=5\n";
        match read_trace(text.as_bytes()) {
            Err(TraceError::Shape { session, line, .. }) => {
                assert_eq!(session, "a");
                assert_eq!(line, 2);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn missing_turn_zero_is_rejected() {
        let text = "session=a turn=1 arrival_us=10 required=100 new=100 output=5\n";
        assert!(matches!(read_trace(text.as_bytes()), Err(TraceError::Shape { .. })));
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.txt");
        let p = builtin_profile("care_gap").unwrap();
        let trace = generate_trace(&p, 60.0, &mut derive_rng(3, &["arrivals"])).unwrap();
        save_trace(&path, &trace).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(trace, loaded);
    }
}

//! Trace record data model and its bit-exact text serialization.
//!
//! One record per line:
//!
//! ```text
//! C|<seq>|<name>|<args>|<outputs>|ret:<signed-hex>
//! ```
//!
//! Args are `;`-joined `slot:DirKind:0x<hex>` tokens with an optional
//! `=[off:0x<hex>,...]` pointee dump. Outputs are `,`-joined
//! `out:<slot>=[off:0x<hex>,...]` items, or the literal `-` when a call
//! produced none. Comment lines start with `#` and are skipped, except a
//! leading `# source: ...` line which carries provenance.

use std::fmt::Write as _;

use thiserror::Error;

use crate::typedb::{Direction, TypeDb, TypeDbError, ValueKind};

/// One traced argument: slot index, direction/kind as logged, the 64-bit
/// raw value, and an optional single-level pointee dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgValue {
    pub slot: u32,
    pub direction: Direction,
    pub kind: ValueKind,
    pub raw: u64,
    pub pointee: Option<Vec<(u32, u64)>>,
}

/// Post-call contents captured for one output argument slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputValue {
    pub slot: u32,
    pub pointee: Vec<(u32, u64)>,
}

impl OutputValue {
    /// First pointee word, the value that enters the output table.
    pub fn first_word(&self) -> Option<u64> {
        self.pointee.first().map(|&(_, v)| v)
    }
}

/// One traced call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyscallRecord {
    pub seq: u64,
    pub name: String,
    pub args: Vec<ArgValue>,
    pub outputs: Vec<OutputValue>,
    pub ret: i64,
}

impl SyscallRecord {
    pub fn arg(&self, slot: u32) -> Option<&ArgValue> {
        self.args.iter().find(|a| a.slot == slot)
    }

    pub fn output(&self, slot: u32) -> Option<&OutputValue> {
        self.outputs.iter().find(|o| o.slot == slot)
    }
}

/// An ordered trace with free-form provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLog {
    pub records: Vec<SyscallRecord>,
    pub source: String,
}

impl TraceLog {
    pub fn record(&self, seq: u64) -> Option<&SyscallRecord> {
        // seq values are 1..len with no gaps in a valid log
        self.records.get(seq.checked_sub(1)? as usize).filter(|r| r.seq == seq)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("malformed trace line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate seq {seq} at line {line}")]
    DuplicateSeq { line: usize, seq: u64 },
    #[error("non-monotonic seq {seq} at line {line}")]
    NonMonotonicSeq { line: usize, seq: u64 },
    #[error(transparent)]
    Type(#[from] TypeDbError),
}

fn malformed(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError::MalformedLine {
        line,
        reason: reason.into(),
    }
}

fn parse_hex_u64(tok: &str, line: usize) -> Result<u64, TraceError> {
    let body = tok
        .strip_prefix("0x")
        .ok_or_else(|| malformed(line, format!("expected 0x-prefixed hex, got `{tok}`")))?;
    u64::from_str_radix(body, 16).map_err(|_| malformed(line, format!("bad hex value `{tok}`")))
}

fn parse_signed_hex(tok: &str, line: usize) -> Result<i64, TraceError> {
    if let Some(body) = tok.strip_prefix("-") {
        let mag = parse_hex_u64(body, line)?;
        if mag > i64::MAX as u64 + 1 {
            return Err(malformed(line, "signed value out of range"));
        }
        Ok((mag as i128).wrapping_neg() as i64)
    } else {
        let v = parse_hex_u64(tok, line)?;
        if v > i64::MAX as u64 {
            return Err(malformed(line, "signed value out of range"));
        }
        Ok(v as i64)
    }
}

fn fmt_signed_hex(v: i64) -> String {
    if v < 0 {
        format!("-0x{:x}", (v as i128).unsigned_abs())
    } else {
        format!("0x{v:x}")
    }
}

fn parse_pointee(body: &str, line: usize) -> Result<Vec<(u32, u64)>, TraceError> {
    let inner = body
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| malformed(line, "pointee dump must be bracketed"))?;
    let mut out = Vec::new();
    if inner.is_empty() {
        return Ok(out);
    }
    for item in inner.split(',') {
        let (off, val) = item
            .split_once(':')
            .ok_or_else(|| malformed(line, "pointee item must be off:0xval"))?;
        let off: u32 = off
            .parse()
            .map_err(|_| malformed(line, format!("bad pointee offset `{off}`")))?;
        let val = parse_hex_u64(val, line)?;
        if let Some(&(prev, _)) = out.last() {
            if off <= prev {
                return Err(malformed(line, "pointee offsets must be increasing"));
            }
        }
        out.push((off, val));
    }
    Ok(out)
}

/// Splits on commas that sit outside `[..]` pointee dumps; the dumps
/// themselves use commas internally.
fn split_outside_brackets(field: &str) -> Vec<&str> {
    let mut items = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in field.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                items.push(&field[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    items.push(&field[start..]);
    items
}

fn fmt_pointee(p: &[(u32, u64)]) -> String {
    let items: Vec<String> = p.iter().map(|(o, v)| format!("{o}:0x{v:x}")).collect();
    format!("[{}]", items.join(","))
}

/// Parses a trace log from its text form.
pub fn parse_trace(text: &str) -> Result<TraceLog, TraceError> {
    let mut records = Vec::new();
    let mut source = String::new();
    let mut last_seq: u64 = 0;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(s) = rest.trim_start().strip_prefix("source: ") {
                if source.is_empty() {
                    source = s.to_string();
                }
            }
            continue;
        }
        let mut parts = line.split('|');
        if parts.next() != Some("C") {
            return Err(malformed(lineno, "record must start with C"));
        }
        let seq: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(lineno, "bad seq"))?;
        if seq == last_seq {
            return Err(TraceError::DuplicateSeq { line: lineno, seq });
        }
        if seq < last_seq {
            return Err(TraceError::NonMonotonicSeq { line: lineno, seq });
        }
        last_seq = seq;
        let name = parts
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| malformed(lineno, "missing name"))?
            .to_string();
        let args_field = parts.next().ok_or_else(|| malformed(lineno, "missing args"))?;
        let outs_field = parts
            .next()
            .ok_or_else(|| malformed(lineno, "missing outputs"))?;
        let ret_field = parts.next().ok_or_else(|| malformed(lineno, "missing ret"))?;
        if parts.next().is_some() {
            return Err(malformed(lineno, "extra fields"));
        }

        let mut args = Vec::new();
        if !args_field.is_empty() {
            for tok in args_field.split(';') {
                let (head, pointee) = match tok.split_once("=") {
                    Some((h, p)) => (h, Some(parse_pointee(p, lineno)?)),
                    None => (tok, None),
                };
                let mut bits = head.splitn(3, ':');
                let slot: u32 = bits
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| malformed(lineno, "bad arg slot"))?;
                let dk = bits.next().ok_or_else(|| malformed(lineno, "missing dir/kind"))?;
                let mut chars = dk.chars();
                let direction = chars
                    .next()
                    .and_then(Direction::from_letter)
                    .ok_or_else(|| malformed(lineno, "bad direction"))?;
                let kind = chars
                    .next()
                    .and_then(ValueKind::from_letter)
                    .ok_or_else(|| malformed(lineno, "bad kind"))?;
                if chars.next().is_some() {
                    return Err(malformed(lineno, "bad dir/kind token"));
                }
                let raw = parse_hex_lenient(
                    bits.next().ok_or_else(|| malformed(lineno, "missing value"))?,
                    lineno,
                )?;
                if let Some(prev) = args.last().map(|a: &ArgValue| a.slot) {
                    if slot <= prev {
                        return Err(malformed(lineno, "arg slots must be increasing"));
                    }
                }
                args.push(ArgValue {
                    slot,
                    direction,
                    kind,
                    raw,
                    pointee,
                });
            }
        }

        let mut outputs = Vec::new();
        if outs_field != "-" {
            for item in split_outside_brackets(outs_field) {
                let body = item
                    .strip_prefix("out:")
                    .ok_or_else(|| malformed(lineno, "output item must start out:"))?;
                let (slot, dump) = body
                    .split_once('=')
                    .ok_or_else(|| malformed(lineno, "output item must be out:slot=[..]"))?;
                let slot: u32 = slot
                    .parse()
                    .map_err(|_| malformed(lineno, "bad output slot"))?;
                let pointee = parse_pointee(dump, lineno)?;
                if let Some(prev) = outputs.last().map(|o: &OutputValue| o.slot) {
                    if slot <= prev {
                        return Err(malformed(lineno, "output slots must be increasing"));
                    }
                }
                outputs.push(OutputValue { slot, pointee });
            }
        }

        let ret = parse_signed_hex(
            ret_field
                .strip_prefix("ret:")
                .ok_or_else(|| malformed(lineno, "ret field must start ret:"))?,
            lineno,
        )?;

        records.push(SyscallRecord {
            seq,
            name,
            args,
            outputs,
            ret,
        });
    }
    if records.is_empty() {
        return Err(malformed(0, "empty trace"));
    }
    Ok(TraceLog { records, source })
}

// Case-insensitive hex for the value position; canonical output is
// lowercase but logged inputs may use either case.
fn parse_hex_lenient(tok: &str, line: usize) -> Result<u64, TraceError> {
    let body = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"))
        .ok_or_else(|| malformed(line, format!("expected 0x-prefixed hex, got `{tok}`")))?;
    u64::from_str_radix(body, 16).map_err(|_| malformed(line, format!("bad hex value `{tok}`")))
}

/// Canonical serialization: lowercase hex, fixed field order, LF lines.
pub fn serialize_trace(log: &TraceLog) -> String {
    let mut out = String::new();
    if !log.source.is_empty() {
        let _ = writeln!(out, "# source: {}", log.source);
    }
    for rec in &log.records {
        out.push_str(&serialize_record(rec));
        out.push('\n');
    }
    out
}

pub fn serialize_record(rec: &SyscallRecord) -> String {
    let args: Vec<String> = rec
        .args
        .iter()
        .map(|a| {
            let mut s = format!(
                "{}:{}{}:0x{:x}",
                a.slot,
                a.direction.letter(),
                a.kind.letter(),
                a.raw
            );
            if let Some(p) = &a.pointee {
                s.push('=');
                s.push_str(&fmt_pointee(p));
            }
            s
        })
        .collect();
    let outs = if rec.outputs.is_empty() {
        "-".to_string()
    } else {
        rec.outputs
            .iter()
            .map(|o| format!("out:{}={}", o.slot, fmt_pointee(&o.pointee)))
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "C|{}|{}|{}|{}|ret:{}",
        rec.seq,
        rec.name,
        args.join(";"),
        outs,
        fmt_signed_hex(rec.ret)
    )
}

/// One violation of the trace/type-DB consistency rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub seq: u64,
    pub slot: Option<u32>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    ArityMismatch,
    NonContiguousSlots,
    DirectionMismatch,
    KindMismatch,
    PointeeOnScalar,
    PointeeMissing,
    OutputOnNonOutSlot,
    OutputSlotUnknown,
    SeqGap,
}

/// Checks every record's arity, directions, kinds, and pointee presence
/// against the type DB. Returns the empty list for a fully consistent log.
pub fn validate_trace(log: &TraceLog, types: &TypeDb) -> Result<Vec<Violation>, TraceError> {
    let mut violations = Vec::new();
    for (idx, rec) in log.records.iter().enumerate() {
        let sig = types.lookup_signature(&rec.name)?;
        if rec.seq != idx as u64 + 1 {
            violations.push(Violation {
                seq: rec.seq,
                slot: None,
                kind: ViolationKind::SeqGap,
            });
        }
        if rec.args.len() != sig.len() {
            violations.push(Violation {
                seq: rec.seq,
                slot: None,
                kind: ViolationKind::ArityMismatch,
            });
        }
        for (i, arg) in rec.args.iter().enumerate() {
            if arg.slot != i as u32 {
                violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(arg.slot),
                    kind: ViolationKind::NonContiguousSlots,
                });
                continue;
            }
            let Some(desc) = sig.get(arg.slot as usize) else {
                continue;
            };
            if desc.direction != arg.direction {
                violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(arg.slot),
                    kind: ViolationKind::DirectionMismatch,
                });
            }
            if desc.kind != arg.kind {
                violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(arg.slot),
                    kind: ViolationKind::KindMismatch,
                });
            }
            match (desc.kind.is_pointer_like(), arg.pointee.is_some()) {
                (false, true) => violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(arg.slot),
                    kind: ViolationKind::PointeeOnScalar,
                }),
                (true, false) => violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(arg.slot),
                    kind: ViolationKind::PointeeMissing,
                }),
                _ => {}
            }
        }
        for out in &rec.outputs {
            match sig.get(out.slot as usize) {
                None => violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(out.slot),
                    kind: ViolationKind::OutputSlotUnknown,
                }),
                Some(desc) if desc.direction != Direction::Out => violations.push(Violation {
                    seq: rec.seq,
                    slot: Some(out.slot),
                    kind: ViolationKind::OutputOnNonOutSlot,
                }),
                Some(_) => {}
            }
        }
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::typedb::load_type_db;

    #[test]
    fn parses_output_pointer_line() {
        let log =
            parse_trace("C|1|syscall1|0:IS:0x2;3:OP:0xD75543=[0:0x694]|out:3=[0:0x694]|ret:0x0\n")
                .unwrap();
        let rec = &log.records[0];
        assert_eq!(rec.seq, 1);
        assert_eq!(rec.name, "syscall1");
        let arg3 = rec.arg(3).unwrap();
        assert_eq!(arg3.raw, 0xD75543);
        assert_eq!(arg3.kind, ValueKind::Pointer);
        assert_eq!(arg3.pointee, Some(vec![(0, 0x694)]));
        assert_eq!(rec.output(3).unwrap().first_word(), Some(0x694));
        assert_eq!(rec.ret, 0);
    }

    #[test]
    fn empty_input_is_malformed() {
        assert_eq!(
            parse_trace("").unwrap_err(),
            TraceError::MalformedLine {
                line: 0,
                reason: "empty trace".to_string()
            }
        );
    }

    #[test]
    fn duplicate_and_nonmonotonic_seq() {
        let a = "C|1|f||-|ret:0x0\nC|1|f||-|ret:0x0\n";
        assert!(matches!(
            parse_trace(a).unwrap_err(),
            TraceError::DuplicateSeq { seq: 1, .. }
        ));
        let b = "C|2|f||-|ret:0x0\nC|1|f||-|ret:0x0\n";
        assert!(matches!(
            parse_trace(b).unwrap_err(),
            TraceError::NonMonotonicSeq { seq: 1, .. }
        ));
    }

    #[test]
    fn empty_outputs_placeholder_and_positive_ret() {
        let rec = SyscallRecord {
            seq: 1,
            name: "syscall3".to_string(),
            args: vec![],
            outputs: vec![],
            ret: 0xc8,
        };
        let line = serialize_record(&rec);
        assert!(line.ends_with("|-|ret:0xc8"));
    }

    #[test]
    fn negative_ret_round_trips() {
        let text = "C|1|f|0:IS:0x2|-|ret:-0x57\n";
        let log = parse_trace(text).unwrap();
        assert_eq!(log.records[0].ret, -0x57);
        assert_eq!(serialize_trace(&log), text);
    }

    #[test]
    fn source_header_round_trips() {
        let log = TraceLog {
            records: vec![SyscallRecord {
                seq: 1,
                name: "f".to_string(),
                args: vec![],
                outputs: vec![],
                ret: 0,
            }],
            source: "sim:demo".to_string(),
        };
        let text = serialize_trace(&log);
        assert_eq!(parse_trace(&text).unwrap(), log);
    }

    #[test]
    fn three_line_log_round_trips_bytes() {
        let text = "C|1|open|0:IS:0x2;1:OP:0x123456=[0:0x7]|out:1=[0:0x9]|ret:0x0\n\
                    C|2|use|0:IH:0x9|-|ret:0xc8\n\
                    C|3|close|0:IH:0x9|-|ret:-0x1\n";
        let log = parse_trace(text).unwrap();
        assert_eq!(serialize_trace(&log), text);
    }

    #[test]
    fn validate_flags_pointee_on_scalar_and_arity() {
        let db = load_type_db("S|f|2|0:IS;1:IS\n").unwrap();
        let log = parse_trace("C|1|f|0:IS:0x1=[0:0x2];1:IS:0x0|-|ret:0x0\n").unwrap();
        let v = validate_trace(&log, &db).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::PointeeOnScalar);
        assert_eq!(v[0].slot, Some(0));

        let log = parse_trace("C|1|f|0:IS:0x1|-|ret:0x0\n").unwrap();
        let v = validate_trace(&log, &db).unwrap();
        assert!(v.iter().any(|x| x.kind == ViolationKind::ArityMismatch));
    }

    #[test]
    fn validate_unknown_syscall_is_error() {
        let db = load_type_db("S|f|0|\n").unwrap();
        let log = parse_trace("C|1|g||-|ret:0x0\n").unwrap();
        assert!(matches!(
            validate_trace(&log, &db).unwrap_err(),
            TraceError::Type(TypeDbError::NotFound(_))
        ));
    }
}

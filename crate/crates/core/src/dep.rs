//! Inter-syscall dependency inference.
//!
//! A single forward scan keeps a global output table of output-argument
//! addresses, their stored contents, and positive return values. Each
//! qualifying input argument is matched against the table newest-first;
//! the first hit becomes a dependency edge.

use thiserror::Error;

use crate::trace::{SyscallRecord, TraceLog};
use crate::typedb::{ArgTypeDescriptor, Direction, TypeDb, TypeDbError, ValueKind};

/// A value qualifies as a potential memory address when it needs at least
/// six hexadecimal digits.
pub fn is_address_like(value: u64) -> bool {
    value >= 0x10_0000
}

/// Where a recorded output value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutputSource {
    ReturnValue,
    OutputArg(u32),
}

impl OutputSource {
    pub fn encode(self) -> String {
        match self {
            OutputSource::ReturnValue => "ret".to_string(),
            OutputSource::OutputArg(s) => format!("out{s}"),
        }
    }

    pub fn decode(s: &str) -> Option<OutputSource> {
        if s == "ret" {
            return Some(OutputSource::ReturnValue);
        }
        s.strip_prefix("out")?.parse().ok().map(OutputSource::OutputArg)
    }
}

/// One row of the global output table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputTableEntry {
    pub ordinal: usize,
    pub producer_seq: u64,
    pub source: OutputSource,
    pub address: Option<u64>,
    pub content: Option<u64>,
    pub ret: Option<u64>,
}

/// How a consumer argument matched a producer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DepMode {
    AddressReuse,
    ContentUse,
    ReturnUse,
}

impl DepMode {
    pub fn encode(self) -> &'static str {
        match self {
            DepMode::AddressReuse => "addr",
            DepMode::ContentUse => "content",
            DepMode::ReturnUse => "ret",
        }
    }

    pub fn decode(s: &str) -> Option<DepMode> {
        match s {
            "addr" => Some(DepMode::AddressReuse),
            "content" => Some(DepMode::ContentUse),
            "ret" => Some(DepMode::ReturnUse),
            _ => None,
        }
    }
}

/// An inferred data dependency between two trace positions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DependencyEdge {
    pub producer_seq: u64,
    pub producer_source: OutputSource,
    pub consumer_seq: u64,
    pub consumer_slot: u32,
    pub mode: DepMode,
}

/// The global output table built during a scan. Rows are append-only.
#[derive(Debug, Clone, Default)]
pub struct OutputTable {
    pub entries: Vec<OutputTableEntry>,
}

impl OutputTable {
    /// Appends the record's output rows: one per out pointer slot (address
    /// plus the first post-call pointee word), then one for a positive
    /// return value. Zero or negative returns are not recorded.
    pub fn record_outputs(
        &mut self,
        record: &SyscallRecord,
        types: &TypeDb,
    ) -> Result<(), TypeDbError> {
        let sig = types.lookup_signature(&record.name)?;
        for (slot, desc) in sig.iter().enumerate() {
            let slot = slot as u32;
            if desc.direction != Direction::Out || !desc.kind.is_pointer_like() {
                continue;
            }
            let Some(arg) = record.arg(slot) else { continue };
            let content = record.output(slot).and_then(|o| o.first_word());
            self.push(OutputTableEntry {
                ordinal: 0,
                producer_seq: record.seq,
                source: OutputSource::OutputArg(slot),
                address: Some(arg.raw),
                content,
                ret: None,
            });
        }
        if record.ret > 0 {
            self.push(OutputTableEntry {
                ordinal: 0,
                producer_seq: record.seq,
                source: OutputSource::ReturnValue,
                address: None,
                content: None,
                ret: Some(record.ret as u64),
            });
        }
        Ok(())
    }

    fn push(&mut self, mut entry: OutputTableEntry) {
        entry.ordinal = self.entries.len();
        self.entries.push(entry);
    }

    /// Matches one argument value against the table, newest row first.
    /// The table is only consulted for handle-typed slots or address-like
    /// values; everything else returns `None` without a scan.
    pub fn match_argument(
        &self,
        value: u64,
        desc: &ArgTypeDescriptor,
    ) -> Option<(&OutputTableEntry, DepMode)> {
        if desc.kind != ValueKind::Handle && !is_address_like(value) {
            return None;
        }
        for entry in self.entries.iter().rev() {
            if entry.address == Some(value) {
                return Some((entry, DepMode::AddressReuse));
            }
            if entry.content == Some(value) {
                return Some((entry, DepMode::ContentUse));
            }
            if entry.ret == Some(value) {
                return Some((entry, DepMode::ReturnUse));
            }
        }
        None
    }
}

/// A slot is eligible for dependency matching when it is an input, or a
/// pointer-like slot of either direction (a reused buffer address passed
/// as an out argument still reveals a dependency).
pub fn slot_qualifies(desc: &ArgTypeDescriptor) -> bool {
    desc.direction == Direction::In || desc.kind.is_pointer_like()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DepError {
    #[error(transparent)]
    Type(#[from] TypeDbError),
    #[error("malformed edge line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Single forward scan over the trace. For each record, inputs are matched
/// before the record's own outputs are recorded, so no record depends on
/// itself. At most one edge is emitted per consumer slot.
pub fn analyze_dependencies(log: &TraceLog, types: &TypeDb) -> Result<Vec<DependencyEdge>, DepError> {
    let mut table = OutputTable::default();
    let mut edges = Vec::new();
    for rec in &log.records {
        let sig = types.lookup_signature(&rec.name)?;
        for arg in &rec.args {
            let Some(desc) = sig.get(arg.slot as usize) else { continue };
            if !slot_qualifies(desc) {
                continue;
            }
            if let Some((entry, mode)) = table.match_argument(arg.raw, desc) {
                edges.push(DependencyEdge {
                    producer_seq: entry.producer_seq,
                    producer_source: entry.source,
                    consumer_seq: rec.seq,
                    consumer_slot: arg.slot,
                    mode,
                });
            }
        }
        table.record_outputs(rec, types)?;
    }
    Ok(edges)
}

/// Edge dump: one edge per line,
/// `D|<producer_seq>:<src>|<consumer_seq>:<slot>|<mode>`.
pub fn emit_edges(edges: &[DependencyEdge]) -> String {
    let mut out = String::new();
    for e in edges {
        out.push_str(&format!(
            "D|{}:{}|{}:{}|{}\n",
            e.producer_seq,
            e.producer_source.encode(),
            e.consumer_seq,
            e.consumer_slot,
            e.mode.encode()
        ));
    }
    out
}

pub fn parse_edges(text: &str) -> Result<Vec<DependencyEdge>, DepError> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| DepError::Malformed {
            line: lineno,
            reason: reason.to_string(),
        };
        let mut parts = line.split('|');
        if parts.next() != Some("D") {
            return Err(malformed("edge line must start with D"));
        }
        let prod = parts.next().ok_or_else(|| malformed("missing producer"))?;
        let cons = parts.next().ok_or_else(|| malformed("missing consumer"))?;
        let mode = parts.next().ok_or_else(|| malformed("missing mode"))?;
        if parts.next().is_some() {
            return Err(malformed("extra fields"));
        }
        let (pseq, src) = prod.split_once(':').ok_or_else(|| malformed("bad producer"))?;
        let (cseq, slot) = cons.split_once(':').ok_or_else(|| malformed("bad consumer"))?;
        edges.push(DependencyEdge {
            producer_seq: pseq.parse().map_err(|_| malformed("bad producer seq"))?,
            producer_source: OutputSource::decode(src).ok_or_else(|| malformed("bad source"))?,
            consumer_seq: cseq.parse().map_err(|_| malformed("bad consumer seq"))?,
            consumer_slot: slot.parse().map_err(|_| malformed("bad slot"))?,
            mode: DepMode::decode(mode).ok_or_else(|| malformed("bad mode"))?,
        });
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;
    use crate::typedb::load_type_db;

    #[test]
    fn address_like_threshold() {
        assert!(is_address_like(0xD75543));
        assert!(!is_address_like(0x694));
        assert!(is_address_like(0x100000));
        assert!(!is_address_like(0xFFFFF));
    }

    fn fig3_types() -> TypeDb {
        load_type_db(
            "S|syscall1|4|0:IS;1:IS;2:IS;3:OP:st0\n\
             S|syscall2|3|0:IS;1:IS;2:OP:st0\n\
             S|syscall3|2|0:IS;1:IS\n\
             S|syscall4|2|0:IH;1:IS\n\
             T|st0|0:S\n",
        )
        .unwrap()
    }

    fn fig3_trace() -> TraceLog {
        parse_trace(
            "C|1|syscall1|0:IS:0x2;1:IS:0x0;2:IS:0x0;3:OP:0xd75543=[0:0x0]|out:3=[0:0x694]|ret:0x0\n\
             C|2|syscall2|0:IS:0x1;1:IS:0x0;2:OP:0xd8ef56=[0:0x0]|out:2=[0:0x78]|ret:0x0\n\
             C|3|syscall3|0:IS:0x5;1:IS:0x0|-|ret:0xc8\n\
             C|4|syscall4|0:IH:0x78;1:IS:0x3|-|ret:0x0\n",
        )
        .unwrap()
    }

    #[test]
    fn fig3_table_contents() {
        let types = fig3_types();
        let log = fig3_trace();
        let mut table = OutputTable::default();
        for rec in &log.records {
            table.record_outputs(rec, &types).unwrap();
        }
        assert_eq!(table.entries.len(), 3);
        assert_eq!(table.entries[0].address, Some(0xD75543));
        assert_eq!(table.entries[0].content, Some(0x694));
        assert_eq!(table.entries[1].address, Some(0xD8EF56));
        assert_eq!(table.entries[1].content, Some(0x78));
        assert_eq!(table.entries[2].ret, Some(0xC8));
    }

    #[test]
    fn zero_return_not_recorded() {
        let types = load_type_db("S|f|0|\n").unwrap();
        let log = parse_trace("C|1|f||-|ret:0x0\n").unwrap();
        let mut table = OutputTable::default();
        table.record_outputs(&log.records[0], &types).unwrap();
        assert!(table.entries.is_empty());
    }

    #[test]
    fn fig3_trace_yields_single_content_edge() {
        let types = fig3_types();
        let log = fig3_trace();
        let edges = analyze_dependencies(&log, &types).unwrap();
        assert_eq!(
            edges,
            vec![DependencyEdge {
                producer_seq: 2,
                producer_source: OutputSource::OutputArg(2),
                consumer_seq: 4,
                consumer_slot: 0,
                mode: DepMode::ContentUse,
            }]
        );
    }

    #[test]
    fn scalar_small_value_skips_table() {
        let desc = ArgTypeDescriptor::new(Direction::In, ValueKind::Scalar);
        let mut table = OutputTable::default();
        table.push(OutputTableEntry {
            ordinal: 0,
            producer_seq: 1,
            source: OutputSource::OutputArg(0),
            address: Some(0x2),
            content: None,
            ret: None,
        });
        assert!(table.match_argument(0x2, &desc).is_none());
    }

    #[test]
    fn later_entry_wins_on_duplicate_values() {
        let desc = ArgTypeDescriptor::new(Direction::In, ValueKind::Handle);
        let mut table = OutputTable::default();
        for seq in 1..=3u64 {
            table.push(OutputTableEntry {
                ordinal: 0,
                producer_seq: seq,
                source: OutputSource::OutputArg(0),
                address: Some(0x300000),
                content: Some(0x42),
                ret: None,
            });
        }
        let (entry, mode) = table.match_argument(0x42, &desc).unwrap();
        assert_eq!(entry.producer_seq, 3);
        assert_eq!(mode, DepMode::ContentUse);
        // brute force over all entries agrees: maximum ordinal match
        let best = table
            .entries
            .iter()
            .filter(|e| e.content == Some(0x42))
            .max_by_key(|e| e.ordinal)
            .unwrap();
        assert_eq!(best.producer_seq, entry.producer_seq);
    }

    #[test]
    fn fig2_trace_address_and_content_edges() {
        let types = load_type_db(
            "S|syscall1|2|0:OP:st0;1:IS\n\
             S|syscall2|1|0:IS\n\
             S|syscall3|2|0:IP:st0;1:IS\n\
             S|syscall4|4|0:IH;1:IS;2:IS;3:IS\n\
             T|st0|0:S\n",
        )
        .unwrap();
        let log = parse_trace(
            "C|1|syscall1|0:OP:0xe5789a=[0:0x0];1:IS:0x1|out:0=[0:0x56]|ret:0x0\n\
             C|2|syscall2|0:IS:0x7|-|ret:0x0\n\
             C|3|syscall3|0:IP:0xe5789a=[0:0x56];1:IS:0x2|-|ret:0x0\n\
             C|4|syscall4|0:IH:0x56;1:IS:0x1;2:IS:0x2;3:IS:0x3|-|ret:0x0\n",
        )
        .unwrap();
        let edges = analyze_dependencies(&log, &types).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(
            edges[0],
            DependencyEdge {
                producer_seq: 1,
                producer_source: OutputSource::OutputArg(0),
                consumer_seq: 3,
                consumer_slot: 0,
                mode: DepMode::AddressReuse,
            }
        );
        assert_eq!(
            edges[1],
            DependencyEdge {
                producer_seq: 1,
                producer_source: OutputSource::OutputArg(0),
                consumer_seq: 4,
                consumer_slot: 0,
                mode: DepMode::ContentUse,
            }
        );
    }

    #[test]
    fn independent_scalar_calls_have_no_edges() {
        let types = load_type_db("S|f|2|0:IS;1:IS\n").unwrap();
        let mut text = String::new();
        for i in 1..=10 {
            text.push_str(&format!("C|{i}|f|0:IS:0x{i:x};1:IS:0x2|-|ret:0x0\n"));
        }
        let log = parse_trace(&text).unwrap();
        assert!(analyze_dependencies(&log, &types).unwrap().is_empty());
    }

    #[test]
    fn edge_dump_round_trips() {
        let edges = vec![
            DependencyEdge {
                producer_seq: 2,
                producer_source: OutputSource::OutputArg(2),
                consumer_seq: 4,
                consumer_slot: 0,
                mode: DepMode::ContentUse,
            },
            DependencyEdge {
                producer_seq: 3,
                producer_source: OutputSource::ReturnValue,
                consumer_seq: 9,
                consumer_slot: 1,
                mode: DepMode::ReturnUse,
            },
        ];
        assert_eq!(parse_edges(&emit_edges(&edges)).unwrap(), edges);
    }
}

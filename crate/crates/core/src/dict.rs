//! The learned dependency dictionary: producer syscall name to the
//! dependent-successor templates observed in the trace, filtered to
//! consumers that executed successfully.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dep::{DepMode, DependencyEdge, OutputSource};
use crate::trace::{SyscallRecord, TraceLog};

/// How to treat a zero return when filtering teachers. Zero is ambiguous
/// in the log; the default counts it as success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DictConfig {
    pub zero_is_success: bool,
}

impl Default for DictConfig {
    fn default() -> Self {
        DictConfig {
            zero_is_success: true,
        }
    }
}

/// A record succeeded when its return is non-negative.
pub fn is_success(record: &SyscallRecord) -> bool {
    is_success_with(record, DictConfig::default())
}

pub fn is_success_with(record: &SyscallRecord, cfg: DictConfig) -> bool {
    if record.ret == 0 {
        cfg.zero_is_success
    } else {
        record.ret > 0
    }
}

/// One learned successor pattern: which call follows the producer, which
/// of its slots carries the dependency, and literal values for every
/// other slot copied from the teaching occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependentTemplate {
    pub child_name: String,
    pub child_slot: u32,
    pub mode: DepMode,
    pub producer_source: OutputSource,
    pub fixed_args: BTreeMap<u32, u64>,
    pub taught_by: u64,
    pub expected_ret: i64,
}

impl DependentTemplate {
    /// Identity used for deduplication and for the occurrence-attachment
    /// comparison during site detection.
    pub fn key(&self) -> (String, u32, DepMode, OutputSource) {
        (
            self.child_name.clone(),
            self.child_slot,
            self.mode,
            self.producer_source,
        )
    }

    pub fn triple(&self) -> (String, u32, DepMode) {
        (self.child_name.clone(), self.child_slot, self.mode)
    }
}

/// Producer name -> successor templates, in teaching order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyDictionary {
    pub entries: BTreeMap<String, Vec<DependentTemplate>>,
}

impl DependencyDictionary {
    pub fn query_children(&self, name: &str) -> &[DependentTemplate] {
        self.entries.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn template_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DictError {
    #[error("edge references unknown seq {0}")]
    UnknownSeq(u64),
    #[error("malformed dictionary line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Builds the dictionary from a trace and its inferred edges. Each edge
/// whose consumer succeeded contributes a template under the producer's
/// name; duplicates (same child name, slot, mode, and source) keep only
/// the first teaching occurrence.
pub fn learn_dictionary(
    log: &TraceLog,
    edges: &[DependencyEdge],
    cfg: DictConfig,
) -> Result<DependencyDictionary, DictError> {
    let mut dict = DependencyDictionary::default();
    for edge in edges {
        let consumer = log
            .record(edge.consumer_seq)
            .ok_or(DictError::UnknownSeq(edge.consumer_seq))?;
        if !is_success_with(consumer, cfg) {
            continue;
        }
        let producer = log
            .record(edge.producer_seq)
            .ok_or(DictError::UnknownSeq(edge.producer_seq))?;
        let templates = dict.entries.entry(producer.name.clone()).or_default();
        let key = (
            consumer.name.clone(),
            edge.consumer_slot,
            edge.mode,
            edge.producer_source,
        );
        if templates.iter().any(|t| t.key() == key) {
            continue;
        }
        let fixed_args = consumer
            .args
            .iter()
            .filter(|a| a.slot != edge.consumer_slot)
            .map(|a| (a.slot, a.raw))
            .collect();
        templates.push(DependentTemplate {
            child_name: consumer.name.clone(),
            child_slot: edge.consumer_slot,
            mode: edge.mode,
            producer_source: edge.producer_source,
            fixed_args,
            taught_by: consumer.seq,
            expected_ret: consumer.ret,
        });
    }
    for templates in dict.entries.values_mut() {
        templates.sort_by_key(|t| t.taught_by);
    }
    Ok(dict)
}

fn fmt_signed_hex(v: i64) -> String {
    if v < 0 {
        format!("-0x{:x}", (v as i128).unsigned_abs())
    } else {
        format!("0x{v:x}")
    }
}

fn parse_signed_hex(s: &str) -> Option<i64> {
    if let Some(body) = s.strip_prefix("-0x") {
        i64::from_str_radix(body, 16).ok().map(|v| -v)
    } else {
        i64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
    }
}

/// Dictionary dump: a `K|` line per template followed by `F|` fixed-arg
/// continuation lines.
pub fn emit_dictionary(dict: &DependencyDictionary) -> String {
    let mut out = String::new();
    for (producer, templates) in &dict.entries {
        for t in templates {
            out.push_str(&format!(
                "K|{}|{}|{}|{}|{}|taught:{}|exp:{}\n",
                producer,
                t.child_name,
                t.child_slot,
                t.mode.encode(),
                t.producer_source.encode(),
                t.taught_by,
                fmt_signed_hex(t.expected_ret)
            ));
            for (slot, value) in &t.fixed_args {
                out.push_str(&format!("F|{slot}=0x{value:x}\n"));
            }
        }
    }
    out
}

pub fn parse_dictionary(text: &str) -> Result<DependencyDictionary, DictError> {
    let mut dict = DependencyDictionary::default();
    let mut current: Option<(String, DependentTemplate)> = None;
    let commit = |dict: &mut DependencyDictionary, cur: Option<(String, DependentTemplate)>| {
        if let Some((producer, tpl)) = cur {
            dict.entries.entry(producer).or_default().push(tpl);
        }
    };
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| DictError::Malformed {
            line: lineno,
            reason: reason.to_string(),
        };
        if let Some(body) = line.strip_prefix("K|") {
            commit(&mut dict, current.take());
            let parts: Vec<&str> = body.split('|').collect();
            if parts.len() != 7 {
                return Err(malformed("K line must have 7 fields"));
            }
            let taught = parts[5]
                .strip_prefix("taught:")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("bad taught field"))?;
            let expected_ret = parts[6]
                .strip_prefix("exp:")
                .and_then(parse_signed_hex)
                .ok_or_else(|| malformed("bad exp field"))?;
            current = Some((
                parts[0].to_string(),
                DependentTemplate {
                    child_name: parts[1].to_string(),
                    child_slot: parts[2].parse().map_err(|_| malformed("bad slot"))?,
                    mode: DepMode::decode(parts[3]).ok_or_else(|| malformed("bad mode"))?,
                    producer_source: OutputSource::decode(parts[4])
                        .ok_or_else(|| malformed("bad source"))?,
                    fixed_args: BTreeMap::new(),
                    taught_by: taught,
                    expected_ret,
                },
            ));
        } else if let Some(body) = line.strip_prefix("F|") {
            let (slot, value) = body.split_once('=').ok_or_else(|| malformed("bad F line"))?;
            let slot: u32 = slot.parse().map_err(|_| malformed("bad F slot"))?;
            let value = u64::from_str_radix(
                value.strip_prefix("0x").ok_or_else(|| malformed("bad F value"))?,
                16,
            )
            .map_err(|_| malformed("bad F value"))?;
            let (_, tpl) = current.as_mut().ok_or_else(|| malformed("F line without K"))?;
            tpl.fixed_args.insert(slot, value);
        } else {
            return Err(malformed("unknown dictionary line"));
        }
    }
    commit(&mut dict, current.take());
    for templates in dict.entries.values_mut() {
        templates.sort_by_key(|t| t.taught_by);
    }
    Ok(dict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dep::analyze_dependencies;
    use crate::trace::parse_trace;
    use crate::typedb::load_type_db;

    #[test]
    fn success_semantics() {
        let mk = |ret| SyscallRecord {
            seq: 1,
            name: "f".to_string(),
            args: vec![],
            outputs: vec![],
            ret,
        };
        assert!(is_success(&mk(0xC8)));
        assert!(!is_success(&mk(-0x57)));
        assert!(is_success(&mk(0)));
        assert!(!is_success_with(
            &mk(0),
            DictConfig {
                zero_is_success: false
            }
        ));
    }

    fn teaching_setup() -> (TraceLog, crate::typedb::TypeDb) {
        // syscall1 produces a buffer; syscall3 consumes its address,
        // repeated with failing and duplicate consumers mixed in.
        let types = load_type_db(
            "S|syscall1|2|0:IS;1:OP:st0\n\
             S|syscall3|2|0:IS;1:IP:st0\n\
             T|st0|0:S\n",
        )
        .unwrap();
        let log = parse_trace(
            "C|1|syscall1|0:IS:0x2;1:OP:0xd75125=[0:0x0]|out:1=[0:0x87]|ret:0x0\n\
             C|2|syscall3|0:IS:0x9;1:IP:0xd75125=[0:0x87]|-|ret:0x0\n\
             C|3|syscall1|0:IS:0x2;1:OP:0xd79000=[0:0x0]|out:1=[0:0x99]|ret:0x0\n\
             C|4|syscall3|0:IS:0x9;1:IP:0xd79000=[0:0x99]|-|ret:0x0\n",
        )
        .unwrap();
        (log, types)
    }

    #[test]
    fn learns_and_dedupes_templates() {
        let (log, types) = teaching_setup();
        let edges = analyze_dependencies(&log, &types).unwrap();
        assert_eq!(edges.len(), 2);
        let dict = learn_dictionary(&log, &edges, DictConfig::default()).unwrap();
        let children = dict.query_children("syscall1");
        assert_eq!(children.len(), 1);
        assert_eq!(children[0].child_name, "syscall3");
        assert_eq!(children[0].child_slot, 1);
        assert_eq!(children[0].mode, DepMode::AddressReuse);
        assert_eq!(children[0].taught_by, 2);
        assert_eq!(children[0].fixed_args, BTreeMap::from([(0, 0x9)]));
        assert!(dict.query_children("absent").is_empty());
    }

    #[test]
    fn failed_consumers_learn_nothing() {
        let types = load_type_db(
            "S|p|1|0:OP:st0\nS|c|1|0:IP:st0\nT|st0|0:S\n",
        )
        .unwrap();
        let log = parse_trace(
            "C|1|p|0:OP:0x200000=[0:0x0]|out:0=[0:0x5]|ret:0x0\n\
             C|2|c|0:IP:0x200000=[0:0x5]|-|ret:-0x57\n",
        )
        .unwrap();
        let edges = analyze_dependencies(&log, &types).unwrap();
        assert_eq!(edges.len(), 1);
        let dict = learn_dictionary(&log, &edges, DictConfig::default()).unwrap();
        assert_eq!(dict.template_count(), 0);
    }

    #[test]
    fn duplicate_pattern_five_times_one_template() {
        let types = load_type_db("S|p|1|0:OP:st0\nS|c|1|0:IP:st0\nT|st0|0:S\n").unwrap();
        let mut text = String::new();
        let mut seq = 0;
        for i in 0..5u64 {
            seq += 1;
            let addr = 0x300000 + i * 0x1000;
            text.push_str(&format!(
                "C|{seq}|p|0:OP:0x{addr:x}=[0:0x0]|out:0=[0:0x{:x}]|ret:0x0\n",
                0x10 + i
            ));
            seq += 1;
            text.push_str(&format!(
                "C|{seq}|c|0:IP:0x{addr:x}=[0:0x{:x}]|-|ret:0x0\n",
                0x10 + i
            ));
        }
        let log = parse_trace(&text).unwrap();
        let edges = analyze_dependencies(&log, &types).unwrap();
        assert_eq!(edges.len(), 5);
        let dict = learn_dictionary(&log, &edges, DictConfig::default()).unwrap();
        // brute-force unique key count
        let mut keys: Vec<_> = edges
            .iter()
            .map(|e| ("c", e.consumer_slot, e.mode, e.producer_source))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(dict.template_count(), keys.len());
        assert_eq!(dict.template_count(), 1);
        assert_eq!(dict.query_children("p")[0].taught_by, 2);
    }

    #[test]
    fn dictionary_dump_round_trips() {
        let (log, types) = teaching_setup();
        let edges = analyze_dependencies(&log, &types).unwrap();
        let dict = learn_dictionary(&log, &edges, DictConfig::default()).unwrap();
        let text = emit_dictionary(&dict);
        assert_eq!(parse_dictionary(&text).unwrap(), dict);
    }
}

//! Language-agnostic script IR and model-script recovery.
//!
//! A script is a flat op list: structure declarations, named allocations,
//! word writes, call invocations, and return bindings. Traced absolute
//! addresses become allocation identities; dependencies become bindings
//! (`&var` address, `*var` content, `$var` bound return) resolved by the
//! executor at run time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::dep::{DepMode, DependencyEdge, OutputSource};
use crate::trace::TraceLog;
use crate::typedb::{Direction, TypeDb, TypeDbError};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub String);

impl fmt::Display for CallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A literal value or a binding to an earlier op's result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Literal(u64),
    /// `&var` — runtime address of the allocation.
    Addr(VarId),
    /// `*var` — first word stored in the allocation at call time.
    Deref(VarId),
    /// `$var` — a return value bound via `BINDRET`.
    Ret(VarId),
}

impl Operand {
    pub fn is_literal(&self) -> bool {
        matches!(self, Operand::Literal(_))
    }

    pub fn encode(&self) -> String {
        match self {
            Operand::Literal(v) => format!("0x{v:x}"),
            Operand::Addr(v) => format!("&{v}"),
            Operand::Deref(v) => format!("*{v}"),
            Operand::Ret(v) => format!("${v}"),
        }
    }

    pub fn decode(s: &str) -> Option<Operand> {
        if let Some(v) = s.strip_prefix('&') {
            return Some(Operand::Addr(VarId(v.to_string())));
        }
        if let Some(v) = s.strip_prefix('*') {
            return Some(Operand::Deref(VarId(v.to_string())));
        }
        if let Some(v) = s.strip_prefix('$') {
            return Some(Operand::Ret(VarId(v.to_string())));
        }
        let body = s.strip_prefix("0x")?;
        u64::from_str_radix(body, 16).ok().map(Operand::Literal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptOp {
    DefineStruct(String),
    Alloc {
        var: VarId,
        size: u32,
    },
    SetWord {
        var: VarId,
        offset: u32,
        value: Operand,
    },
    Invoke {
        call: CallId,
        name: String,
        args: Vec<Operand>,
        outs: Vec<(u32, VarId)>,
        expected_ret: i64,
    },
    BindReturn {
        var: VarId,
        call: CallId,
    },
}

/// Where a call came from: recovered from the trace, or inserted during
/// synthesis at some level under a parent occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Recovered(u64),
    Inserted {
        level: u32,
        parent: CallId,
        child_slot: u32,
        mode: DepMode,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    pub ops: Vec<ScriptOp>,
    pub provenance: BTreeMap<CallId, Provenance>,
}

impl Script {
    pub fn invokes(&self) -> impl Iterator<Item = &ScriptOp> {
        self.ops.iter().filter(|op| matches!(op, ScriptOp::Invoke { .. }))
    }

    pub fn invoke_count(&self) -> usize {
        self.invokes().count()
    }

    pub fn find_invoke(&self, call: &CallId) -> Option<&ScriptOp> {
        self.ops.iter().find(
            |op| matches!(op, ScriptOp::Invoke { call: c, .. } if c == call),
        )
    }

    /// Truncates the script right after its `n`-th invoke (1-based).
    pub fn prefix(&self, n: usize) -> Script {
        let mut ops = Vec::new();
        let mut seen = 0usize;
        for op in &self.ops {
            let is_invoke = matches!(op, ScriptOp::Invoke { .. });
            if is_invoke && seen == n {
                break;
            }
            ops.push(op.clone());
            if is_invoke {
                seen += 1;
                if seen == n {
                    break;
                }
            }
        }
        let calls: BTreeSet<CallId> = ops
            .iter()
            .filter_map(|op| match op {
                ScriptOp::Invoke { call, .. } => Some(call.clone()),
                _ => None,
            })
            .collect();
        let provenance = self
            .provenance
            .iter()
            .filter(|(c, _)| calls.contains(c))
            .map(|(c, p)| (c.clone(), p.clone()))
            .collect();
        Script { ops, provenance }
    }

    /// Def-before-use and uniqueness checks, without executing anything.
    pub fn structural_validate(&self) -> Result<(), ScriptError> {
        let mut allocs: BTreeSet<&VarId> = BTreeSet::new();
        let mut rets: BTreeSet<&VarId> = BTreeSet::new();
        let mut calls: BTreeSet<&CallId> = BTreeSet::new();
        let check = |op: &Operand, allocs: &BTreeSet<&VarId>, rets: &BTreeSet<&VarId>| {
            match op {
                Operand::Literal(_) => Ok(()),
                Operand::Addr(v) | Operand::Deref(v) => {
                    if allocs.contains(v) {
                        Ok(())
                    } else {
                        Err(ScriptError::UndefinedBinding(v.0.clone()))
                    }
                }
                Operand::Ret(v) => {
                    if rets.contains(v) {
                        Ok(())
                    } else {
                        Err(ScriptError::UndefinedBinding(v.0.clone()))
                    }
                }
            }
        };
        for op in &self.ops {
            match op {
                ScriptOp::DefineStruct(_) => {}
                ScriptOp::Alloc { var, .. } => {
                    if !allocs.insert(var) {
                        return Err(ScriptError::DuplicateVar(var.0.clone()));
                    }
                }
                ScriptOp::SetWord { var, value, .. } => {
                    if !allocs.contains(var) {
                        return Err(ScriptError::UndefinedBinding(var.0.clone()));
                    }
                    check(value, &allocs, &rets)?;
                }
                ScriptOp::Invoke { call, args, outs, .. } => {
                    if !calls.insert(call) {
                        return Err(ScriptError::DuplicateCall(call.0.clone()));
                    }
                    for a in args {
                        check(a, &allocs, &rets)?;
                    }
                    for (_, v) in outs {
                        if !allocs.contains(v) {
                            return Err(ScriptError::UndefinedBinding(v.0.clone()));
                        }
                    }
                }
                ScriptOp::BindReturn { var, call } => {
                    if !calls.contains(call) {
                        return Err(ScriptError::UndefinedBinding(call.0.clone()));
                    }
                    if !rets.insert(var) {
                        return Err(ScriptError::DuplicateVar(var.0.clone()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("malformed script line {line}: {reason}")]
    MalformedScript { line: usize, reason: String },
    #[error("binding `{0}` used before definition")]
    UndefinedBinding(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVar(String),
    #[error("duplicate call id `{0}`")]
    DuplicateCall(String),
    #[error("edge inconsistent with type db: {0}")]
    InconsistentEdge(String),
    #[error(transparent)]
    Type(#[from] TypeDbError),
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

pub const SCRIPT_HEADER: &str = "SCRIPT v1";

/// Canonical text form, one op per line under a `SCRIPT v1` header.
pub fn emit_script_text(script: &Script) -> String {
    let mut out = String::new();
    out.push_str(SCRIPT_HEADER);
    out.push('\n');
    for op in &script.ops {
        match op {
            ScriptOp::DefineStruct(id) => out.push_str(&format!("STRUCT {id}\n")),
            ScriptOp::Alloc { var, size } => out.push_str(&format!("ALLOC {var} {size}\n")),
            ScriptOp::SetWord { var, offset, value } => {
                out.push_str(&format!("SETW {var} {offset} {}\n", value.encode()))
            }
            ScriptOp::Invoke {
                call,
                name,
                args,
                outs,
                expected_ret,
            } => {
                let args_s = if args.is_empty() {
                    "-".to_string()
                } else {
                    args.iter().map(Operand::encode).collect::<Vec<_>>().join(",")
                };
                let outs_s = if outs.is_empty() {
                    "-".to_string()
                } else {
                    outs.iter()
                        .map(|(slot, v)| format!("{slot}:{v}"))
                        .collect::<Vec<_>>()
                        .join(",")
                };
                let src = match script.provenance.get(call) {
                    Some(Provenance::Recovered(seq)) => format!("rec:{seq}"),
                    Some(Provenance::Inserted {
                        level,
                        parent,
                        child_slot,
                        mode,
                    }) => format!("ins:{level}:{parent}:{child_slot}:{}", mode.encode()),
                    None => "rec:0".to_string(),
                };
                out.push_str(&format!(
                    "CALL {call} {name} args={args_s} out={outs_s} exp={} src={src}\n",
                    fmt_signed_hex(*expected_ret)
                ));
            }
            ScriptOp::BindReturn { var, call } => {
                out.push_str(&format!("BINDRET {var} {call}\n"))
            }
        }
    }
    out
}

/// Parses the canonical text form and validates bindings.
pub fn load_script(text: &str) -> Result<Script, ScriptError> {
    let mut lines = text.lines().enumerate();
    let malformed = |line: usize, reason: &str| ScriptError::MalformedScript {
        line,
        reason: reason.to_string(),
    };
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.starts_with('#') => continue,
            Some((i, l)) => break (i + 1, l.trim_end()),
            None => return Err(malformed(0, "missing header")),
        }
    };
    if header.1 != SCRIPT_HEADER {
        return Err(malformed(header.0, "bad header"));
    }
    let mut script = Script::default();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split(' ');
        match toks.next() {
            Some("STRUCT") => {
                let id = toks.next().ok_or_else(|| malformed(lineno, "missing struct id"))?;
                script.ops.push(ScriptOp::DefineStruct(id.to_string()));
            }
            Some("ALLOC") => {
                let var = toks.next().ok_or_else(|| malformed(lineno, "missing var"))?;
                let size = toks
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| malformed(lineno, "bad size"))?;
                script.ops.push(ScriptOp::Alloc {
                    var: VarId(var.to_string()),
                    size,
                });
            }
            Some("SETW") => {
                let var = toks.next().ok_or_else(|| malformed(lineno, "missing var"))?;
                let offset = toks
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| malformed(lineno, "bad offset"))?;
                let value = toks
                    .next()
                    .and_then(Operand::decode)
                    .ok_or_else(|| malformed(lineno, "bad operand"))?;
                script.ops.push(ScriptOp::SetWord {
                    var: VarId(var.to_string()),
                    offset,
                    value,
                });
            }
            Some("CALL") => {
                let call = CallId(
                    toks.next()
                        .ok_or_else(|| malformed(lineno, "missing call id"))?
                        .to_string(),
                );
                let name = toks
                    .next()
                    .ok_or_else(|| malformed(lineno, "missing name"))?
                    .to_string();
                let mut args = Vec::new();
                let mut outs = Vec::new();
                let mut expected_ret = None;
                let mut prov = None;
                for tok in toks {
                    if let Some(body) = tok.strip_prefix("args=") {
                        if body != "-" {
                            for a in body.split(',') {
                                args.push(
                                    Operand::decode(a)
                                        .ok_or_else(|| malformed(lineno, "bad arg operand"))?,
                                );
                            }
                        }
                    } else if let Some(body) = tok.strip_prefix("out=") {
                        if body != "-" {
                            for o in body.split(',') {
                                let (slot, var) = o
                                    .split_once(':')
                                    .ok_or_else(|| malformed(lineno, "bad out binding"))?;
                                outs.push((
                                    slot.parse().map_err(|_| malformed(lineno, "bad out slot"))?,
                                    VarId(var.to_string()),
                                ));
                            }
                        }
                    } else if let Some(body) = tok.strip_prefix("exp=") {
                        expected_ret =
                            Some(parse_signed_hex(body).ok_or_else(|| malformed(lineno, "bad exp"))?);
                    } else if let Some(body) = tok.strip_prefix("src=") {
                        prov = Some(parse_provenance(body).ok_or_else(|| malformed(lineno, "bad src"))?);
                    } else {
                        return Err(malformed(lineno, "unknown CALL field"));
                    }
                }
                let expected_ret =
                    expected_ret.ok_or_else(|| malformed(lineno, "missing exp field"))?;
                if let Some(p) = prov {
                    script.provenance.insert(call.clone(), p);
                }
                script.ops.push(ScriptOp::Invoke {
                    call,
                    name,
                    args,
                    outs,
                    expected_ret,
                });
            }
            Some("BINDRET") => {
                let var = toks.next().ok_or_else(|| malformed(lineno, "missing var"))?;
                let call = toks.next().ok_or_else(|| malformed(lineno, "missing call"))?;
                script.ops.push(ScriptOp::BindReturn {
                    var: VarId(var.to_string()),
                    call: CallId(call.to_string()),
                });
            }
            _ => return Err(malformed(lineno, "unknown op")),
        }
    }
    script.structural_validate()?;
    Ok(script)
}

fn parse_provenance(s: &str) -> Option<Provenance> {
    if let Some(seq) = s.strip_prefix("rec:") {
        return seq.parse().ok().map(Provenance::Recovered);
    }
    let body = s.strip_prefix("ins:")?;
    let mut parts = body.splitn(4, ':');
    let level = parts.next()?.parse().ok()?;
    let parent = CallId(parts.next()?.to_string());
    let child_slot = parts.next()?.parse().ok()?;
    let mode = DepMode::decode(parts.next()?)?;
    Some(Provenance::Inserted {
        level,
        parent,
        child_slot,
        mode,
    })
}

/// Per-trace-position staging produced during recovery; maps producer
/// outputs to the vars that stage them so consumers (and later synthesis)
/// can bind to them.
struct RecoveryState {
    var_counter: u64,
    defined_structs: BTreeSet<String>,
    /// (producer seq, out slot) -> staged allocation var
    out_vars: BTreeMap<(u64, u32), VarId>,
    /// producer seq -> bound return var
    ret_vars: BTreeMap<u64, VarId>,
}

impl RecoveryState {
    fn fresh_var(&mut self) -> VarId {
        self.var_counter += 1;
        VarId(format!("var{}", self.var_counter))
    }
}

/// Recovers a model script from a trace and its dependency edges: struct
/// declarations for every reachable template, staged allocations for
/// pointer arguments, literal values everywhere else, and bindings for
/// every edge-covered consumer slot. Call order preserves trace order.
pub fn recover_model_script(
    log: &TraceLog,
    edges: &[DependencyEdge],
    types: &TypeDb,
) -> Result<Script, ScriptError> {
    let mut script = Script::default();
    let mut state = RecoveryState {
        var_counter: 0,
        defined_structs: BTreeSet::new(),
        out_vars: BTreeMap::new(),
        ret_vars: BTreeMap::new(),
    };
    // consumer (seq, slot) -> edge; first edge wins (analyzer emits one)
    let mut bindings: BTreeMap<(u64, u32), &DependencyEdge> = BTreeMap::new();
    let mut needs_ret: BTreeSet<u64> = BTreeSet::new();
    for e in edges {
        bindings.entry((e.consumer_seq, e.consumer_slot)).or_insert(e);
        if e.producer_source == OutputSource::ReturnValue {
            needs_ret.insert(e.producer_seq);
        }
    }

    for rec in &log.records {
        let sig = types.lookup_signature(&rec.name)?.to_vec();
        for id in types.structs_for_signature(&rec.name)? {
            if state.defined_structs.insert(id.clone()) {
                script.ops.push(ScriptOp::DefineStruct(id));
            }
        }
        let mut args = Vec::with_capacity(sig.len());
        let mut outs = Vec::new();
        for (slot, desc) in sig.iter().enumerate() {
            let slot = slot as u32;
            if let Some(edge) = bindings.get(&(rec.seq, slot)) {
                let operand = match (edge.mode, edge.producer_source) {
                    (DepMode::AddressReuse, OutputSource::OutputArg(pslot)) => {
                        let var = state
                            .out_vars
                            .get(&(edge.producer_seq, pslot))
                            .ok_or_else(|| missing_staging(edge))?;
                        if desc.direction == Direction::Out && desc.kind.is_pointer_like() {
                            outs.push((slot, var.clone()));
                        }
                        Operand::Addr(var.clone())
                    }
                    (DepMode::ContentUse, OutputSource::OutputArg(pslot)) => {
                        let var = state
                            .out_vars
                            .get(&(edge.producer_seq, pslot))
                            .ok_or_else(|| missing_staging(edge))?;
                        Operand::Deref(var.clone())
                    }
                    (DepMode::ReturnUse, OutputSource::ReturnValue) => {
                        let var = state
                            .ret_vars
                            .get(&edge.producer_seq)
                            .ok_or_else(|| missing_staging(edge))?;
                        Operand::Ret(var.clone())
                    }
                    _ => return Err(missing_staging(edge)),
                };
                args.push(operand);
                continue;
            }
            if desc.kind.is_pointer_like() {
                let traced = rec
                    .arg(slot)
                    .and_then(|a| a.pointee.clone())
                    .unwrap_or_default();
                let counter = &mut state.var_counter;
                let var = stage_pointer(
                    &mut script,
                    &mut || {
                        *counter += 1;
                        VarId(format!("var{counter}"))
                    },
                    types,
                    desc.pointee.as_deref(),
                    &traced,
                )?;
                if desc.direction == Direction::Out {
                    state.out_vars.insert((rec.seq, slot), var.clone());
                    outs.push((slot, var.clone()));
                }
                args.push(Operand::Addr(var));
            } else {
                let raw = rec.arg(slot).map(|a| a.raw).unwrap_or(0);
                args.push(Operand::Literal(raw));
            }
        }
        let call = CallId(format!("c{}", rec.seq));
        script.ops.push(ScriptOp::Invoke {
            call: call.clone(),
            name: rec.name.clone(),
            args,
            outs,
            expected_ret: rec.ret,
        });
        script.provenance.insert(call.clone(), Provenance::Recovered(rec.seq));
        if needs_ret.contains(&rec.seq) {
            let var = state.fresh_var();
            state.ret_vars.insert(rec.seq, var.clone());
            script.ops.push(ScriptOp::BindReturn { var, call });
        }
    }
    script.structural_validate()?;
    Ok(script)
}

fn missing_staging(edge: &DependencyEdge) -> ScriptError {
    ScriptError::InconsistentEdge(format!(
        "edge {}:{:?} -> {}:{} has no staged producer output",
        edge.producer_seq, edge.producer_source, edge.consumer_seq, edge.consumer_slot
    ))
}

/// Allocates and initializes one pointer target. Template fields that are
/// themselves pointers to structures become separate child allocations
/// wired in by address; scalar fields take the traced pointee value at
/// their offset, defaulting to zero. Shared by recovery and synthesis.
pub fn stage_pointer(
    script: &mut Script,
    fresh_var: &mut dyn FnMut() -> VarId,
    types: &TypeDb,
    template: Option<&str>,
    traced: &[(u32, u64)],
) -> Result<VarId, ScriptError> {
    let var = fresh_var();
    match template {
        None => {
            script.ops.push(ScriptOp::Alloc {
                var: var.clone(),
                size: 8,
            });
            let value = traced
                .iter()
                .find(|&&(off, _)| off == 0)
                .map(|&(_, v)| v)
                .unwrap_or(0);
            script.ops.push(ScriptOp::SetWord {
                var: var.clone(),
                offset: 0,
                value: Operand::Literal(value),
            });
        }
        Some(id) => {
            let tpl = types.get_struct(id)?.clone();
            // children staged first so their vars exist before the wiring
            let mut field_ops = Vec::new();
            for f in &tpl.fields {
                if f.kind.is_pointer_like() {
                    if let Some(nested) = &f.nested {
                        let child =
                            stage_pointer(script, fresh_var, types, Some(nested), &[])?;
                        field_ops.push((f.offset, Operand::Addr(child)));
                        continue;
                    }
                }
                let value = traced
                    .iter()
                    .find(|&&(off, _)| off == f.offset)
                    .map(|&(_, v)| v)
                    .unwrap_or(0);
                field_ops.push((f.offset, Operand::Literal(value)));
            }
            script.ops.push(ScriptOp::Alloc {
                var: var.clone(),
                size: tpl.size,
            });
            for (offset, value) in field_ops {
                script.ops.push(ScriptOp::SetWord {
                    var: var.clone(),
                    offset,
                    value,
                });
            }
        }
    }
    Ok(var)
}

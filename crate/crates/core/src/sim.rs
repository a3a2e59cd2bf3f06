//! Deterministic simulated kernel.
//!
//! Executes script IR against a handle-table plus memory state machine
//! with configurable per-syscall behavior and plantable crash bugs, and
//! generates ground-truth traces from call plans. Fresh handles are small
//! non-address-like values; fresh allocation addresses and output
//! contents are address-like, so the six-digit heuristic behaves
//! controllably in tests.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dep::{is_address_like, slot_qualifies, DepMode, DependencyEdge, OutputSource};
use crate::script::{CallId, Operand, Script, ScriptOp, VarId};
use crate::trace::{ArgValue, OutputValue, SyscallRecord, TraceLog};
use crate::typedb::{Direction, TypeDb, TypeDbError, ValueKind};

pub const HANDLE_BASE: u64 = 0x100;
pub const HANDLE_STEP: u64 = 4;
pub const CONTENT_BASE: u64 = 0x10_0000;
pub const CONTENT_STEP: u64 = 8;
pub const ADDR_BASE: u64 = 0x1000_0000;
pub const ADDR_STEP: u64 = 0x1_0000;

/// Per-slot requirement checked before a call takes effect. Violations
/// fail the call with a negative status; execution continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotReq {
    LiveHandle,
    ValidAllocation,
}

/// Side effect applied when a call succeeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    /// Writes a fresh live handle into the out buffer's first word.
    ProducesHandle { slot: u32 },
    /// Writes `bytes` of fresh content values into the out buffer.
    WritesOutput { slot: u32, bytes: u32 },
    /// Marks the handle passed in `slot` as dead.
    ClosesHandle { slot: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
}

impl CmpOp {
    fn eval(self, a: u64, b: u64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Gt => a > b,
        }
    }

    fn encode(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
        }
    }
}

/// Conjunction of slot comparisons; when every clause holds on a call's
/// resolved argument values, the kernel crashes with `kind`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashCondition {
    pub clauses: Vec<(u32, CmpOp, u64)>,
    pub kind: String,
}

impl CrashCondition {
    pub fn fires(&self, args: &[u64]) -> bool {
        self.clauses.iter().all(|&(slot, op, v)| {
            args.get(slot as usize).is_some_and(|&a| op.eval(a, v))
        })
    }
}

/// Behavior of one simulated syscall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimSyscallSpec {
    pub name: String,
    pub requirements: BTreeMap<u32, SlotReq>,
    pub effects: Vec<Effect>,
    pub ret_success: i64,
    pub min_out_bytes: BTreeMap<u32, u32>,
    pub crash_conditions: Vec<CrashCondition>,
}

impl SimSyscallSpec {
    pub fn new(name: &str, ret_success: i64) -> Self {
        SimSyscallSpec {
            name: name.to_string(),
            requirements: BTreeMap::new(),
            effects: Vec::new(),
            ret_success,
            min_out_bytes: BTreeMap::new(),
            crash_conditions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimSpecSet {
    pub specs: BTreeMap<String, SimSyscallSpec>,
}

impl SimSpecSet {
    pub fn insert(&mut self, spec: SimSyscallSpec) {
        self.specs.insert(spec.name.clone(), spec);
    }

    pub fn get(&self, name: &str) -> Result<&SimSyscallSpec, SimError> {
        self.specs
            .get(name)
            .ok_or_else(|| SimError::UnknownSyscall(name.to_string()))
    }

    /// Adds a crash condition to an existing spec.
    pub fn plant_bug(
        &mut self,
        name: &str,
        condition: CrashCondition,
    ) -> Result<(), SimError> {
        let spec = self
            .specs
            .get_mut(name)
            .ok_or_else(|| SimError::UnknownSyscall(name.to_string()))?;
        spec.crash_conditions.push(condition);
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown syscall `{0}`")]
    UnknownSyscall(String),
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("word access out of range: {var} offset {offset}")]
    WordOutOfRange { var: String, offset: u32 },
    #[error("return of `{0}` bound before execution")]
    UnboundReturn(String),
    #[error("malformed sim spec line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("empty workload plan")]
    EmptyPlan,
    #[error(transparent)]
    Type(#[from] TypeDbError),
}

/// Fatal classes that halt a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FatalKind {
    /// An argument value the kernel cannot recover from.
    BadInput,
    /// An out buffer smaller than the call's declared minimum.
    OutputTooSmall,
    /// Virtual step budget exhausted.
    Hang,
    /// A planted crash predicate fired.
    Crash(String),
}

/// Result of one script execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptOutcome {
    Completed { returns: Vec<(CallId, i64)> },
    Fatal { call: CallId, kind: FatalKind },
}

impl ScriptOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, ScriptOutcome::Completed { .. })
    }
}

/// Virtual step accounting for one execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub setup_steps: u64,
    pub exec_steps: u64,
    pub calls_executed: u64,
}

impl ExecStats {
    pub fn total_steps(&self) -> u64 {
        self.setup_steps + self.exec_steps
    }
}

#[derive(Debug)]
struct Allocation {
    addr: u64,
    bytes: Vec<u8>,
}

impl Allocation {
    fn read_word(&self, offset: u32) -> Option<u64> {
        let off = offset as usize;
        if off + 8 > self.bytes.len() {
            return None;
        }
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&self.bytes[off..off + 8]);
        Some(u64::from_le_bytes(buf))
    }

    fn write_word(&mut self, offset: u32, value: u64) -> bool {
        let off = offset as usize;
        if off + 8 > self.bytes.len() {
            return false;
        }
        self.bytes[off..off + 8].copy_from_slice(&value.to_le_bytes());
        true
    }
}

/// Mutable kernel state for one execution. Never shared between runs.
#[derive(Debug, Default)]
pub struct KernelState {
    allocations: BTreeMap<VarId, Allocation>,
    addr_index: BTreeMap<u64, VarId>,
    handles: BTreeMap<u64, bool>,
    ret_bindings: BTreeMap<VarId, i64>,
    next_addr: u64,
    next_handle: u64,
    next_content: u64,
}

impl KernelState {
    pub fn new() -> Self {
        KernelState {
            next_addr: ADDR_BASE,
            next_handle: HANDLE_BASE,
            next_content: CONTENT_BASE,
            ..Default::default()
        }
    }

    fn alloc(&mut self, var: &VarId, size: u32) {
        let addr = self.next_addr;
        self.next_addr += ADDR_STEP;
        self.addr_index.insert(addr, var.clone());
        self.allocations.insert(
            var.clone(),
            Allocation {
                addr,
                bytes: vec![0; size as usize],
            },
        );
    }

    fn fresh_handle(&mut self) -> u64 {
        let h = self.next_handle;
        self.next_handle += HANDLE_STEP;
        self.handles.insert(h, true);
        h
    }

    fn fresh_content(&mut self) -> u64 {
        let c = self.next_content;
        self.next_content += CONTENT_STEP;
        c
    }

    fn resolve(&self, op: &Operand) -> Result<u64, SimError> {
        match op {
            Operand::Literal(v) => Ok(*v),
            Operand::Addr(var) => self
                .allocations
                .get(var)
                .map(|a| a.addr)
                .ok_or_else(|| SimError::UnknownVar(var.0.clone())),
            Operand::Deref(var) => self
                .allocations
                .get(var)
                .and_then(|a| a.read_word(0))
                .ok_or_else(|| SimError::UnknownVar(var.0.clone())),
            Operand::Ret(var) => self
                .ret_bindings
                .get(var)
                .map(|&v| v as u64)
                .ok_or_else(|| SimError::UnknownVar(var.0.clone())),
        }
    }
}

/// Applies one invoke against the state. Returns either the in-band
/// status or a fatal class.
fn apply_call(
    state: &mut KernelState,
    spec: &SimSyscallSpec,
    args: &[u64],
    outs: &BTreeMap<u32, VarId>,
) -> Result<i64, FatalKind> {
    for cond in &spec.crash_conditions {
        if cond.fires(args) {
            return Err(if cond.kind == "badinput" {
                FatalKind::BadInput
            } else {
                FatalKind::Crash(cond.kind.clone())
            });
        }
    }
    for (&slot, &min) in &spec.min_out_bytes {
        match outs.get(&slot) {
            Some(var) => {
                let size = state
                    .allocations
                    .get(var)
                    .map(|a| a.bytes.len() as u32)
                    .unwrap_or(0);
                if size < min {
                    return Err(FatalKind::OutputTooSmall);
                }
            }
            // the out slot was not staged at all: the call fails in-band
            None => return Ok(-(0x100 + slot as i64)),
        }
    }
    for (&slot, &req) in &spec.requirements {
        let Some(&value) = args.get(slot as usize) else {
            return Ok(-(0x57 + slot as i64));
        };
        let ok = match req {
            SlotReq::LiveHandle => state.handles.get(&value) == Some(&true),
            SlotReq::ValidAllocation => state.addr_index.contains_key(&value),
        };
        if !ok {
            return Ok(-(0x57 + slot as i64));
        }
    }
    for effect in &spec.effects {
        match effect {
            Effect::ProducesHandle { slot } => {
                if let Some(var) = outs.get(slot) {
                    let h = state.fresh_handle();
                    if let Some(a) = state.allocations.get_mut(var) {
                        a.write_word(0, h);
                    }
                }
            }
            Effect::WritesOutput { slot, bytes } => {
                if let Some(var) = outs.get(slot) {
                    let words = (*bytes / 8).max(1);
                    let values: Vec<u64> =
                        (0..words).map(|_| state.fresh_content()).collect();
                    if let Some(a) = state.allocations.get_mut(var) {
                        for (i, v) in values.into_iter().enumerate() {
                            a.write_word(i as u32 * 8, v);
                        }
                    }
                }
            }
            Effect::ClosesHandle { slot } => {
                if let Some(&value) = args.get(*slot as usize) {
                    if let Some(live) = state.handles.get_mut(&value) {
                        *live = false;
                    }
                }
            }
        }
    }
    Ok(spec.ret_success)
}

/// Sequential interpretation of a script. Semantic failures return
/// negative statuses and execution continues; crash predicates, undersized
/// out buffers, and budget exhaustion halt the run.
pub fn execute_script(
    specs: &SimSpecSet,
    script: &Script,
    step_budget: Option<u64>,
) -> Result<(ScriptOutcome, ExecStats), SimError> {
    let mut state = KernelState::new();
    let mut stats = ExecStats::default();
    let mut returns: Vec<(CallId, i64)> = Vec::new();
    let mut last_call: Option<CallId> = None;
    for op in &script.ops {
        let steps = stats.total_steps() + 1;
        if let Some(budget) = step_budget {
            if steps > budget {
                return Ok((
                    ScriptOutcome::Fatal {
                        call: last_call.unwrap_or_else(|| CallId("<none>".to_string())),
                        kind: FatalKind::Hang,
                    },
                    stats,
                ));
            }
        }
        match op {
            ScriptOp::DefineStruct(_) => {
                stats.setup_steps += 1;
            }
            ScriptOp::Alloc { var, size } => {
                stats.setup_steps += 1;
                state.alloc(var, *size);
            }
            ScriptOp::SetWord { var, offset, value } => {
                stats.setup_steps += 1;
                let v = state.resolve(value)?;
                let alloc = state
                    .allocations
                    .get_mut(var)
                    .ok_or_else(|| SimError::UnknownVar(var.0.clone()))?;
                if !alloc.write_word(*offset, v) {
                    return Err(SimError::WordOutOfRange {
                        var: var.0.clone(),
                        offset: *offset,
                    });
                }
            }
            ScriptOp::BindReturn { var, call } => {
                stats.setup_steps += 1;
                let ret = returns
                    .iter()
                    .find(|(c, _)| c == call)
                    .map(|&(_, r)| r)
                    .ok_or_else(|| SimError::UnboundReturn(call.0.clone()))?;
                state.ret_bindings.insert(var.clone(), ret);
            }
            ScriptOp::Invoke {
                call, name, args, outs, ..
            } => {
                stats.exec_steps += 1;
                stats.calls_executed += 1;
                last_call = Some(call.clone());
                let spec = specs.get(name)?;
                let values: Vec<u64> = args
                    .iter()
                    .map(|a| state.resolve(a))
                    .collect::<Result<_, _>>()?;
                let out_map: BTreeMap<u32, VarId> =
                    outs.iter().map(|(s, v)| (*s, v.clone())).collect();
                match apply_call(&mut state, spec, &values, &out_map) {
                    Ok(ret) => returns.push((call.clone(), ret)),
                    Err(kind) => {
                        return Ok((
                            ScriptOutcome::Fatal {
                                call: call.clone(),
                                kind,
                            },
                            stats,
                        ))
                    }
                }
            }
        }
    }
    Ok((ScriptOutcome::Completed { returns }, stats))
}

/// One planned argument in a trace-generation workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlannedArg {
    Lit(u64),
    /// Fresh buffer; `content` pre-fills leading words (In pointers).
    Fresh { content: Vec<u64> },
    /// Reuse the address of an earlier call's buffer.
    AddrOf { call: usize, slot: u32 },
    /// Use the first word currently stored in an earlier call's buffer.
    ContentOf { call: usize, slot: u32 },
    /// Use an earlier call's return value.
    RetOf { call: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedCall {
    pub name: String,
    pub args: Vec<PlannedArg>,
}

struct GenBuffer {
    addr: u64,
    bytes: Vec<u8>,
}

impl GenBuffer {
    fn read_word(&self, offset: u32) -> u64 {
        let off = offset as usize;
        if off + 8 > self.bytes.len() {
            return 0;
        }
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&self.bytes[off..off + 8]);
        u64::from_le_bytes(buf)
    }

    fn write_word(&mut self, offset: u32, value: u64) {
        let off = offset as usize;
        if off + 8 <= self.bytes.len() {
            self.bytes[off..off + 8].copy_from_slice(&value.to_le_bytes());
        }
    }
}

/// Executes a call plan against the simulated kernel and logs it in trace
/// format, together with the plan's ground-truth dependency edges.
///
/// Ground truth matches the analyzer's reverse-scan view as long as the
/// plan wires each dependency to the most recent producer of the value
/// (the canned plan builders do).
pub fn generate_trace(
    specs: &SimSpecSet,
    types: &TypeDb,
    plan: &[PlannedCall],
    source: &str,
) -> Result<(TraceLog, Vec<DependencyEdge>), SimError> {
    if plan.is_empty() {
        return Err(SimError::EmptyPlan);
    }
    let mut state = KernelState::new();
    // per planned call: slot -> buffer
    let mut buffers: Vec<BTreeMap<u32, GenBuffer>> = Vec::new();
    let mut rets: Vec<i64> = Vec::new();
    // out slots each call actually wrote (content entries exist only there)
    let mut written_slots: Vec<Vec<u32>> = Vec::new();
    let mut records = Vec::new();
    let mut truth = Vec::new();

    for (idx, planned) in plan.iter().enumerate() {
        let spec = specs.get(&planned.name)?;
        let sig = types.lookup_signature(&planned.name)?.to_vec();
        let seq = idx as u64 + 1;
        let mut own: BTreeMap<u32, GenBuffer> = BTreeMap::new();
        let mut values: Vec<u64> = Vec::new();
        // (slot, producer idx, producer slot or ret, mode)
        let mut planned_deps: Vec<(u32, usize, OutputSource, DepMode)> = Vec::new();

        for (slot, parg) in planned.args.iter().enumerate() {
            let slot = slot as u32;
            let desc = sig.get(slot as usize);
            let value = match parg {
                PlannedArg::Lit(v) => *v,
                PlannedArg::Fresh { content } => {
                    let size = desc
                        .and_then(|d| d.pointee.as_deref())
                        .and_then(|id| types.get_struct(id).ok())
                        .map(|t| t.size)
                        .unwrap_or(8);
                    let addr = state.next_addr;
                    state.next_addr += ADDR_STEP;
                    state.addr_index.insert(addr, VarId(format!("g{idx}_{slot}")));
                    let mut buf = GenBuffer {
                        addr,
                        bytes: vec![0; size as usize],
                    };
                    for (i, v) in content.iter().enumerate() {
                        buf.write_word(i as u32 * 8, *v);
                    }
                    let addr = buf.addr;
                    own.insert(slot, buf);
                    addr
                }
                PlannedArg::AddrOf { call, slot: pslot } => {
                    let buf = buffers
                        .get(*call)
                        .and_then(|m| m.get(pslot))
                        .ok_or(SimError::EmptyPlan)?;
                    let value = buf.addr;
                    planned_deps.push((
                        slot,
                        *call,
                        OutputSource::OutputArg(*pslot),
                        DepMode::AddressReuse,
                    ));
                    value
                }
                PlannedArg::ContentOf { call, slot: pslot } => {
                    let buf = buffers
                        .get(*call)
                        .and_then(|m| m.get(pslot))
                        .ok_or(SimError::EmptyPlan)?;
                    let value = buf.read_word(0);
                    planned_deps.push((
                        slot,
                        *call,
                        OutputSource::OutputArg(*pslot),
                        DepMode::ContentUse,
                    ));
                    value
                }
                PlannedArg::RetOf { call } => {
                    let value = *rets.get(*call).ok_or(SimError::EmptyPlan)? as u64;
                    planned_deps.push((slot, *call, OutputSource::ReturnValue, DepMode::ReturnUse));
                    value
                }
            };
            values.push(value);
        }

        // requirements and effects, mirroring apply_call over raw buffers
        let mut ret = spec.ret_success;
        for (&slot, &req) in &spec.requirements {
            let Some(&value) = values.get(slot as usize) else {
                ret = -(0x57 + slot as i64);
                break;
            };
            let ok = match req {
                SlotReq::LiveHandle => state.handles.get(&value) == Some(&true),
                SlotReq::ValidAllocation => state.addr_index.contains_key(&value),
            };
            if !ok {
                ret = -(0x57 + slot as i64);
                break;
            }
        }
        let mut written: Vec<u32> = Vec::new();
        if ret >= 0 {
            for effect in &spec.effects {
                match effect {
                    Effect::ProducesHandle { slot } => {
                        let h = state.fresh_handle();
                        if let Some(buf) = own.get_mut(slot) {
                            buf.write_word(0, h);
                            written.push(*slot);
                        }
                    }
                    Effect::WritesOutput { slot, bytes } => {
                        let words = (*bytes / 8).max(1);
                        let values: Vec<u64> =
                            (0..words).map(|_| state.fresh_content()).collect();
                        if let Some(buf) = own.get_mut(slot) {
                            for (i, v) in values.into_iter().enumerate() {
                                buf.write_word(i as u32 * 8, v);
                            }
                            written.push(*slot);
                        }
                    }
                    Effect::ClosesHandle { slot } => {
                        if let Some(&value) = values.get(*slot as usize) {
                            if let Some(live) = state.handles.get_mut(&value) {
                                *live = false;
                            }
                        }
                    }
                }
            }
        }

        // build the trace record
        let mut args = Vec::new();
        for (slot, desc) in sig.iter().enumerate() {
            let slot = slot as u32;
            let raw = values.get(slot as usize).copied().unwrap_or(0);
            let pointee = if desc.kind.is_pointer_like() {
                Some(pre_call_pointee(
                    types,
                    desc.pointee.as_deref(),
                    planned.args.get(slot as usize),
                    &buffers,
                    &own,
                    slot,
                ))
            } else {
                None
            };
            args.push(ArgValue {
                slot,
                direction: desc.direction,
                kind: desc.kind,
                raw,
                pointee,
            });
        }
        written.sort_unstable();
        written.dedup();
        let outputs: Vec<OutputValue> = written
            .iter()
            .filter_map(|slot| {
                let buf = own.get(slot)?;
                let offsets = word_offsets(types, sig.get(*slot as usize));
                Some(OutputValue {
                    slot: *slot,
                    pointee: offsets
                        .into_iter()
                        .map(|off| (off, buf.read_word(off)))
                        .collect(),
                })
            })
            .collect();

        // ground-truth edges: only those the analyzer can observe
        for (slot, pidx, source, mode) in planned_deps {
            let desc = &sig[slot as usize];
            let value = values[slot as usize];
            let gate = desc.kind == ValueKind::Handle || is_address_like(value);
            if !gate || !slot_qualifies(desc) {
                continue;
            }
            if let OutputSource::OutputArg(pslot) = source {
                // producer slot must have entered the output table
                let psig = types.lookup_signature(&plan[pidx].name)?;
                let pdesc = &psig[pslot as usize];
                if pdesc.direction != Direction::Out || !pdesc.kind.is_pointer_like() {
                    continue;
                }
                // content rows exist only for slots the producer wrote
                if mode == DepMode::ContentUse && !written_slots[pidx].contains(&pslot) {
                    continue;
                }
            } else if rets[pidx] <= 0 {
                continue;
            }
            truth.push(DependencyEdge {
                producer_seq: pidx as u64 + 1,
                producer_source: source,
                consumer_seq: seq,
                consumer_slot: slot,
                mode,
            });
        }

        records.push(SyscallRecord {
            seq,
            name: planned.name.clone(),
            args,
            outputs,
            ret,
        });
        buffers.push(own);
        rets.push(ret);
        written_slots.push(written);
    }
    Ok((
        TraceLog {
            records,
            source: source.to_string(),
        },
        truth,
    ))
}

fn word_offsets(
    types: &TypeDb,
    desc: Option<&crate::typedb::ArgTypeDescriptor>,
) -> Vec<u32> {
    desc.and_then(|d| d.pointee.as_deref())
        .and_then(|id| types.flatten_struct(id).ok())
        .map(|fs| fs.into_iter().map(|(off, _)| off).collect())
        .unwrap_or_else(|| vec![0])
}

fn pre_call_pointee(
    types: &TypeDb,
    template: Option<&str>,
    parg: Option<&PlannedArg>,
    buffers: &[BTreeMap<u32, GenBuffer>],
    own: &BTreeMap<u32, GenBuffer>,
    slot: u32,
) -> Vec<(u32, u64)> {
    let offsets: Vec<u32> = template
        .and_then(|id| types.flatten_struct(id).ok())
        .map(|fs| fs.into_iter().map(|(off, _)| off).collect())
        .unwrap_or_else(|| vec![0]);
    let read = |buf: &GenBuffer| offsets.iter().map(|&o| (o, buf.read_word(o))).collect();
    match parg {
        Some(PlannedArg::Fresh { .. }) => own.get(&slot).map(read).unwrap_or_default(),
        Some(PlannedArg::AddrOf { call, slot: pslot }) => buffers
            .get(*call)
            .and_then(|m| m.get(pslot))
            .map(read)
            .unwrap_or_default(),
        _ => vec![],
    }
}

/// Parses the sim spec text format:
///
/// ```text
/// Y|<name>|req:<slot>=<H|A>;...|eff:<slot>=<handle|write:<bytes>|close>;...|ret:0x<hex>|minout:<slot>=<bytes>;...
/// B|<name>|<slot><op>0x<hex>[&...]|<kind>
/// ```
pub fn parse_sim_specs(text: &str) -> Result<SimSpecSet, SimError> {
    let mut set = SimSpecSet::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| SimError::Malformed {
            line: lineno,
            reason: reason.to_string(),
        };
        if let Some(body) = line.strip_prefix("Y|") {
            let mut parts = body.split('|');
            let name = parts.next().ok_or_else(|| malformed("missing name"))?;
            let mut spec = SimSyscallSpec::new(name, 0);
            for seg in parts {
                if let Some(req) = seg.strip_prefix("req:") {
                    if req == "-" {
                        continue;
                    }
                    for item in req.split(';') {
                        let (slot, letter) =
                            item.split_once('=').ok_or_else(|| malformed("bad req"))?;
                        let slot = slot.parse().map_err(|_| malformed("bad req slot"))?;
                        let r = match letter {
                            "H" => SlotReq::LiveHandle,
                            "A" => SlotReq::ValidAllocation,
                            _ => return Err(malformed("bad req letter")),
                        };
                        spec.requirements.insert(slot, r);
                    }
                } else if let Some(eff) = seg.strip_prefix("eff:") {
                    if eff == "-" {
                        continue;
                    }
                    for item in eff.split(';') {
                        let (slot, what) =
                            item.split_once('=').ok_or_else(|| malformed("bad eff"))?;
                        let slot = slot.parse().map_err(|_| malformed("bad eff slot"))?;
                        let e = if what == "handle" {
                            Effect::ProducesHandle { slot }
                        } else if what == "close" {
                            Effect::ClosesHandle { slot }
                        } else if let Some(bytes) = what.strip_prefix("write:") {
                            Effect::WritesOutput {
                                slot,
                                bytes: bytes.parse().map_err(|_| malformed("bad write bytes"))?,
                            }
                        } else {
                            return Err(malformed("bad effect"));
                        };
                        spec.effects.push(e);
                    }
                } else if let Some(ret) = seg.strip_prefix("ret:") {
                    let body = ret.strip_prefix("0x").ok_or_else(|| malformed("bad ret"))?;
                    spec.ret_success =
                        i64::from_str_radix(body, 16).map_err(|_| malformed("bad ret"))?;
                } else if let Some(mo) = seg.strip_prefix("minout:") {
                    if mo == "-" {
                        continue;
                    }
                    for item in mo.split(';') {
                        let (slot, bytes) =
                            item.split_once('=').ok_or_else(|| malformed("bad minout"))?;
                        spec.min_out_bytes.insert(
                            slot.parse().map_err(|_| malformed("bad minout slot"))?,
                            bytes.parse().map_err(|_| malformed("bad minout bytes"))?,
                        );
                    }
                } else {
                    return Err(malformed("unknown segment"));
                }
            }
            set.insert(spec);
        } else if let Some(body) = line.strip_prefix("B|") {
            let mut parts = body.split('|');
            let name = parts.next().ok_or_else(|| malformed("missing name"))?;
            let pred = parts.next().ok_or_else(|| malformed("missing predicate"))?;
            let kind = parts.next().ok_or_else(|| malformed("missing kind"))?;
            if parts.next().is_some() {
                return Err(malformed("extra fields"));
            }
            let mut clauses = Vec::new();
            for clause in pred.split('&') {
                let (slot, op, rest) = if let Some((s, r)) = clause.split_once("==") {
                    (s, CmpOp::Eq, r)
                } else if let Some((s, r)) = clause.split_once("!=") {
                    (s, CmpOp::Ne, r)
                } else if let Some((s, r)) = clause.split_once('<') {
                    (s, CmpOp::Lt, r)
                } else if let Some((s, r)) = clause.split_once('>') {
                    (s, CmpOp::Gt, r)
                } else {
                    return Err(malformed("bad clause"));
                };
                let slot = slot.parse().map_err(|_| malformed("bad clause slot"))?;
                let value = u64::from_str_radix(
                    rest.strip_prefix("0x").ok_or_else(|| malformed("bad clause value"))?,
                    16,
                )
                .map_err(|_| malformed("bad clause value"))?;
                clauses.push((slot, op, value));
            }
            set.plant_bug(
                name,
                CrashCondition {
                    clauses,
                    kind: kind.to_string(),
                },
            )
            .map_err(|_| malformed("bug on unknown syscall"))?;
        } else {
            return Err(malformed("unknown line tag"));
        }
    }
    Ok(set)
}

/// Canonical serialization, inverse of [`parse_sim_specs`].
pub fn emit_sim_specs(set: &SimSpecSet) -> String {
    let mut out = String::new();
    let mut bugs = String::new();
    for (name, spec) in &set.specs {
        let req = if spec.requirements.is_empty() {
            "-".to_string()
        } else {
            spec.requirements
                .iter()
                .map(|(s, r)| {
                    format!(
                        "{s}={}",
                        match r {
                            SlotReq::LiveHandle => "H",
                            SlotReq::ValidAllocation => "A",
                        }
                    )
                })
                .collect::<Vec<_>>()
                .join(";")
        };
        let eff = if spec.effects.is_empty() {
            "-".to_string()
        } else {
            spec.effects
                .iter()
                .map(|e| match e {
                    Effect::ProducesHandle { slot } => format!("{slot}=handle"),
                    Effect::WritesOutput { slot, bytes } => format!("{slot}=write:{bytes}"),
                    Effect::ClosesHandle { slot } => format!("{slot}=close"),
                })
                .collect::<Vec<_>>()
                .join(";")
        };
        let ret = if spec.ret_success < 0 {
            format!("-0x{:x}", -spec.ret_success)
        } else {
            format!("0x{:x}", spec.ret_success)
        };
        out.push_str(&format!("Y|{name}|req:{req}|eff:{eff}|ret:{ret}"));
        if !spec.min_out_bytes.is_empty() {
            let mo = spec
                .min_out_bytes
                .iter()
                .map(|(s, b)| format!("{s}={b}"))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!("|minout:{mo}"));
        }
        out.push('\n');
        for cond in &spec.crash_conditions {
            let pred = cond
                .clauses
                .iter()
                .map(|(s, op, v)| format!("{s}{}0x{v:x}", op.encode()))
                .collect::<Vec<_>>()
                .join("&");
            bugs.push_str(&format!("B|{name}|{pred}|{}\n", cond.kind));
        }
    }
    out.push_str(&bugs);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dep::analyze_dependencies;
    use crate::trace::validate_trace;
    use crate::typedb::load_type_db;

    fn specs() -> SimSpecSet {
        parse_sim_specs(concat!(
            "Y|open_session|req:-|eff:1=handle|ret:0x0\n",
            "Y|query_session|req:0=H|eff:1=write:16|ret:0x310|minout:1=16\n",
            "Y|close_session|req:0=H|eff:0=close|ret:0x0\n",
        ))
        .unwrap()
    }

    fn types() -> TypeDb {
        load_type_db(concat!(
            "T|hbuf|0:H;size=8\n",
            "T|info|0:S;8:S;size=16\n",
            "S|open_session|2|0:IS;1:OP:hbuf\n",
            "S|query_session|2|0:IH;1:OP:info\n",
            "S|close_session|1|0:IH\n",
        ))
        .unwrap()
    }

    fn var(n: &str) -> VarId {
        VarId(n.to_string())
    }

    fn call(n: &str) -> CallId {
        CallId(n.to_string())
    }

    /// open -> query via the handle written into the out buffer.
    fn handle_chain_script(query_alloc: u32) -> Script {
        let mut s = Script::default();
        s.ops.push(ScriptOp::Alloc { var: var("v1"), size: 8 });
        s.ops.push(ScriptOp::Invoke {
            call: call("c1"),
            name: "open_session".to_string(),
            args: vec![Operand::Literal(0x5), Operand::Addr(var("v1"))],
            outs: vec![(1, var("v1"))],
            expected_ret: 0,
        });
        s.ops.push(ScriptOp::Alloc { var: var("v2"), size: query_alloc });
        s.ops.push(ScriptOp::Invoke {
            call: call("c2"),
            name: "query_session".to_string(),
            args: vec![Operand::Deref(var("v1")), Operand::Addr(var("v2"))],
            outs: vec![(1, var("v2"))],
            expected_ret: 0x310,
        });
        s
    }

    #[test]
    fn handle_chain_completes_with_expected_returns() {
        let (outcome, stats) = execute_script(&specs(), &handle_chain_script(16), None).unwrap();
        match outcome {
            ScriptOutcome::Completed { returns } => {
                assert_eq!(returns, vec![(call("c1"), 0), (call("c2"), 0x310)]);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
        assert_eq!(stats.calls_executed, 2);
        assert_eq!(stats.exec_steps, 2);
        assert_eq!(stats.setup_steps, 2);
    }

    #[test]
    fn dead_handle_fails_in_band() {
        let mut s = handle_chain_script(16);
        // close between open and query
        let query_at = s
            .ops
            .iter()
            .position(|op| matches!(op, ScriptOp::Invoke { name, .. } if name == "query_session"))
            .unwrap();
        s.ops.insert(
            query_at,
            ScriptOp::Invoke {
                call: call("c3"),
                name: "close_session".to_string(),
                args: vec![Operand::Deref(var("v1"))],
                outs: vec![],
                expected_ret: 0,
            },
        );
        let (outcome, _) = execute_script(&specs(), &s, None).unwrap();
        match outcome {
            ScriptOutcome::Completed { returns } => {
                assert_eq!(returns.last().unwrap().1, -0x57);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn undersized_out_buffer_is_fatal() {
        let (outcome, _) = execute_script(&specs(), &handle_chain_script(8), None).unwrap();
        assert_eq!(
            outcome,
            ScriptOutcome::Fatal {
                call: call("c2"),
                kind: FatalKind::OutputTooSmall,
            }
        );
    }

    #[test]
    fn planted_predicate_crashes() {
        let mut specs = specs();
        specs
            .plant_bug(
                "open_session",
                CrashCondition {
                    clauses: vec![(0, CmpOp::Eq, 0x5)],
                    kind: "nullderef".to_string(),
                },
            )
            .unwrap();
        let (outcome, _) = execute_script(&specs, &handle_chain_script(16), None).unwrap();
        assert_eq!(
            outcome,
            ScriptOutcome::Fatal {
                call: call("c1"),
                kind: FatalKind::Crash("nullderef".to_string()),
            }
        );
    }

    #[test]
    fn contradictory_predicate_never_fires() {
        let cond = CrashCondition {
            clauses: vec![(0, CmpOp::Eq, 0), (0, CmpOp::Eq, 1)],
            kind: "impossible".to_string(),
        };
        for v in 0u64..64 {
            assert!(!cond.fires(&[v, v]));
        }
    }

    #[test]
    fn step_budget_exhaustion_hangs() {
        let (outcome, stats) = execute_script(&specs(), &handle_chain_script(16), Some(3)).unwrap();
        match outcome {
            ScriptOutcome::Fatal { kind: FatalKind::Hang, .. } => {}
            other => panic!("unexpected outcome {other:?}"),
        }
        assert!(stats.total_steps() <= 3);
    }

    #[test]
    fn execution_is_deterministic() {
        let s = handle_chain_script(16);
        let a = execute_script(&specs(), &s, None).unwrap();
        let b = execute_script(&specs(), &s, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sim_spec_round_trip() {
        let mut set = specs();
        set.plant_bug(
            "query_session",
            CrashCondition {
                clauses: vec![(0, CmpOp::Gt, 0x7fffffff)],
                kind: "overflow".to_string(),
            },
        )
        .unwrap();
        let text = emit_sim_specs(&set);
        let reparsed = parse_sim_specs(&text).unwrap();
        assert_eq!(reparsed, set);
        assert_eq!(emit_sim_specs(&reparsed), text);
    }

    #[test]
    fn generated_trace_validates_and_matches_ground_truth() {
        let plan = vec![
            PlannedCall {
                name: "open_session".to_string(),
                args: vec![PlannedArg::Lit(0x9), PlannedArg::Fresh { content: vec![] }],
            },
            PlannedCall {
                name: "query_session".to_string(),
                args: vec![
                    PlannedArg::ContentOf { call: 0, slot: 1 },
                    PlannedArg::Fresh { content: vec![] },
                ],
            },
            PlannedCall {
                name: "close_session".to_string(),
                args: vec![PlannedArg::ContentOf { call: 0, slot: 1 }],
            },
        ];
        let types = types();
        let (log, truth) = generate_trace(&specs(), &types, &plan, "unit").unwrap();
        assert!(validate_trace(&log, &types).unwrap().is_empty());
        // open_session ret is 0 so its out-buffer entries carry no usable
        // ret edge; the two handle consumers must both be ContentUse.
        assert_eq!(truth.len(), 2);
        assert!(truth.iter().all(|e| e.mode == DepMode::ContentUse));
        let inferred = analyze_dependencies(&log, &types).unwrap();
        assert_eq!(inferred, truth);
    }

    #[test]
    fn empty_plan_is_rejected() {
        assert_eq!(
            generate_trace(&specs(), &types(), &[], "unit").unwrap_err(),
            SimError::EmptyPlan
        );
    }

    #[test]
    fn fresh_value_ranges_respect_address_likeness() {
        let mut state = KernelState::new();
        let h = state.fresh_handle();
        let c = state.fresh_content();
        assert!(!is_address_like(h));
        assert!(is_address_like(c));
        assert!(is_address_like(state.next_addr));
    }
}

//! Sequence synthesis: insertable-site detection, leveled insertion of
//! dictionary children, binary-search fault localization, and rectification
//! of faulty calls.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::dep::{DepMode, DependencyEdge, OutputSource};
use crate::dict::{DependencyDictionary, DependentTemplate};
use crate::script::{
    stage_pointer, CallId, Operand, Provenance, Script, ScriptError, ScriptOp, VarId,
};
use crate::sim::FatalKind;
use crate::typedb::{Direction, TypeDb, TypeDbError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("template slot {slot} exceeds arity of `{name}`")]
    UnknownTemplateSlot { name: String, slot: u32 },
    #[error("full script completes; nothing to localize")]
    NotReproducible,
    #[error("script still fatal after {0} repair rounds")]
    RepairExhausted(u32),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Type(#[from] TypeDbError),
}

/// An occurrence of a dictionary producer that lacks at least one of the
/// producer's taught children as a dependent successor.
#[derive(Debug, Clone)]
pub struct InsertableSite {
    pub call_id: CallId,
    pub producer_name: String,
    pub missing: Vec<DependentTemplate>,
}

/// Per-level record of what one `synthesize` run inserted.
#[derive(Debug, Clone, Default)]
pub struct SynthesisPlan {
    /// Inserted call ids per level, index 0 = level 1.
    pub levels: Vec<Vec<CallId>>,
    /// Templates skipped because the producer's source output was not
    /// staged at that occurrence.
    pub skipped_unstaged: u64,
}

impl SynthesisPlan {
    pub fn total_inserted(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn levels_disjoint(&self) -> bool {
        let mut seen: BTreeSet<&CallId> = BTreeSet::new();
        for level in &self.levels {
            for id in level {
                if !seen.insert(id) {
                    return false;
                }
            }
        }
        true
    }
}

/// The set of child (name, slot, mode) triples already attached to each
/// occurrence: via trace edges for recovered calls, via provenance for
/// inserted ones.
fn attached_triples(
    script: &Script,
    edges: &[DependencyEdge],
) -> BTreeMap<CallId, BTreeSet<(String, u32, DepMode)>> {
    let mut attached: BTreeMap<CallId, BTreeSet<(String, u32, DepMode)>> = BTreeMap::new();
    let name_of: BTreeMap<&CallId, &str> = script
        .ops
        .iter()
        .filter_map(|op| match op {
            ScriptOp::Invoke { call, name, .. } => Some((call, name.as_str())),
            _ => None,
        })
        .collect();
    let seq_to_call: BTreeMap<u64, &CallId> = script
        .provenance
        .iter()
        .filter_map(|(call, p)| match p {
            Provenance::Recovered(seq) => Some((*seq, call)),
            _ => None,
        })
        .collect();
    for e in edges {
        let (Some(&producer), Some(&consumer)) =
            (seq_to_call.get(&e.producer_seq), seq_to_call.get(&e.consumer_seq))
        else {
            continue;
        };
        let Some(child_name) = name_of.get(consumer) else { continue };
        attached.entry(producer.clone()).or_default().insert((
            child_name.to_string(),
            e.consumer_slot,
            e.mode,
        ));
    }
    for (call, p) in &script.provenance {
        if let Provenance::Inserted {
            parent,
            child_slot,
            mode,
            ..
        } = p
        {
            let Some(child_name) = name_of.get(call) else { continue };
            attached.entry(parent.clone()).or_default().insert((
                child_name.to_string(),
                *child_slot,
                *mode,
            ));
        }
    }
    attached
}

/// Finds every occurrence of a dictionary producer whose attached child
/// set does not cover the taught set. Occurrences already followed by all
/// taught children are excluded.
pub fn find_insertable_sites(
    script: &Script,
    dict: &DependencyDictionary,
    edges: &[DependencyEdge],
) -> Vec<InsertableSite> {
    let attached = attached_triples(script, edges);
    let empty = BTreeSet::new();
    let mut sites = Vec::new();
    for op in &script.ops {
        let ScriptOp::Invoke { call, name, .. } = op else { continue };
        let children = dict.query_children(name);
        if children.is_empty() {
            continue;
        }
        let have = attached.get(call).unwrap_or(&empty);
        let missing: Vec<DependentTemplate> = children
            .iter()
            .filter(|t| !have.contains(&t.triple()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            sites.push(InsertableSite {
                call_id: call.clone(),
                producer_name: name.clone(),
                missing,
            });
        }
    }
    sites
}

fn next_var_number(script: &Script) -> u64 {
    let mut max = 0u64;
    let mut note = |v: &VarId| {
        if let Some(n) = v.0.strip_prefix("var").and_then(|s| s.parse::<u64>().ok()) {
            max = max.max(n);
        }
    };
    for op in &script.ops {
        match op {
            ScriptOp::Alloc { var, .. } => note(var),
            ScriptOp::SetWord { var, .. } => note(var),
            ScriptOp::BindReturn { var, .. } => note(var),
            _ => {}
        }
    }
    max
}

/// Inserts every missing child of every site immediately after its parent
/// call, children in taught order. Returns the new script, the inserted
/// call ids, and the count of templates skipped because the producer's
/// source output was not staged at that occurrence.
pub fn insert_level(
    script: &Script,
    sites: &[InsertableSite],
    types: &TypeDb,
    level: u32,
) -> Result<(Script, Vec<CallId>, u64), SynthError> {
    let mut var_counter = next_var_number(script);
    let mut fresh_var = move || {
        var_counter += 1;
        VarId(format!("var{var_counter}"))
    };
    let mut insert_counter = 0u64;
    let mut skipped = 0u64;
    let mut inserted_ids = Vec::new();

    // parent call -> (outs, existing ret-binding var)
    let mut parent_outs: BTreeMap<&CallId, &[(u32, VarId)]> = BTreeMap::new();
    let mut parent_ret: BTreeMap<&CallId, VarId> = BTreeMap::new();
    for op in &script.ops {
        match op {
            ScriptOp::Invoke { call, outs, .. } => {
                parent_outs.insert(call, outs.as_slice());
            }
            ScriptOp::BindReturn { var, call } => {
                parent_ret.insert(call, var.clone());
            }
            _ => {}
        }
    }

    // parent call -> block of ops to splice in after it
    let mut blocks: BTreeMap<CallId, Script> = BTreeMap::new();
    for site in sites {
        let block = blocks.entry(site.call_id.clone()).or_default();
        for template in &site.missing {
            let sig = types.lookup_signature(&template.child_name)?.to_vec();
            if template.child_slot as usize >= sig.len() {
                return Err(SynthError::UnknownTemplateSlot {
                    name: template.child_name.clone(),
                    slot: template.child_slot,
                });
            }
            // resolve the dependent operand from the parent's staging
            let dep_operand = match template.producer_source {
                OutputSource::OutputArg(pslot) => {
                    let var = parent_outs
                        .get(&site.call_id)
                        .and_then(|outs| outs.iter().find(|(s, _)| *s == pslot))
                        .map(|(_, v)| v.clone());
                    match (var, template.mode) {
                        (Some(v), DepMode::AddressReuse) => Operand::Addr(v),
                        (Some(v), _) => Operand::Deref(v),
                        (None, _) => {
                            skipped += 1;
                            continue;
                        }
                    }
                }
                OutputSource::ReturnValue => {
                    let var = parent_ret.get(&site.call_id).cloned().unwrap_or_else(|| {
                        let v = fresh_var();
                        block.ops.push(ScriptOp::BindReturn {
                            var: v.clone(),
                            call: site.call_id.clone(),
                        });
                        parent_ret.insert(&site.call_id, v.clone());
                        v
                    });
                    Operand::Ret(var)
                }
            };

            let mut args = Vec::with_capacity(sig.len());
            let mut outs = Vec::new();
            for (slot, desc) in sig.iter().enumerate() {
                let slot = slot as u32;
                if slot == template.child_slot {
                    args.push(dep_operand.clone());
                    continue;
                }
                if desc.kind.is_pointer_like() {
                    // fresh zeroed staging: the teaching occurrence's
                    // literal addresses are not reproducible here
                    let var = stage_pointer(
                        block,
                        &mut fresh_var,
                        types,
                        desc.pointee.as_deref(),
                        &[],
                    )?;
                    if desc.direction == Direction::Out {
                        outs.push((slot, var.clone()));
                    }
                    args.push(Operand::Addr(var));
                } else {
                    args.push(Operand::Literal(
                        template.fixed_args.get(&slot).copied().unwrap_or(0),
                    ));
                }
            }
            insert_counter += 1;
            let call = CallId(format!("i{level}_{insert_counter}"));
            block.ops.push(ScriptOp::Invoke {
                call: call.clone(),
                name: template.child_name.clone(),
                args,
                outs,
                expected_ret: template.expected_ret,
            });
            block.provenance.insert(
                call.clone(),
                Provenance::Inserted {
                    level,
                    parent: site.call_id.clone(),
                    child_slot: template.child_slot,
                    mode: template.mode,
                },
            );
            inserted_ids.push(call);
        }
    }

    // splice: each block goes right after its parent invoke, and after the
    // parent's existing BINDRET when present
    let mut out = Script::default();
    let ops_len = script.ops.len();
    let mut i = 0usize;
    while i < ops_len {
        let op = &script.ops[i];
        out.ops.push(op.clone());
        i += 1;
        if let ScriptOp::Invoke { call, .. } = op {
            if let Some(ScriptOp::BindReturn { call: bc, .. }) = script.ops.get(i) {
                if bc == call {
                    out.ops.push(script.ops[i].clone());
                    i += 1;
                }
            }
            if let Some(block) = blocks.remove(call) {
                out.ops.extend(block.ops);
                out.provenance.extend(block.provenance);
            }
        }
    }
    out.provenance.extend(script.provenance.clone());
    out.structural_validate()?;
    Ok((out, inserted_ids, skipped))
}

/// Iterated insertion: level n treats level n-1 insertions as new
/// occurrences. Returns the grown script and the per-level plan.
pub fn synthesize(
    script: &Script,
    dict: &DependencyDictionary,
    edges: &[DependencyEdge],
    types: &TypeDb,
    max_level: u32,
) -> Result<(Script, SynthesisPlan), SynthError> {
    let mut current = script.clone();
    let mut plan = SynthesisPlan::default();
    for level in 1..=max_level {
        let sites = find_insertable_sites(&current, dict, edges);
        let (next, ids, skipped) = insert_level(&current, &sites, types, level)?;
        plan.skipped_unstaged += skipped;
        plan.levels.push(ids);
        current = next;
    }
    debug_assert!(plan.levels_disjoint());
    Ok((current, plan))
}

/// Outcome visible to the localizer: whether a run completed, and — for
/// fatal runs — the failure class, but never the failing position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Completed,
    Fatal(FatalKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Localization {
    pub call: CallId,
    pub kind: FatalKind,
    pub executions: u32,
}

/// Binary search over prefix truncations for the first call whose
/// execution turns the run fatal. Costs one full run plus at most
/// ⌈log2 n⌉ + 1 prefix runs.
pub fn localize_faulty_call(
    script: &Script,
    executor: &mut dyn FnMut(&Script) -> ExecOutcome,
) -> Result<Localization, SynthError> {
    let n = script.invoke_count();
    let mut executions = 1u32;
    let full = executor(script);
    let ExecOutcome::Fatal(mut kind) = full else {
        return Err(SynthError::NotReproducible);
    };
    let mut lo = 1usize;
    let mut hi = n;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        executions += 1;
        match executor(&script.prefix(mid)) {
            ExecOutcome::Fatal(k) => {
                kind = k;
                hi = mid;
            }
            ExecOutcome::Completed => lo = mid + 1,
        }
    }
    let call = script
        .invokes()
        .nth(lo - 1)
        .and_then(|op| match op {
            ScriptOp::Invoke { call, .. } => Some(call.clone()),
            _ => None,
        })
        .expect("fatal prefix index within invoke count");
    Ok(Localization { call, kind, executions })
}

/// Repairs one localized fault. `BadInput` removes the call together with
/// every invoke transitively bound to its outputs or return;
/// `OutputTooSmall` grows the call's out allocations eightfold and keeps
/// it. Unknown call ids leave the script unchanged.
pub fn rectify(script: &Script, call: &CallId, kind: &FatalKind) -> Script {
    match kind {
        FatalKind::OutputTooSmall => {
            let out_vars: BTreeSet<&VarId> = script
                .ops
                .iter()
                .filter_map(|op| match op {
                    ScriptOp::Invoke { call: c, outs, .. } if c == call => Some(outs),
                    _ => None,
                })
                .flat_map(|outs| outs.iter().map(|(_, v)| v))
                .collect();
            let mut out = script.clone();
            for op in &mut out.ops {
                if let ScriptOp::Alloc { var, size } = op {
                    if out_vars.contains(var) {
                        *size *= 8;
                    }
                }
            }
            out
        }
        _ => remove_with_dependents(script, call),
    }
}

fn remove_with_dependents(script: &Script, root: &CallId) -> Script {
    let mut removed_calls: BTreeSet<CallId> = BTreeSet::new();
    let mut tainted_vars: BTreeSet<VarId> = BTreeSet::new();
    let mut queue = vec![root.clone()];
    while let Some(call) = queue.pop() {
        if !removed_calls.insert(call.clone()) {
            continue;
        }
        // vars this call defines: its out buffers and any bound return
        for op in &script.ops {
            match op {
                ScriptOp::Invoke { call: c, outs, .. } if *c == call => {
                    tainted_vars.extend(outs.iter().map(|(_, v)| v.clone()));
                }
                ScriptOp::BindReturn { var, call: c } if *c == call => {
                    tainted_vars.insert(var.clone());
                }
                _ => {}
            }
        }
        // invokes reading a tainted var depend on the removed call
        for op in &script.ops {
            let ScriptOp::Invoke { call: c, args, .. } = op else { continue };
            if removed_calls.contains(c) {
                continue;
            }
            let depends = args.iter().any(|a| match a {
                Operand::Addr(v) | Operand::Deref(v) | Operand::Ret(v) => {
                    tainted_vars.contains(v)
                }
                Operand::Literal(_) => false,
            });
            if depends {
                queue.push(c.clone());
            }
        }
    }
    let mut out = Script::default();
    for op in &script.ops {
        let drop = match op {
            ScriptOp::Invoke { call, .. } => removed_calls.contains(call),
            ScriptOp::BindReturn { call, .. } => removed_calls.contains(call),
            _ => false,
        };
        if !drop {
            out.ops.push(op.clone());
        }
    }
    out.provenance = script
        .provenance
        .iter()
        .filter(|(call, _)| !removed_calls.contains(call))
        .map(|(c, p)| (c.clone(), p.clone()))
        .collect();
    out
}

/// Localize-and-rectify loop: repairs a script until it completes under
/// the executor or `max_rounds` is exhausted. Returns the repaired script
/// and the number of rectification rounds applied.
pub fn repair_until_healthy(
    script: &Script,
    executor: &mut dyn FnMut(&Script) -> ExecOutcome,
    max_rounds: u32,
) -> Result<(Script, u32), SynthError> {
    let mut current = script.clone();
    for round in 0..=max_rounds {
        match localize_faulty_call(&current, executor) {
            Err(SynthError::NotReproducible) => return Ok((current, round)),
            Err(e) => return Err(e),
            Ok(loc) => {
                if round == max_rounds {
                    break;
                }
                current = rectify(&current, &loc.call, &loc.kind);
                current.structural_validate()?;
            }
        }
    }
    Err(SynthError::RepairExhausted(max_rounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dep::analyze_dependencies;
    use crate::dict::{learn_dictionary, DictConfig};
    use crate::script::recover_model_script;
    use crate::sim::{
        execute_script, generate_trace, parse_sim_specs, PlannedArg, PlannedCall,
        ScriptOutcome, SimSpecSet,
    };
    use crate::trace::TraceLog;
    use crate::typedb::load_type_db;

    fn chain_types() -> TypeDb {
        load_type_db(concat!(
            "T|hbuf|0:H;size=8\n",
            "S|sys_a|1|0:OP:hbuf\n",
            "S|sys_b|2|0:IH;1:OP:hbuf\n",
            "S|sys_c|1|0:IH\n",
        ))
        .unwrap()
    }

    fn chain_specs() -> SimSpecSet {
        parse_sim_specs(concat!(
            "Y|sys_a|req:-|eff:0=handle|ret:0x300\n",
            "Y|sys_b|req:0=H|eff:1=handle|ret:0x301\n",
            "Y|sys_c|req:0=H|eff:-|ret:0x302\n",
        ))
        .unwrap()
    }

    fn fresh(content: Vec<u64>) -> PlannedArg {
        PlannedArg::Fresh { content }
    }

    /// Teaching chain a -> b -> c, then a bare trailing `sys_a`.
    fn chain_pipeline() -> (TraceLog, Vec<DependencyEdge>, DependencyDictionary, Script) {
        let types = chain_types();
        let plan = vec![
            PlannedCall { name: "sys_a".into(), args: vec![fresh(vec![])] },
            PlannedCall {
                name: "sys_b".into(),
                args: vec![PlannedArg::ContentOf { call: 0, slot: 0 }, fresh(vec![])],
            },
            PlannedCall {
                name: "sys_c".into(),
                args: vec![PlannedArg::ContentOf { call: 1, slot: 1 }],
            },
            PlannedCall { name: "sys_a".into(), args: vec![fresh(vec![])] },
        ];
        let (log, _) = generate_trace(&chain_specs(), &types, &plan, "unit").unwrap();
        let edges = analyze_dependencies(&log, &types).unwrap();
        let dict = learn_dictionary(&log, &edges, DictConfig::default()).unwrap();
        let script = recover_model_script(&log, &edges, &types).unwrap();
        (log, edges, dict, script)
    }

    fn run(specs: &SimSpecSet) -> impl FnMut(&Script) -> ExecOutcome + '_ {
        move |s| match execute_script(specs, s, Some(100_000)).unwrap().0 {
            ScriptOutcome::Completed { .. } => ExecOutcome::Completed,
            ScriptOutcome::Fatal { kind, .. } => ExecOutcome::Fatal(kind),
        }
    }

    #[test]
    fn teaching_occurrence_is_not_a_site() {
        let (_, edges, dict, script) = chain_pipeline();
        let sites = find_insertable_sites(&script, &dict, &edges);
        // only the bare trailing sys_a (seq 4) lacks its taught child
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].call_id, CallId("c4".into()));
        assert_eq!(sites[0].producer_name, "sys_a");
        assert_eq!(sites[0].missing.len(), 1);
        assert_eq!(sites[0].missing[0].child_name, "sys_b");
    }

    #[test]
    fn empty_dictionary_yields_no_sites() {
        let (_, edges, _, script) = chain_pipeline();
        let sites = find_insertable_sites(&script, &DependencyDictionary::default(), &edges);
        assert!(sites.is_empty());
    }

    #[test]
    fn leveled_insertion_chains_and_completes() {
        let (_, edges, dict, script) = chain_pipeline();
        let types = chain_types();
        let (grown, plan) = synthesize(&script, &dict, &edges, &types, 3).unwrap();
        assert_eq!(
            plan.levels.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![1, 1, 0]
        );
        assert!(plan.levels_disjoint());
        assert_eq!(plan.skipped_unstaged, 0);
        grown.structural_validate().unwrap();
        // the L1 child sits right after its parent; the L2 child after it
        let order: Vec<&str> = grown
            .invokes()
            .filter_map(|op| match op {
                ScriptOp::Invoke { call, .. } => Some(call.0.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(order, vec!["c1", "c2", "c3", "c4", "i1_1", "i2_1"]);
        // inserted calls run against live state and hit their taught returns
        let specs = chain_specs();
        let (outcome, _) = execute_script(&specs, &grown, None).unwrap();
        let ScriptOutcome::Completed { returns } = outcome else {
            panic!("synthesized script did not complete");
        };
        let expect = |id: &str| {
            grown
                .invokes()
                .find_map(|op| match op {
                    ScriptOp::Invoke { call, expected_ret, .. } if call.0 == id => {
                        Some(*expected_ret)
                    }
                    _ => None,
                })
                .unwrap()
        };
        for id in ["i1_1", "i2_1"] {
            let got = returns.iter().find(|(c, _)| c.0 == id).unwrap().1;
            assert_eq!(got, expect(id), "inserted call {id}");
        }
    }

    #[test]
    fn zero_site_insertion_is_identity() {
        let (_, edges, dict, script) = chain_pipeline();
        let types = chain_types();
        let (grown, _, skipped) = insert_level(&script, &[], &types, 1).unwrap();
        assert_eq!(grown.ops, script.ops);
        assert_eq!(skipped, 0);
        let _ = (edges, dict);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let (_, edges, dict, script) = chain_pipeline();
        let types = chain_types();
        let a = synthesize(&script, &dict, &edges, &types, 3).unwrap().0;
        let b = synthesize(&script, &dict, &edges, &types, 3).unwrap().0;
        assert_eq!(
            crate::script::emit_script_text(&a),
            crate::script::emit_script_text(&b)
        );
    }

    #[test]
    fn localizes_planted_fault_within_budget() {
        let (_, _, _, script) = chain_pipeline();
        let mut specs = chain_specs();
        // third call (sys_c) crashes whenever it sees a live handle value
        specs
            .plant_bug(
                "sys_c",
                crate::sim::CrashCondition {
                    clauses: vec![(0, crate::sim::CmpOp::Gt, 0x0)],
                    kind: "probe".into(),
                },
            )
            .unwrap();
        let loc = localize_faulty_call(&script, &mut run(&specs)).unwrap();
        assert_eq!(loc.call, CallId("c3".into()));
        assert_eq!(loc.kind, FatalKind::Crash("probe".into()));
        let n = script.invoke_count() as f64;
        assert!(loc.executions <= (n.log2().ceil() as u32) + 2);
    }

    #[test]
    fn healthy_script_is_not_reproducible() {
        let (_, _, _, script) = chain_pipeline();
        let specs = chain_specs();
        assert!(matches!(
            localize_faulty_call(&script, &mut run(&specs)),
            Err(SynthError::NotReproducible)
        ));
    }

    #[test]
    fn rectify_grows_undersized_out_allocs() {
        let types = load_type_db("T|hbuf|0:H;size=8\nS|sys_a|1|0:OP:hbuf\n").unwrap();
        let specs =
            parse_sim_specs("Y|sys_a|req:-|eff:0=handle|ret:0x300|minout:0=100\n").unwrap();
        let mut script = Script::default();
        script.ops.push(ScriptOp::Alloc { var: VarId("var1".into()), size: 16 });
        script.ops.push(ScriptOp::Invoke {
            call: CallId("c1".into()),
            name: "sys_a".into(),
            args: vec![Operand::Addr(VarId("var1".into()))],
            outs: vec![(0, VarId("var1".into()))],
            expected_ret: 0x300,
        });
        let loc = localize_faulty_call(&script, &mut run(&specs)).unwrap();
        assert_eq!(loc.kind, FatalKind::OutputTooSmall);
        let fixed = rectify(&script, &loc.call, &loc.kind);
        assert!(fixed
            .ops
            .iter()
            .any(|op| matches!(op, ScriptOp::Alloc { size: 128, .. })));
        assert!(matches!(run(&specs)(&fixed), ExecOutcome::Completed));
        let _ = types;
    }

    #[test]
    fn rectify_bad_input_removes_call_and_dependents() {
        let (_, edges, dict, script) = chain_pipeline();
        let types = chain_types();
        let (grown, _) = synthesize(&script, &dict, &edges, &types, 2).unwrap();
        let mut specs = chain_specs();
        // make every sys_a fatal with the kernel's unrecoverable-input class
        specs
            .plant_bug(
                "sys_a",
                crate::sim::CrashCondition {
                    clauses: vec![(0, crate::sim::CmpOp::Gt, 0x0)],
                    kind: "badinput".into(),
                },
            )
            .unwrap();
        let (repaired, rounds) =
            repair_until_healthy(&grown, &mut run(&specs), 8).unwrap();
        assert!(rounds >= 1);
        repaired.structural_validate().unwrap();
        assert!(matches!(run(&specs)(&repaired), ExecOutcome::Completed));
        // both producers and their whole dependent chains are gone
        assert_eq!(repaired.invoke_count(), 0);
    }

    #[test]
    fn rectify_unknown_call_is_identity() {
        let (_, _, _, script) = chain_pipeline();
        let out = rectify(&script, &CallId("zz".into()), &FatalKind::OutputTooSmall);
        assert_eq!(out.ops, script.ops);
    }
}

//! Type-aware argument mutation: constant strategies over 64-bit values,
//! recursive pointer-content mutation, handle and binding immunity, and
//! rate/threshold gating.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use std::collections::BTreeSet;

use crate::script::{CallId, Operand, Script, ScriptOp, VarId};
use crate::typedb::{Direction, TypeDb, TypeDbError, ValueKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    BitFlip,
    Arithmetic,
    Boundary,
    Random,
}

pub const BOUNDARY_VALUES: [u64; 6] = [
    0,
    1,
    0x7FFF_FFFF,
    0xFFFF_FFFF,
    0x7FFF_FFFF_FFFF_FFFF,
    0xFFFF_FFFF_FFFF_FFFF,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutationConfig {
    /// Probability of mutating each mutable slot or word.
    pub rate: f64,
    /// Executed-call count required before mutation activates.
    pub threshold: u64,
    pub seed: u64,
    /// Weights for BitFlip, Arithmetic, Boundary, Random.
    pub weights: [u32; 4],
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            rate: 0.1,
            threshold: 0,
            seed: 0,
            weights: [1, 1, 1, 1],
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<(), MutateError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(MutateError::BadConfig("rate outside [0, 1]".into()));
        }
        if self.weights.iter().all(|&w| w == 0) {
            return Err(MutateError::BadConfig("all strategy weights zero".into()));
        }
        Ok(())
    }
}

/// What a mutation event rewrites: a literal argument slot, or one staged
/// pointee word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MutationTarget {
    Slot(u32),
    Word { var: VarId, offset: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationEvent {
    pub call: CallId,
    pub target: MutationTarget,
    pub strategy: Strategy,
    pub before: u64,
    pub after: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MutateError {
    #[error("invalid mutation config: {0}")]
    BadConfig(String),
    #[error("mutation event has no matching literal: {0}")]
    DanglingEvent(String),
    #[error(transparent)]
    Type(#[from] TypeDbError),
}

/// Applies one strategy to one value. BitFlip flips a uniform bit;
/// Arithmetic adds a nonzero delta in [-16, 16]; Boundary picks an extreme
/// constant different from the input; Random draws uniformly.
pub fn mutate_constant<R: Rng>(value: u64, strategy: Strategy, rng: &mut R) -> u64 {
    match strategy {
        Strategy::BitFlip => value ^ (1u64 << rng.gen_range(0..64)),
        Strategy::Arithmetic => {
            let delta = rng.gen_range(1..=16i64);
            let signed = if rng.gen::<bool>() { delta } else { -delta };
            value.wrapping_add(signed as u64)
        }
        Strategy::Boundary => {
            let pool: Vec<u64> = BOUNDARY_VALUES
                .iter()
                .copied()
                .filter(|&b| b != value)
                .collect();
            pool[rng.gen_range(0..pool.len())]
        }
        Strategy::Random => rng.gen(),
    }
}

fn pick_strategy<R: Rng>(weights: &[u32; 4], rng: &mut R) -> Strategy {
    let dist = WeightedIndex::new(weights).expect("validated weights");
    match dist.sample(rng) {
        0 => Strategy::BitFlip,
        1 => Strategy::Arithmetic,
        2 => Strategy::Boundary,
        _ => Strategy::Random,
    }
}

/// Plans mutations for one call. Handle slots and dependency-bound slots
/// are never touched; In-direction pointer arguments have their staged
/// literal words mutated recursively through nested allocations; the plan
/// is empty below the activation threshold.
pub fn plan_call_mutation<R: Rng>(
    script: &Script,
    call: &CallId,
    types: &TypeDb,
    cfg: &MutationConfig,
    executed_count: u64,
    rng: &mut R,
) -> Result<Vec<MutationEvent>, MutateError> {
    cfg.validate()?;
    let mut events = Vec::new();
    if executed_count < cfg.threshold {
        return Ok(events);
    }
    let Some(ScriptOp::Invoke { name, args, .. }) = script.find_invoke(call) else {
        return Ok(events);
    };
    let sig = types.lookup_signature(name)?.to_vec();
    // vars produced by any call's out slots carry dependency values
    let produced: BTreeSet<&VarId> = script
        .ops
        .iter()
        .filter_map(|op| match op {
            ScriptOp::Invoke { outs, .. } => Some(outs.iter().map(|(_, v)| v)),
            _ => None,
        })
        .flatten()
        .collect();

    for (slot, desc) in sig.iter().enumerate() {
        let slot = slot as u32;
        if desc.kind == ValueKind::Handle {
            continue;
        }
        let Some(operand) = args.get(slot as usize) else { continue };
        match (desc.kind.is_pointer_like(), operand) {
            (false, Operand::Literal(before)) => {
                if rng.gen::<f64>() < cfg.rate {
                    let strategy = pick_strategy(&cfg.weights, rng);
                    let after = mutate_constant(*before, strategy, rng);
                    events.push(MutationEvent {
                        call: call.clone(),
                        target: MutationTarget::Slot(slot),
                        strategy,
                        before: *before,
                        after,
                    });
                }
            }
            (true, Operand::Addr(var)) => {
                if desc.direction != Direction::In || produced.contains(var) {
                    continue;
                }
                plan_words(script, call, var, cfg, rng, &mut events, 0);
            }
            // Deref/Ret operands and literal pointers are bound or opaque
            _ => {}
        }
    }
    Ok(events)
}

/// Recursively plans word mutations for one staged allocation, following
/// nested child allocations wired by address.
fn plan_words<R: Rng>(
    script: &Script,
    call: &CallId,
    var: &VarId,
    cfg: &MutationConfig,
    rng: &mut R,
    events: &mut Vec<MutationEvent>,
    depth: u32,
) {
    if depth > 16 {
        return;
    }
    for op in &script.ops {
        let ScriptOp::SetWord { var: v, offset, value } = op else { continue };
        if v != var {
            continue;
        }
        match value {
            Operand::Literal(before) => {
                if rng.gen::<f64>() < cfg.rate {
                    let strategy = pick_strategy(&cfg.weights, rng);
                    let after = mutate_constant(*before, strategy, rng);
                    events.push(MutationEvent {
                        call: call.clone(),
                        target: MutationTarget::Word {
                            var: var.clone(),
                            offset: *offset,
                        },
                        strategy,
                        before: *before,
                        after,
                    });
                }
            }
            Operand::Addr(child) => plan_words(script, call, child, cfg, rng, events, depth + 1),
            _ => {}
        }
    }
}

/// Plans mutations for every invoke in script order under one RNG stream.
pub fn plan_script_mutation<R: Rng>(
    script: &Script,
    types: &TypeDb,
    cfg: &MutationConfig,
    executed_count: u64,
    rng: &mut R,
) -> Result<Vec<MutationEvent>, MutateError> {
    let mut events = Vec::new();
    let calls: Vec<CallId> = script
        .ops
        .iter()
        .filter_map(|op| match op {
            ScriptOp::Invoke { call, .. } => Some(call.clone()),
            _ => None,
        })
        .collect();
    for call in &calls {
        events.extend(plan_call_mutation(
            script,
            call,
            types,
            cfg,
            executed_count,
            rng,
        )?);
    }
    Ok(events)
}

/// Materializes planned events into the IR. Only literal argument slots
/// and literal staged words are rewritten; bindings are never touched.
pub fn apply_mutations(script: &Script, events: &[MutationEvent]) -> Result<Script, MutateError> {
    let mut out = script.clone();
    for ev in events {
        let dangling = || {
            MutateError::DanglingEvent(format!(
                "{} {:?} 0x{:x}",
                ev.call, ev.target, ev.before
            ))
        };
        match &ev.target {
            MutationTarget::Slot(slot) => {
                let arg = out
                    .ops
                    .iter_mut()
                    .find_map(|op| match op {
                        ScriptOp::Invoke { call, args, .. } if call == &ev.call => {
                            args.get_mut(*slot as usize)
                        }
                        _ => None,
                    })
                    .ok_or_else(dangling)?;
                match arg {
                    Operand::Literal(v) if *v == ev.before => *v = ev.after,
                    _ => return Err(dangling()),
                }
            }
            MutationTarget::Word { var, offset } => {
                let word = out
                    .ops
                    .iter_mut()
                    .find_map(|op| match op {
                        ScriptOp::SetWord { var: v, offset: o, value }
                            if v == var && o == offset =>
                        {
                            Some(value)
                        }
                        _ => None,
                    })
                    .ok_or_else(dangling)?;
                match word {
                    Operand::Literal(v) if *v == ev.before => *v = ev.after,
                    _ => return Err(dangling()),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::typedb::load_type_db;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn types() -> TypeDb {
        load_type_db(concat!(
            "T|leaf|0:S;8:S;size=16\n",
            "T|top|0:S;8:P:leaf;16:S;size=24\n",
            "S|mixer|4|0:IH;1:IS;2:IP:top;3:OP:leaf\n",
        ))
        .unwrap()
    }

    fn mixer_script() -> Script {
        let mut s = Script::default();
        let push = |s: &mut Script, op| s.ops.push(op);
        // leaf child of the In pointer
        push(&mut s, ScriptOp::Alloc { var: VarId("var1".into()), size: 16 });
        push(&mut s, ScriptOp::SetWord {
            var: VarId("var1".into()),
            offset: 0,
            value: Operand::Literal(0x11),
        });
        push(&mut s, ScriptOp::SetWord {
            var: VarId("var1".into()),
            offset: 8,
            value: Operand::Literal(0x22),
        });
        // top-level In pointer: two scalars + nested pointer
        push(&mut s, ScriptOp::Alloc { var: VarId("var2".into()), size: 24 });
        push(&mut s, ScriptOp::SetWord {
            var: VarId("var2".into()),
            offset: 0,
            value: Operand::Literal(0x33),
        });
        push(&mut s, ScriptOp::SetWord {
            var: VarId("var2".into()),
            offset: 8,
            value: Operand::Addr(VarId("var1".into())),
        });
        push(&mut s, ScriptOp::SetWord {
            var: VarId("var2".into()),
            offset: 16,
            value: Operand::Literal(0x44),
        });
        // Out staging, untouched by mutation
        push(&mut s, ScriptOp::Alloc { var: VarId("var3".into()), size: 16 });
        push(&mut s, ScriptOp::SetWord {
            var: VarId("var3".into()),
            offset: 0,
            value: Operand::Literal(0x55),
        });
        push(&mut s, ScriptOp::Invoke {
            call: CallId("c1".into()),
            name: "mixer".into(),
            args: vec![
                Operand::Literal(0x404),
                Operand::Literal(0x9),
                Operand::Addr(VarId("var2".into())),
                Operand::Addr(VarId("var3".into())),
            ],
            outs: vec![(3, VarId("var3".into()))],
            expected_ret: 0,
        });
        s
    }

    fn full_rate() -> MutationConfig {
        MutationConfig { rate: 1.0, ..Default::default() }
    }

    #[test]
    fn full_rate_covers_scalar_and_recursive_words_only() {
        let script = mixer_script();
        let events = plan_call_mutation(
            &script,
            &CallId("c1".into()),
            &types(),
            &full_rate(),
            0,
            &mut rng(7),
        )
        .unwrap();
        // slot 0 is a Handle (immune); slot 3 is Out staging (untouched);
        // mutable: scalar slot 1 + words 0x33, 0x44 + nested 0x11, 0x22
        let mut targets: Vec<MutationTarget> = events.iter().map(|e| e.target.clone()).collect();
        targets.sort_by_key(|t| format!("{t:?}"));
        assert_eq!(events.len(), 5);
        assert!(targets.contains(&MutationTarget::Slot(1)));
        for (var, offset) in [("var2", 0), ("var2", 16), ("var1", 0), ("var1", 8)] {
            assert!(
                targets.contains(&MutationTarget::Word {
                    var: VarId(var.into()),
                    offset
                }),
                "missing word {var}+{offset}"
            );
        }
    }

    #[test]
    fn handle_slots_are_immune_across_seeds() {
        let script = mixer_script();
        for seed in 0..200 {
            let events = plan_call_mutation(
                &script,
                &CallId("c1".into()),
                &types(),
                &full_rate(),
                0,
                &mut rng(seed),
            )
            .unwrap();
            assert!(events.iter().all(|e| e.target != MutationTarget::Slot(0)));
        }
    }

    #[test]
    fn rate_zero_and_threshold_gate() {
        let script = mixer_script();
        let zero = MutationConfig { rate: 0.0, ..Default::default() };
        assert!(plan_call_mutation(&script, &CallId("c1".into()), &types(), &zero, 0, &mut rng(1))
            .unwrap()
            .is_empty());
        let gated = MutationConfig { rate: 1.0, threshold: 100, ..Default::default() };
        assert!(
            plan_call_mutation(&script, &CallId("c1".into()), &types(), &gated, 99, &mut rng(1))
                .unwrap()
                .is_empty()
        );
        assert!(
            !plan_call_mutation(&script, &CallId("c1".into()), &types(), &gated, 100, &mut rng(1))
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn bound_slots_are_immune() {
        let mut script = mixer_script();
        // rebind the In pointer to a producer output and scalar to a ret
        if let Some(ScriptOp::Invoke { args, outs, .. }) = script
            .ops
            .iter_mut()
            .find(|op| matches!(op, ScriptOp::Invoke { .. }))
        {
            outs.push((2, VarId("var2".into())));
            args[1] = Operand::Ret(VarId("var9".into()));
        }
        let events = plan_call_mutation(
            &script,
            &CallId("c1".into()),
            &types(),
            &full_rate(),
            0,
            &mut rng(3),
        )
        .unwrap();
        assert!(events.is_empty(), "bound slots must never be mutated: {events:?}");
    }

    #[test]
    fn strategies_stay_in_their_ranges() {
        let mut r = rng(11);
        for i in 0..1000u64 {
            let v = i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let flipped = mutate_constant(v, Strategy::BitFlip, &mut r);
            assert_eq!((flipped ^ v).count_ones(), 1);
            let arith = mutate_constant(v, Strategy::Arithmetic, &mut r);
            let delta = arith.wrapping_sub(v) as i64;
            assert!(delta != 0 && (-16..=16).contains(&delta), "delta {delta}");
            let bound = mutate_constant(v, Strategy::Boundary, &mut r);
            assert!(BOUNDARY_VALUES.contains(&bound) && bound != v);
        }
    }

    #[test]
    fn boundary_covers_all_constants() {
        let mut r = rng(5);
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            seen.insert(mutate_constant(0x42, Strategy::Boundary, &mut r));
        }
        assert_eq!(seen.len(), BOUNDARY_VALUES.len());
    }

    #[test]
    fn planning_is_deterministic_per_seed() {
        let script = mixer_script();
        let cfg = MutationConfig { rate: 0.5, seed: 9, ..Default::default() };
        let run = || {
            let mut r = rng(cfg.seed);
            let mut all = Vec::new();
            for _ in 0..100 {
                all.extend(
                    plan_script_mutation(&script, &types(), &cfg, 0, &mut r).unwrap(),
                );
            }
            all
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn apply_rewrites_literals_and_rejects_dangling() {
        let script = mixer_script();
        assert_eq!(apply_mutations(&script, &[]).unwrap().ops, script.ops);
        let ev = MutationEvent {
            call: CallId("c1".into()),
            target: MutationTarget::Slot(1),
            strategy: Strategy::Boundary,
            before: 0x9,
            after: 0,
        };
        let mutated = apply_mutations(&script, &[ev.clone()]).unwrap();
        let ScriptOp::Invoke { args, .. } = mutated
            .invokes()
            .next()
            .unwrap()
        else {
            unreachable!()
        };
        assert_eq!(args[1], Operand::Literal(0));
        let stale = MutationEvent { before: 0x1234, ..ev };
        assert!(matches!(
            apply_mutations(&script, &[stale]),
            Err(MutateError::DanglingEvent(_))
        ));
    }
}

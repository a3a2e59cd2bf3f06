//! Canned scenarios and randomized workload generators used by the
//! integration tests and the `gen-trace` CLI subcommand.
//!
//! Every fixture bundles a type database, a sim spec set, and a call plan
//! whose `generate_trace` run exercises a specific pipeline property.

use rand::Rng;

use crate::sim::{PlannedArg, PlannedCall, SimSpecSet};
use crate::typedb::{load_type_db, TypeDb};

#[derive(Debug, Clone)]
pub struct Fixture {
    pub types: TypeDb,
    pub specs: SimSpecSet,
    pub plan: Vec<PlannedCall>,
}

pub const FIXTURE_NAMES: [&str; 4] = ["demo", "insertion", "chain-fail", "stats"];

pub fn fixture_by_name(name: &str) -> Option<Fixture> {
    match name {
        "demo" => Some(demo_fixture()),
        "insertion" => Some(insertion_fixture()),
        "chain-fail" => Some(chain_fail_fixture()),
        "stats" => Some(stats_fixture()),
        _ => None,
    }
}

fn lit(v: u64) -> PlannedArg {
    PlannedArg::Lit(v)
}

fn fresh() -> PlannedArg {
    PlannedArg::Fresh { content: vec![] }
}

fn content(call: usize, slot: u32) -> PlannedArg {
    PlannedArg::ContentOf { call, slot }
}

fn call(name: &str, args: Vec<PlannedArg>) -> PlannedCall {
    PlannedCall {
        name: name.to_string(),
        args,
    }
}

/// Four calls: an opener whose out-buffer handle feeds a query and a
/// close, with an unrelated probe in between. The smallest trace with
/// observable content dependencies.
pub fn demo_fixture() -> Fixture {
    let types = load_type_db(concat!(
        "T|hbuf|0:H;size=8\n",
        "T|info|0:S;8:S;size=16\n",
        "S|d_open|2|0:IS;1:OP:hbuf\n",
        "S|d_probe|1|0:IS\n",
        "S|d_query|2|0:IH;1:OP:info\n",
        "S|d_close|1|0:IH\n",
    ))
    .expect("demo type db");
    let specs = crate::sim::parse_sim_specs(concat!(
        "Y|d_open|req:-|eff:1=handle|ret:0x10001\n",
        "Y|d_probe|req:-|eff:-|ret:0x10002\n",
        "Y|d_query|req:0=H|eff:1=write:16|ret:0x10003|minout:1=16\n",
        "Y|d_close|req:0=H|eff:0=close|ret:0x10004\n",
    ))
    .expect("demo specs");
    let plan = vec![
        call("d_open", vec![lit(0x5), fresh()]),
        call("d_probe", vec![lit(0x7)]),
        call("d_query", vec![content(0, 1), fresh()]),
        call("d_close", vec![content(0, 1)]),
    ];
    Fixture { types, specs, plan }
}

fn chain_types() -> TypeDb {
    load_type_db(concat!(
        "T|hbuf|0:H;size=8\n",
        "S|aux_open|1|0:OP:hbuf\n",
        "S|aux_close|1|0:IH\n",
        "S|sys_x|1|0:OP:hbuf\n",
        "S|sys_y|2|0:IH;1:OP:hbuf\n",
        "S|sys_z|2|0:IH;1:OP:hbuf\n",
        "S|sys_d1|2|0:IH;1:IH\n",
        "S|sys_d2|2|0:IH;1:IH\n",
    ))
    .expect("chain type db")
}

fn chain_specs() -> SimSpecSet {
    crate::sim::parse_sim_specs(concat!(
        "Y|aux_open|req:-|eff:0=handle|ret:0x10011\n",
        "Y|aux_close|req:0=H|eff:0=close|ret:0x10012\n",
        "Y|sys_x|req:-|eff:0=handle|ret:0x10013\n",
        "Y|sys_y|req:0=H|eff:1=handle|ret:0x10014\n",
        "Y|sys_z|req:0=H|eff:1=handle|ret:0x10015\n",
        "Y|sys_d1|req:0=H;1=H|eff:-|ret:0x10016\n",
        "Y|sys_d2|req:0=H;1=H|eff:-|ret:0x10017\n",
    ))
    .expect("chain specs")
}

/// A teaching prefix that wires the full x -> y -> z -> {d1, d2} chain
/// (plus an auxiliary handle consumed by the d-calls and closed at the
/// end), followed by bare occurrences of each producer.
fn chain_teaching() -> Vec<PlannedCall> {
    vec![
        call("aux_open", vec![fresh()]),              // 0: h_aux
        call("sys_x", vec![fresh()]),                 // 1: h_x
        call("sys_y", vec![content(1, 0), fresh()]),  // 2: h_y
        call("sys_z", vec![content(2, 1), fresh()]),  // 3: h_z
        call("sys_d1", vec![content(3, 1), content(0, 0)]), // 4
        call("sys_d2", vec![content(3, 1), content(0, 0)]), // 5
        call("aux_close", vec![content(0, 0)]),       // 6
    ]
}

/// Thirty calls: the chain teaching prefix plus bare occurrences of three
/// different producers, giving known per-level insertion counts.
pub fn insertion_fixture() -> Fixture {
    let mut plan = chain_teaching();
    for _ in 0..11 {
        plan.push(call("sys_x", vec![fresh()]));
    }
    for _ in 0..6 {
        plan.push(call("sys_y", vec![content(1, 0), fresh()]));
    }
    for _ in 0..6 {
        plan.push(call("aux_open", vec![fresh()]));
    }
    assert_eq!(plan.len(), 30);
    Fixture {
        types: chain_types(),
        specs: chain_specs(),
        plan,
    }
}

/// The level-3 dead-end shape: many repeated bare `sys_x` occurrences.
/// Level-1 (`sys_y`) and level-2 (`sys_z`) insertions succeed, but every
/// level-3 `sys_d1`/`sys_d2` insertion carries the taught auxiliary handle
/// as a literal — a handle the script has already closed — so the whole
/// level fails no matter how often the pattern repeats.
pub fn chain_fail_fixture() -> Fixture {
    let mut plan = chain_teaching();
    for _ in 0..20 {
        plan.push(call("sys_x", vec![fresh()]));
    }
    Fixture {
        types: chain_types(),
        specs: chain_specs(),
        plan,
    }
}

/// Twenty records with hand-countable shape statistics: 7 distinct names,
/// 4 names with dependent successors (x -> {y}, y -> {z},
/// z -> {d1, d2}, aux_open -> {d1, d2, aux_close}).
pub fn stats_fixture() -> Fixture {
    let mut plan = chain_teaching();
    for _ in 0..5 {
        plan.push(call("sys_x", vec![fresh()]));
    }
    for _ in 0..4 {
        plan.push(call("sys_y", vec![content(1, 0), fresh()]));
    }
    for _ in 0..4 {
        plan.push(call("sys_d1", vec![content(3, 1), lit(0x9)]));
    }
    assert_eq!(plan.len(), 20);
    Fixture {
        types: chain_types(),
        specs: chain_specs(),
        plan,
    }
}

/// Builds a randomized spec set plus matching type database: `n` syscall
/// types with mixed scalar/handle/pointer slots, distinct success returns,
/// and handle- or content-producing out slots.
pub fn random_spec_set<R: Rng>(rng: &mut R, n: usize) -> (TypeDb, SimSpecSet) {
    let mut type_lines = String::from(
        "T|r_leaf|0:S;8:S;size=16\nT|r_top|0:S;8:P:r_leaf;16:S;size=24\nT|r_out|0:H;8:S;size=16\n",
    );
    let mut spec_lines = String::new();
    for i in 0..n {
        let name = format!("sys_r{i}");
        let arity = rng.gen_range(1..=4u32);
        let has_out = rng.gen_bool(0.6);
        let out_slot = arity - 1;
        let mut slots = Vec::new();
        let mut reqs = Vec::new();
        let mut effs = Vec::new();
        for slot in 0..arity {
            if has_out && slot == out_slot {
                slots.push(format!("{slot}:OP:r_out"));
                if rng.gen_bool(0.5) {
                    effs.push(format!("{slot}=handle"));
                } else {
                    effs.push(format!("{slot}=write:16"));
                }
                continue;
            }
            let roll = rng.gen_range(0..100);
            if roll < 55 {
                slots.push(format!("{slot}:IS"));
            } else if roll < 75 {
                slots.push(format!("{slot}:IH"));
                if rng.gen_bool(0.5) {
                    reqs.push(format!("{slot}=H"));
                }
            } else if roll < 90 {
                let tpl = if rng.gen_bool(0.5) { "r_top" } else { "r_leaf" };
                slots.push(format!("{slot}:IP:{tpl}"));
                if rng.gen_bool(0.3) {
                    reqs.push(format!("{slot}=A"));
                }
            } else {
                slots.push(format!("{slot}:IF"));
            }
        }
        type_lines.push_str(&format!("S|{name}|{arity}|{}\n", slots.join(";")));
        let req = if reqs.is_empty() { "-".to_string() } else { reqs.join(";") };
        let eff = if effs.is_empty() { "-".to_string() } else { effs.join(";") };
        spec_lines.push_str(&format!(
            "Y|{name}|req:{req}|eff:{eff}|ret:0x{:x}\n",
            0x10000 + i
        ));
    }
    (
        load_type_db(&type_lines).expect("random type db"),
        crate::sim::parse_sim_specs(&spec_lines).expect("random specs"),
    )
}

/// Builds a random plan over a spec set. Dependencies are wired so the
/// generator's ground truth and the analyzer's reverse scan agree: content
/// and address reuse only reference out-pointer buffers, and return reuse
/// always targets the most recent occurrence of a name.
pub fn random_plan<R: Rng>(
    rng: &mut R,
    types: &TypeDb,
    specs: &SimSpecSet,
    len: usize,
) -> Vec<PlannedCall> {
    use crate::typedb::{Direction, ValueKind};

    let names: Vec<&String> = specs.specs.keys().collect();
    // earlier calls' out-pointer (idx, slot) pairs, and latest idx per name
    let mut out_pairs: Vec<(usize, u32)> = Vec::new();
    let mut latest: std::collections::BTreeMap<&str, usize> =
        std::collections::BTreeMap::new();
    let mut plan = Vec::with_capacity(len);
    for idx in 0..len {
        let name = names[rng.gen_range(0..names.len())].clone();
        let sig = types.lookup_signature(&name).expect("known name").to_vec();
        let mut args = Vec::with_capacity(sig.len());
        for (slot, desc) in sig.iter().enumerate() {
            let slot = slot as u32;
            if desc.direction == Direction::Out {
                args.push(fresh());
                out_pairs.push((idx, slot));
                continue;
            }
            let arg = match desc.kind {
                ValueKind::Handle => {
                    let roll = rng.gen_range(0..100);
                    if roll < 65 && !out_pairs.is_empty() {
                        let (c, s) = out_pairs[rng.gen_range(0..out_pairs.len())];
                        content(c, s)
                    } else if roll < 80 && !latest.is_empty() {
                        let keys: Vec<&&str> = latest.keys().collect();
                        let k = *keys[rng.gen_range(0..keys.len())];
                        PlannedArg::RetOf { call: latest[k] }
                    } else {
                        lit(rng.gen_range(0..0x100))
                    }
                }
                ValueKind::Pointer | ValueKind::Array => {
                    if rng.gen_bool(0.3) && !out_pairs.is_empty() {
                        let (c, s) = out_pairs[rng.gen_range(0..out_pairs.len())];
                        PlannedArg::AddrOf { call: c, slot: s }
                    } else {
                        fresh()
                    }
                }
                _ => lit(rng.gen_range(0..0x1000)),
            };
            args.push(arg);
        }
        latest.insert(
            names.iter().find(|n| ***n == name).map(|n| n.as_str()).unwrap(),
            idx,
        );
        plan.push(PlannedCall { name, args });
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::sim::generate_trace;
    use crate::trace::validate_trace;

    #[test]
    fn shipped_fixtures_generate_clean_traces() {
        for name in FIXTURE_NAMES {
            let f = fixture_by_name(name).unwrap();
            let (log, _) = generate_trace(&f.specs, &f.types, &f.plan, name).unwrap();
            let violations = validate_trace(&log, &f.types).unwrap();
            assert!(violations.is_empty(), "{name}: {violations:?}");
        }
    }

    #[test]
    fn chain_teaching_runs_healthy() {
        let f = chain_fail_fixture();
        let (log, _) = generate_trace(&f.specs, &f.types, &f.plan, "t").unwrap();
        assert!(log.records.iter().all(|r| r.ret > 0), "teaching calls must succeed");
    }

    #[test]
    fn random_fixture_is_seed_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let (types, specs) = random_spec_set(&mut rng, 8);
            let plan = random_plan(&mut rng, &types, &specs, 40);
            generate_trace(&specs, &types, &plan, "rand").unwrap().0
        };
        assert_eq!(
            crate::trace::serialize_trace(&build()),
            crate::trace::serialize_trace(&build())
        );
    }

    #[test]
    fn random_traces_validate() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (types, specs) = random_spec_set(&mut rng, 6);
            let plan = random_plan(&mut rng, &types, &specs, 60);
            let (log, _) = generate_trace(&specs, &types, &plan, "rand").unwrap();
            assert!(validate_trace(&log, &types).unwrap().is_empty(), "seed {seed}");
        }
    }
}

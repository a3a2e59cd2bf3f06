//! Fuzz campaign runner: iterative execute-mutate loop with crash
//! recording and dedup, success-rate measurement, virtual-step throughput
//! metrics, and trace statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dep::DependencyEdge;
use crate::mutate::{
    apply_mutations, plan_script_mutation, MutateError, MutationConfig, MutationEvent,
};
use crate::script::{CallId, Provenance, Script, ScriptOp};
use crate::sim::{execute_script, FatalKind, ScriptOutcome, SimError, SimSpecSet};
use crate::trace::TraceLog;
use crate::typedb::TypeDb;

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub iterations: u64,
    /// Virtual steps allotted to every iteration.
    pub step_budget: u64,
    pub mutation: MutationConfig,
    /// When false, the campaign stops at the first fatal iteration.
    pub continue_on_error: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            iterations: 100,
            step_budget: 10_000,
            mutation: MutationConfig::default(),
            continue_on_error: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("unmutated script does not complete; rectify it first")]
    NeverHealthy,
    #[error("iterations must be >= 1")]
    NoIterations,
    #[error("step budget {budget} below script length {len}")]
    BudgetTooSmall { budget: u64, len: u64 },
    #[error("malformed campaign config line {line}: {reason}")]
    BadConfig { line: usize, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mutate(#[from] MutateError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub iteration: u64,
    pub call: CallId,
    pub name: String,
    pub kind: String,
    pub events: Vec<MutationEvent>,
    pub seed: u64,
}

impl CrashReport {
    pub fn dedupe_key(&self) -> (String, String) {
        (self.name.clone(), self.kind.clone())
    }
}

/// Success measurement for one provenance class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OriginSuccess {
    pub matched: u64,
    pub total: u64,
}

impl OriginSuccess {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Trace-shape statistics (type counts, dependency fan-out, frequencies).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceStats {
    pub type_count: u64,
    /// Names with at least one dependent successor.
    pub successive_sequence_count: u64,
    pub max_children: u64,
    pub avg_children: f64,
    /// Descending by count, then by name; capped at `top`.
    pub frequency: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CampaignStats {
    /// Keys: "recovered", "L1", "L2", ...
    pub success: BTreeMap<String, OriginSuccess>,
    pub instant_rate: f64,
    pub averaged_rate: f64,
    pub total_calls: u64,
    pub exec_steps: u64,
    pub setup_steps: u64,
    pub iterations_run: u64,
    pub unique_crashes: u64,
    pub total_crashes: u64,
    /// (iteration, cumulative unique crashes), recorded on each increase.
    pub timeline: Vec<(u64, u64)>,
    pub trace: TraceStats,
}

pub fn fatal_label(kind: &FatalKind) -> String {
    match kind {
        FatalKind::BadInput => "badinput".to_string(),
        FatalKind::OutputTooSmall => "outputtoosmall".to_string(),
        FatalKind::Hang => "hang".to_string(),
        FatalKind::Crash(k) => k.clone(),
    }
}

fn origin_label(p: Option<&Provenance>) -> String {
    match p {
        Some(Provenance::Inserted { level, .. }) => format!("L{level}"),
        _ => "recovered".to_string(),
    }
}

/// Compares an unmutated run's returns against each call's expected
/// return, bucketed by provenance class.
pub fn measure_success_rate(
    returns: &[(CallId, i64)],
    script: &Script,
) -> BTreeMap<String, OriginSuccess> {
    let by_call: BTreeMap<&CallId, i64> = returns.iter().map(|(c, r)| (c, *r)).collect();
    let mut out: BTreeMap<String, OriginSuccess> = BTreeMap::new();
    for op in script.invokes() {
        let ScriptOp::Invoke { call, expected_ret, .. } = op else { continue };
        let origin = origin_label(script.provenance.get(call));
        let bucket = out.entry(origin).or_default();
        bucket.total += 1;
        if by_call.get(call) == Some(expected_ret) {
            bucket.matched += 1;
        }
    }
    out
}

/// Type count, dependent-successor fan-out, and top-N name frequencies of
/// a trace. A name's children are the distinct names that depend on one of
/// its occurrences.
pub fn compute_trace_stats(log: &TraceLog, edges: &[DependencyEdge], top: usize) -> TraceStats {
    let name_of: BTreeMap<u64, &str> =
        log.records.iter().map(|r| (r.seq, r.name.as_str())).collect();
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &log.records {
        *freq.entry(r.name.as_str()).or_default() += 1;
    }
    let mut children: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in edges {
        let (Some(&p), Some(&c)) = (name_of.get(&e.producer_seq), name_of.get(&e.consumer_seq))
        else {
            continue;
        };
        children.entry(p).or_default().insert(c);
    }
    let counts: Vec<u64> = children.values().map(|s| s.len() as u64).collect();
    let mut frequency: Vec<(String, u64)> =
        freq.iter().map(|(n, c)| (n.to_string(), *c)).collect();
    frequency.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    frequency.truncate(top);
    TraceStats {
        type_count: freq.len() as u64,
        successive_sequence_count: counts.len() as u64,
        max_children: counts.iter().copied().max().unwrap_or(0),
        avg_children: if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<u64>() as f64 / counts.len() as f64
        },
        frequency,
    }
}

/// Runs the execute-mutate loop. Every iteration plans and applies
/// mutations under one linear RNG stream, executes on a fresh kernel
/// state, and records fatal outcomes as crash reports deduped by
/// (name, kind). Deterministic given the config.
pub fn run_campaign(
    specs: &SimSpecSet,
    script: &Script,
    types: &TypeDb,
    log: &TraceLog,
    edges: &[DependencyEdge],
    cfg: &CampaignConfig,
) -> Result<(Vec<CrashReport>, CampaignStats), CampaignError> {
    if cfg.iterations == 0 {
        return Err(CampaignError::NoIterations);
    }
    let script_len = script.ops.len() as u64;
    if cfg.step_budget < script_len {
        return Err(CampaignError::BudgetTooSmall {
            budget: cfg.step_budget,
            len: script_len,
        });
    }
    // baseline: the unmutated script must be healthy
    let (baseline, _) = execute_script(specs, script, Some(cfg.step_budget))?;
    let ScriptOutcome::Completed { returns } = baseline else {
        return Err(CampaignError::NeverHealthy);
    };
    let mut stats = CampaignStats {
        success: measure_success_rate(&returns, script),
        trace: compute_trace_stats(log, edges, 10),
        ..Default::default()
    };

    let call_names: BTreeMap<&CallId, &str> = script
        .ops
        .iter()
        .filter_map(|op| match op {
            ScriptOp::Invoke { call, name, .. } => Some((call, name.as_str())),
            _ => None,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.mutation.seed);
    let mut reports = Vec::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut executed_count = 0u64;
    for iteration in 1..=cfg.iterations {
        let events =
            plan_script_mutation(script, types, &cfg.mutation, executed_count, &mut rng)?;
        let candidate = apply_mutations(script, &events)?;
        let (outcome, run_stats) =
            execute_script(specs, &candidate, Some(cfg.step_budget))?;
        stats.iterations_run = iteration;
        stats.total_calls += run_stats.calls_executed;
        stats.exec_steps += run_stats.exec_steps;
        stats.setup_steps += run_stats.setup_steps;
        executed_count += run_stats.calls_executed;
        if let ScriptOutcome::Fatal { call, kind } = outcome {
            let name = call_names.get(&call).copied().unwrap_or("<unknown>").to_string();
            let report = CrashReport {
                iteration,
                call,
                name,
                kind: fatal_label(&kind),
                events,
                seed: cfg.mutation.seed,
            };
            stats.total_crashes += 1;
            if seen.insert(report.dedupe_key()) {
                stats.unique_crashes = seen.len() as u64;
                stats.timeline.push((iteration, stats.unique_crashes));
            }
            reports.push(report);
            if !cfg.continue_on_error {
                break;
            }
        }
    }
    stats.instant_rate = if stats.exec_steps == 0 {
        0.0
    } else {
        stats.total_calls as f64 / stats.exec_steps as f64
    };
    // every iteration occupies its whole budget slot: unused remainder is
    // charged as idle, which is what makes averaged <= instant
    stats.averaged_rate =
        stats.total_calls as f64 / (stats.iterations_run * cfg.step_budget) as f64;
    Ok((reports, stats))
}

/// Parses `key = value` campaign config lines. Unknown keys are rejected;
/// omitted keys keep their defaults.
pub fn parse_campaign_config(text: &str) -> Result<CampaignConfig, CampaignError> {
    let mut cfg = CampaignConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| CampaignError::BadConfig {
            line: lineno,
            reason: reason.to_string(),
        };
        let (key, value) = line.split_once('=').ok_or_else(|| bad("missing `=`"))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "iterations" => cfg.iterations = value.parse().map_err(|_| bad("bad count"))?,
            "step_budget" => cfg.step_budget = value.parse().map_err(|_| bad("bad count"))?,
            "continue_on_error" => {
                cfg.continue_on_error = value.parse().map_err(|_| bad("bad boolean"))?
            }
            "seed" | "mutation.seed" => {
                cfg.mutation.seed = value.parse().map_err(|_| bad("bad seed"))?
            }
            "mutation.rate" => cfg.mutation.rate = value.parse().map_err(|_| bad("bad rate"))?,
            "mutation.threshold" => {
                cfg.mutation.threshold = value.parse().map_err(|_| bad("bad threshold"))?
            }
            "mutation.weights" => {
                let parts: Vec<&str> = value.split(':').collect();
                if parts.len() != 4 {
                    return Err(bad("weights need bitflip:arith:boundary:random"));
                }
                for (i, p) in parts.iter().enumerate() {
                    cfg.mutation.weights[i] = p.parse().map_err(|_| bad("bad weight"))?;
                }
            }
            _ => return Err(bad("unknown key")),
        }
    }
    cfg.mutation.validate()?;
    Ok(cfg)
}

/// Deterministic campaign report: human-readable sections plus
/// `|`-delimited machine lines (`S|` stats, `X|` crashes, `T|` timeline,
/// `F|` frequencies).
pub fn emit_report(reports: &[CrashReport], stats: &CampaignStats, cfg: &CampaignConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# campaign report");
    let _ = writeln!(
        out,
        "# iterations={} step_budget={} rate={} threshold={} seed={} weights={}:{}:{}:{}",
        cfg.iterations,
        cfg.step_budget,
        cfg.mutation.rate,
        cfg.mutation.threshold,
        cfg.mutation.seed,
        cfg.mutation.weights[0],
        cfg.mutation.weights[1],
        cfg.mutation.weights[2],
        cfg.mutation.weights[3],
    );
    let _ = writeln!(out, "S|iterations_run|{}", stats.iterations_run);
    let _ = writeln!(out, "S|total_calls|{}", stats.total_calls);
    let _ = writeln!(out, "S|exec_steps|{}", stats.exec_steps);
    let _ = writeln!(out, "S|setup_steps|{}", stats.setup_steps);
    let _ = writeln!(out, "S|instant_rate|{:.6}", stats.instant_rate);
    let _ = writeln!(out, "S|averaged_rate|{:.6}", stats.averaged_rate);
    let _ = writeln!(out, "S|unique_crashes|{}", stats.unique_crashes);
    let _ = writeln!(out, "S|total_crashes|{}", stats.total_crashes);
    let _ = writeln!(out, "S|trace_types|{}", stats.trace.type_count);
    let _ = writeln!(out, "S|succ_seq|{}", stats.trace.successive_sequence_count);
    let _ = writeln!(out, "S|max_children|{}", stats.trace.max_children);
    let _ = writeln!(out, "S|avg_children|{:.4}", stats.trace.avg_children);
    for (origin, s) in &stats.success {
        let _ = writeln!(
            out,
            "S|success|{origin}|{}|{}|{:.4}",
            s.matched,
            s.total,
            s.rate()
        );
    }
    for (name, count) in &stats.frequency_or_default() {
        let _ = writeln!(out, "F|{name}|{count}");
    }
    for (iter, unique) in &stats.timeline {
        let _ = writeln!(out, "T|{iter}|{unique}");
    }
    for r in reports {
        let _ = writeln!(out, "X|{}|{}|{}|{}", r.iteration, r.name, r.kind, r.seed);
    }
    out
}

impl CampaignStats {
    fn frequency_or_default(&self) -> Vec<(String, u64)> {
        self.trace.frequency.clone()
    }
}

/// Extracts the machine-readable `S|` lines of a report as key/value
/// pairs, for scripting and round-trip checks.
pub fn parse_stat_lines(report: &str) -> Vec<(String, String)> {
    report
        .lines()
        .filter_map(|l| l.strip_prefix("S|"))
        .filter_map(|body| {
            body.split_once('|')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dep::analyze_dependencies;
    use crate::script::recover_model_script;
    use crate::sim::{generate_trace, parse_sim_specs, PlannedArg, PlannedCall};
    use crate::typedb::load_type_db;

    fn types() -> TypeDb {
        load_type_db(concat!(
            "T|hbuf|0:H;size=8\n",
            "S|sys_a|2|0:IS;1:OP:hbuf\n",
            "S|sys_b|2|0:IH;1:IS\n",
        ))
        .unwrap()
    }

    fn specs() -> SimSpecSet {
        parse_sim_specs(concat!(
            "Y|sys_a|req:-|eff:1=handle|ret:0x300\n",
            "Y|sys_b|req:0=H|eff:-|ret:0x301\n",
        ))
        .unwrap()
    }

    fn pipeline() -> (TraceLog, Vec<DependencyEdge>, Script) {
        let plan = vec![
            PlannedCall {
                name: "sys_a".into(),
                args: vec![PlannedArg::Lit(0x7), PlannedArg::Fresh { content: vec![] }],
            },
            PlannedCall {
                name: "sys_b".into(),
                args: vec![PlannedArg::ContentOf { call: 0, slot: 1 }, PlannedArg::Lit(0x9)],
            },
        ];
        let (log, _) = generate_trace(&specs(), &types(), &plan, "unit").unwrap();
        let edges = analyze_dependencies(&log, &types()).unwrap();
        let script = recover_model_script(&log, &edges, &types()).unwrap();
        (log, edges, script)
    }

    fn base_cfg() -> CampaignConfig {
        CampaignConfig {
            iterations: 50,
            step_budget: 100,
            ..Default::default()
        }
    }

    #[test]
    fn rate_zero_campaign_is_crash_free_baseline() {
        let (log, edges, script) = pipeline();
        let mut cfg = base_cfg();
        cfg.mutation.rate = 0.0;
        let (reports, stats) =
            run_campaign(&specs(), &script, &types(), &log, &edges, &cfg).unwrap();
        assert!(reports.is_empty());
        assert_eq!(stats.unique_crashes, 0);
        let rec = stats.success.get("recovered").unwrap();
        assert_eq!((rec.matched, rec.total), (2, 2));
        assert!(stats.averaged_rate <= stats.instant_rate);
    }

    #[test]
    fn planted_bug_is_found_reproducibly() {
        let (log, edges, script) = pipeline();
        let mut specs = specs();
        specs
            .plant_bug(
                "sys_b",
                crate::sim::CrashCondition {
                    clauses: vec![(1, crate::sim::CmpOp::Eq, 0)],
                    kind: "nullarg".into(),
                },
            )
            .unwrap();
        let mut cfg = base_cfg();
        cfg.iterations = 10_000;
        cfg.mutation.rate = 1.0;
        cfg.mutation.weights = [0, 0, 1, 0]; // boundary only
        cfg.mutation.seed = 42;
        let run = || run_campaign(&specs, &script, &types(), &log, &edges, &cfg).unwrap();
        let (reports_a, stats_a) = run();
        let (reports_b, _) = run();
        assert!(!reports_a.is_empty(), "bug never found");
        assert_eq!(reports_a[0].kind, "nullarg");
        assert_eq!(reports_a[0].iteration, reports_b[0].iteration);
        assert!(stats_a.averaged_rate <= stats_a.instant_rate);
        // dedup soundness
        let keys: BTreeSet<_> = reports_a.iter().map(|r| r.dedupe_key()).collect();
        assert_eq!(stats_a.unique_crashes as usize, keys.len());
        assert_eq!(stats_a.total_crashes as usize, reports_a.len());
        // timeline is non-decreasing
        assert!(stats_a.timeline.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn unhealthy_script_is_refused() {
        let (log, edges, script) = pipeline();
        let mut specs = specs();
        specs
            .plant_bug(
                "sys_a",
                crate::sim::CrashCondition {
                    clauses: vec![(0, crate::sim::CmpOp::Eq, 0x7)],
                    kind: "always".into(),
                },
            )
            .unwrap();
        assert!(matches!(
            run_campaign(&specs, &script, &types(), &log, &edges, &base_cfg()),
            Err(CampaignError::NeverHealthy)
        ));
    }

    #[test]
    fn trace_stats_hand_count() {
        let (log, edges, _) = pipeline();
        let stats = compute_trace_stats(&log, &edges, 10);
        assert_eq!(stats.type_count, 2);
        assert_eq!(stats.successive_sequence_count, 1); // only sys_a has a child
        assert_eq!(stats.max_children, 1);
        assert!((stats.avg_children - 1.0).abs() < 1e-9);
        assert_eq!(
            stats.frequency,
            vec![("sys_a".to_string(), 1), ("sys_b".to_string(), 1)]
        );
    }

    #[test]
    fn config_parse_defaults_and_overrides() {
        let cfg = parse_campaign_config(
            "# comment\niterations = 7\nstep_budget = 64\nmutation.rate = 0.25\n\
             mutation.weights = 1:2:3:4\nseed = 99\ncontinue_on_error = false\n",
        )
        .unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.step_budget, 64);
        assert_eq!(cfg.mutation.rate, 0.25);
        assert_eq!(cfg.mutation.weights, [1, 2, 3, 4]);
        assert_eq!(cfg.mutation.seed, 99);
        assert!(!cfg.continue_on_error);
        assert!(parse_campaign_config("bogus_key = 1\n").is_err());
        assert!(parse_campaign_config("iterations 5\n").is_err());
    }

    #[test]
    fn report_is_deterministic_and_machine_parseable() {
        let (log, edges, script) = pipeline();
        let mut cfg = base_cfg();
        cfg.mutation.rate = 0.5;
        let render = || {
            let (reports, stats) =
                run_campaign(&specs(), &script, &types(), &log, &edges, &cfg).unwrap();
            emit_report(&reports, &stats, &cfg)
        };
        let a = render();
        assert_eq!(a, render());
        let kv = parse_stat_lines(&a);
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).unwrap().1.clone();
        assert_eq!(get("iterations_run"), "50");
        let instant: f64 = get("instant_rate").parse().unwrap();
        let averaged: f64 = get("averaged_rate").parse().unwrap();
        assert!(averaged <= instant);
    }
}

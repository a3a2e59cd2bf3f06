//! Command-line front end for the trace pipeline: generate, analyze,
//! learn, recover, synthesize, localize, fuzz, report.
//!
//! Every subcommand reads and writes plain files, so each stage can run
//! (and be rerun) independently. Exit codes: 0 success, 1 domain error,
//! 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use tracefuzz::campaign::{
    compute_trace_stats, emit_report, parse_campaign_config, run_campaign, CampaignConfig,
};
use tracefuzz::dep::{analyze_dependencies, emit_edges, parse_edges, DependencyEdge};
use tracefuzz::dict::{emit_dictionary, learn_dictionary, parse_dictionary, DictConfig};
use tracefuzz::fixtures::{fixture_by_name, random_plan, random_spec_set, Fixture, FIXTURE_NAMES};
use tracefuzz::script::{emit_script_text, load_script, recover_model_script, Script};
use tracefuzz::sim::{
    emit_sim_specs, execute_script, generate_trace, parse_sim_specs, ScriptOutcome, SimSpecSet,
};
use tracefuzz::synth::{localize_faulty_call, synthesize, ExecOutcome, SynthError};
use tracefuzz::trace::{parse_trace, serialize_trace, validate_trace, TraceLog};
use tracefuzz::typedb::{emit_type_db, load_type_db, TypeDb};

#[derive(Parser)]
#[command(name = "tracefuzz", version, about = "Trace-driven syscall sequence synthesis and fuzzing")]
struct Cli {
    /// Suppress informational output on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    /// Manifest file recording SHA-256 checksums of consumed artifacts;
    /// stale inputs are refused.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace (plus type DB and kernel spec) from a fixture or
    /// a seeded random workload.
    GenTrace(GenTraceArgs),
    /// Infer dependency edges from a trace.
    Analyze(AnalyzeArgs),
    /// Learn the dependency dictionary from a trace and its edges.
    LearnDict(LearnDictArgs),
    /// Recover an executable model script from a trace.
    Recover(RecoverArgs),
    /// Grow a script by leveled insertion of dictionary children.
    Synthesize(SynthesizeArgs),
    /// Binary-search the first fatal call of a script.
    Localize(LocalizeArgs),
    /// Run an execute-mutate campaign and write its report.
    Fuzz(FuzzArgs),
    /// Print trace-shape statistics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    /// Named fixture (demo, insertion, chain-fail, stats) or `random`.
    #[arg(long, default_value = "demo")]
    fixture: String,
    /// Call count for `random` workloads.
    #[arg(long, default_value_t = 60)]
    len: usize,
    /// RNG seed for `random` workloads.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distinct syscall types for `random` workloads.
    #[arg(long, default_value_t = 6)]
    types_count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    types_out: PathBuf,
    #[arg(long)]
    specs_out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    types: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearnDictArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    types: PathBuf,
    /// Edge dump; recomputed from the trace when omitted.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Treat zero returns as failures when learning.
    #[arg(long)]
    zero_fails: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    types: PathBuf,
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    types: PathBuf,
    /// Maximum insertion level.
    #[arg(long, default_value_t = 3)]
    levels: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    specs: PathBuf,
    /// Virtual step budget per execution.
    #[arg(long, default_value_t = 1_000_000)]
    budget: u64,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    specs: PathBuf,
    #[arg(long)]
    types: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    /// Campaign config (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for the mutation RNG.
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    types: PathBuf,
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Frequency table size.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

/// Tracks checksums of pipeline artifacts across stages. Line format:
/// `M|<path>|<sha256>`. Consuming a file whose recorded checksum differs
/// is refused; producing a file records or updates its entry.
struct Manifest {
    path: Option<PathBuf>,
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn load(path: Option<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        if let Some(p) = &path {
            if p.exists() {
                for line in fs::read_to_string(p)?.lines() {
                    if let Some(body) = line.strip_prefix("M|") {
                        if let Some((file, sum)) = body.split_once('|') {
                            entries.push((file.to_string(), sum.to_string()));
                        }
                    }
                }
            }
        }
        Ok(Manifest { path, entries })
    }

    fn digest(path: &Path) -> Result<String> {
        let bytes =
            fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    }

    fn consume(&self, path: &Path) -> Result<()> {
        if self.path.is_none() {
            return Ok(());
        }
        let key = path.display().to_string();
        if let Some((_, recorded)) = self.entries.iter().find(|(f, _)| *f == key) {
            let actual = Self::digest(path)?;
            if &actual != recorded {
                bail!(
                    "manifest mismatch for {key}: recorded {recorded}, found {actual}; \
                     the artifact changed since it was produced"
                );
            }
        }
        Ok(())
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        if self.path.is_none() {
            return Ok(());
        }
        let key = path.display().to_string();
        let sum = Self::digest(path)?;
        self.entries.retain(|(f, _)| *f != key);
        self.entries.push((key, sum));
        Ok(())
    }

    fn save(&self) -> Result<()> {
        if let Some(p) = &self.path {
            let mut out = String::new();
            for (file, sum) in &self.entries {
                out.push_str(&format!("M|{file}|{sum}\n"));
            }
            fs::write(p, out)?;
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_trace_file(path: &Path) -> Result<TraceLog> {
    Ok(parse_trace(&read_text(path)?)?)
}

fn load_types_file(path: &Path) -> Result<TypeDb> {
    Ok(load_type_db(&read_text(path)?)?)
}

fn load_edges_file(path: &Path) -> Result<Vec<DependencyEdge>> {
    Ok(parse_edges(&read_text(path)?)?)
}

fn load_specs_file(path: &Path) -> Result<SimSpecSet> {
    Ok(parse_sim_specs(&read_text(path)?)?)
}

fn load_script_file(path: &Path) -> Result<Script> {
    Ok(load_script(&read_text(path)?)?)
}

fn edges_or_analyze(
    edges: &Option<PathBuf>,
    log: &TraceLog,
    types: &TypeDb,
    manifest: &Manifest,
) -> Result<Vec<DependencyEdge>> {
    match edges {
        Some(p) => {
            manifest.consume(p)?;
            load_edges_file(p)
        }
        None => Ok(analyze_dependencies(log, types)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut manifest = Manifest::load(cli.manifest.clone())?;
    let quiet = cli.quiet;
    let say = |msg: String| {
        if !quiet {
            println!("{msg}");
        }
    };
    match cli.command {
        Command::GenTrace(a) => {
            let fixture = if a.fixture == "random" {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
                let (types, specs) = random_spec_set(&mut rng, a.types_count);
                let plan = random_plan(&mut rng, &types, &specs, a.len);
                Fixture { types, specs, plan }
            } else {
                fixture_by_name(&a.fixture).with_context(|| {
                    format!(
                        "unknown fixture `{}`; available: {} or random",
                        a.fixture,
                        FIXTURE_NAMES.join(", ")
                    )
                })?
            };
            let source = format!("gen-trace:{}", a.fixture);
            let (log, _) = generate_trace(&fixture.specs, &fixture.types, &fixture.plan, &source)?;
            let violations = validate_trace(&log, &fixture.types)?;
            if !violations.is_empty() {
                bail!("generated trace failed validation: {violations:?}");
            }
            fs::write(&a.out, serialize_trace(&log))?;
            fs::write(&a.types_out, emit_type_db(&fixture.types))?;
            fs::write(&a.specs_out, emit_sim_specs(&fixture.specs))?;
            manifest.record(&a.out)?;
            manifest.record(&a.types_out)?;
            manifest.record(&a.specs_out)?;
            say(format!(
                "wrote {} records to {}",
                log.records.len(),
                a.out.display()
            ));
        }
        Command::Analyze(a) => {
            manifest.consume(&a.trace)?;
            manifest.consume(&a.types)?;
            let log = load_trace_file(&a.trace)?;
            let types = load_types_file(&a.types)?;
            let edges = analyze_dependencies(&log, &types)?;
            fs::write(&a.out, emit_edges(&edges))?;
            manifest.record(&a.out)?;
            say(format!("wrote {} edges to {}", edges.len(), a.out.display()));
        }
        Command::LearnDict(a) => {
            manifest.consume(&a.trace)?;
            manifest.consume(&a.types)?;
            let log = load_trace_file(&a.trace)?;
            let types = load_types_file(&a.types)?;
            let edges = edges_or_analyze(&a.edges, &log, &types, &manifest)?;
            let cfg = DictConfig { zero_is_success: !a.zero_fails };
            let dict = learn_dictionary(&log, &edges, cfg)?;
            fs::write(&a.out, emit_dictionary(&dict))?;
            manifest.record(&a.out)?;
            say(format!(
                "learned {} templates for {} producers into {}",
                dict.template_count(),
                dict.entries.len(),
                a.out.display()
            ));
        }
        Command::Recover(a) => {
            manifest.consume(&a.trace)?;
            manifest.consume(&a.types)?;
            let log = load_trace_file(&a.trace)?;
            let types = load_types_file(&a.types)?;
            let edges = edges_or_analyze(&a.edges, &log, &types, &manifest)?;
            let script = recover_model_script(&log, &edges, &types)?;
            fs::write(&a.out, emit_script_text(&script))?;
            manifest.record(&a.out)?;
            say(format!(
                "recovered {} calls into {}",
                script.invoke_count(),
                a.out.display()
            ));
        }
        Command::Synthesize(a) => {
            for p in [&a.script, &a.dict, &a.edges, &a.types] {
                manifest.consume(p)?;
            }
            let script = load_script_file(&a.script)?;
            let dict = parse_dictionary(&read_text(&a.dict)?)?;
            let edges = load_edges_file(&a.edges)?;
            let types = load_types_file(&a.types)?;
            let base = script.invoke_count();
            let (grown, plan) = synthesize(&script, &dict, &edges, &types, a.levels)?;
            fs::write(&a.out, emit_script_text(&grown))?;
            manifest.record(&a.out)?;
            // per-level counts with growth ratios over the recovered base
            for (i, level) in plan.levels.iter().enumerate() {
                let inc = if base == 0 {
                    0.0
                } else {
                    level.len() as f64 / base as f64 * 100.0
                };
                say(format!("L{}|{}|{:.1}%", i + 1, level.len(), inc));
            }
            say(format!(
                "total|{}|skipped_unstaged|{}",
                plan.total_inserted(),
                plan.skipped_unstaged
            ));
        }
        Command::Localize(a) => {
            manifest.consume(&a.script)?;
            manifest.consume(&a.specs)?;
            let script = load_script_file(&a.script)?;
            let specs = load_specs_file(&a.specs)?;
            let mut exec = |s: &Script| match execute_script(&specs, s, Some(a.budget)) {
                Ok((ScriptOutcome::Completed { .. }, _)) => ExecOutcome::Completed,
                Ok((ScriptOutcome::Fatal { kind, .. }, _)) => ExecOutcome::Fatal(kind),
                Err(e) => panic!("executor failed: {e}"),
            };
            match localize_faulty_call(&script, &mut exec) {
                Ok(loc) => say(format!(
                    "faulty|{}|{}|executions|{}",
                    loc.call,
                    tracefuzz::campaign::fatal_label(&loc.kind),
                    loc.executions
                )),
                Err(SynthError::NotReproducible) => say("healthy|script completes".to_string()),
                Err(e) => return Err(e.into()),
            }
        }
        Command::Fuzz(a) => {
            for p in [&a.script, &a.specs, &a.types, &a.trace, &a.edges] {
                manifest.consume(p)?;
            }
            let script = load_script_file(&a.script)?;
            let specs = load_specs_file(&a.specs)?;
            let types = load_types_file(&a.types)?;
            let log = load_trace_file(&a.trace)?;
            let edges = load_edges_file(&a.edges)?;
            let mut cfg = match &a.config {
                Some(p) => {
                    manifest.consume(p)?;
                    parse_campaign_config(&read_text(p)?)?
                }
                None => CampaignConfig::default(),
            };
            if let Some(seed) = a.seed {
                cfg.mutation.seed = seed;
            }
            let (reports, stats) = run_campaign(&specs, &script, &types, &log, &edges, &cfg)?;
            let report = emit_report(&reports, &stats, &cfg);
            match &a.out {
                Some(p) => {
                    fs::write(p, &report)?;
                    manifest.record(p)?;
                    say(format!(
                        "campaign done: {} unique / {} total crashes, report in {}",
                        stats.unique_crashes,
                        stats.total_crashes,
                        p.display()
                    ));
                }
                None => print!("{report}"),
            }
        }
        Command::Stats(a) => {
            manifest.consume(&a.trace)?;
            manifest.consume(&a.types)?;
            let log = load_trace_file(&a.trace)?;
            let types = load_types_file(&a.types)?;
            let edges = edges_or_analyze(&a.edges, &log, &types, &manifest)?;
            let stats = compute_trace_stats(&log, &edges, a.top);
            println!("S|trace_types|{}", stats.type_count);
            println!("S|succ_seq|{}", stats.successive_sequence_count);
            println!("S|max_children|{}", stats.max_children);
            println!("S|avg_children|{:.4}", stats.avg_children);
            for (name, count) in &stats.frequency {
                println!("F|{name}|{count}");
            }
        }
    }
    manifest.save()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

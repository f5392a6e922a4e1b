//! Command-line frontend over the fuzzing engine.

use std::ffi::OsString;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use gdfuzz::abi::{ExecutionConfig, FillByte};
use gdfuzz::fuzz::suite::{read_inputs, read_manifest, write_suite};
use gdfuzz::fuzz::{
    replay, run_fuzzing, serve, Executor, FuzzBudget, FuzzOptions, FuzzOutcome, FuzzStats, LocalExecutor,
    RemoteExecutor, ReplayError, ServeOptions,
};
use gdfuzz::minivm::{parse_program, Program, DEFAULT_STEP_BUDGET};

pub const STATS_FILE: &str = "stats.json";
pub const TREE_FILE: &str = "tree.txt";

#[derive(Debug, Parser)]
#[command(name = "gdfuzz", version, about = "Gray-box fuzzer for minivm programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuzz a target and write the test suite.
    Fuzz(FuzzArgs),
    /// Re-execute a written suite and check it against its manifest.
    Replay(ReplayArgs),
    /// Print coverage and tree summaries of a finished run.
    Report(ReportArgs),
    /// Serve executions of a target over TCP for `fuzz --remote`.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Limits {
    #[arg(long, default_value_t = 10_000)]
    pub max_trace_length: u32,
    #[arg(long, default_value_t = 256)]
    pub max_stack_size: u32,
    #[arg(long, default_value_t = 4096)]
    pub max_input_bytes: u32,
    /// Interpreter steps per execution before TIMEOUT.
    #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
    pub step_budget: u64,
    /// Byte read past the end of the input: 0 or 85.
    #[arg(long, default_value_t = 0, value_parser = parse_fill)]
    pub fill_byte: u8,
}

fn parse_fill(s: &str) -> Result<u8, String> {
    let v: u8 = s.parse().map_err(|e| format!("{e}"))?;
    FillByte::new(v).map(|f| f.get()).ok_or_else(|| "must be 0 or 85".to_string())
}

#[derive(Debug, Args)]
pub struct FuzzArgs {
    /// Target program source.
    #[arg(short = 't', long = "target", required_unless_present = "remote")]
    pub target: Option<PathBuf>,
    /// Output directory for tests, manifest and stats.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_executions: Option<u64>,
    #[arg(long)]
    pub max_seconds: Option<f64>,
    #[command(flatten)]
    pub limits: Limits,
    /// host:port of a `gdfuzz serve` process to execute on.
    #[arg(long)]
    pub remote: Option<String>,
    /// Skip re-running boundary-violating tests with extended limits.
    #[arg(long)]
    pub no_optimize: bool,
    /// Also write the execution tree as text.
    #[arg(long)]
    pub dump_tree: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(short = 't', long = "target", required_unless_present = "remote")]
    pub target: Option<PathBuf>,
    /// Suite directory written by `fuzz`.
    #[arg(short = 's', long = "suite")]
    pub suite: PathBuf,
    #[arg(long)]
    pub remote: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Suite directory written by `fuzz`.
    #[arg(short = 's', long = "suite")]
    pub suite: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(short = 't', long = "target")]
    pub target: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
    pub step_budget: u64,
    /// Largest input accepted in one configuration.
    #[arg(long, default_value_t = 1 << 20)]
    pub max_input_bytes: usize,
    /// Exit after this many connections.
    #[arg(long)]
    pub max_conns: Option<usize>,
}

const REMOTE_TIMEOUT: Duration = Duration::from_secs(60);

fn load_program(path: &Path) -> Result<Arc<Program>> {
    let src = fs::read_to_string(path).with_context(|| format!("cannot read target {}", path.display()))?;
    let p = parse_program(&src).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(Arc::new(p))
}

enum Exec {
    Local(LocalExecutor),
    Remote(RemoteExecutor),
}

impl Executor for Exec {
    fn execute(&mut self, c: &ExecutionConfig) -> Result<gdfuzz::abi::ExecutionResult, gdfuzz::fuzz::TransportError> {
        match self {
            Exec::Local(e) => e.execute(c),
            Exec::Remote(e) => e.execute(c),
        }
    }

    fn set_step_budget(&mut self, steps: u64) {
        match self {
            Exec::Local(e) => e.set_step_budget(steps),
            Exec::Remote(e) => e.set_step_budget(steps),
        }
    }
}

fn executor(target: Option<&Path>, remote: Option<&str>, steps: u64) -> Result<Exec> {
    if let Some(addr) = remote {
        return Ok(Exec::Remote(RemoteExecutor::connect(addr, REMOTE_TIMEOUT)?));
    }
    let target = target.expect("clap requires a target without --remote");
    Ok(Exec::Local(LocalExecutor::new(load_program(target)?, steps)))
}

fn fuzz_options(a: &FuzzArgs) -> FuzzOptions {
    let l = &a.limits;
    let budget = match (a.max_executions, a.max_seconds) {
        (None, None) => FuzzOptions::default().budget,
        (e, s) => FuzzBudget {
            max_executions: e,
            max_seconds: s,
        },
    };
    FuzzOptions {
        seed: a.seed,
        budget,
        config: ExecutionConfig {
            max_trace_length: l.max_trace_length,
            max_stack_size: l.max_stack_size,
            max_input_bytes: l.max_input_bytes,
            fill_byte: FillByte::new(l.fill_byte).expect("validated by the parser"),
            input: Vec::new(),
        },
        step_budget: l.step_budget,
        optimize: !a.no_optimize,
        ..FuzzOptions::default()
    }
}

fn print_summary(o: &FuzzOutcome) {
    let c = o.suite.coverage();
    println!(
        "{} executions, {} tests ({} crashes), covered {}/{} boolean instructions, stop: {:?}",
        o.stats.executions,
        o.suite.len(),
        o.suite.crash_count(),
        c.covered_uids,
        c.discovered_uids,
        o.stats.stop_reason
    );
}

fn cmd_fuzz(a: &FuzzArgs) -> Result<i32> {
    let opts = fuzz_options(a);
    let mut exec = executor(a.target.as_deref(), a.remote.as_deref(), opts.step_budget)?;
    let out = run_fuzzing(&mut exec, &opts)?;
    write_suite(&a.out, &out.suite, &out.manifest(&opts))?;
    let p = a.out.join(STATS_FILE);
    fs::write(&p, serde_json::to_string_pretty(&out.stats)? + "\n").with_context(|| p.display().to_string())?;
    if a.dump_tree {
        let p = a.out.join(TREE_FILE);
        fs::write(&p, out.tree.dump()).with_context(|| p.display().to_string())?;
    }
    print_summary(&out);
    Ok(0)
}

fn cmd_replay(a: &ReplayArgs) -> Result<i32> {
    let m = read_manifest(&a.suite)?;
    let inputs = read_inputs(&a.suite, &m)?;
    let mut exec = executor(a.target.as_deref(), a.remote.as_deref(), m.limits.step_budget)?;
    match replay(&mut exec, &m, &inputs) {
        Ok(c) => {
            println!(
                "replayed {} tests: covered {}/{} boolean instructions, {}/{} execution ids",
                inputs.len(),
                c.covered_uids,
                c.discovered_uids,
                c.covered_ids,
                c.discovered_ids
            );
            Ok(0)
        }
        Err(ReplayError::Mismatch(e)) => {
            eprintln!("replay diverged: {e}");
            Ok(1)
        }
        Err(ReplayError::Transport(e)) => Err(e.into()),
    }
}

fn cmd_report(a: &ReportArgs) -> Result<i32> {
    let p = a.suite.join(STATS_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    let s: FuzzStats = serde_json::from_str(&text).with_context(|| p.display().to_string())?;
    print!("{}", render_report(&s));
    Ok(0)
}

/// Human-readable form of a stats document.
pub fn render_report(s: &FuzzStats) -> String {
    use std::fmt::Write as _;
    let mut r = String::new();
    let _ = writeln!(r, "seed: {}", s.seed);
    let _ = writeln!(r, "executions: {} (stop: {:?}, {:.3}s)", s.executions, s.stop_reason, s.elapsed_seconds);
    let kinds: std::collections::BTreeSet<&String> =
        s.executions_by_analysis.keys().chain(s.sessions_by_analysis.keys()).collect();
    for k in kinds {
        let v = s.executions_by_analysis.get(k).copied().unwrap_or(0);
        let sessions = s.sessions_by_analysis.get(k).copied().unwrap_or(0);
        let _ = writeln!(r, "  {k}: {v} executions, {sessions} sessions");
    }
    for (k, v) in &s.terminations {
        let _ = writeln!(r, "  terminated {k}: {v}");
    }
    let t = &s.tree_coverage;
    let _ = writeln!(
        r,
        "tree: {} nodes, covered {}/{} boolean instructions, {}/{} execution ids",
        s.tree_nodes, t.covered_uids, t.discovered_uids, t.covered_ids, t.discovered_ids
    );
    let c = &s.suite_coverage;
    let _ = writeln!(
        r,
        "suite: {} tests, {} crashes, {} from the optimizer, covered {}/{} boolean instructions",
        s.tests, s.crashes, s.optimizer_added, c.covered_uids, c.discovered_uids
    );
    let _ = writeln!(r, "recoveries: {}, cache hits: {}", s.recoveries, s.cache_hits);
    r
}

fn cmd_serve(a: &ServeArgs) -> Result<i32> {
    let p = load_program(&a.target)?;
    let l = TcpListener::bind(&a.listen).with_context(|| format!("cannot listen on {}", a.listen))?;
    eprintln!("serving {} on {}", a.target.display(), l.local_addr()?);
    let opts = ServeOptions {
        step_budget: a.step_budget,
        max_input_bytes: a.max_input_bytes,
    };
    serve(l, p, opts, a.max_conns)?;
    Ok(0)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Report(a) => cmd_report(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

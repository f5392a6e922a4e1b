//! The fuzzing loop: sessions in, executions out, tree and test suite
//! updated in between.

pub mod executor;
pub mod suite;

use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abi::{ExecutionConfig, ExecutionResult, FillByte, Termination};
use crate::generators::{get_bit, AnalysisKind, BitshareStore, Session};
use crate::minivm::DEFAULT_STEP_BUDGET;
use crate::strategy::Selector;
use crate::tree::{EdgeLabel, ExecTree, Sample, TreeError};

pub use executor::{serve, serve_connection, Executor, LocalExecutor, RemoteExecutor, ServeOptions, TransportError};
pub use suite::{Coverage, Manifest, ManifestEntry, ManifestLimits, TestCase, TestSuite};

/// Stop after this many target executions, or this much wall time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzBudget {
    pub max_executions: Option<u64>,
    pub max_seconds: Option<f64>,
}

impl FuzzBudget {
    pub fn executions(n: u64) -> Self {
        FuzzBudget {
            max_executions: Some(n),
            max_seconds: None,
        }
    }
}

/// Limit multipliers for the optimizer's re-executions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extension {
    pub trace: u32,
    pub input: u32,
    pub stack: u32,
    pub steps: u64,
}

impl Default for Extension {
    fn default() -> Self {
        Extension {
            trace: 32,
            input: 4,
            stack: 4,
            steps: 32,
        }
    }
}

impl Extension {
    pub fn apply(&self, c: &ExecutionConfig, steps: u64) -> (ExecutionConfig, u64) {
        let cfg = ExecutionConfig {
            max_trace_length: c.max_trace_length.saturating_mul(self.trace),
            max_stack_size: c.max_stack_size.saturating_mul(self.stack),
            max_input_bytes: c.max_input_bytes.saturating_mul(self.input),
            ..c.clone()
        };
        (cfg, steps.saturating_mul(self.steps))
    }
}

#[derive(Debug, Clone)]
pub struct FuzzOptions {
    pub seed: u64,
    pub budget: FuzzBudget,
    /// Limits of every execution; the input field is ignored.
    pub config: ExecutionConfig,
    pub step_budget: u64,
    pub extension: Extension,
    pub optimize: bool,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            seed: 0,
            budget: FuzzBudget::executions(10_000),
            config: ExecutionConfig::default(),
            step_budget: DEFAULT_STEP_BUDGET,
            extension: Extension::default(),
            optimize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Time,
    Exhausted,
}

/// One finished session, for diagnostics and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub kind: AnalysisKind,
    pub node: usize,
    pub uid: u32,
    pub executions: u64,
    pub reached: bool,
    pub started_at: u64,
    /// Accepted |f| values of each descent the session ran.
    pub descents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzStats {
    pub seed: u64,
    pub executions: u64,
    pub iterations: u64,
    pub executions_by_analysis: BTreeMap<String, u64>,
    pub sessions_by_analysis: BTreeMap<String, u64>,
    pub terminations: BTreeMap<String, u64>,
    pub tree_nodes: usize,
    pub tree_coverage: Coverage,
    pub suite_coverage: Coverage,
    pub tests: usize,
    pub crashes: usize,
    pub optimizer_added: usize,
    pub recoveries: u64,
    pub cache_hits: u64,
    pub stop_reason: StopReason,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("target is not deterministic: {0}")]
    Diverged(#[from] TreeError),
}

pub struct FuzzOutcome {
    pub suite: TestSuite,
    pub stats: FuzzStats,
    pub tree: ExecTree,
    pub sessions: Vec<SessionLog>,
}

impl std::fmt::Debug for FuzzOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FuzzOutcome")
            .field("stats", &self.stats)
            .field("tests", &self.suite.len())
            .finish()
    }
}

impl FuzzOutcome {
    pub fn manifest(&self, opts: &FuzzOptions) -> Manifest {
        manifest_for(&self.suite, &self.stats, opts)
    }
}

pub fn manifest_for(suite: &TestSuite, stats: &FuzzStats, opts: &FuzzOptions) -> Manifest {
    Manifest {
        seed: stats.seed,
        limits: ManifestLimits {
            max_trace_length: opts.config.max_trace_length,
            max_stack_size: opts.config.max_stack_size,
            max_input_bytes: opts.config.max_input_bytes,
            fill_byte: opts.config.fill_byte.get(),
            step_budget: opts.step_budget,
            trace_multiplier: opts.extension.trace,
            input_multiplier: opts.extension.input,
            stack_multiplier: opts.extension.stack,
            step_multiplier: opts.extension.steps,
        },
        iterations: stats.iterations,
        executions: stats.executions,
        executions_by_analysis: stats.executions_by_analysis.clone(),
        coverage: suite.coverage(),
        tests: suite
            .tests
            .iter()
            .enumerate()
            .map(|(i, t)| ManifestEntry {
                file: suite::test_file_name(i),
                termination: t.termination,
                iteration: t.iteration,
                input_len: t.input.len(),
                newly_covered_uids: t.newly_covered_uids.iter().copied().collect(),
                extended: t.extended,
            })
            .collect(),
    }
}

const INITIAL: &str = "INITIAL";
const OPTIMIZER: &str = "OPTIMIZER";

struct Engine<'a, E: Executor> {
    exec: &'a mut E,
    opts: &'a FuzzOptions,
    rng: ChaCha8Rng,
    tree: ExecTree,
    selector: Selector,
    store: BitshareStore,
    suite: TestSuite,
    session: Option<Session>,
    session_start: u64,
    iteration: u64,
    executions: u64,
    by_analysis: BTreeMap<String, u64>,
    sessions_by: BTreeMap<String, u64>,
    terminations: BTreeMap<String, u64>,
    logs: Vec<SessionLog>,
    cache_hits: u64,
}

impl<'a, E: Executor> Engine<'a, E> {
    fn run_one(&mut self, input: Vec<u8>, label: &str) -> Result<(Rc<Sample>, crate::tree::MapOutcome, ExecutionResult), FuzzError> {
        let cfg = self.opts.config.with_input(input);
        let r = self.exec.execute(&cfg)?;
        self.executions += 1;
        self.iteration += 1;
        *self.by_analysis.entry(label.to_string()).or_default() += 1;
        *self.terminations.entry(r.termination.name().to_string()).or_default() += 1;
        let sample = Rc::new(Sample {
            input: r.bytes_read.clone(),
            types: r.type_tags.clone(),
            trace: r.trace.clone(),
        });
        let out = self.tree.map_trace(Rc::clone(&sample), r.termination, self.iteration)?;
        self.selector.nodes_created(&self.tree, &out.created);
        self.suite.offer(&r, self.iteration);
        Ok((sample, out, r))
    }

    fn open_session(&mut self, kind: AnalysisKind, node: usize) -> Session {
        let seed = self.rng.gen::<u64>();
        *self.sessions_by.entry(kind.name().to_string()).or_default() += 1;
        self.session_start = self.executions;
        match kind {
            AnalysisKind::Sensitivity => Session::sensitivity(&self.tree, node),
            AnalysisKind::Bitshare => Session::bitshare(&self.tree, node, &self.store),
            AnalysisKind::TypedMinimization => {
                Session::typed(&self.tree, node, seed).unwrap_or_else(|| Session::binary(&self.tree, node, seed))
            }
            AnalysisKind::Minimization => Session::binary(&self.tree, node, seed),
        }
    }

    fn goal_reached(&self, s: &Session) -> bool {
        s.goal
            .is_some_and(|g| self.tree.node(s.node).label(g) != EdgeLabel::NotVisited)
    }

    /// Stamps, prunes and closes after `s` has finished.
    fn deactivate(&mut self, s: Session, reached: bool) {
        let n = s.node;
        let it = self.iteration;
        self.cache_hits += s.cache_hits();
        match s.kind {
            AnalysisKind::Sensitivity => {
                let path = s.path().map(<[usize]>::to_vec).unwrap_or_else(|| self.tree.path(n));
                for &m in &path {
                    let v = self.tree.node_mut(m);
                    v.sa = true;
                    v.sn = it;
                }
                self.selector.sensitivity_done(&self.tree, &path);
            }
            AnalysisKind::Bitshare => {
                let v = self.tree.node_mut(n);
                v.ba = true;
                v.bn = it;
            }
            AnalysisKind::TypedMinimization | AnalysisKind::Minimization => {
                let v = self.tree.node_mut(n);
                v.ma = true;
                v.mn = it;
                if !reached {
                    self.selector.record_failure(n, it);
                }
            }
        }
        self.logs.push(SessionLog {
            kind: s.kind,
            node: n,
            uid: self.tree.node(n).id.uid,
            executions: s.executions,
            reached,
            started_at: self.session_start,
            descents: s.descents().to_vec(),
        });
        self.selector.prune(&self.tree);
        if s.kind != AnalysisKind::Sensitivity {
            self.selector.session_done(&self.tree, n);
        }
        self.tree.propagate_closed(n);
    }

    fn record_donor(&mut self, s: &Session, sample: &Sample) {
        let Some(g) = s.goal else { return };
        let v = self.tree.node(s.node);
        let bits = v.sbits.iter().map(|&b| get_bit(&sample.input, b)).collect();
        self.store.insert(v.id.uid, g, bits);
    }

    /// Next input from the active session, opening sessions as needed.
    /// `None` once the strategy has nothing left.
    fn next_input(&mut self, deadline: Option<Instant>) -> Option<Vec<u8>> {
        loop {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return None;
            }
            if self.session.is_none() {
                let (kind, node) = self.selector.select(&mut self.tree, &mut self.rng)?;
                let s = self.open_session(kind, node);
                self.session = Some(s);
            }
            let s = self.session.as_mut().expect("session just opened");
            if let Some(x) = s.generate_input() {
                return Some(x);
            }
            let s = self.session.take().expect("active session");
            let reached = self.goal_reached(&s);
            self.deactivate(s, reached);
        }
    }

    fn run(&mut self) -> Result<StopReason, FuzzError> {
        let start = Instant::now();
        let deadline = self
            .opts
            .budget
            .max_seconds
            .map(|s| start + Duration::from_secs_f64(s.max(0.0)));
        let max = self.opts.budget.max_executions;
        let out_of_execs = |e: u64| max.is_some_and(|m| e >= m);
        if out_of_execs(0) {
            return Ok(StopReason::Budget);
        }
        self.run_one(Vec::new(), INITIAL)?;
        loop {
            if out_of_execs(self.executions) {
                return Ok(StopReason::Budget);
            }
            let Some(x) = self.next_input(deadline) else {
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    return Ok(StopReason::Time);
                }
                return Ok(StopReason::Exhausted);
            };
            let kind = self.session.as_ref().map_or(INITIAL, |s| s.kind.name());
            let (sample, out, _) = self.run_one(x, kind)?;
            let mut s = self.session.take().expect("input came from a session");
            s.process_results(&mut self.tree, &sample, &out);
            if self.goal_reached(&s) {
                s.stop();
                self.record_donor(&s, &sample);
                self.deactivate(s, true);
            } else {
                self.session = Some(s);
            }
        }
    }
}

/// Runs the loop and then the optimizer.
pub fn run_fuzzing<E: Executor>(exec: &mut E, opts: &FuzzOptions) -> Result<FuzzOutcome, FuzzError> {
    let start = Instant::now();
    exec.set_step_budget(opts.step_budget);
    let mut eng = Engine {
        exec,
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        tree: ExecTree::new(),
        selector: Selector::new(),
        store: BitshareStore::default(),
        suite: TestSuite::new(),
        session: None,
        session_start: 0,
        iteration: 0,
        executions: 0,
        by_analysis: BTreeMap::new(),
        sessions_by: BTreeMap::new(),
        terminations: BTreeMap::new(),
        logs: Vec::new(),
        cache_hits: 0,
    };
    let stop = eng.run()?;
    if let Some(s) = eng.session.take() {
        let reached = eng.goal_reached(&s);
        eng.deactivate(s, reached);
    }
    let mut added = 0;
    if opts.optimize {
        let before = eng.suite.len();
        let runs = optimize_suite(&mut eng.suite, eng.exec, opts)?;
        added = eng.suite.len() - before;
        if runs > 0 {
            eng.by_analysis.insert(OPTIMIZER.to_string(), runs);
        }
    }
    let (cu, du) = eng.tree.uid_coverage();
    let (ci, di) = eng.tree.id_coverage();
    let stats = FuzzStats {
        seed: opts.seed,
        executions: eng.executions,
        iterations: eng.iteration,
        executions_by_analysis: eng.by_analysis,
        sessions_by_analysis: eng.sessions_by,
        terminations: eng.terminations,
        tree_nodes: eng.tree.len(),
        tree_coverage: Coverage {
            covered_uids: cu,
            discovered_uids: du,
            covered_ids: ci,
            discovered_ids: di,
        },
        suite_coverage: eng.suite.coverage(),
        tests: eng.suite.len(),
        crashes: eng.suite.crash_count(),
        optimizer_added: added,
        recoveries: eng.selector.recoveries,
        cache_hits: eng.cache_hits,
        stop_reason: stop,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(FuzzOutcome {
        suite: eng.suite,
        stats,
        tree: eng.tree,
        sessions: eng.logs,
    })
}

/// Re-runs every boundary-violating test with extended limits and keeps the
/// longer input when it reaches something new. Returns the number of
/// re-executions.
pub fn optimize_suite<E: Executor>(suite: &mut TestSuite, exec: &mut E, opts: &FuzzOptions) -> Result<u64, TransportError> {
    let (cfg, steps) = opts.extension.apply(&opts.config, opts.step_budget);
    let candidates: Vec<(Vec<u8>, u64)> = suite
        .tests
        .iter()
        .filter(|t| t.termination == Termination::BoundaryConditionViolation && !t.extended)
        .map(|t| (t.input.clone(), t.iteration))
        .collect();
    if candidates.is_empty() {
        return Ok(0);
    }
    exec.set_step_budget(steps);
    let mut result = Ok(0);
    for (input, iteration) in candidates {
        let r = match exec.execute(&cfg.with_input(input.clone())) {
            Ok(r) => r,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        if let Ok(n) = &mut result {
            *n += 1;
        }
        if r.bytes_read != input && suite.improves(&r.trace) {
            suite.offer_with(&r, iteration, true);
        }
    }
    exec.set_step_budget(opts.step_budget);
    result
}

/// First disagreement between a suite on disk and its re-execution.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayMismatch {
    #[error("test {file}: expected termination {expected:?}, got {found:?}")]
    Termination { file: String, expected: Termination, found: Termination },
    #[error("test {file}: input is not reproduced by the target (read {found} of {expected} bytes)")]
    Input { file: String, expected: usize, found: usize },
    #[error("coverage differs: manifest {expected:?}, replay {found:?}")]
    Coverage { expected: Coverage, found: Coverage },
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Mismatch(#[from] ReplayMismatch),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Options a manifest was produced with.
pub fn options_from_manifest(m: &Manifest) -> FuzzOptions {
    let l = &m.limits;
    FuzzOptions {
        seed: m.seed,
        config: ExecutionConfig {
            max_trace_length: l.max_trace_length,
            max_stack_size: l.max_stack_size,
            max_input_bytes: l.max_input_bytes,
            fill_byte: FillByte::new(l.fill_byte).unwrap_or(FillByte::ZERO),
            input: Vec::new(),
        },
        step_budget: l.step_budget,
        extension: Extension {
            trace: l.trace_multiplier,
            input: l.input_multiplier,
            stack: l.stack_multiplier,
            steps: l.step_multiplier,
        },
        ..FuzzOptions::default()
    }
}

/// Re-executes the inputs of `manifest` and checks terminations, inputs
/// and the coverage summary.
pub fn replay<E: Executor>(exec: &mut E, manifest: &Manifest, inputs: &[Vec<u8>]) -> Result<Coverage, ReplayError> {
    let opts = options_from_manifest(manifest);
    let (ext_cfg, ext_steps) = opts.extension.apply(&opts.config, opts.step_budget);
    let mut cov = suite::CoverageSet::default();
    for (e, input) in manifest.tests.iter().zip(inputs) {
        let (cfg, steps) = if e.extended {
            (ext_cfg.with_input(input.clone()), ext_steps)
        } else {
            (opts.config.with_input(input.clone()), opts.step_budget)
        };
        exec.set_step_budget(steps);
        let r = exec.execute(&cfg)?;
        if r.termination != e.termination {
            return Err(ReplayMismatch::Termination {
                file: e.file.clone(),
                expected: e.termination,
                found: r.termination,
            }
            .into());
        }
        if r.bytes_read != *input {
            return Err(ReplayMismatch::Input {
                file: e.file.clone(),
                expected: input.len(),
                found: r.bytes_read.len(),
            }
            .into());
        }
        cov.add(&r.trace);
    }
    let found = cov.summary();
    if found != manifest.coverage {
        return Err(ReplayMismatch::Coverage {
            expected: manifest.coverage,
            found,
        }
        .into());
    }
    Ok(found)
}

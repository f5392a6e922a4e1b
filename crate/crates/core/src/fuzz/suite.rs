//! Kept tests, their coverage, and the on-disk layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abi::{ConditionRecord, ExecutionId, ExecutionResult, Termination, TypeTag};

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub input: Vec<u8>,
    pub types: Vec<TypeTag>,
    pub termination: Termination,
    /// Uids whose second direction first showed up in this test.
    pub newly_covered_uids: BTreeSet<u32>,
    pub iteration: u64,
    /// Produced by the optimizer under extended limits.
    pub extended: bool,
    pub trace: Vec<ConditionRecord>,
}

/// Covered (both directions seen) and discovered counts, per uid and per
/// execution id.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub covered_uids: usize,
    pub discovered_uids: usize,
    pub covered_ids: usize,
    pub discovered_ids: usize,
}

/// Running union of directions observed.
#[derive(Debug, Clone, Default)]
pub struct CoverageSet {
    uids: BTreeMap<u32, [bool; 2]>,
    ids: BTreeMap<ExecutionId, [bool; 2]>,
}

impl CoverageSet {
    /// Adds a trace; returns the (uid, direction) pairs it contributed first.
    pub fn add(&mut self, trace: &[ConditionRecord]) -> Vec<(u32, bool)> {
        let mut new = Vec::new();
        for r in trace {
            let d = &mut self.uids.entry(r.id.uid).or_default()[usize::from(r.direction)];
            if !*d {
                *d = true;
                new.push((r.id.uid, r.direction));
            }
            self.ids.entry(r.id).or_default()[usize::from(r.direction)] = true;
        }
        new
    }

    /// Whether the trace would add a (uid, direction) pair.
    pub fn would_add(&self, trace: &[ConditionRecord]) -> bool {
        trace
            .iter()
            .any(|r| !self.uids.get(&r.id.uid).is_some_and(|d| d[usize::from(r.direction)]))
    }

    pub fn uid_covered(&self, uid: u32) -> bool {
        self.uids.get(&uid).is_some_and(|d| d[0] && d[1])
    }

    pub fn summary(&self) -> Coverage {
        Coverage {
            covered_uids: self.uids.values().filter(|d| d[0] && d[1]).count(),
            discovered_uids: self.uids.len(),
            covered_ids: self.ids.values().filter(|d| d[0] && d[1]).count(),
            discovered_ids: self.ids.len(),
        }
    }

    pub fn covered_uid_set(&self) -> BTreeSet<u32> {
        self.uids
            .iter()
            .filter(|(_, d)| d[0] && d[1])
            .map(|(&u, _)| u)
            .collect()
    }
}

/// Retention: the first test, any test adding a (uid, direction) pair, and
/// crashes with an unseen signature.
#[derive(Debug, Clone, Default)]
pub struct TestSuite {
    pub tests: Vec<TestCase>,
    seen: CoverageSet,
    kept: CoverageSet,
    crashes: BTreeSet<Option<(ExecutionId, bool)>>,
    executions: u64,
}

fn crash_signature(trace: &[ConditionRecord]) -> Option<(ExecutionId, bool)> {
    trace.last().map(|r| (r.id, r.direction))
}

impl TestSuite {
    pub fn new() -> Self {
        Self::default()
    }

    /// Offers an execution result; returns whether it was kept.
    pub fn offer(&mut self, r: &ExecutionResult, iteration: u64) -> bool {
        self.offer_with(r, iteration, false)
    }

    pub fn offer_with(&mut self, r: &ExecutionResult, iteration: u64, extended: bool) -> bool {
        let first = self.executions == 0;
        self.executions += 1;
        let new = self.seen.add(&r.trace);
        let crash_new = r.termination == Termination::Crash && self.crashes.insert(crash_signature(&r.trace));
        if !(first || !new.is_empty() || crash_new) {
            return false;
        }
        let before = self.kept.covered_uid_set();
        self.kept.add(&r.trace);
        let newly: BTreeSet<u32> = self.kept.covered_uid_set().difference(&before).copied().collect();
        self.tests.push(TestCase {
            input: r.bytes_read.clone(),
            types: r.type_tags.clone(),
            termination: r.termination,
            newly_covered_uids: newly,
            iteration,
            extended,
            trace: r.trace.clone(),
        });
        true
    }

    /// True iff the trace has a (uid, direction) pair no kept test has.
    pub fn improves(&self, trace: &[ConditionRecord]) -> bool {
        self.kept.would_add(trace)
    }

    pub fn coverage(&self) -> Coverage {
        self.kept.summary()
    }

    pub fn covered_uids(&self) -> BTreeSet<u32> {
        self.kept.covered_uid_set()
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    pub fn crash_count(&self) -> usize {
        self.tests.iter().filter(|t| t.termination == Termination::Crash).count()
    }
}

/// Text form of one test: a line per read, then the raw bytes.
pub fn render_test(t: &TestCase) -> String {
    let mut s = String::new();
    let mut off = 0;
    for &tag in &t.types {
        let w = tag.byte_width();
        let _ = writeln!(s, "{} {}", tag, tag.format_value(&t.input[off..off + w]));
        off += w;
    }
    let _ = writeln!(s, "raw: {}", hex::encode(&t.input));
    s
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

/// Reads back the input bytes of a rendered test.
pub fn parse_test_input(text: &str) -> Option<Vec<u8>> {
    let line = text.lines().find_map(|l| l.strip_prefix("raw:"))?;
    hex::decode(line.trim()).ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub termination: Termination,
    pub iteration: u64,
    pub input_len: usize,
    pub newly_covered_uids: Vec<u32>,
    pub extended: bool,
}

/// Limits tests were produced under, so a replay can rebuild them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLimits {
    pub max_trace_length: u32,
    pub max_stack_size: u32,
    pub max_input_bytes: u32,
    pub fill_byte: u8,
    pub step_budget: u64,
    pub trace_multiplier: u32,
    pub input_multiplier: u32,
    pub stack_multiplier: u32,
    pub step_multiplier: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub limits: ManifestLimits,
    pub iterations: u64,
    pub executions: u64,
    pub executions_by_analysis: BTreeMap<String, u64>,
    pub coverage: Coverage,
    pub tests: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SuiteError + '_ {
    move |source| SuiteError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn test_file_name(i: usize) -> String {
    format!("test_{:06}.txt", i + 1)
}

/// Writes every test plus the manifest into `dir`.
pub fn write_suite(dir: &Path, suite: &TestSuite, manifest: &Manifest) -> Result<(), SuiteError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, t) in suite.tests.iter().enumerate() {
        let p = dir.join(test_file_name(i));
        fs::write(&p, render_test(t)).map_err(io_err(&p))?;
    }
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&p, text + "\n").map_err(io_err(&p))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SuiteError> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| SuiteError::Format {
        path: p.display().to_string(),
        msg: e.to_string(),
    })
}

/// Inputs of the tests listed in the manifest, in order.
pub fn read_inputs(dir: &Path, manifest: &Manifest) -> Result<Vec<Vec<u8>>, SuiteError> {
    manifest
        .tests
        .iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            parse_test_input(&text).ok_or_else(|| SuiteError::Format {
                path: p.display().to_string(),
                msg: "missing or invalid raw line".into(),
            })
        })
        .collect()
}

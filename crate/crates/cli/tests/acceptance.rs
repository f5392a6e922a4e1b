//! Benchmark and oracle checks, one line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdfuzz::abi::{
    wire_decode, wire_encode, ConditionRecord, ExecutionConfig, ExecutionId, ExecutionResult, FillByte, Message,
    Termination, TypeTag,
};
use gdfuzz::fuzz::suite::{render_test, CoverageSet};
use gdfuzz::fuzz::{
    run_fuzzing, serve, Executor, FuzzBudget, FuzzOptions, FuzzOutcome, LocalExecutor, RemoteExecutor, ServeOptions,
    SessionLog,
};
use gdfuzz::generators::{byte_bits, lambda, AnalysisKind, BinaryDescent, Session};
use gdfuzz::minivm::{execute, execute_with_branches, parse_program, Program, VmLimits};
use gdfuzz::strategy::{biased_index, detect_loops_ids, Heads2Bodies};
use gdfuzz::tree::{EdgeLabel, ExecTree, Sample};

const BIN: &str = env!("CARGO_BIN_EXE_gdfuzz");

const SEEDS: u64 = 10;
const MAGIC_MAX_EXECUTIONS: u64 = 5_000;
const MAGIC_MAX_SECONDS: f64 = 5.0;
const XOR_MAX_EXECUTIONS: u64 = 2_000;
const BITSHARE_MAX_EXECUTIONS: u64 = 10;
const LOOP_PATHS: usize = 1_000;
const LOOP_PATH_LEN: usize = 30;
const LOOP_ALPHABET: u32 = 8;
const LAMBDA_SAMPLES: usize = 10_000;
const LAMBDA_REL_TOL: f64 = 1e-9;
const CHI_DRAWS: usize = 100_000;
/// Upper 1% point of the chi-squared distribution with 2 degrees of freedom.
const CHI2_CRIT_DF2_P01: f64 = 9.210;
const DETERMINISM_RUNS: usize = 3;
const DETERMINISM_BUDGET: u64 = 1_500;
const REMOTE_CONFIGS: usize = 100;
const WIRE_MESSAGES: usize = 10_000;
const STEP_BUDGET: u64 = 1_000_000;

const MAGIC: &str = "int main(){ int x = nondet_int(); if (x == 1000000) abort(); return 0; }";
const XOR: &str = "int main(){ char x = nondet_char(); if ((x ^ 0xA5) == 0) abort(); return 0; }";
const SENS: &str = "
int main() {
    char c = __VERIFIER_nondet_char();
    c = c & 7;
    bool bi0 = ((c ^ 7) * (c ^ 1)) != 0;
    if (bi0) return 0;
    bool bi1 = c > 2;
    return 0;
}";
const SWAPPED: &str = "
int main() {
    char x = __VERIFIER_nondet_char() & 15;
    x = ((x & 1) << 3) | (x & 6) | (x & 8) >> 3;
    bool bi = x == 4;
    if (bi) abort();
    return 0;
}";
const TWICE: &str = "
void check(int v) { if (v == 77) abort(); }
int main() {
    int a = nondet_int();
    int b = nondet_int();
    check(a);
    check(b);
    return 0;
}";
const FOUR_WAY: &str = "
int main() {
    int x = nondet_int();
    int y = nondet_int();
    bool b1 = (x == 1);
    bool b2 = (y == 1);
    if (b1) {
        if (b2) return 1; else return 2;
    } else {
        if (b2) return 3; else return 4;
    }
}";
const MIXED: &str = "
int step(int a) { if (a > 3) return a - 1; return a + 2; }
int main() {
    char c = nondet_char();
    short s = nondet_short();
    float g = nondet_float();
    int i = 0;
    while (i < (c & 7)) { i = step(i) + 1; }
    if (g > 1.5) { s = s ^ 0x55; }
    if (s == 1234) abort();
    bool b = nondet_bool();
    if (b) {
        double d = nondet_double();
        if (d < 0.0) return 1;
    }
    return 0;
}";
const FLOATS: &str = "
int main() {
    double a = nondet_double();
    float b = nondet_float();
    if (a * 3.0 - b == 17.25) abort();
    return 0;
}";

type Check = Result<String, String>;

fn program(src: &str) -> Arc<Program> {
    Arc::new(parse_program(src).unwrap_or_else(|e| panic!("benchmark does not parse: {e}")))
}

fn opts(seed: u64, execs: u64) -> FuzzOptions {
    FuzzOptions {
        seed,
        budget: FuzzBudget::executions(execs),
        step_budget: STEP_BUDGET,
        ..FuzzOptions::default()
    }
}

fn fuzz(src: &str, seed: u64, execs: u64) -> FuzzOutcome {
    let mut e = LocalExecutor::new(program(src), STEP_BUDGET);
    run_fuzzing(&mut e, &opts(seed, execs)).expect("local fuzzing does not fail")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// In-process driver for single sessions.
struct Rig {
    prog: Arc<Program>,
    tree: ExecTree,
    iteration: u64,
}

impl Rig {
    fn new(src: &str) -> Self {
        Rig {
            prog: program(src),
            tree: ExecTree::new(),
            iteration: 0,
        }
    }

    fn run(&mut self, input: &[u8]) -> (Rc<Sample>, gdfuzz::tree::MapOutcome) {
        let cfg = ExecutionConfig::default().with_input(input.to_vec());
        let r = execute(&self.prog, &cfg, &VmLimits::for_config(&cfg, STEP_BUDGET));
        self.iteration += 1;
        let s = Rc::new(Sample {
            input: r.bytes_read,
            types: r.type_tags,
            trace: r.trace,
        });
        let out = self.tree.map_trace(Rc::clone(&s), r.termination, self.iteration).unwrap();
        (s, out)
    }

    fn drive(&mut self, s: &mut Session) -> bool {
        while let Some(x) = s.generate_input() {
            let (smp, out) = self.run(&x);
            s.process_results(&mut self.tree, &smp, &out);
            if let Some(g) = s.goal {
                if self.tree.node(s.node).label(g) != EdgeLabel::NotVisited {
                    s.stop();
                    return true;
                }
            }
        }
        false
    }
}

fn crash_input(o: &FuzzOutcome) -> Option<&[u8]> {
    o.suite
        .tests
        .iter()
        .find(|t| t.termination == Termination::Crash)
        .map(|t| t.input.as_slice())
}

fn c1_magic_constant() -> Check {
    let mut worst = 0;
    let mut slowest = 0.0f64;
    for seed in 0..SEEDS {
        let t = Instant::now();
        let o = fuzz(MAGIC, seed, MAGIC_MAX_EXECUTIONS);
        let secs = t.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        ensure(o.suite.coverage().covered_uids == 1, || format!("seed {seed}: comparison not covered"))?;
        ensure(crash_input(&o) == Some(&1_000_000i32.to_le_bytes()[..]), || {
            format!("seed {seed}: no crashing test")
        })?;
        ensure(secs < MAGIC_MAX_SECONDS, || format!("seed {seed}: {secs:.2}s"))?;
        worst = worst.max(o.stats.executions);
    }
    Ok(format!("{SEEDS} seeds, at most {worst} executions, slowest {slowest:.3}s"))
}

/// Sensitive bits at trace index `d` straight from the definition: group all
/// 2^8 one-byte inputs that share the trace prefix by their branching value,
/// and take the bits in which closest pairs of different groups differ.
fn exact_sensitive_bits(src: &str, d: usize, reference: u8) -> BTreeSet<u32> {
    let p = program(src);
    let run = |x: u8| {
        let cfg = ExecutionConfig::default().with_input(vec![x]);
        execute(&p, &cfg, &VmLimits::for_config(&cfg, STEP_BUDGET)).trace
    };
    let base = run(reference);
    let mut groups: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for x in 0..=255u8 {
        let t = run(x);
        let same = t.len() > d
            && (0..=d).all(|k| t[k].id == base[k].id)
            && (0..d).all(|l| t[l].direction == base[l].direction);
        if same {
            groups.entry(t[d].value.to_bits()).or_default().push(x);
        }
    }
    let groups: Vec<Vec<u8>> = groups.into_values().collect();
    let mut bits = BTreeSet::new();
    for (i, a) in groups.iter().enumerate() {
        for b in &groups[i + 1..] {
            let h = |u: u8, v: u8| (u ^ v).count_ones();
            let min = a.iter().flat_map(|&u| b.iter().map(move |&v| h(u, v))).min().unwrap();
            for &u in a {
                for &v in b {
                    if h(u, v) == min {
                        // Bit index 0 is the most significant bit.
                        bits.extend((0..8).filter(|s| (u ^ v) & (0x80 >> s) != 0));
                    }
                }
            }
        }
    }
    bits
}

fn c2_sensitivity() -> Check {
    let mut rig = Rig::new(SENS);
    rig.run(&[0]);
    let mut s = Session::sensitivity(&rig.tree, 0);
    rig.drive(&mut s);
    let raw0 = s.raw_marks().expect("sensitivity session")[0].clone();
    let want0: BTreeSet<u32> = [5, 6, 7].into();
    ensure(raw0 == want0, || format!("bi0 detected {raw0:?}"))?;
    let wide0 = rig.tree.node(0).sbits.clone();
    ensure(wide0 == (0..8).collect(), || format!("bi0 widened to {wide0:?}"))?;
    let exact0 = exact_sensitive_bits(SENS, 0, 0);
    ensure(exact0 == want0, || format!("bi0 by definition {exact0:?}"))?;
    // bi1 is only evaluated on inputs with c & 7 in {1, 7}.
    let exact1 = exact_sensitive_bits(SENS, 1, 1);
    ensure(exact1 == [5, 6].into(), || format!("bi1 by definition {exact1:?}"))?;
    let wide1: BTreeSet<u32> = exact1.iter().flat_map(|&b| byte_bits(b)).collect();
    ensure(wide1 == (0..8).collect(), || format!("bi1 widened to {wide1:?}"))?;
    Ok(format!(
        "bi0 {raw0:?} in {} executions, bi1 {exact1:?}, both widen to the full byte",
        s.executions
    ))
}

fn reached(o: &FuzzOutcome, kind: AnalysisKind) -> Vec<&SessionLog> {
    o.sessions.iter().filter(|s| s.kind == kind && s.reached).collect()
}

fn c3_xor() -> Check {
    let mut worst = 0;
    for seed in 0..SEEDS {
        let o = fuzz(XOR, seed, XOR_MAX_EXECUTIONS);
        ensure(crash_input(&o).is_some(), || format!("seed {seed}: not covered"))?;
        ensure(!reached(&o, AnalysisKind::Minimization).is_empty(), || {
            format!("seed {seed}: not solved by MINIMIZATION: {:?}", o.sessions)
        })?;
        ensure(
            !o.sessions.iter().any(|s| s.kind == AnalysisKind::TypedMinimization),
            || format!("seed {seed}: typed descent was dispatched"),
        )?;
        worst = worst.max(o.stats.executions);
    }
    Ok(format!("{SEEDS} seeds, MINIMIZATION each time, at most {worst} executions"))
}

fn swapped(v: &[bool]) -> f64 {
    let x = v.iter().fold(0u8, |a, &b| (a << 1) | u8::from(b));
    let y = ((x & 1) << 3) | (x & 6) | ((x & 8) >> 3);
    f64::from(y) - 4.0
}

fn c4_stuck_minimum() -> Check {
    // Local minima of the swapped function under single flips.
    let all: Vec<Vec<bool>> = (0..16u8).map(|x| (0..4).map(|i| x & (8 >> i) != 0).collect()).collect();
    let stuck: Vec<&Vec<bool>> = all
        .iter()
        .filter(|v| {
            let f = swapped(v).abs();
            f > 0.0
                && (0..4).all(|i| {
                    let mut w = (*v).clone();
                    w[i] = !w[i];
                    swapped(&w).abs() >= f
                })
        })
        .collect();
    ensure(!stuck.is_empty(), || "no stuck point exists".into())?;
    for v in &stuck {
        let mut d = BinaryDescent::new(vec![(*v).clone()]);
        let mut val = None;
        let mut solved = false;
        while let Some(p) = d.resume(val) {
            let y = swapped(&p).abs();
            solved |= y == 0.0;
            val = Some(y);
        }
        ensure(solved, || format!("descent stays stuck at {v:?}"))?;
    }
    // Binary sessions on the program itself, based at a stuck input with the
    // four low bits as the sensitive ones.
    let base = stuck[0].iter().fold(0u8, |a, &b| (a << 1) | u8::from(b));
    for seed in 0..SEEDS {
        let mut rig = Rig::new(SWAPPED);
        rig.run(&[base]);
        ensure(!rig.tree.is_covered(0), || "base input already covers".into())?;
        rig.tree.node_mut(0).sbits = (4..8).collect();
        let mut b = Session::binary(&rig.tree, 0, seed);
        ensure(rig.drive(&mut b), || format!("seed {seed}: binary session did not escape"))?;
        ensure(rig.tree.is_covered(0), || format!("seed {seed}: not covered"))?;
    }
    for seed in 0..SEEDS {
        let o = fuzz(SWAPPED, seed, MAGIC_MAX_EXECUTIONS);
        ensure(o.suite.coverage().covered_uids == 1, || format!("engine seed {seed}: not covered"))?;
    }
    Ok(format!(
        "{} stuck seeds escaped, {SEEDS} binary sessions and {SEEDS} engine runs covered both directions",
        stuck.len()
    ))
}

fn c5_bitshare() -> Check {
    let mut worst = 0;
    for seed in 0..SEEDS {
        let o = fuzz(TWICE, seed, MAGIC_MAX_EXECUTIONS);
        ensure(o.tree.id_coverage().0 == 2, || format!("seed {seed}: contexts not both covered"))?;
        let first = o
            .sessions
            .iter()
            .find(|s| s.reached)
            .ok_or_else(|| format!("seed {seed}: nothing reached"))?;
        ensure(
            matches!(first.kind, AnalysisKind::TypedMinimization | AnalysisKind::Minimization),
            || format!("seed {seed}: first context solved by {:?}", first.kind),
        )?;
        let bs = reached(&o, AnalysisKind::Bitshare);
        let bs = bs
            .iter()
            .find(|s| s.started_at >= first.started_at + first.executions)
            .ok_or_else(|| format!("seed {seed}: no BITSHARE success: {:?}", o.sessions))?;
        ensure(bs.executions < BITSHARE_MAX_EXECUTIONS, || {
            format!("seed {seed}: bitshare used {}", bs.executions)
        })?;
        worst = worst.max(bs.executions);
    }
    Ok(format!("{SEEDS} seeds, BITSHARE covered the second context in at most {worst} executions"))
}

/// Loop boundaries as (entry, exit, successor) indices, computed by walking
/// the root-first path from its end with an explicit stack.
fn reference_detect_loops(ids: &[ExecutionId]) -> (Vec<(usize, usize, usize)>, Heads2Bodies) {
    let n = ids.len();
    let mut loops: Vec<(usize, usize, usize)> = Vec::new();
    let mut h2b = Heads2Bodies::new();
    // (exit index, successor index, loop slot)
    let mut stack: Vec<(usize, usize, Option<usize>)> = Vec::new();
    for i in (0..n).rev() {
        let succ = if i + 1 < n { i + 1 } else { n - 1 };
        match stack.iter().position(|&(x, _, _)| ids[x] == ids[i]) {
            None => stack.push((i, succ, None)),
            Some(k) => {
                let (x, s, slot) = stack[k];
                match slot {
                    None => {
                        stack[k].2 = Some(loops.len());
                        loops.push((i, x, s));
                    }
                    Some(l) => loops[l].0 = i,
                }
                while stack.len() > k + 1 {
                    let (y, _, _) = stack.pop().unwrap();
                    h2b.entry(ids[x]).or_default().insert(ids[y]);
                }
            }
        }
    }
    for l in &mut loops {
        let head = ids[l.1];
        while l.0 > 0 {
            let parent = ids[l.0 - 1];
            if parent == head || h2b.get(&head).is_some_and(|b| b.contains(&parent)) {
                l.0 -= 1;
            } else {
                break;
            }
        }
    }
    (loops, h2b)
}

fn c6_loop_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut with_loops = 0;
    for case in 0..LOOP_PATHS {
        let len = rng.gen_range(1..=LOOP_PATH_LEN);
        let alphabet = rng.gen_range(1..=LOOP_ALPHABET);
        let ids: Vec<ExecutionId> = (0..len)
            .map(|_| ExecutionId::new(rng.gen_range(1..=alphabet), 0))
            .collect();
        let (got, got_h2b) = detect_loops_ids(&ids);
        let got: Vec<_> = got.iter().map(|l| (l.entry, l.exit, l.succ)).collect();
        let (want, want_h2b) = reference_detect_loops(&ids);
        ensure(got == want && got_h2b == want_h2b, || {
            format!("path {case} {ids:?}: {got:?} vs {want:?}")
        })?;
        with_loops += usize::from(!got.is_empty());
    }
    Ok(format!("{LOOP_PATHS} paths, 0 mismatches ({with_loops} with loops)"))
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn c7_numerics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..LAMBDA_SAMPLES {
        let f: f64 = rng.gen_range(-1e6..1e6);
        let k = rng.gen_range(1..=8);
        let g: Vec<f64> = (0..k).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let norm: f64 = g.iter().map(|x| x * x).sum();
        if norm == 0.0 || f == 0.0 {
            continue;
        }
        let err = (lambda(f, &g) * norm - f.abs()).abs() / f.abs();
        worst = worst.max(err);
    }
    ensure(worst <= LAMBDA_REL_TOL, || format!("lambda relative error {worst:e}"))?;

    let (mut typed, mut binary) = (0, 0);
    for src in [MAGIC, XOR, SWAPPED, TWICE, FLOATS, MIXED] {
        for seed in 0..SEEDS {
            let o = fuzz(src, seed, MAGIC_MAX_EXECUTIONS);
            for s in &o.sessions {
                for d in &s.descents {
                    ensure(strictly_decreasing(d), || format!("{:?} accepted {d:?}", s.kind))?;
                    match s.kind {
                        AnalysisKind::TypedMinimization => typed += 1,
                        AnalysisKind::Minimization => binary += 1,
                        _ => {}
                    }
                }
            }
        }
    }
    // Direct binary descents over random sensitive-bit functions.
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let target: u32 = r.gen_range(0..256);
        let seeds = gdfuzz::generators::binary_seeds(8, &mut r);
        let mut d = BinaryDescent::new(seeds);
        let mut val = None;
        while let Some(p) = d.resume(val) {
            let x = p.iter().fold(0u32, |a, &b| (a << 1) | u32::from(b));
            val = Some((f64::from(x ^ 0x3c) - f64::from(target)).abs());
        }
        for v in d.descents() {
            ensure(strictly_decreasing(v), || format!("binary seed {seed}: {v:?}"))?;
            binary += 1;
        }
    }
    ensure(typed > 0 && binary > 0, || format!("too few descents logged ({typed}, {binary})"))?;
    Ok(format!(
        "lambda worst relative error {worst:.1e}, {typed} typed and {binary} binary descents strictly decreasing"
    ))
}

fn c8_biased_index() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = [0usize; 3];
    for _ in 0..CHI_DRAWS {
        counts[biased_index(3, &mut rng)] += 1;
    }
    let expected = [0.75, 0.1875, 0.0625];
    let chi2: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, p)| {
            let e = p * CHI_DRAWS as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    ensure(chi2 < CHI2_CRIT_DF2_P01, || format!("chi2 {chi2:.3} for {counts:?}"))?;
    Ok(format!("counts {counts:?}, chi2 {chi2:.3} < {CHI2_CRIT_DF2_P01}"))
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "stats.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn c9_determinism() -> Check {
    let runs: Vec<Vec<String>> = (0..DETERMINISM_RUNS)
        .map(|_| fuzz(MIXED, 11, DETERMINISM_BUDGET).suite.tests.iter().map(render_test).collect())
        .collect();
    ensure(runs.windows(2).all(|w| w[0] == w[1]), || "in-process runs differ".into())?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let target = tmp.path().join("mixed.mc");
    fs::write(&target, MIXED).map_err(|e| e.to_string())?;
    let budget = DETERMINISM_BUDGET.to_string();
    let mut snaps = Vec::new();
    for i in 0..DETERMINISM_RUNS {
        let out = tmp.path().join(format!("run{i}"));
        let st = Command::new(BIN)
            .args(["fuzz", "-t"])
            .arg(&target)
            .arg("-o")
            .arg(&out)
            .args(["--seed", "11", "--max-executions", &budget])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(st.status.success(), || String::from_utf8_lossy(&st.stderr).into_owned())?;
        snaps.push(dir_snapshot(&out));
    }
    ensure(snaps.windows(2).all(|w| w[0] == w[1]), || "suites on disk differ".into())?;
    let st = Command::new(BIN)
        .args(["replay", "-t"])
        .arg(&target)
        .arg("-s")
        .arg(tmp.path().join("run0"))
        .output()
        .map_err(|e| e.to_string())?;
    ensure(st.status.success(), || {
        format!("replay exit {:?}: {}", st.status.code(), String::from_utf8_lossy(&st.stderr))
    })?;
    Ok(format!(
        "{DETERMINISM_RUNS} runs byte-identical ({} files, {} tests), replay exit 0",
        snaps[0].len(),
        runs[0].len()
    ))
}

fn random_config(rng: &mut ChaCha8Rng) -> ExecutionConfig {
    let n = rng.gen_range(0..24);
    ExecutionConfig {
        max_trace_length: rng.gen_range(0..64),
        max_stack_size: rng.gen_range(0..6),
        max_input_bytes: rng.gen_range(0..32),
        fill_byte: if rng.gen() { FillByte::ZERO } else { FillByte::ALTERNATING },
        input: (0..n).map(|_| rng.gen()).collect(),
    }
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    if rng.gen_bool(0.3) {
        return Message::Config(random_config(rng));
    }
    let k = rng.gen_range(0..6);
    let type_tags: Vec<TypeTag> = (0..k).map(|_| TypeTag::ALL[rng.gen_range(0..TypeTag::ALL.len())]).collect();
    let width: usize = type_tags.iter().map(|t| t.byte_width()).sum();
    let trace = (0..rng.gen_range(0..10))
        .map(|_| {
            let value = match rng.gen_range(0..10) {
                0 => f64::INFINITY,
                1 => f64::NEG_INFINITY,
                2 => f64::NAN,
                3 => 0.0,
                _ => rng.gen_range(-1e12..1e12),
            };
            ConditionRecord::new(ExecutionId::new(rng.gen(), rng.gen()), rng.gen(), value, rng.gen(), rng.gen())
        })
        .collect();
    Message::Result(ExecutionResult {
        termination: Termination::ALL[rng.gen_range(0..4)],
        bytes_read: (0..width).map(|_| rng.gen()).collect(),
        type_tags,
        trace,
    })
}

fn c10_protocol() -> Check {
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let p = program(MIXED);
    let so = ServeOptions {
        step_budget: STEP_BUDGET,
        ..ServeOptions::default()
    };
    let server = {
        let p = Arc::clone(&p);
        thread::spawn(move || serve(listener, p, so, Some(1)))
    };
    let mut remote = RemoteExecutor::connect(addr, Duration::from_secs(10)).map_err(|e| e.to_string())?;
    let mut local = LocalExecutor::new(p, STEP_BUDGET);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut kinds = BTreeSet::new();
    for i in 0..REMOTE_CONFIGS {
        let cfg = random_config(&mut rng);
        let r = remote.execute(&cfg).map_err(|e| format!("config {i}: {e}"))?;
        let l = local.execute(&cfg).map_err(|e| e.to_string())?;
        let (rb, lb) = (wire_encode(&Message::Result(r)), wire_encode(&Message::Result(l)));
        ensure(rb == lb, || format!("config {i} differs: {cfg:?}"))?;
        if let Ok(Message::Result(r)) = wire_decode(&rb) {
            kinds.insert(r.termination.name());
        }
    }
    drop(remote);
    server.join().map_err(|_| "server panicked".to_string())?.map_err(|e| e.to_string())?;

    for i in 0..WIRE_MESSAGES {
        let m = random_message(&mut rng);
        let bytes = wire_encode(&m);
        let back = wire_decode(&bytes).map_err(|e| format!("message {i}: {e}"))?;
        ensure(wire_encode(&back) == bytes, || format!("message {i} re-encodes differently"))?;
        if let (Message::Config(a), Message::Config(b)) = (&m, &back) {
            ensure(a == b, || format!("config {i} changed"))?;
        }
    }
    Ok(format!(
        "{REMOTE_CONFIGS} configs identical remote/local ({kinds:?}), {WIRE_MESSAGES} messages round-trip"
    ))
}

fn c11_coverage_definition() -> Check {
    let p = program(FOUR_WAY);
    let mut cov = CoverageSet::default();
    let mut branches: BTreeMap<u32, [bool; 2]> = BTreeMap::new();
    for (x, y) in [(0i32, 0i32), (1, 1)] {
        let input = [x.to_le_bytes(), y.to_le_bytes()].concat();
        let cfg = ExecutionConfig::default().with_input(input);
        let (r, ev) = execute_with_branches(&p, &cfg, &VmLimits::for_config(&cfg, STEP_BUDGET));
        cov.add(&r.trace);
        for e in ev {
            branches.entry(e.branch).or_default()[usize::from(e.taken)] = true;
        }
    }
    let c = cov.summary();
    ensure(c.covered_uids == 2 && c.discovered_uids == 2, || format!("boolean coverage {c:?}"))?;
    let both = branches.values().filter(|d| d[0] && d[1]).count();
    ensure(both == 1 && p.branch_count() == 3, || {
        format!("{both} of {} ifs branch-covered", p.branch_count())
    })?;
    Ok(format!(
        "2/2 Boolean instructions covered, {both}/{} ifs branch-covered",
        p.branch_count()
    ))
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 11] = [
        ("magic constant", c1_magic_constant),
        ("sensitivity ground truth", c2_sensitivity),
        ("xor via binary descent", c3_xor),
        ("stuck local minimum", c4_stuck_minimum),
        ("bitshare second context", c5_bitshare),
        ("loop detection oracle", c6_loop_oracle),
        ("numeric checks", c7_numerics),
        ("biased index distribution", c8_biased_index),
        ("determinism and replay", c9_determinism),
        ("protocol equivalence", c10_protocol),
        ("coverage definition", c11_coverage_definition),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS  {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

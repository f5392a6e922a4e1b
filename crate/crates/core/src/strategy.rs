//! Which node to work on next, and with which analysis.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::Rng;

use crate::abi::ExecutionId;
use crate::generators::{identify_typed_variables, AnalysisKind};
use crate::tree::{ExecTree, NodeId, TreeNode, ROOT};

/// Loop heads mapped to the instructions seen inside their bodies.
pub type Heads2Bodies = BTreeMap<ExecutionId, BTreeSet<ExecutionId>>;

/// Entry, exit and the exit's successor, as indices into the scanned path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopIndices {
    pub entry: usize,
    pub exit: usize,
    pub succ: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopBoundary {
    pub entry: NodeId,
    pub exit: NodeId,
    pub succ: NodeId,
}

/// A minimization that failed on `node` during iteration `recorded_at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryRecord {
    pub node: NodeId,
    pub recorded_at: u64,
}

const BUCKETS: usize = 11;

/// Index of the power of two in 2^0..2^10 nearest to `v`; ties go low.
fn nearest_pow2(v: f64) -> usize {
    let mut best = 0;
    for i in 1..BUCKETS {
        if (v - (1u64 << i) as f64).abs() < (v - (1u64 << best) as f64).abs() {
            best = i;
        }
    }
    best
}

/// Distance of the node's size class from the class of half the largest input.
fn center_distance(nbytes: u32, max_bytes: u32) -> u64 {
    let m = 1u64 << nearest_pow2(f64::from(max_bytes) / 2.0);
    let p = 1u64 << nearest_pow2(f64::from(nbytes));
    m.abs_diff(p)
}

/// True iff `p` comes strictly before `q` in S or U.
pub fn order_su(p: &TreeNode, q: &TreeNode, max_bytes: u32) -> bool {
    if p.sa != q.sa {
        return p.sa;
    }
    if p.sbits.len() != q.sbits.len() {
        return p.sbits.len() < q.sbits.len();
    }
    let (cp, cq) = (center_distance(p.nbytes(), max_bytes), center_distance(q.nbytes(), max_bytes));
    if cp != cq {
        return cp < cq;
    }
    if p.nbytes() != q.nbytes() {
        return p.nbytes() < q.nbytes();
    }
    if p.depth != q.depth {
        return p.depth < q.depth;
    }
    p.height > q.height
}

/// True iff `p` comes strictly before `q` inside one class of IID pivots.
pub fn order_iid(p: &TreeNode, q: &TreeNode, max_bytes: u32) -> bool {
    let (fp, fq) = (p.f().abs(), q.f().abs());
    if fp != fq {
        return fp < fq;
    }
    let (cp, cq) = (center_distance(p.nbytes(), max_bytes), center_distance(q.nbytes(), max_bytes));
    if cp != cq {
        return cp < cq;
    }
    if p.nbytes() != q.nbytes() {
        return p.nbytes() < q.nbytes();
    }
    p.depth < q.depth
}

fn as_ordering(less: impl Fn(NodeId, NodeId) -> bool, a: NodeId, b: NodeId) -> Ordering {
    if less(a, b) {
        Ordering::Less
    } else if less(b, a) {
        Ordering::Greater
    } else {
        Ordering::Equal
    }
}

/// Index `i < n - 1` with probability 0.75 * 0.25^i; the last index takes
/// what is left.
pub fn biased_index(n: usize, rng: &mut impl Rng) -> usize {
    assert!(n >= 1, "biased_index needs a non-empty sequence");
    for i in 0..n - 1 {
        if rng.gen_bool(0.75) {
            return i;
        }
    }
    n - 1
}

/// Loop boundaries along a root-to-node sequence of execution ids, found by
/// scanning from the deepest element back to the root.
pub fn detect_loops_ids(ids: &[ExecutionId]) -> (Vec<LoopIndices>, Heads2Bodies) {
    let n = ids.len();
    let mut loops: Vec<LoopIndices> = Vec::new();
    let mut heads2bodies = Heads2Bodies::new();
    // (exit, successor, index into loops)
    let mut stack: Vec<(usize, usize, Option<usize>)> = Vec::new();
    let mut lookup: HashMap<ExecutionId, usize> = HashMap::new();
    for i in (0..n).rev() {
        let j = (i + 1).min(n - 1);
        let Some(&k) = lookup.get(&ids[i]) else {
            lookup.insert(ids[i], stack.len());
            stack.push((i, j, None));
            continue;
        };
        match stack[k].2 {
            None => {
                stack[k].2 = Some(loops.len());
                loops.push(LoopIndices {
                    entry: i,
                    exit: stack[k].0,
                    succ: stack[k].1,
                });
            }
            Some(li) => loops[li].entry = i,
        }
        while stack.len() > k + 1 {
            let (x, _, _) = stack.pop().expect("stack longer than k + 1");
            heads2bodies.entry(ids[stack[k].0]).or_default().insert(ids[x]);
            lookup.remove(&ids[x]);
        }
    }
    for l in &mut loops {
        let head = ids[l.exit];
        while l.entry > 0 {
            let parent = ids[l.entry - 1];
            let in_body = heads2bodies.get(&head).is_some_and(|b| b.contains(&parent));
            if parent != head && !in_body {
                break;
            }
            l.entry -= 1;
        }
    }
    (loops, heads2bodies)
}

/// [`detect_loops_ids`] over a tree path (root first).
pub fn detect_loops(tree: &ExecTree, path: &[NodeId]) -> (Vec<LoopBoundary>, Heads2Bodies) {
    let ids: Vec<ExecutionId> = path.iter().map(|&n| tree.node(n).id).collect();
    let (loops, h2b) = detect_loops_ids(&ids);
    let loops = loops
        .into_iter()
        .map(|l| LoopBoundary {
            entry: path[l.entry],
            exit: path[l.exit],
            succ: path[l.succ],
        })
        .collect();
    (loops, h2b)
}

/// The four collections of primary targets.
#[derive(Debug, Clone, Default)]
pub struct TargetSets {
    pub h: BTreeSet<NodeId>,
    pub s: Vec<NodeId>,
    pub u: Vec<NodeId>,
    pub tw: Vec<NodeId>,
    s_in: HashSet<NodeId>,
    u_in: HashSet<NodeId>,
    tw_in: HashSet<NodeId>,
}

/// Uncovered IID nodes partitioned by execution id.
#[derive(Debug, Clone, Default)]
pub struct IidPivots {
    pub partition: BTreeMap<ExecutionId, Vec<NodeId>>,
}

impl IidPivots {
    pub fn is_empty(&self) -> bool {
        self.partition.is_empty()
    }

    pub fn len(&self) -> usize {
        self.partition.values().map(Vec::len).sum()
    }

    pub fn contains_id(&self, id: ExecutionId) -> bool {
        self.partition.contains_key(&id)
    }

    pub fn contains(&self, tree: &ExecTree, n: NodeId) -> bool {
        self.partition
            .get(&tree.node(n).id)
            .is_some_and(|c| c.contains(&n))
    }

    /// Adds `n` if it is an uncovered IID node.
    pub fn offer(&mut self, tree: &ExecTree, n: NodeId) -> bool {
        let node = tree.node(n);
        if !node.is_iid() || tree.is_covered(n) {
            return false;
        }
        let class = self.partition.entry(node.id).or_default();
        if class.contains(&n) {
            return false;
        }
        class.push(n);
        true
    }

    /// Drops pivots whose instruction got covered.
    pub fn prune(&mut self, tree: &ExecTree) {
        self.partition.retain(|&id, _| !tree.id_covered(id));
    }
}

fn in_h(tree: &ExecTree, n: NodeId) -> bool {
    tree.node(n).is_open() && !tree.is_covered(n)
}

fn in_s(tree: &ExecTree, n: NodeId) -> bool {
    let v = tree.node(n);
    v.is_open() && v.sa && !v.sbits.is_empty() && !tree.is_covered(n)
}

fn in_u(tree: &ExecTree, pivots: &IidPivots, n: NodeId) -> bool {
    let v = tree.node(n);
    v.is_open() && !v.sa && !tree.is_covered(n) && !pivots.contains_id(v.id)
}

fn in_tw(tree: &ExecTree, pivots: &IidPivots, n: NodeId) -> bool {
    let v = tree.node(n);
    if !v.is_open() || v.sa || tree.is_covered(n) {
        return false;
    }
    pivots.partition.get(&v.id).is_some_and(|c| {
        c.iter()
            .any(|&m| m != n && v.f().abs() < tree.node(m).f().abs())
    })
}

impl TargetSets {
    pub fn is_empty(&self) -> bool {
        self.h.is_empty() && self.s.is_empty() && self.u.is_empty() && self.tw.is_empty()
    }

    /// Inserts `n` into S, U and the twins wherever it qualifies.
    pub fn consider(&mut self, tree: &ExecTree, pivots: &IidPivots, n: NodeId) {
        if in_s(tree, n) && self.s_in.insert(n) {
            self.s.push(n);
        }
        if in_u(tree, pivots, n) && self.u_in.insert(n) {
            self.u.push(n);
        }
        if in_tw(tree, pivots, n) && self.tw_in.insert(n) {
            self.tw.push(n);
        }
    }

    /// Removes every member that no longer satisfies its set's predicate.
    pub fn prune(&mut self, tree: &ExecTree, pivots: &IidPivots) {
        self.h.retain(|&n| in_h(tree, n));
        self.s.retain(|&n| in_s(tree, n));
        self.u.retain(|&n| in_u(tree, pivots, n));
        self.tw.retain(|&n| in_tw(tree, pivots, n));
        self.s_in = self.s.iter().copied().collect();
        self.u_in = self.u.iter().copied().collect();
        self.tw_in = self.tw.iter().copied().collect();
    }

    fn take_s(&mut self, n: NodeId) {
        self.s.retain(|&m| m != n);
        self.s_in.remove(&n);
    }

    fn take_u(&mut self, n: NodeId) {
        self.u.retain(|&m| m != n);
        self.u_in.remove(&n);
    }
}

/// Smallest element under `order_su`; the earliest inserted wins ties.
fn smallest(tree: &ExecTree, set: &[NodeId]) -> Option<NodeId> {
    let max = tree.max_nbytes();
    let mut it = set.iter().copied();
    let mut best = it.next()?;
    for n in it {
        if order_su(tree.node(n), tree.node(best), max) {
            best = n;
        }
    }
    Some(best)
}

/// Buckets the open uncovered head nodes of `path` by size and adds the
/// smallest of each bucket to H. Returns the nodes added.
pub fn detect_loop_heads(
    tree: &ExecTree,
    path: &[NodeId],
    heads2bodies: &Heads2Bodies,
    sets: &mut TargetSets,
) -> Vec<NodeId> {
    let mut w: [Option<NodeId>; BUCKETS] = [None; BUCKETS];
    for &n in path {
        let v = tree.node(n);
        if !heads2bodies.contains_key(&v.id) || !in_h(tree, n) {
            continue;
        }
        let slot = &mut w[nearest_pow2(f64::from(v.nbytes()))];
        let better = slot.is_none_or(|m| {
            let o = tree.node(m);
            (v.nbytes(), v.depth) < (o.nbytes(), o.depth)
        });
        if better {
            *slot = Some(n);
        }
    }
    w.into_iter()
        .flatten()
        .filter(|&n| sets.h.insert(n))
        .collect()
}

fn scan_loops(tree: &mut ExecTree, sets: &mut TargetSets, n: NodeId) {
    let path = tree.path(n);
    let (_, h2b) = detect_loops(tree, &path);
    detect_loop_heads(tree, &path, &h2b, sets);
    tree.node_mut(n).loops_scanned = true;
}

/// Next primary target, scanning the chosen node's path for loop heads the
/// first time it comes up.
pub fn select_primary_target(tree: &mut ExecTree, sets: &mut TargetSets, rng: &mut impl Rng) -> Option<NodeId> {
    loop {
        if !sets.h.is_empty() {
            let i = rng.gen_range(0..sets.h.len());
            let n = *sets.h.iter().nth(i).expect("index within H");
            sets.h.remove(&n);
            return Some(n);
        }
        let (n, from) = if let Some(n) = smallest(tree, &sets.s) {
            (n, 0)
        } else if let Some(n) = smallest(tree, &sets.u) {
            (n, 1)
        } else if let Some(&n) = sets.tw.first() {
            (n, 2)
        } else {
            return None;
        };
        if !tree.node(n).loops_scanned {
            scan_loops(tree, sets, n);
            continue;
        }
        match from {
            0 => sets.take_s(n),
            1 => sets.take_u(n),
            _ => {
                sets.tw.remove(0);
                sets.tw_in.remove(&n);
            }
        }
        return Some(n);
    }
}

/// Analysis to run on `n`. A node without sensitivity results hands the
/// session to its deepest descendant that has read no more input.
pub fn choose_analysis(tree: &ExecTree, mut n: NodeId) -> (AnalysisKind, NodeId) {
    let v = tree.node(n);
    if !v.sa {
        loop {
            let cur = tree.node(n);
            let same = |b: bool| {
                cur.succ(b)
                    .filter(|&c| tree.node(c).nbytes() == cur.nbytes())
            };
            n = match (same(false), same(true)) {
                (Some(a), Some(b)) => {
                    if tree.node(a).height >= tree.node(b).height {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => break,
            };
        }
        return (AnalysisKind::Sensitivity, n);
    }
    if !v.ba {
        return (AnalysisKind::Bitshare, n);
    }
    if !v.xor() && identify_typed_variables(v.best_x(), v.best_t(), &v.sbits).is_some() {
        return (AnalysisKind::TypedMinimization, n);
    }
    (AnalysisKind::Minimization, n)
}

/// Average of the values extrapolated to |f| = 0 along the line through
/// each point and the first one. Points are `(|f|, F)` sorted by `|f|`.
pub fn compute_direction_probability(points: &[(f64, f64)], in_loop_body: bool) -> f64 {
    let Some(&(f0, p0)) = points.first() else {
        return 0.5;
    };
    let mut vals = Vec::new();
    for &(fi, pi) in points {
        let den = f0 - fi;
        if den != 0.0 {
            let t = -fi / den;
            vals.push(pi + t * (p0 - pi));
        }
    }
    if vals.is_empty() {
        vals.push(p0);
    }
    if in_loop_body {
        vals.push(0.5);
    }
    let avg = vals.iter().sum::<f64>() / vals.len() as f64;
    if avg.is_nan() {
        0.5
    } else {
        avg.clamp(0.0, 1.0)
    }
}

/// Source of the thresholds the walk compares against.
#[derive(Debug, Clone, PartialEq)]
pub enum WalkGen {
    Uniform,
    /// Repeats `first` copies of `lead`, then `second` of the other digit.
    Cycle { lead: f64, first: u64, second: u64, pos: u64 },
}

impl WalkGen {
    pub fn cycle(ones_first: bool, k: u64, p: f64) -> WalkGen {
        let ones = ((k as f64) * p).round().clamp(0.0, k as f64) as u64;
        let (lead, first, second) = if ones_first {
            (1.0, ones, k - ones)
        } else {
            (0.0, k - ones, ones)
        };
        if first + second == 0 {
            return WalkGen::Uniform;
        }
        WalkGen::Cycle { lead, first, second, pos: 0 }
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> f64 {
        match self {
            WalkGen::Uniform => rng.gen::<f64>(),
            WalkGen::Cycle { lead, first, second, pos } => {
                let v = if *pos < *first { *lead } else { 1.0 - *lead };
                *pos = (*pos + 1) % (*first + *second);
                v
            }
        }
    }
}

/// Per-uid counts of false and true continuations along a path.
fn direction_counts(tree: &ExecTree, path: &[NodeId]) -> BTreeMap<u32, (u64, u64)> {
    let mut m: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for w in path.windows(2) {
        let v = tree.node(w[0]);
        let e = m.entry(v.id.uid).or_default();
        if v.succ(true) == Some(w[1]) {
            e.1 += 1;
        } else {
            e.0 += 1;
        }
    }
    m
}

/// Direction probabilities and threshold generators built from one class.
#[derive(Debug, Clone, Default)]
pub struct WalkModel {
    pub f: BTreeMap<u32, f64>,
    pub g: BTreeMap<u32, WalkGen>,
}

/// Builds F and G from the pivots of `class` that read as many bytes as
/// `rep`.
pub fn build_walk_model(tree: &ExecTree, class: &[NodeId], rep: NodeId, rng: &mut impl Rng) -> WalkModel {
    let nb = tree.node(rep).nbytes();
    let mut cp: Vec<NodeId> = class
        .iter()
        .copied()
        .filter(|&n| tree.node(n).nbytes() == nb)
        .collect();
    cp.sort_by(|&a, &b| tree.node(a).f().abs().total_cmp(&tree.node(b).f().abs()));
    let mut counts = Vec::new();
    let mut bodies: BTreeSet<u32> = BTreeSet::new();
    for &c in &cp {
        let path = tree.path(c);
        counts.push(direction_counts(tree, &path));
        let (_, h2b) = detect_loops(tree, &path);
        bodies.extend(h2b.values().flatten().map(|id| id.uid));
    }
    let uids: BTreeSet<u32> = counts.iter().flat_map(|m| m.keys().copied()).collect();
    let mut model = WalkModel::default();
    for uid in uids {
        let mut points = Vec::new();
        let mut k = 0;
        for (i, m) in counts.iter().enumerate() {
            if let Some(&(nf, nt)) = m.get(&uid) {
                points.push((tree.node(cp[i]).f().abs(), nf as f64 / (nf + nt) as f64));
                k += nf + nt;
            }
        }
        let in_body = bodies.contains(&uid);
        let p = compute_direction_probability(&points, in_body);
        let g = if in_body {
            match rng.gen_range(0..3) {
                0 => WalkGen::Uniform,
                1 => WalkGen::cycle(true, k, p),
                _ => WalkGen::cycle(false, k, p),
            }
        } else {
            WalkGen::Uniform
        };
        model.f.insert(uid, p);
        model.g.insert(uid, g);
    }
    model
}

/// Walks down from `start` and returns the first open node whose preferred
/// successor is missing or closed.
pub fn monte_carlo_walk(tree: &ExecTree, start: NodeId, model: &mut WalkModel, rng: &mut impl Rng) -> Option<NodeId> {
    let mut n = start;
    loop {
        let v = tree.node(n);
        let uid = v.id.uid;
        let f = model.f.get(&uid).copied().unwrap_or(0.5);
        let g = match model.g.get_mut(&uid) {
            Some(g) => g.next(rng),
            None => rng.gen::<f64>(),
        };
        let b = f < g;
        let usable = |c: Option<NodeId>| c.filter(|&c| !tree.node(c).closed);
        if let Some(c) = usable(v.succ(b)) {
            n = c;
            continue;
        }
        if v.is_open() {
            return Some(n);
        }
        n = usable(v.succ(!b))?;
    }
}

/// Picks a pivot and walks from a loop entry near it towards an open node.
pub fn monte_carlo_select(tree: &ExecTree, pivots: &IidPivots, rng: &mut impl Rng) -> Option<NodeId> {
    if pivots.is_empty() || tree.is_empty() || tree.node(ROOT).closed {
        return None;
    }
    let ci = rng.gen_range(0..pivots.partition.len());
    let mut class = pivots.partition.values().nth(ci).expect("class index").clone();
    let max = tree.max_nbytes();
    class.sort_by(|&a, &b| as_ordering(|x, y| order_iid(tree.node(x), tree.node(y), max), a, b));
    let rep = class[biased_index(class.len(), rng)];
    let path = tree.path(rep);
    let (loops, _) = detect_loops(tree, &path);
    let mut entries: Vec<u32> = loops.iter().map(|l| tree.node(l.entry).depth).collect();
    entries.sort_by(|a, b| b.cmp(a));
    let mut k = if entries.is_empty() {
        0
    } else {
        entries[biased_index(entries.len(), rng)] as usize
    };
    while tree.node(*path.get(k)?).closed {
        k += 1;
    }
    let mut model = build_walk_model(tree, &class, rep, rng);
    monte_carlo_walk(tree, path[k], &mut model, rng)
}

/// Reopens recorded nodes whose best input changed since their minimization
/// failed. Used records are dropped; the rest are kept for later.
pub fn recover_nodes(
    records: &mut Vec<RecoveryRecord>,
    tree: &mut ExecTree,
    sets: &mut TargetSets,
    pivots: &IidPivots,
) -> usize {
    let mut count = 0;
    records.retain(|r| {
        if tree.is_covered(r.node) {
            return false;
        }
        if r.recorded_at >= tree.node(r.node).fn_iter {
            return true;
        }
        let v = tree.node_mut(r.node);
        v.sa = false;
        v.ba = false;
        v.ma = false;
        tree.reopen(r.node);
        sets.consider(tree, pivots, r.node);
        count += 1;
        false
    });
    count
}

/// Everything the selection policy keeps between sessions.
#[derive(Debug, Clone, Default)]
pub struct Selector {
    pub sets: TargetSets,
    pub pivots: IidPivots,
    pub records: Vec<RecoveryRecord>,
    pub recoveries: u64,
}

impl Selector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Offers freshly created nodes to the target sets.
    pub fn nodes_created(&mut self, tree: &ExecTree, created: &[NodeId]) {
        for &n in created {
            self.sets.consider(tree, &self.pivots, n);
        }
    }

    /// After sensitivity over `path`: new pivots and new sensitive targets.
    pub fn sensitivity_done(&mut self, tree: &ExecTree, path: &[NodeId]) {
        for &n in path {
            self.pivots.offer(tree, n);
        }
        for &n in path {
            self.sets.consider(tree, &self.pivots, n);
        }
    }

    /// After any other session: the node goes back into the sets it still
    /// qualifies for, so its remaining analyses stay reachable.
    pub fn session_done(&mut self, tree: &ExecTree, node: NodeId) {
        self.sets.consider(tree, &self.pivots, node);
    }

    pub fn record_failure(&mut self, node: NodeId, iteration: u64) {
        self.records.push(RecoveryRecord {
            node,
            recorded_at: iteration,
        });
    }

    pub fn prune(&mut self, tree: &ExecTree) {
        self.pivots.prune(tree);
        self.sets.prune(tree, &self.pivots);
    }

    /// The next (analysis, node) pair. `None` means the loop should stop:
    /// nothing is selectable even after recovery.
    pub fn select(&mut self, tree: &mut ExecTree, rng: &mut impl Rng) -> Option<(AnalysisKind, NodeId)> {
        loop {
            let node = match select_primary_target(tree, &mut self.sets, rng) {
                Some(n) => Some(n),
                None => monte_carlo_select(tree, &self.pivots, rng),
            };
            if let Some(n) = node {
                return Some(choose_analysis(tree, n));
            }
            let reopened = recover_nodes(&mut self.records, tree, &mut self.sets, &self.pivots);
            if reopened == 0 {
                return None;
            }
            self.recoveries += reopened as u64;
        }
    }
}

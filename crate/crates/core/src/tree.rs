//! The execution tree: every accepted trace is a walk from the root, one node
//! per condition record.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::rc::Rc;

use thiserror::Error;

use crate::abi::{ConditionRecord, ExecutionId, Termination, TypeTag};

pub type NodeId = usize;
pub const ROOT: NodeId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeLabel {
    NotVisited,
    EndExceptional,
    EndNormal,
    Visited,
}

impl EdgeLabel {
    fn short(self) -> &'static str {
        match self {
            EdgeLabel::NotVisited => "N",
            EdgeLabel::EndExceptional => "X",
            EdgeLabel::EndNormal => "E",
            EdgeLabel::Visited => "V",
        }
    }

    /// Label put on the last edge of a trace ending with `t`.
    pub fn terminal(t: Termination) -> EdgeLabel {
        match t {
            Termination::Crash => EdgeLabel::EndExceptional,
            _ => EdgeLabel::EndNormal,
        }
    }
}

/// One accepted execution: the input as the target consumed it, its types
/// and its trace. Shared by every node that keeps it as its best triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<u8>,
    pub types: Vec<TypeTag>,
    pub trace: Vec<ConditionRecord>,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: ExecutionId,
    pub parent: Option<NodeId>,
    pub successor: [Option<NodeId>; 2],
    pub label: [EdgeLabel; 2],
    pub depth: u32,
    best: Rc<Sample>,
    pub best_w: f64,
    /// Iteration in which the best triple was last replaced.
    pub fn_iter: u64,
    pub sbits: BTreeSet<u32>,
    pub sa: bool,
    pub ba: bool,
    pub ma: bool,
    pub sn: u64,
    pub bn: u64,
    pub mn: u64,
    pub height: u32,
    pub closed: bool,
    /// Loop heads were already looked for along the path to this node.
    pub loops_scanned: bool,
}

fn side(b: bool) -> usize {
    usize::from(b)
}

impl TreeNode {
    pub fn best(&self) -> &Rc<Sample> {
        &self.best
    }

    pub fn best_x(&self) -> &[u8] {
        &self.best.input
    }

    pub fn best_t(&self) -> &[TypeTag] {
        &self.best.types
    }

    pub fn best_trace(&self) -> &[ConditionRecord] {
        &self.best.trace
    }

    pub fn record(&self) -> &ConditionRecord {
        &self.best.trace[self.depth as usize]
    }

    pub fn f(&self) -> f64 {
        self.record().value
    }

    pub fn direction(&self) -> bool {
        self.record().direction
    }

    pub fn xor(&self) -> bool {
        self.record().xor
    }

    pub fn nbytes(&self) -> u32 {
        self.record().nbytes
    }

    pub fn succ(&self, b: bool) -> Option<NodeId> {
        self.successor[side(b)]
    }

    pub fn label(&self, b: bool) -> EdgeLabel {
        self.label[side(b)]
    }

    pub fn is_did(&self) -> bool {
        self.sa && !self.sbits.is_empty()
    }

    pub fn is_iid(&self) -> bool {
        self.sa && self.sbits.is_empty()
    }

    pub fn is_open(&self) -> bool {
        let missing = self.label.contains(&EdgeLabel::NotVisited);
        missing && (!self.sa || (!self.sbits.is_empty() && (!self.ba || !self.ma)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace diverges from the tree at record {index}: expected {expected}, got {found}")]
pub struct TreeError {
    pub index: usize,
    pub expected: ExecutionId,
    pub found: ExecutionId,
}

/// What one trace did to the tree.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MapOutcome {
    /// Node of every record, in trace order.
    pub path: Vec<NodeId>,
    pub created: Vec<NodeId>,
    /// Nodes whose best triple was replaced (includes created nodes).
    pub improved: Vec<NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct ExecTree {
    nodes: Vec<TreeNode>,
    id_dirs: HashMap<ExecutionId, [bool; 2]>,
    uid_dirs: HashMap<u32, [bool; 2]>,
    max_nbytes: u32,
}

/// Sum of squared branching values over `trace[0..=depth]`.
pub fn w_metric(trace: &[ConditionRecord], depth: usize) -> f64 {
    trace[..=depth].iter().map(|r| r.value * r.value).sum()
}

impl ExecTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> Option<NodeId> {
        (!self.nodes.is_empty()).then_some(ROOT)
    }

    pub fn node(&self, n: NodeId) -> &TreeNode {
        &self.nodes[n]
    }

    pub fn node_mut(&mut self, n: NodeId) -> &mut TreeNode {
        &mut self.nodes[n]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &TreeNode)> {
        self.nodes.iter().enumerate()
    }

    /// Largest `nbytes` of any node.
    pub fn max_nbytes(&self) -> u32 {
        self.max_nbytes
    }

    /// Root-to-`n` node sequence.
    pub fn path(&self, n: NodeId) -> Vec<NodeId> {
        let mut p = vec![n];
        let mut cur = n;
        while let Some(up) = self.nodes[cur].parent {
            p.push(up);
            cur = up;
        }
        p.reverse();
        p
    }

    /// Both directions were seen for this execution id somewhere.
    pub fn id_covered(&self, id: ExecutionId) -> bool {
        self.id_dirs.get(&id).is_some_and(|d| d[0] && d[1])
    }

    pub fn is_covered(&self, n: NodeId) -> bool {
        self.id_covered(self.nodes[n].id)
    }

    pub fn uid_covered(&self, uid: u32) -> bool {
        self.uid_dirs.get(&uid).is_some_and(|d| d[0] && d[1])
    }

    pub fn seen_uid_direction(&self, uid: u32, b: bool) -> bool {
        self.uid_dirs.get(&uid).is_some_and(|d| d[side(b)])
    }

    /// (covered, discovered) counts over uids.
    pub fn uid_coverage(&self) -> (usize, usize) {
        let c = self.uid_dirs.values().filter(|d| d[0] && d[1]).count();
        (c, self.uid_dirs.len())
    }

    /// (covered, discovered) counts over execution ids.
    pub fn id_coverage(&self) -> (usize, usize) {
        let c = self.id_dirs.values().filter(|d| d[0] && d[1]).count();
        (c, self.id_dirs.len())
    }

    /// Node the trace prefix `trace[..=k]` leads to, if it exists in the tree.
    pub fn locate(&self, trace: &[ConditionRecord]) -> Option<NodeId> {
        let mut cur = self.root()?;
        for (i, r) in trace.iter().enumerate() {
            if self.nodes[cur].id != r.id {
                return None;
            }
            if i + 1 == trace.len() {
                return Some(cur);
            }
            cur = self.nodes[cur].succ(r.direction)?;
        }
        None
    }

    pub fn map_trace(
        &mut self,
        sample: Rc<Sample>,
        termination: Termination,
        iteration: u64,
    ) -> Result<MapOutcome, TreeError> {
        let trace = &sample.trace;
        let mut out = MapOutcome::default();
        if trace.is_empty() {
            return Ok(out);
        }
        // Check for divergence before touching anything.
        let mut cur = self.root();
        for (i, r) in trace.iter().enumerate() {
            let Some(n) = cur else { break };
            if self.nodes[n].id != r.id {
                return Err(TreeError {
                    index: i,
                    expected: self.nodes[n].id,
                    found: r.id,
                });
            }
            cur = self.nodes[n].succ(r.direction);
        }

        let last = trace.len() - 1;
        let mut w = 0.0;
        let mut parent: Option<NodeId> = None;
        for (i, r) in trace.iter().enumerate() {
            w += r.value * r.value;
            let n = match parent {
                None if self.nodes.is_empty() => self.push(None, i, &sample, iteration, &mut out),
                None => ROOT,
                Some(p) => {
                    let d = side(trace[i - 1].direction);
                    match self.nodes[p].successor[d] {
                        Some(c) => c,
                        None => {
                            let c = self.push(Some(p), i, &sample, iteration, &mut out);
                            self.nodes[p].successor[d] = Some(c);
                            c
                        }
                    }
                }
            };
            out.path.push(n);
            let b = side(r.direction);
            let node = &mut self.nodes[n];
            let lab = if i < last {
                EdgeLabel::Visited
            } else {
                EdgeLabel::terminal(termination)
            };
            node.label[b] = node.label[b].max(lab);
            node.height = node.height.max(last as u32);
            if w < node.best_w && !Rc::ptr_eq(&node.best, &sample) {
                node.best = Rc::clone(&sample);
                node.best_w = w;
                node.fn_iter = iteration;
                out.improved.push(n);
            }
            self.id_dirs.entry(r.id).or_default()[b] = true;
            self.uid_dirs.entry(r.id.uid).or_default()[b] = true;
            self.max_nbytes = self.max_nbytes.max(r.nbytes);
            parent = Some(n);
        }
        Ok(out)
    }

    fn push(
        &mut self,
        parent: Option<NodeId>,
        i: usize,
        sample: &Rc<Sample>,
        iteration: u64,
        out: &mut MapOutcome,
    ) -> NodeId {
        let r = &sample.trace[i];
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id: r.id,
            parent,
            successor: [None, None],
            label: [EdgeLabel::NotVisited; 2],
            depth: i as u32,
            best: Rc::clone(sample),
            best_w: w_metric(&sample.trace, i),
            fn_iter: iteration,
            sbits: BTreeSet::new(),
            sa: false,
            ba: false,
            ma: false,
            sn: 0,
            bn: 0,
            mn: 0,
            height: i as u32,
            closed: false,
            loops_scanned: false,
        });
        out.created.push(id);
        out.improved.push(id);
        id
    }

    /// The closed predicate, evaluated from current successor flags.
    pub fn eval_closed(&self, n: NodeId) -> bool {
        let node = &self.nodes[n];
        !node.is_open()
            && [false, true].iter().all(|&b| {
                node.label(b) != EdgeLabel::Visited
                    || node.succ(b).is_some_and(|c| self.nodes[c].closed)
            })
    }

    /// Re-evaluates `closed` from `from` towards the root, stopping at the first
    /// node that stays non-closed.
    pub fn propagate_closed(&mut self, from: NodeId) {
        let mut cur = Some(from);
        while let Some(n) = cur {
            if !self.nodes[n].closed {
                let c = self.eval_closed(n);
                self.nodes[n].closed = c;
                if !c {
                    break;
                }
            }
            cur = self.nodes[n].parent;
        }
    }

    /// Clears the closed flag on `n`; closed ancestors are re-evaluated.
    pub fn reopen(&mut self, n: NodeId) {
        self.nodes[n].closed = false;
        let mut cur = self.nodes[n].parent;
        while let Some(m) = cur {
            if !self.nodes[m].closed {
                break;
            }
            self.nodes[m].closed = self.eval_closed(m);
            cur = self.nodes[m].parent;
        }
    }

    /// Deterministic text form, one node per line in depth-first order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let Some(root) = self.root() else { return s };
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            let v = &self.nodes[n];
            let _ = writeln!(
                s,
                "{:indent$}{} {} {:08x} {}{} f={} nbytes={} sa={} ba={} ma={} sbits={} h={}{}",
                "",
                v.depth,
                v.id.uid,
                v.id.ctx,
                v.label[0].short(),
                v.label[1].short(),
                v.f(),
                v.nbytes(),
                u8::from(v.sa),
                u8::from(v.ba),
                u8::from(v.ma),
                v.sbits.len(),
                v.height,
                if v.closed { " closed" } else { "" },
                indent = v.depth as usize,
            );
            for c in [v.successor[1], v.successor[0]].into_iter().flatten() {
                stack.push(c);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests;

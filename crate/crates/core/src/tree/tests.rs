use super::*;
use crate::abi::{ConditionRecord, ExecutionId, Termination};
use proptest::prelude::*;

fn rec(uid: u32, direction: bool, f: f64, nbytes: u32) -> ConditionRecord {
    ConditionRecord::new(ExecutionId::new(uid, 0), direction, f, false, nbytes)
}

fn sample(trace: Vec<ConditionRecord>) -> Rc<Sample> {
    let n = trace.last().map_or(0, |r| r.nbytes as usize);
    Rc::new(Sample {
        input: vec![0; n],
        types: vec![],
        trace,
    })
}

#[test]
fn w_metric_examples() {
    let t = vec![rec(1, true, 3.0, 0), rec(2, true, -4.0, 0)];
    assert_eq!(w_metric(&t, 1), 25.0);
    assert_eq!(w_metric(&[rec(1, true, 0.0, 0)], 0), 0.0);
    let t = vec![rec(1, true, f64::INFINITY, 0), rec(2, true, 1.0, 0)];
    assert_eq!(w_metric(&t, 1), f64::INFINITY);
}

#[test]
fn two_record_trace_builds_two_nodes() {
    let mut t = ExecTree::new();
    let out = t
        .map_trace(sample(vec![rec(1, true, 1.0, 0), rec(2, false, 5.0, 4)]), Termination::Normal, 0)
        .unwrap();
    assert_eq!(out.path, vec![0, 1]);
    assert_eq!(out.created, vec![0, 1]);
    assert_eq!(t.node(0).label(true), EdgeLabel::Visited);
    assert_eq!(t.node(0).label(false), EdgeLabel::NotVisited);
    assert_eq!(t.node(0).succ(true), Some(1));
    assert_eq!(t.node(1).label(false), EdgeLabel::EndNormal);
    assert_eq!(t.node(1).depth, 1);
    assert_eq!(t.node(0).height, 1);
    assert_eq!(t.node(1).nbytes(), 4);
}

#[test]
fn exceptional_end_upgrades_to_visited() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 1.0, 0)]), Termination::Crash, 0).unwrap();
    assert_eq!(t.node(0).label(true), EdgeLabel::EndExceptional);
    t.map_trace(sample(vec![rec(1, true, 1.0, 0)]), Termination::Normal, 1).unwrap();
    assert_eq!(t.node(0).label(true), EdgeLabel::EndNormal);
    t.map_trace(sample(vec![rec(1, true, 1.0, 0)]), Termination::Crash, 2).unwrap();
    assert_eq!(t.node(0).label(true), EdgeLabel::EndNormal);
    t.map_trace(sample(vec![rec(1, true, 1.0, 0), rec(2, true, 1.0, 0)]), Termination::Crash, 3)
        .unwrap();
    assert_eq!(t.node(0).label(true), EdgeLabel::Visited);
    assert!(t.node(0).succ(true).is_some());
}

#[test]
fn timeout_and_boundary_end_normally() {
    assert_eq!(EdgeLabel::terminal(Termination::Timeout), EdgeLabel::EndNormal);
    assert_eq!(
        EdgeLabel::terminal(Termination::BoundaryConditionViolation),
        EdgeLabel::EndNormal
    );
}

#[test]
fn smaller_w_replaces_best() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 3.0, 1)]), Termination::Normal, 1).unwrap();
    let out = t.map_trace(sample(vec![rec(1, false, -2.0, 1)]), Termination::Normal, 2).unwrap();
    assert_eq!(out.improved, vec![0]);
    assert_eq!(t.node(0).f(), -2.0);
    assert_eq!(t.node(0).best_w, 4.0);
    assert_eq!(t.node(0).fn_iter, 2);
    let out = t.map_trace(sample(vec![rec(1, true, 5.0, 1)]), Termination::Normal, 3).unwrap();
    assert!(out.improved.is_empty());
    assert_eq!(t.node(0).f(), -2.0);
    assert!(t.is_covered(0));
}

#[test]
fn divergent_trace_is_rejected_untouched() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 1.0, 0), rec(2, true, 1.0, 0)]), Termination::Normal, 0)
        .unwrap();
    let before = t.dump();
    let e = t
        .map_trace(sample(vec![rec(1, true, 1.0, 0), rec(3, true, 1.0, 0)]), Termination::Normal, 1)
        .unwrap_err();
    assert_eq!(e.index, 1);
    assert_eq!(t.dump(), before);
}

#[test]
fn covered_per_context() {
    let mut t = ExecTree::new();
    let a = ExecutionId::new(1, 10);
    let b = ExecutionId::new(1, 20);
    let r = |id, d| ConditionRecord::new(id, d, 1.0, false, 0);
    t.map_trace(sample(vec![r(a, true), r(b, true)]), Termination::Normal, 0).unwrap();
    t.map_trace(sample(vec![r(a, false)]), Termination::Normal, 1).unwrap();
    assert!(t.id_covered(a));
    assert!(!t.id_covered(b));
    assert!(t.uid_covered(1));
    assert_eq!(t.uid_coverage(), (1, 1));
    assert_eq!(t.id_coverage(), (1, 2));
}

#[test]
fn classify_examples() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 1.0, 1)]), Termination::Normal, 0).unwrap();
    let n = t.node(0);
    assert!(n.is_open() && !n.is_did() && !n.is_iid());

    let n = t.node_mut(0);
    n.sa = true;
    assert!(n.is_iid() && !n.is_open());
    assert!(t.eval_closed(0));

    let n = t.node_mut(0);
    n.sbits.insert(3);
    assert!(n.is_did() && n.is_open());
    n.ba = true;
    assert!(n.is_open());
    n.ma = true;
    assert!(!n.is_open());
}

#[test]
fn closed_needs_closed_children() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 1.0, 0), rec(2, true, 1.0, 0)]), Termination::Normal, 0)
        .unwrap();
    t.map_trace(sample(vec![rec(1, false, 1.0, 0)]), Termination::Normal, 1).unwrap();
    for n in [0, 1] {
        let v = t.node_mut(n);
        v.sa = true;
        v.ba = true;
        v.ma = true;
        v.sbits.insert(0);
    }
    // Root's true edge leads into an open child.
    t.node_mut(1).ma = false;
    t.propagate_closed(1);
    assert!(!t.node(1).closed && !t.node(0).closed);
    t.node_mut(1).ma = true;
    t.propagate_closed(1);
    assert!(t.node(1).closed);
    assert!(t.node(0).closed);
    t.reopen(1);
    assert!(!t.node(1).closed && !t.node(0).closed);
}

#[test]
fn propagation_stops_at_open_node() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 1.0, 0)]), Termination::Normal, 0).unwrap();
    t.propagate_closed(0);
    assert!(!t.node(0).closed);
}

#[test]
fn chain_closes_in_one_call() {
    let mut t = ExecTree::new();
    let tr = vec![rec(1, true, 1.0, 0), rec(2, true, 1.0, 0), rec(3, true, 1.0, 0)];
    t.map_trace(sample(tr), Termination::Normal, 0).unwrap();
    for n in 0..3 {
        // IID nodes are never open.
        t.node_mut(n).sa = true;
    }
    t.propagate_closed(2);
    assert!((0..3).all(|n| t.node(n).closed));
}

#[test]
fn dump_is_stable() {
    let mut t = ExecTree::new();
    t.map_trace(sample(vec![rec(1, true, 1.5, 0), rec(2, false, -2.0, 4)]), Termination::Crash, 0)
        .unwrap();
    t.map_trace(sample(vec![rec(1, false, 0.0, 0)]), Termination::Normal, 1).unwrap();
    let expect = "\
0 1 00000000 EV f=0 nbytes=0 sa=0 ba=0 ma=0 sbits=0 h=1
 1 2 00000000 XN f=-2 nbytes=4 sa=0 ba=0 ma=0 sbits=0 h=1
";
    assert_eq!(t.dump(), expect);
}

/// Traces of a synthetic deterministic target: the id at each position is a
/// function of the directions taken before it.
fn synth(dirs: &[bool], fs: &[i8]) -> Vec<ConditionRecord> {
    let mut code = 1u32;
    dirs.iter()
        .zip(fs)
        .map(|(&d, &f)| {
            let r = ConditionRecord::new(ExecutionId::new(code, 0), d, f64::from(f), false, 0);
            code = code * 2 + u32::from(d);
            r
        })
        .collect()
}

fn arb_traces() -> impl Strategy<Value = Vec<(Vec<ConditionRecord>, Termination)>> {
    let one = (1usize..7)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<i8>(), n),
                0u8..4,
            )
        })
        .prop_map(|(d, f, t)| (synth(&d, &f), Termination::from_code(t).unwrap()));
    proptest::collection::vec(one, 1..12)
}

fn labels(t: &ExecTree) -> Vec<(Vec<bool>, [EdgeLabel; 2])> {
    let mut v: Vec<_> = t
        .nodes()
        .map(|(n, node)| {
            let dirs = t
                .path(n)
                .windows(2)
                .map(|w| t.node(w[0]).succ(true) == Some(w[1]))
                .collect();
            (dirs, node.label)
        })
        .collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn labels_are_order_independent(traces in arb_traces(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut a = ExecTree::new();
        for (i, (tr, term)) in traces.iter().enumerate() {
            a.map_trace(sample(tr.clone()), *term, i as u64).unwrap();
        }
        let mut shuffled = traces.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut b = ExecTree::new();
        for (i, (tr, term)) in shuffled.iter().enumerate() {
            b.map_trace(sample(tr.clone()), *term, i as u64).unwrap();
        }
        prop_assert_eq!(labels(&a), labels(&b));
    }

    #[test]
    fn best_w_never_increases_and_heights_match(traces in arb_traces()) {
        let mut t = ExecTree::new();
        let mut prev: Vec<f64> = vec![];
        for (i, (tr, term)) in traces.iter().enumerate() {
            t.map_trace(sample(tr.clone()), *term, i as u64).unwrap();
            for (n, w) in prev.iter().enumerate() {
                prop_assert!(t.node(n).best_w <= *w);
            }
            prev = t.nodes().map(|(_, n)| n.best_w).collect();
        }
        for (n, node) in t.nodes() {
            let deepest = t
                .nodes()
                .filter(|(m, _)| t.path(*m).contains(&n))
                .map(|(_, m)| m.depth)
                .max()
                .unwrap();
            prop_assert_eq!(node.height, deepest);
            prop_assert_eq!(node.best_w, w_metric(node.best_trace(), node.depth as usize));
            for b in [false, true] {
                prop_assert_eq!(node.succ(b).is_some(), node.label(b) == EdgeLabel::Visited);
            }
        }
    }

    #[test]
    fn did_and_iid_exclusive(sa in any::<bool>(), ba in any::<bool>(), ma in any::<bool>(),
                             bits in proptest::collection::btree_set(0u32..16, 0..3),
                             l0 in 0u8..4, l1 in 0u8..4) {
        let mut t = ExecTree::new();
        t.map_trace(sample(vec![rec(1, true, 1.0, 0)]), Termination::Normal, 0).unwrap();
        let all = [EdgeLabel::NotVisited, EdgeLabel::EndExceptional, EdgeLabel::EndNormal, EdgeLabel::Visited];
        let n = t.node_mut(0);
        n.sa = sa;
        n.ba = ba;
        n.ma = ma;
        n.sbits = bits;
        n.label = [all[l0 as usize], all[l1 as usize]];
        prop_assert!(!(n.is_did() && n.is_iid()));
        if n.is_open() {
            prop_assert!(!t.eval_closed(0));
        }
    }
}

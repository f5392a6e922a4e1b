//! Input generation analyses. Each one is a resumable state machine: the loop
//! asks it for an input, executes it, and hands the result back.

mod binary;
mod bitshare;
mod sensitivity;
mod typed;

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::abi::input_hash;
use crate::tree::{EdgeLabel, ExecTree, MapOutcome, NodeId, Sample};

pub use binary::{binary_seeds, BinaryDescent};
pub use bitshare::bitshare_compose;
pub use sensitivity::Sensitivity;
pub use typed::{identify_typed_variables, lambda, typed_seed, Num, Projector, TypedDescent, TypedVar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnalysisKind {
    Sensitivity,
    Bitshare,
    TypedMinimization,
    Minimization,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 4] = [
        AnalysisKind::Sensitivity,
        AnalysisKind::Bitshare,
        AnalysisKind::TypedMinimization,
        AnalysisKind::Minimization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Sensitivity => "SENSITIVITY",
            AnalysisKind::Bitshare => "BITSHARE",
            AnalysisKind::TypedMinimization => "TYPED_MINIMIZATION",
            AnalysisKind::Minimization => "MINIMIZATION",
        }
    }
}

impl std::fmt::Display for AnalysisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Bit `s` of `x`, MSB-first within each byte. Bits past the end read as 0.
pub fn get_bit(x: &[u8], s: u32) -> bool {
    x.get((s / 8) as usize)
        .is_some_and(|b| b & (0x80 >> (s % 8)) != 0)
}

pub fn set_bit(x: &mut [u8], s: u32, v: bool) {
    let m = 0x80 >> (s % 8);
    let b = &mut x[(s / 8) as usize];
    if v {
        *b |= m;
    } else {
        *b &= !m;
    }
}

/// All bit indices of the byte holding bit `s`.
pub fn byte_bits(s: u32) -> impl Iterator<Item = u32> {
    let b = s / 8 * 8;
    b..b + 8
}

/// Per-session memo from input hashes to the branching value they produced.
#[derive(Debug, Clone, Default)]
pub struct ExecCache {
    map: HashMap<u64, f64>,
    pub hits: u64,
}

impl ExecCache {
    pub fn get(&mut self, input: &[u8]) -> Option<f64> {
        let v = self.map.get(&input_hash(input)).copied();
        if v.is_some() {
            self.hits += 1;
        }
        v
    }

    pub fn insert(&mut self, input: &[u8], value: f64) {
        self.map.insert(input_hash(input), value);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Drops the entries; the hit count survives.
    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// Sensitive-bit values of inputs that flipped an instruction, keyed by
/// (uid, direction achieved). Only the latest donor is kept.
#[derive(Debug, Clone, Default)]
pub struct BitshareStore {
    map: HashMap<(u32, bool), Vec<bool>>,
}

impl BitshareStore {
    pub fn insert(&mut self, uid: u32, direction: bool, bits: Vec<bool>) {
        self.map.insert((uid, direction), bits);
    }

    pub fn get(&self, uid: u32, direction: bool) -> Option<&[bool]> {
        self.map.get(&(uid, direction)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// The direction no trace has taken yet at `n`, if any.
pub fn missing_direction(tree: &ExecTree, n: NodeId) -> Option<bool> {
    [false, true]
        .into_iter()
        .find(|&b| tree.node(n).label(b) == EdgeLabel::NotVisited)
}

/// The analysis-specific part of a running session.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum Engine {
    Sensitivity(Sensitivity),
    Bitshare(Option<Vec<u8>>),
    Typed {
        core: TypedDescent,
        proj: Projector,
    },
    Binary {
        core: BinaryDescent,
        base: Vec<u8>,
        sbits: Vec<u32>,
    },
}

/// One activation of an analysis on one node.
#[derive(Debug)]
pub struct Session {
    pub kind: AnalysisKind,
    pub node: NodeId,
    /// Direction to reach; absent for sensitivity.
    pub goal: Option<bool>,
    /// Target executions requested so far.
    pub executions: u64,
    depth: usize,
    cache: ExecCache,
    engine: Engine,
    /// Value the core is waiting for, and the input it belongs to.
    pending: Option<Vec<u8>>,
    last_value: Option<f64>,
    done: bool,
}

impl Session {
    fn new(kind: AnalysisKind, tree: &ExecTree, node: NodeId, goal: Option<bool>, engine: Engine) -> Self {
        Session {
            kind,
            node,
            goal,
            executions: 0,
            depth: tree.node(node).depth as usize,
            cache: ExecCache::default(),
            engine,
            pending: None,
            last_value: None,
            done: false,
        }
    }

    pub fn sensitivity(tree: &ExecTree, node: NodeId) -> Self {
        let s = Sensitivity::new(tree, node);
        Self::new(AnalysisKind::Sensitivity, tree, node, None, Engine::Sensitivity(s))
    }

    pub fn bitshare(tree: &ExecTree, node: NodeId, store: &BitshareStore) -> Self {
        let goal = missing_direction(tree, node);
        let n = tree.node(node);
        let x = goal
            .and_then(|g| store.get(n.id.uid, g))
            .map(|donor| bitshare_compose(n.best_x(), &n.sbits, donor));
        Self::new(AnalysisKind::Bitshare, tree, node, goal, Engine::Bitshare(x))
    }

    /// `None` when the sensitive bits do not form typed variables.
    pub fn typed(tree: &ExecTree, node: NodeId, seed: u64) -> Option<Self> {
        let n = tree.node(node);
        let vars = identify_typed_variables(n.best_x(), n.best_t(), &n.sbits)?;
        let proj = Projector::new(n.best_x(), &vars, &n.sbits);
        let budget = 100 * n.sbits.len() as u64;
        let tags = vars.iter().map(|v| v.tag).collect();
        let mut core = TypedDescent::new(tags, budget, ChaCha8Rng::seed_from_u64(seed));
        core.set_projector(proj.clone());
        let goal = missing_direction(tree, node);
        Some(Self::new(
            AnalysisKind::TypedMinimization,
            tree,
            node,
            goal,
            Engine::Typed { core, proj },
        ))
    }

    pub fn binary(tree: &ExecTree, node: NodeId, seed: u64) -> Self {
        let n = tree.node(node);
        let sbits: Vec<u32> = n.sbits.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = BinaryDescent::new(binary_seeds(sbits.len(), &mut rng));
        let mut base = n.best_x().to_vec();
        let need = sbits.last().map_or(0, |s| (s / 8 + 1) as usize);
        if base.len() < need {
            base.resize(need, 0);
        }
        let goal = missing_direction(tree, node);
        Self::new(
            AnalysisKind::Minimization,
            tree,
            node,
            goal,
            Engine::Binary { core, base, sbits },
        )
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache.hits
    }

    /// Per-path-index sensitive bits found before byte widening.
    pub fn raw_marks(&self) -> Option<&[BTreeSet<u32>]> {
        match &self.engine {
            Engine::Sensitivity(s) => Some(s.raw_marks()),
            _ => None,
        }
    }

    pub fn path(&self) -> Option<&[NodeId]> {
        match &self.engine {
            Engine::Sensitivity(s) => Some(s.path()),
            _ => None,
        }
    }

    /// Accepted |f| sequences of every descent run so far.
    pub fn descents(&self) -> &[Vec<f64>] {
        match &self.engine {
            Engine::Typed { core, .. } => core.descents(),
            Engine::Binary { core, .. } => core.descents(),
            _ => &[],
        }
    }

    /// Next input to execute, or `None` once the analysis has finished.
    pub fn generate_input(&mut self) -> Option<Vec<u8>> {
        if self.done {
            return None;
        }
        debug_assert!(self.pending.is_none(), "result of the previous input is missing");
        let out = match &mut self.engine {
            Engine::Sensitivity(s) => s.next_input(),
            Engine::Bitshare(x) => x.take(),
            Engine::Typed { core, proj } => loop {
                let Some(v) = core.resume(self.last_value.take()) else { break None };
                let x = proj.encode(&v);
                match self.cache.get(&x) {
                    Some(f) => self.last_value = Some(f),
                    None => break Some(x),
                }
            },
            Engine::Binary { core, base, sbits } => loop {
                let Some(v) = core.resume(self.last_value.take()) else { break None };
                let mut x = base.clone();
                for (&s, b) in sbits.iter().zip(v) {
                    set_bit(&mut x, s, b);
                }
                match self.cache.get(&x) {
                    Some(f) => self.last_value = Some(f),
                    None => break Some(x),
                }
            },
        };
        match &out {
            Some(x) => {
                self.executions += 1;
                self.pending = Some(x.clone());
            }
            None => {
                self.done = true;
                self.cache.clear();
            }
        }
        out
    }

    /// Feeds back the execution of the input last returned by
    /// [`Session::generate_input`].
    pub fn process_results(&mut self, tree: &mut ExecTree, sample: &Sample, out: &MapOutcome) {
        let Some(x) = self.pending.take() else { return };
        let mapped = out.path.get(self.depth) == Some(&self.node);
        let f = if mapped {
            sample.trace[self.depth].value
        } else {
            f64::INFINITY
        };
        match &mut self.engine {
            Engine::Sensitivity(s) => s.process(tree, sample),
            Engine::Bitshare(_) => {}
            Engine::Typed { .. } => {
                let v = if f.is_finite() { f } else { f64::INFINITY };
                self.cache.insert(&x, v);
                self.last_value = Some(v);
            }
            Engine::Binary { .. } => {
                let v = if f.is_finite() { f.abs() } else { f64::MAX };
                self.cache.insert(&x, v);
                self.last_value = Some(v);
            }
        }
    }

    /// Ends the session early (goal reached or budget gone).
    pub fn stop(&mut self) {
        self.done = true;
        self.pending = None;
        self.cache.clear();
    }
}

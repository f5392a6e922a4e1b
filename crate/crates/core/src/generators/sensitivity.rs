use std::collections::BTreeSet;
use std::rc::Rc;

use crate::abi::TypeTag;
use crate::tree::{ExecTree, NodeId, Sample};

use super::{byte_bits, get_bit};

/// One-bit flips of the node's input prefix, then extreme values for every
/// typed region inside it.
#[derive(Debug)]
pub struct Sensitivity {
    base: Rc<Sample>,
    path: Vec<NodeId>,
    mutations: Vec<(Vec<u8>, Vec<u32>)>,
    next: usize,
    /// Positions whose mutation was the last one issued.
    issued: Option<usize>,
    /// Marks from the one-bit flips alone, before widening.
    raw: Vec<BTreeSet<u32>>,
    flips: usize,
}

fn extremes(tag: TypeTag) -> Vec<Vec<u8>> {
    let w = tag.byte_width();
    match tag {
        TypeTag::Float32 => [-1.0f32, 1.0, f32::INFINITY, f32::NAN, f32::EPSILON]
            .iter()
            .map(|v| v.to_le_bytes().to_vec())
            .collect(),
        TypeTag::Float64 => [-1.0f64, 1.0, f64::INFINITY, f64::NAN, f64::EPSILON]
            .iter()
            .map(|v| v.to_le_bytes().to_vec())
            .collect(),
        _ => vec![vec![0; w], vec![0xff; w]],
    }
}

/// All mutations issued for `x` (trimmed to `nbytes`), paired with the bit
/// positions each one changes.
pub(super) fn mutations(x: &[u8], types: &[TypeTag], nbytes: usize) -> Vec<(Vec<u8>, Vec<u32>)> {
    let mut base = x[..nbytes.min(x.len())].to_vec();
    base.resize(nbytes, 0);
    let mut out = Vec::new();
    for s in 0..(8 * nbytes) as u32 {
        let mut m = base.clone();
        m[(s / 8) as usize] ^= 0x80 >> (s % 8);
        out.push((m, vec![s]));
    }
    let mut off = 0;
    for &t in types {
        let w = t.byte_width();
        if off + w > nbytes {
            break;
        }
        for value in extremes(t) {
            let mut m = base.clone();
            m[off..off + w].copy_from_slice(&value);
            let changed: Vec<u32> = (8 * off as u32..8 * (off + w) as u32)
                .filter(|&s| get_bit(&m, s) != get_bit(&base, s))
                .collect();
            if !changed.is_empty() {
                out.push((m, changed));
            }
        }
        off += w;
    }
    out
}

impl Sensitivity {
    pub fn new(tree: &ExecTree, node: NodeId) -> Self {
        let n = tree.node(node);
        let base = Rc::clone(n.best());
        let path = tree.path(node);
        let mutations = mutations(&base.input, &base.types, n.nbytes() as usize);
        Sensitivity {
            flips: 8 * n.nbytes() as usize,
            raw: vec![BTreeSet::new(); path.len()],
            base,
            path,
            mutations,
            next: 0,
            issued: None,
        }
    }

    pub fn path(&self) -> &[NodeId] {
        &self.path
    }

    pub fn raw_marks(&self) -> &[BTreeSet<u32>] {
        &self.raw
    }

    pub fn mutation_count(&self) -> usize {
        self.mutations.len()
    }

    pub fn next_input(&mut self) -> Option<Vec<u8>> {
        let m = self.mutations.get(self.next)?;
        self.issued = Some(self.next);
        self.next += 1;
        Some(m.0.clone())
    }

    pub fn process(&mut self, tree: &mut ExecTree, sample: &Sample) {
        let Some(i) = self.issued.take() else { return };
        let base = &self.base.trace;
        let t = &sample.trace;
        let d = self.path.len() - 1;
        // Greatest K with matching ids up to K and matching directions below K.
        let mut k_max = None;
        for k in 0..=d.min(t.len().saturating_sub(1)) {
            if t.is_empty() || t[k].id != base[k].id {
                break;
            }
            k_max = Some(k);
            if t[k].direction != base[k].direction {
                break;
            }
        }
        let Some(kk) = k_max else { return };
        let positions = &self.mutations[i].1;
        for k in 0..=kk {
            if t[k].value == base[k].value {
                continue;
            }
            let limit = 8 * base[k].nbytes;
            let node = tree.node_mut(self.path[k]);
            for &s in positions.iter().filter(|&&s| s < limit) {
                if i < self.flips {
                    self.raw[k].insert(s);
                }
                node.sbits.extend(byte_bits(s));
            }
        }
    }
}

//! Gradient descent over typed numeric variables.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::abi::TypeTag;

use super::get_bit;

/// A variable value. Floats of either width are held as `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Num {
    I(i64),
    U(u64),
    F(f64),
}

/// A typed region of the input holding at least one sensitive bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypedVar {
    pub offset: usize,
    pub tag: TypeTag,
}

fn int_bounds(tag: TypeTag) -> (i128, i128) {
    let bits = tag.bit_width();
    if tag.is_signed() {
        (-(1i128 << (bits - 1)), (1i128 << (bits - 1)) - 1)
    } else {
        (0, (1i128 << bits) - 1)
    }
}

impl Num {
    pub fn to_f64(self) -> f64 {
        match self {
            Num::I(v) => v as f64,
            Num::U(v) => v as f64,
            Num::F(v) => v,
        }
    }

    /// Nearest representable value of `tag` (integers saturate, NaN becomes 0).
    pub fn from_f64(tag: TypeTag, x: f64) -> Num {
        match tag {
            TypeTag::Float32 => Num::F(f64::from(x as f32)),
            TypeTag::Float64 => Num::F(x),
            _ => {
                let (lo, hi) = int_bounds(tag);
                let r = if x.is_nan() { 0.0 } else { x.round() };
                let v = if r <= lo as f64 {
                    lo
                } else if r >= hi as f64 {
                    hi
                } else {
                    r as i128
                };
                Num::from_i128(tag, v)
            }
        }
    }

    fn from_i128(tag: TypeTag, v: i128) -> Num {
        if tag.is_signed() {
            Num::I(v as i64)
        } else {
            Num::U(v as u64)
        }
    }

    fn as_i128(self) -> i128 {
        match self {
            Num::I(v) => i128::from(v),
            Num::U(v) => i128::from(v),
            Num::F(v) => v as i128,
        }
    }

    /// Smallest upward move that changes the value, with its size.
    pub fn step_up(self, tag: TypeTag) -> Option<(Num, f64)> {
        match (tag, self) {
            (TypeTag::Float32, Num::F(v)) => {
                let n = (v as f32).next_up();
                let d = f64::from(n) - v;
                (n.is_finite() && v.is_finite() && d > 0.0).then_some((Num::F(f64::from(n)), d))
            }
            (TypeTag::Float64, Num::F(v)) => {
                let n = v.next_up();
                let d = n - v;
                (n.is_finite() && v.is_finite() && d > 0.0).then_some((Num::F(n), d))
            }
            _ => {
                let v = self.as_i128();
                (v < int_bounds(tag).1).then(|| (Num::from_i128(tag, v + 1), 1.0))
            }
        }
    }

    pub fn encode(self, tag: TypeTag) -> Vec<u8> {
        let w = tag.byte_width();
        match (tag, self) {
            (TypeTag::Float32, n) => (n.to_f64() as f32).to_le_bytes().to_vec(),
            (TypeTag::Float64, n) => n.to_f64().to_le_bytes().to_vec(),
            (_, n) => n.as_i128().to_le_bytes()[..w].to_vec(),
        }
    }

    pub fn decode(tag: TypeTag, b: &[u8]) -> Num {
        match tag {
            TypeTag::Float32 => Num::F(f64::from(f32::from_le_bytes(b[..4].try_into().unwrap()))),
            TypeTag::Float64 => Num::F(f64::from_le_bytes(b[..8].try_into().unwrap())),
            _ => {
                let mut buf = [0u8; 8];
                let w = tag.byte_width();
                buf[..w].copy_from_slice(&b[..w]);
                let raw = u64::from_le_bytes(buf);
                if tag.is_signed() {
                    let sh = 64 - 8 * w as u32;
                    Num::I(((raw << sh) as i64) >> sh)
                } else {
                    Num::U(raw)
                }
            }
        }
    }
}

/// One variable per typed region holding a sensitive bit. `None` if a
/// sensitive bit lies in an untyped region or outside every region.
pub fn identify_typed_variables(
    _x: &[u8],
    types: &[TypeTag],
    sbits: &BTreeSet<u32>,
) -> Option<Vec<TypedVar>> {
    if sbits.is_empty() {
        return None;
    }
    let mut vars = Vec::new();
    let mut off = 0usize;
    let mut covered = 0usize;
    for &tag in types {
        let w = tag.byte_width();
        let lo = 8 * off as u32;
        let hi = 8 * (off + w) as u32;
        let n = sbits.range(lo..hi).count();
        if n > 0 {
            if tag.is_untyped() {
                return None;
            }
            vars.push(TypedVar { offset: off, tag });
            covered += n;
        }
        off += w;
    }
    (covered == sbits.len()).then_some(vars)
}

/// Interval a seed coordinate is drawn from after `k` of `budget` calls;
/// `None` means the whole domain.
pub fn seed_interval(tag: TypeTag, k: u64, budget: u64) -> Option<(f64, f64)> {
    let bits = tag.bit_width() as f64;
    if bits < 16.0 {
        return None;
    }
    let r = if budget == 0 { 0.0 } else { k.min(budget) as f64 / budget as f64 };
    Some(match tag {
        TypeTag::Float32 | TypeTag::Float64 => {
            let q = if tag == TypeTag::Float32 { 119.0 } else { 115.0 };
            let p = (7.0 + (q - 8.0) * r).exp2();
            (-p, p)
        }
        _ if tag.is_signed() => {
            let p = (7.0 + (bits - 9.0) * r).exp2().floor();
            (-p, p)
        }
        _ => (0.0, (7.0 + (bits - 8.0) * r).exp2().floor()),
    })
}

/// A fresh starting point, widening the sampled interval as `k` grows.
pub fn typed_seed(tags: &[TypeTag], k: u64, budget: u64, rng: &mut ChaCha8Rng) -> Vec<Num> {
    tags.iter()
        .map(|&tag| match seed_interval(tag, k, budget) {
            None => {
                let (lo, hi) = int_bounds(tag);
                Num::from_i128(tag, rng.gen_range(lo..=hi))
            }
            Some((lo, hi)) if tag.is_float() => Num::from_f64(tag, rng.gen_range(lo..=hi)),
            Some((lo, hi)) => {
                let (tlo, thi) = int_bounds(tag);
                let lo = (lo as i128).max(tlo);
                let hi = (hi as i128).min(thi);
                Num::from_i128(tag, rng.gen_range(lo..=hi))
            }
        })
        .collect()
}

/// Step length that reaches zero if the function is linear around the point.
pub fn lambda(f: f64, grad: &[f64]) -> f64 {
    f.abs() / grad.iter().map(|g| g * g).sum::<f64>()
}

/// Writes variable values into a base input, touching only sensitive bits.
#[derive(Debug, Clone)]
pub struct Projector {
    base: Vec<u8>,
    mask: Vec<u8>,
    vars: Vec<TypedVar>,
}

impl Projector {
    pub fn new(base: &[u8], vars: &[TypedVar], sbits: &BTreeSet<u32>) -> Self {
        let end = vars.iter().map(|v| v.offset + v.tag.byte_width()).max().unwrap_or(0);
        let mut b = base.to_vec();
        if b.len() < end {
            b.resize(end, 0);
        }
        let mut mask = vec![0u8; b.len()];
        for &s in sbits {
            if let Some(m) = mask.get_mut((s / 8) as usize) {
                *m |= 0x80 >> (s % 8);
            }
        }
        Projector {
            base: b,
            mask,
            vars: vars.to_vec(),
        }
    }

    pub fn encode(&self, v: &[Num]) -> Vec<u8> {
        let mut x = self.base.clone();
        for (var, &n) in self.vars.iter().zip(v) {
            for (j, b) in n.encode(var.tag).into_iter().enumerate() {
                let i = var.offset + j;
                x[i] = (x[i] & !self.mask[i]) | (b & self.mask[i]);
            }
        }
        x
    }

    /// Replaces `v` by the values the target will actually read.
    pub fn project(&self, v: &mut [Num]) {
        let x = self.encode(v);
        for (var, n) in self.vars.iter().zip(v.iter_mut()) {
            *n = Num::decode(var.tag, &x[var.offset..]);
        }
    }

    /// Whether `x` agrees with the base on every non-sensitive bit.
    pub fn keeps_insensitive_bits(&self, x: &[u8]) -> bool {
        (0..8 * self.base.len() as u32)
            .filter(|&s| self.mask[(s / 8) as usize] & (0x80 >> (s % 8)) == 0)
            .all(|s| get_bit(x, s) == get_bit(&self.base, s))
    }
}

const EXPONENTS: [i32; 7] = [0, -1, 1, -2, 2, -3, 3];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Seed,
    SeedEval,
    /// Computing partial `i`; `delta` is set while its evaluation is pending.
    Partial { i: usize, delta: Option<f64> },
    Step,
    Candidate { e: usize, waiting: bool },
    Done,
}

/// The typed descent as a resumable computation: each call to
/// [`TypedDescent::resume`] takes the value of the previously requested
/// point and returns the next point to evaluate.
#[derive(Debug)]
pub struct TypedDescent {
    tags: Vec<TypeTag>,
    budget: u64,
    calls: u64,
    rng: ChaCha8Rng,
    proj: Option<Projector>,
    v: Vec<Num>,
    fv: f64,
    grad: Vec<f64>,
    lock: Vec<bool>,
    lam: f64,
    cand: Vec<(Vec<Num>, f64)>,
    phase: Phase,
    descents: Vec<Vec<f64>>,
}

impl TypedDescent {
    pub fn new(tags: Vec<TypeTag>, budget: u64, rng: ChaCha8Rng) -> Self {
        let m = tags.len();
        TypedDescent {
            tags,
            budget,
            calls: 0,
            rng,
            proj: None,
            v: Vec::new(),
            fv: f64::INFINITY,
            grad: vec![0.0; m],
            lock: vec![false; m],
            lam: 0.0,
            cand: Vec::new(),
            phase: Phase::Seed,
            descents: Vec::new(),
        }
    }

    pub fn set_projector(&mut self, p: Projector) {
        self.proj = Some(p);
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// Accepted |f| values, one sequence per seed that evaluated finitely.
    pub fn descents(&self) -> &[Vec<f64>] {
        &self.descents
    }

    pub fn gradient(&self) -> (&[f64], &[bool]) {
        (&self.grad, &self.lock)
    }

    fn project(&self, v: &mut [Num]) {
        if let Some(p) = &self.proj {
            p.project(v);
        }
    }

    fn issue(&mut self, p: Vec<Num>) -> Option<Vec<Num>> {
        if self.calls >= self.budget {
            self.phase = Phase::Done;
            return None;
        }
        self.calls += 1;
        Some(p)
    }

    fn bump(&self, i: usize) -> Option<(Vec<Num>, f64)> {
        let (n, _) = self.v[i].step_up(self.tags[i])?;
        let mut p = self.v.clone();
        p[i] = n;
        self.project(&mut p);
        let d = p[i].to_f64() - self.v[i].to_f64();
        (d > 0.0 && d.is_finite()).then_some((p, d))
    }

    fn candidate(&self, e: usize) -> Vec<Num> {
        let s = 10f64.powi(EXPONENTS[e]) * self.lam;
        let mut p: Vec<Num> = self
            .v
            .iter()
            .zip(&self.grad)
            .zip(&self.tags)
            .map(|((&v, &g), &t)| {
                if g == 0.0 {
                    v
                } else {
                    Num::from_f64(t, v.to_f64() - s * g)
                }
            })
            .collect();
        self.project(&mut p);
        p
    }

    /// Locks the coordinates slowing the descent; false if none was locked.
    fn lock_more(&mut self) -> bool {
        let inv: Vec<f64> = (0..self.grad.len())
            .filter(|&i| !self.lock[i] && self.grad[i] != 0.0)
            .map(|i| 1.0 / (self.grad[i] * self.grad[i]))
            .collect();
        let (lo, hi) = inv
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let l = lo + 0.6 * (hi - lo);
        let mut any = false;
        for i in 0..self.grad.len() {
            if self.lock[i] {
                continue;
            }
            let g2 = self.grad[i] * self.grad[i];
            let r = 1.0 / g2;
            if g2 == 0.0 || r < l || !r.is_finite() {
                self.grad[i] = 0.0;
                self.lock[i] = true;
                any = true;
            }
        }
        any
    }

    pub fn resume(&mut self, mut value: Option<f64>) -> Option<Vec<Num>> {
        let m = self.tags.len();
        loop {
            match std::mem::replace(&mut self.phase, Phase::Done) {
                Phase::Done => return None,
                Phase::Seed => {
                    let mut v = typed_seed(&self.tags, self.calls, self.budget, &mut self.rng);
                    self.project(&mut v);
                    self.v = v.clone();
                    self.phase = Phase::SeedEval;
                    return self.issue(v);
                }
                Phase::SeedEval => {
                    let f = value.take().unwrap_or(f64::INFINITY);
                    if !f.is_finite() {
                        self.phase = Phase::Seed;
                        continue;
                    }
                    self.fv = f;
                    self.descents.push(vec![f.abs()]);
                    self.phase = Phase::Partial { i: 0, delta: None };
                }
                Phase::Partial { mut i, delta } => {
                    if let Some(d) = delta {
                        let f = value.take().unwrap_or(f64::INFINITY);
                        let g = (f.abs() - self.fv.abs()) / d;
                        if g.is_finite() {
                            self.grad[i] = g;
                            self.lock[i] = false;
                        } else {
                            self.grad[i] = 0.0;
                            self.lock[i] = true;
                        }
                        i += 1;
                    }
                    if i == m {
                        self.phase = Phase::Step;
                        continue;
                    }
                    match self.bump(i) {
                        Some((p, d)) => {
                            self.phase = Phase::Partial { i, delta: Some(d) };
                            return self.issue(p);
                        }
                        None => {
                            self.grad[i] = 0.0;
                            self.lock[i] = true;
                            self.phase = Phase::Partial { i: i + 1, delta: None };
                        }
                    }
                }
                Phase::Step => {
                    let n2: f64 = self.grad.iter().map(|g| g * g).sum();
                    if !n2.is_finite() || self.lock.iter().all(|&l| l) {
                        self.phase = Phase::Seed;
                        continue;
                    }
                    self.lam = lambda(self.fv, &self.grad);
                    if self.lam == 0.0 || !self.lam.is_finite() {
                        self.phase = Phase::Seed;
                        continue;
                    }
                    self.cand.clear();
                    self.phase = Phase::Candidate { e: 0, waiting: false };
                }
                Phase::Candidate { mut e, waiting } => {
                    if waiting {
                        self.cand[e].1 = value.take().unwrap_or(f64::INFINITY);
                        e += 1;
                    }
                    if e < EXPONENTS.len() {
                        let p = self.candidate(e);
                        self.cand.push((p.clone(), f64::INFINITY));
                        self.phase = Phase::Candidate { e, waiting: true };
                        return self.issue(p);
                    }
                    let mut best = 0;
                    for (j, c) in self.cand.iter().enumerate() {
                        if c.1.abs() < self.cand[best].1.abs() {
                            best = j;
                        }
                    }
                    let (p, f) = self.cand[best].clone();
                    if f.abs() < self.fv.abs() {
                        self.v = p;
                        self.fv = f;
                        if let Some(d) = self.descents.last_mut() {
                            d.push(f.abs());
                        }
                        self.phase = Phase::Partial { i: 0, delta: None };
                    } else if self.lock_more() {
                        self.phase = Phase::Step;
                    } else {
                        self.phase = Phase::Seed;
                    }
                }
            }
        }
    }
}

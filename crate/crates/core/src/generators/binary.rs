//! Descent over sensitive bits treated as independent Boolean variables.

use rand::seq::index::sample;
use rand::Rng;

/// `m + 1` seeds; seed `i` has exactly `i` bits set, chosen uniformly.
pub fn binary_seeds(m: usize, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    (0..=m)
        .map(|i| {
            let mut v = vec![false; m];
            for j in sample(rng, m, i) {
                v[j] = true;
            }
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    NextSeed,
    SeedEval,
    Flips { i: usize, vals: Vec<f64> },
    Suffix { order: Vec<usize>, i: usize, vals: Vec<f64> },
    Done,
}

/// Resumable single-coordinate descent with the suffix-inversion escape.
/// Values fed back must already be absolute.
#[derive(Debug)]
pub struct BinaryDescent {
    seeds: Vec<Vec<bool>>,
    seed: usize,
    v: Vec<bool>,
    fv: f64,
    mag: Vec<f64>,
    phase: Phase,
    calls: u64,
    descents: Vec<Vec<f64>>,
}

fn flipped(v: &[bool], i: usize) -> Vec<bool> {
    let mut w = v.to_vec();
    w[i] = !w[i];
    w
}

fn argmin(vals: &[f64]) -> usize {
    let mut k = 0;
    for (i, &x) in vals.iter().enumerate() {
        if x < vals[k] {
            k = i;
        }
    }
    k
}

impl BinaryDescent {
    pub fn new(seeds: Vec<Vec<bool>>) -> Self {
        BinaryDescent {
            seeds,
            seed: 0,
            v: Vec::new(),
            fv: f64::MAX,
            mag: Vec::new(),
            phase: Phase::NextSeed,
            calls: 0,
            descents: Vec::new(),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Accepted |f| values, one sequence per seed.
    pub fn descents(&self) -> &[Vec<f64>] {
        &self.descents
    }

    fn m(&self) -> usize {
        self.v.len()
    }

    fn suffix(&self, order: &[usize], i: usize) -> Vec<bool> {
        let mut w = self.v.clone();
        for &j in &order[i..] {
            w[j] = !w[j];
        }
        w
    }

    fn issue(&mut self, p: Vec<bool>) -> Option<Vec<bool>> {
        self.calls += 1;
        Some(p)
    }

    fn accept(&mut self, v: Vec<bool>, f: f64) {
        self.v = v;
        self.fv = f;
        if let Some(d) = self.descents.last_mut() {
            d.push(f);
        }
        self.phase = Phase::Flips { i: 0, vals: Vec::new() };
    }

    pub fn resume(&mut self, mut value: Option<f64>) -> Option<Vec<bool>> {
        loop {
            match std::mem::replace(&mut self.phase, Phase::Done) {
                Phase::Done => return None,
                Phase::NextSeed => {
                    let s = self.seeds.get(self.seed).cloned()?;
                    self.seed += 1;
                    self.mag = vec![0.0; s.len()];
                    self.v = s.clone();
                    self.phase = Phase::SeedEval;
                    return self.issue(s);
                }
                Phase::SeedEval => {
                    self.fv = value.take().unwrap_or(f64::MAX).abs();
                    self.descents.push(vec![self.fv]);
                    if self.m() == 0 {
                        self.phase = Phase::NextSeed;
                        continue;
                    }
                    let p = flipped(&self.v, 0);
                    self.phase = Phase::Flips { i: 0, vals: Vec::new() };
                    return self.issue(p);
                }
                Phase::Flips { i, mut vals } => {
                    let f = value.take().unwrap_or(f64::MAX).abs();
                    self.mag[i] = self.mag[i].max((f - self.fv).abs());
                    vals.push(f);
                    if i + 1 < self.m() {
                        let p = flipped(&self.v, i + 1);
                        self.phase = Phase::Flips { i: i + 1, vals };
                        return self.issue(p);
                    }
                    let k = argmin(&vals);
                    if vals[k] < self.fv {
                        let w = flipped(&self.v, k);
                        self.accept(w, vals[k]);
                        let p = flipped(&self.v, 0);
                        return self.issue(p);
                    }
                    // Stuck: invert suffixes of the bits ordered by importance.
                    let mut order: Vec<usize> = (0..self.m()).collect();
                    order.sort_by(|&a, &b| self.mag[b].total_cmp(&self.mag[a]));
                    let p = self.suffix(&order, 0);
                    self.phase = Phase::Suffix { order, i: 0, vals: Vec::new() };
                    return self.issue(p);
                }
                Phase::Suffix { order, i, mut vals } => {
                    vals.push(value.take().unwrap_or(f64::MAX).abs());
                    if i + 1 < self.m() {
                        let p = self.suffix(&order, i + 1);
                        self.phase = Phase::Suffix { order, i: i + 1, vals };
                        return self.issue(p);
                    }
                    let k = argmin(&vals);
                    if vals[k] < self.fv {
                        let w = self.suffix(&order, k);
                        self.accept(w, vals[k]);
                        let p = flipped(&self.v, 0);
                        return self.issue(p);
                    }
                    self.phase = Phase::NextSeed;
                }
            }
        }
    }
}

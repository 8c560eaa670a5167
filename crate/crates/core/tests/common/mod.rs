#![allow(dead_code)]

use conelogit::{ChoiceDataset, NestPartition, Observation, TaxonomyTree};

/// Small deterministic generator for test fixtures.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        let mut g = Lcg(seed ^ 0x9e37_79b9_7f4a_7c15);
        g.next_u64();
        g
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next_u64() as f64 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn subset(&mut self, m: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..m).collect();
        for i in 0..k {
            let j = i + self.below(m - i);
            all.swap(i, j);
        }
        all.truncate(k);
        all
    }
}

/// `n` observations over `m` alternatives, each offering between 1 and
/// `max_offer` alternatives with attributes uniform on `[0, 3)`.
pub fn random_dataset(g: &mut Lcg, n: usize, m: usize, p: usize, max_offer: usize) -> ChoiceDataset {
    let mut obs = Vec::new();
    let mut attrs = Vec::new();
    for _ in 0..n {
        let k = 1 + g.below(max_offer.min(m));
        let offered = g.subset(m, k);
        let chosen = offered[g.below(k)];
        attrs.push((0..k * p).map(|_| g.uniform(0.0, 3.0)).collect());
        obs.push(Observation { chosen, offered });
    }
    ChoiceDataset::new(m, p, obs, attrs).unwrap()
}

pub fn random_nests(g: &mut Lcg, m: usize, l: usize, lo: f64, hi: f64) -> NestPartition {
    let l = l.min(m);
    let perm = g.subset(m, m);
    let mut membership = vec![0; m];
    for (i, &alt) in perm.iter().enumerate() {
        membership[alt] = i % l;
    }
    let lambdas = (0..l).map(|_| g.uniform(lo, hi)).collect();
    NestPartition::new(membership, lambdas).unwrap()
}

/// Root -> `b1` nodes -> `b2` nodes each -> leaves spread round-robin, with
/// scales drawn from `[lo, hi]` and each child capped at its parent.
pub fn random_tree(g: &mut Lcg, m: usize, b1: usize, b2: usize, lo: f64, hi: f64) -> TaxonomyTree {
    assert!(m >= b1 * b2, "every bottom node needs a leaf");
    let mut parent = vec![None];
    let mut lambdas = vec![1.0];
    let mut bottom = Vec::new();
    for _ in 0..b1 {
        let mid = parent.len();
        parent.push(Some(0));
        let lm = g.uniform(lo, hi);
        lambdas.push(lm);
        for _ in 0..b2 {
            bottom.push(parent.len());
            parent.push(Some(mid));
            lambdas.push(g.uniform(lo, hi).min(lm));
        }
    }
    let mut leaf_alt = vec![None; parent.len()];
    let perm = g.subset(m, m);
    for (i, &alt) in perm.iter().enumerate() {
        parent.push(Some(bottom[i % bottom.len()]));
        leaf_alt.push(Some(alt));
        lambdas.push(1.0);
    }
    TaxonomyTree::new(parent, leaf_alt, lambdas).unwrap()
}

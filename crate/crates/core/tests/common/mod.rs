//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selhn::harness::{parse_config, RunConfig};

pub const BENCHMARK: &str = include_str!("../../../../configs/vanishing_benchmark.conf");

pub fn benchmark_config(overrides: &[(&str, String)]) -> RunConfig {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    parse_config(Some(BENCHMARK), &o).expect("benchmark config parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-1, 1]` entries.
pub fn random_square(rng: &mut ChaCha8Rng, b: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..b).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn h(x: f64) -> f64 {
    x.max(0.0)
}

/// Score of candidate `j` for anchor `i`; `dir = 0` is image-to-text.
fn at(s: &[Vec<f64>], dir: usize, i: usize, j: usize) -> f64 {
    if dir == 0 {
        s[i][j]
    } else {
        s[j][i]
    }
}

/// Highest-scoring negative, first index on ties.
fn hardest(s: &[Vec<f64>], dir: usize, i: usize, keep: impl Fn(f64) -> bool) -> Option<f64> {
    let mut best: Option<f64> = None;
    for j in 0..s.len() {
        if j == i {
            continue;
        }
        let x = at(s, dir, i, j);
        if keep(x) && best.is_none_or(|b| x > b) {
            best = Some(x);
        }
    }
    best
}

fn per_anchor(s: &[Vec<f64>], f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for dir in 0..2 {
        for i in 0..s.len() {
            total += f(dir, i);
        }
    }
    total
}

pub fn naive_triplet(s: &[Vec<f64>], m: f64) -> f64 {
    per_anchor(s, |dir, i| {
        (0..s.len()).filter(|&j| j != i).map(|j| h(m - s[i][i] + at(s, dir, i, j))).sum()
    })
}

pub fn naive_hn(s: &[Vec<f64>], m: f64) -> f64 {
    per_anchor(s, |dir, i| h(m - s[i][i] + hardest(s, dir, i, |_| true).unwrap()))
}

pub fn naive_shn(s: &[Vec<f64>], m: f64) -> f64 {
    per_anchor(s, |dir, i| {
        let p = s[i][i];
        hardest(s, dir, i, |x| x < p).map_or(0.0, |n| h(m - p + n))
    })
}

pub fn naive_sct(s: &[Vec<f64>], m: f64) -> f64 {
    per_anchor(s, |dir, i| {
        let p = s[i][i];
        let n = hardest(s, dir, i, |_| true).unwrap();
        if n < p {
            h(m - p + n)
        } else {
            n
        }
    })
}

pub fn naive_selhn(s: &[Vec<f64>], m: f64, eps: f64) -> f64 {
    let b = s.len() as f64;
    per_anchor(s, |dir, i| {
        let p = s[i][i];
        let n = hardest(s, dir, i, |_| true).unwrap();
        if (n - p).abs() > eps {
            h(m - p + n)
        } else {
            (0..s.len()).filter(|&j| j != i).map(|j| h(m - p + at(s, dir, i, j))).sum::<f64>() / b
        }
    })
}

/// 0-based position of the first ground-truth candidate after a full sort
/// by descending score, lower index first on ties.
pub fn sorted_first_hit(scores: &[f64], positives: &[usize]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|c| positives.contains(c)).unwrap()
}

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random log-softmax grid, `t x v`.
pub fn random_grid(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        g.extend(row.iter().map(|x| x - lse));
    }
    g
}

pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &k in path {
        if k != prev && k != 0 {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Probability mass of every labeling, by enumerating all `v^t` paths.
pub fn labeling_probs(grid: &[f64], t: usize, v: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut out = BTreeMap::new();
    let mut path = vec![0usize; t];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(i, &k)| grid[i * v + k]).sum();
        *out.entry(collapse(&path)).or_insert(0.0) += lp.exp();
        let mut i = 0;
        loop {
            if i == t {
                return out;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Best labeling by total probability, ties to the lexicographically smaller.
pub fn best_labeling(grid: &[f64], t: usize, v: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (lab, p) in labeling_probs(grid, t, v) {
        if best.as_ref().is_none_or(|(_, bp)| p > *bp) {
            best = Some((lab, p));
        }
    }
    best.unwrap()
}

/// Minimal unit-cost edit script by exhaustive search over operation sequences.
pub fn brute_edit_cost(r: &[usize], h: &[usize]) -> usize {
    if r.is_empty() {
        return h.len();
    }
    if h.is_empty() {
        return r.len();
    }
    let sub = brute_edit_cost(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
    let del = brute_edit_cost(&r[1..], h) + 1;
    let ins = brute_edit_cost(r, &h[1..]) + 1;
    sub.min(del).min(ins)
}

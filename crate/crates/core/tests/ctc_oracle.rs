mod common;

use common::{best_labeling, labeling_probs, random_grid};
use lae_core::ctc::{ctc_loss, greedy_decode, min_frames, prefix_beam_search, TokenLm};
use lae_core::nnet::gradcheck::relative_error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn loss_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0;
    while cases < 250 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let grid = random_grid(&mut rng, t, v);
        for (label, p) in labeling_probs(&grid, t, v) {
            let r = ctc_loss(&grid, t, v, &label);
            assert!(r.feasible);
            assert!(((-r.loss).exp() - p).abs() < 1e-9, "t={t} v={v} {label:?}");
            cases += 1;
        }
        // A target one longer than the frames is never alignable.
        let long = vec![1; t + 1];
        assert!(!ctc_loss(&grid, t, v, &long).feasible);
    }
}

fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for k in 1..v {
                let mut q: Vec<usize> = p.clone();
                q.push(k);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn probabilities_over_all_targets_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let t = rng.gen_range(1..=5);
        let v = rng.gen_range(2..=4);
        let grid = random_grid(&mut rng, t, v);
        let total: f64 = all_targets(v, t)
            .iter()
            .filter(|y| min_frames(y) <= t)
            .map(|y| (-ctc_loss(&grid, t, v, y).loss).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-4;
    for _ in 0..100 {
        let t = rng.gen_range(2..=7);
        let v = rng.gen_range(2..=5);
        let grid = random_grid(&mut rng, t, v);
        let n = rng.gen_range(0..=t / 2);
        let target: Vec<usize> = (0..n).map(|_| rng.gen_range(1..v)).collect();
        let r = ctc_loss(&grid, t, v, &target);
        if !r.feasible {
            continue;
        }
        let f = |g: &[f64]| ctc_loss(g, t, v, &target).loss;
        let mut numeric = vec![0.0; grid.len()];
        for i in 0..grid.len() {
            let mut g = grid.clone();
            let at = |d: f64, g: &mut Vec<f64>| {
                g[i] = grid[i] + d;
                f(g)
            };
            numeric[i] = (-at(2.0 * h, &mut g) + 8.0 * at(h, &mut g) - 8.0 * at(-h, &mut g) + at(-2.0 * h, &mut g))
                / (12.0 * h);
        }
        let err = relative_error(&r.grad, &numeric, 1e-3);
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn gradient_f32_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (t, v) = (5, 3);
        let grid: Vec<f64> = random_grid(&mut rng, t, v).iter().map(|&x| x as f32 as f64).collect();
        let target = [1, 2];
        let r = ctc_loss(&grid, t, v, &target);
        let h = 1e-2f32;
        let numeric: Vec<f64> = (0..grid.len())
            .map(|i| {
                let at = |d: f32| {
                    let mut g = grid.clone();
                    g[i] = (grid[i] as f32 + d) as f64;
                    ctc_loss(&g, t, v, &target).loss as f32
                };
                ((at(h) - at(-h)) / (2.0 * h)) as f64
            })
            .collect();
        assert!(relative_error(&r.grad, &numeric, 1e-3) <= 1e-3);
    }
}

#[test]
fn beam_search_finds_brute_force_best() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..150 {
        let t = rng.gen_range(1..=4);
        let v = rng.gen_range(2..=3);
        let grid = random_grid(&mut rng, t, v);
        let (best, p) = best_labeling(&grid, t, v);
        let beam = labeling_probs(&grid, t, v).len();
        let hyps = prefix_beam_search(&grid, v, beam, None, 0.0).unwrap();
        assert_eq!(hyps[0].tokens, best);
        assert!((hyps[0].acoustic.exp() - p).abs() < 1e-12);
        assert_eq!(hyps[0].lm, 0.0);
    }
}

struct UniformLm(usize);

impl TokenLm for UniformLm {
    fn log_prob(&self, _: &[usize], _: usize) -> f64 {
        -(self.0 as f64).ln()
    }
}

#[test]
fn uniform_lm_keeps_equal_length_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let (t, v) = (4, 3);
        let grid = random_grid(&mut rng, t, v);
        let plain = prefix_beam_search(&grid, v, 64, None, 0.0).unwrap();
        let lm = UniformLm(v - 1);
        let fused = prefix_beam_search(&grid, v, 64, Some(&lm), 0.2).unwrap();
        for len in 0..=t {
            let a: Vec<_> = plain.iter().filter(|h| h.tokens.len() == len).map(|h| h.tokens.clone()).collect();
            let b: Vec<_> = fused.iter().filter(|h| h.tokens.len() == len).map(|h| h.tokens.clone()).collect();
            assert_eq!(a, b);
        }
        for h in &fused {
            let want = h.acoustic + 0.2 * h.tokens.len() as f64 * -(2f64).ln();
            assert!((h.score - want).abs() < 1e-12);
        }
    }
}

#[test]
fn beam_one_is_greedy_on_unambiguous_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let (t, v) = (8, 4);
        let mut grid = vec![(0.02f64).ln(); t * v];
        for row in grid.chunks_mut(v) {
            row[rng.gen_range(0..v)] = (1.0 - 0.02 * (v - 1) as f64).ln();
        }
        let h = prefix_beam_search(&grid, v, 1, None, 0.0).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].tokens, greedy_decode(&grid, v));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn top_score_grows_with_beam(seed in any::<u64>(), t in 1usize..8, v in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, t, v);
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=8 {
            let h = prefix_beam_search(&grid, v, beam, None, 0.0).unwrap();
            prop_assert!(h[0].score >= prev - 1e-12);
            prev = h[0].score;
        }
    }

    #[test]
    fn search_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, 6, 4);
        let lm = UniformLm(3);
        let a = prefix_beam_search(&grid, 4, 5, Some(&lm), 0.3).unwrap();
        let b = prefix_beam_search(&grid, 4, 5, Some(&lm), 0.3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grid_rows_normalized_and_loss_nonnegative(seed in any::<u64>(), t in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, t, 3);
        for row in grid.chunks(3) {
            prop_assert!((row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let r = ctc_loss(&grid, t, 3, &[1]);
        prop_assert!(r.loss >= 0.0);
    }
}

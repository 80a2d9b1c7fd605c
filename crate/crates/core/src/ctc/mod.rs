//! Connectionist temporal classification: loss with exact gradients, greedy
//! decoding, and prefix beam search with shallow fusion.

mod decode;
mod loss;

pub use decode::{
    format_nbest, greedy_decode, parse_nbest, prefix_beam_search, rank_order, Hypothesis, NbestEntry, TokenLm,
};
pub use loss::{ctc_loss, min_frames, CtcLoss};

use crate::error::Result;
use crate::nnet::{Graph, Real, Var};

/// Attaches the CTC loss of `target` to a log-posterior node. Returns `None`
/// when the target cannot be aligned to the available frames.
pub fn ctc_node<R: Real>(g: &mut Graph<'_, R>, log_probs: Var, target: &[usize]) -> Result<Option<(Var, f64)>> {
    let (t, v) = g.shape(log_probs);
    let grid: Vec<f64> = g.value(log_probs).iter().map(|x| x.as_f64()).collect();
    let res = ctc_loss(&grid, t, v, target);
    if !res.feasible {
        return Ok(None);
    }
    let grad = res.grad.iter().map(|&x| R::lit(x)).collect();
    let node = g.scalar_loss(log_probs, R::lit(res.loss), grad)?;
    Ok(Some((node, res.loss)))
}

/// Row-major log posteriors of a graph node as f64.
pub fn grid_of<R: Real>(g: &Graph<'_, R>, log_probs: Var) -> (Vec<f64>, usize, usize) {
    let (t, v) = g.shape(log_probs);
    (g.value(log_probs).iter().map(|x| x.as_f64()).collect(), t, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    const LN_HALF: f64 = -std::f64::consts::LN_2;

    #[test]
    fn single_frame_empty_target() {
        let grid = [0.3f64.ln(), 0.7f64.ln()];
        let r = ctc_loss(&grid, 1, 2, &[]);
        assert!((r.loss + 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_frames() {
        let grid = [LN_HALF; 4];
        let r = ctc_loss(&grid, 2, 2, &[1]);
        assert!((r.loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeat_without_room_is_infeasible() {
        let r = ctc_loss(&[LN_HALF; 2], 1, 2, &[1, 1]);
        assert!(!r.feasible);
        assert_eq!(r.loss, f64::INFINITY);
        assert!(r.grad.iter().all(|&g| g == 0.0));
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
    }

    fn one_hot_grid(ids: &[usize], v: usize) -> Vec<f64> {
        let mut g = vec![(0.01f64).ln(); ids.len() * v];
        for (t, &k) in ids.iter().enumerate() {
            g[t * v + k] = (1.0 - 0.01 * (v as f64 - 1.0)).ln();
        }
        g
    }

    #[test]
    fn greedy_collapse_rule() {
        assert_eq!(greedy_decode(&one_hot_grid(&[0, 1, 1, 0, 1], 3), 3), vec![1, 1]);
        assert_eq!(greedy_decode(&one_hot_grid(&[0, 0, 0], 3), 3), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot_grid(&[1, 2], 3), 3), vec![1, 2]);
        // Ties go to the lowest id.
        assert_eq!(greedy_decode(&[LN_HALF, LN_HALF], 2), Vec::<usize>::new());
    }

    #[test]
    fn beam_search_edge_cases() {
        let h = prefix_beam_search(&[], 3, 10, None, 0.0).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h[0].tokens.is_empty() && h[0].score == 0.0);
        assert!(prefix_beam_search(&[], 3, 0, None, 0.0).is_err());
        assert!(prefix_beam_search(&[], 3, 1, None, 0.2).is_err());
        assert!(prefix_beam_search(&[], 3, 1, None, -1.0).is_err());
    }

    #[test]
    fn nbest_round_trip() {
        let v = Vocabulary::synthetic(2, 2);
        let hyps = vec![Hypothesis {
            tokens: vec![3, 5],
            acoustic: -1.5,
            lm: -2.0,
            score: -1.9,
        }];
        let text = format_nbest("u1", &hyps, &v);
        assert_eq!(text, "u1\t1\t-1.900000\t-1.500000\t-2.000000\ta00 b00\n");
        let back = parse_nbest(&text, &v).unwrap();
        assert_eq!(back[0].tokens, vec![3, 5]);
        assert!(parse_nbest("u1\t1\tx\n", &v).is_err());
    }
}

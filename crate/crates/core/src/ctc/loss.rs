use crate::nnet::real::log_add;
use crate::vocab::BLANK;

/// Result of the CTC forward-backward pass on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcLoss {
    /// `-ln P(target | grid)`; `+inf` when the target cannot be aligned.
    pub loss: f64,
    /// d loss / d log_posteriors, row-major `T x V`; all zero when infeasible.
    pub grad: Vec<f64>,
    pub feasible: bool,
}

impl CtcLoss {
    fn infeasible(n: usize) -> Self {
        CtcLoss {
            loss: f64::INFINITY,
            grad: vec![0.0; n],
            feasible: false,
        }
    }
}

/// Fewest frames that can emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood and its exact gradient with respect to the
/// per-frame log posteriors (`grid` is `frames x vocab`, row-major).
///
/// The target must not contain the blank id; ids must be `< vocab`.
pub fn ctc_loss(grid: &[f64], frames: usize, vocab: usize, target: &[usize]) -> CtcLoss {
    assert_eq!(grid.len(), frames * vocab, "grid is not frames x vocab");
    assert!(
        target.iter().all(|&k| k != BLANK && k < vocab),
        "target holds blank or out-of-range ids"
    );
    if min_frames(target) > frames {
        return CtcLoss::infeasible(grid.len());
    }
    if frames == 0 {
        return CtcLoss {
            loss: 0.0,
            grad: Vec::new(),
            feasible: true,
        };
    }

    // Blank-augmented label sequence: b y1 b y2 ... yn b.
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { BLANK } else { target[s / 2] };
    let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let lp = |t: usize, k: usize| grid[t * vocab + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, BLANK);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, label(s)) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, BLANK);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, label(s_len - 2));
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == ninf { ninf } else { b + lp(t, label(s)) };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return CtcLoss::infeasible(grid.len());
    }

    // gamma_t(k) = sum_{s: label(s)=k} alpha_t(s) beta_t(s) / (P y_t(k));
    // both alpha and beta include the emission at t, hence the division.
    let mut grad = vec![0.0; grid.len()];
    let mut acc = vec![ninf; vocab];
    for t in 0..frames {
        acc.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                let k = label(s);
                acc[k] = log_add(acc[k], ab);
            }
        }
        for k in 0..vocab {
            if acc[k] > ninf {
                grad[t * vocab + k] = -(acc[k] - log_p - lp(t, k)).exp();
            }
        }
    }
    CtcLoss {
        loss: -log_p,
        grad,
        feasible: true,
    }
}

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use super::loss::ctc_loss;
use crate::error::{Error, Result};
use crate::nnet::real::log_add;
use crate::vocab::{Vocabulary, BLANK};

/// Token-level language model used for shallow fusion.
pub trait TokenLm {
    /// Natural-log probability of `token` following `context` (vocabulary ids,
    /// sentence start implied before `context[0]`).
    fn log_prob(&self, context: &[usize], token: usize) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub acoustic: f64,
    pub lm: f64,
    /// `acoustic + weight * lm`.
    pub score: f64,
}

/// Higher score first, then lexicographically smaller token sequence.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-frame argmax (lowest id on ties), collapse repeats, drop blanks.
pub fn greedy_decode(grid: &[f64], vocab: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in grid.chunks(vocab) {
        let k = argmax(row);
        if k != BLANK && k != prev {
            out.push(k);
        }
        prev = k;
    }
    out
}

#[derive(Clone, Copy)]
struct Beam {
    blank: f64,
    non_blank: f64,
    lm: f64,
}

impl Beam {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// CTC prefix beam search with optional token-level shallow fusion.
///
/// Each prefix tracks the log-probability of ending in blank and in its last
/// label. Extending a prefix by a non-blank token adds `weight * lm` once.
/// Pruning and the final ranking use `acoustic + weight * lm`, ties broken by
/// the lexicographically smaller token sequence.
///
/// A single pass at width `beam` can lose a labeling that a narrower pass
/// keeps, because pruned prefixes drop alignment mass from their extensions.
/// The search therefore pools the final prefixes of every width `1..=beam`
/// and ranks them by their exact CTC log-likelihood, which makes the top
/// score nondecreasing in `beam`.
pub fn prefix_beam_search(
    grid: &[f64],
    vocab: usize,
    beam: usize,
    lm: Option<&dyn TokenLm>,
    weight: f64,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Config(format!("lm weight {weight} must be finite and >= 0")));
    }
    if weight > 0.0 && lm.is_none() {
        return Err(Error::Config("lm weight > 0 without a language model".into()));
    }
    if vocab == 0 || !grid.len().is_multiple_of(vocab) {
        return Err(Error::Config(format!("grid of {} values is not a multiple of vocab {vocab}", grid.len())));
    }
    let lm = if weight > 0.0 { lm } else { None };
    let mut pool: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for width in 1..=beam {
        let (found, pruned) = single_pass(grid, vocab, width, lm, weight);
        pool.extend(found);
        if !pruned {
            // Nothing was pruned; wider passes return the same set.
            break;
        }
    }
    let frames = grid.len() / vocab;
    let mut hyps: Vec<Hypothesis> = pool
        .into_iter()
        .map(|(tokens, lm_score)| {
            let acoustic = -ctc_loss(grid, frames, vocab, &tokens).loss;
            Hypothesis {
                tokens,
                acoustic,
                lm: lm_score,
                score: acoustic + weight * lm_score,
            }
        })
        .collect();
    hyps.sort_by(rank_order);
    hyps.truncate(beam);
    Ok(hyps)
}

fn single_pass(
    grid: &[f64],
    vocab: usize,
    beam: usize,
    lm: Option<&dyn TokenLm>,
    weight: f64,
) -> (Vec<(Vec<usize>, f64)>, bool) {
    let ninf = f64::NEG_INFINITY;
    let combined = |b: &Beam| b.total() + weight * b.lm;
    let mut beams: Vec<(Vec<usize>, Beam)> = vec![(
        Vec::new(),
        Beam {
            blank: 0.0,
            non_blank: ninf,
            lm: 0.0,
        },
    )];
    let mut pruned = false;
    for row in grid.chunks(vocab) {
        let mut next: HashMap<Vec<usize>, Beam> = HashMap::with_capacity(beams.len() * vocab);
        for (prefix, b) in &beams {
            let total = b.total();
            // Blank keeps the prefix.
            let e = next.entry(prefix.clone()).or_insert(Beam {
                blank: ninf,
                non_blank: ninf,
                lm: b.lm,
            });
            e.blank = log_add(e.blank, total + row[BLANK]);
            let last = prefix.last().copied();
            for (k, &p) in row.iter().enumerate() {
                if k == BLANK || p == ninf {
                    continue;
                }
                // A repeat only starts a new label after a blank; otherwise it
                // collapses onto the same prefix.
                let from = if Some(k) == last {
                    let e = next.get_mut(prefix).expect("inserted above");
                    e.non_blank = log_add(e.non_blank, b.non_blank + p);
                    b.blank
                } else {
                    total
                };
                let mut ext = prefix.clone();
                ext.push(k);
                let e = next.entry(ext).or_insert_with(|| Beam {
                    blank: ninf,
                    non_blank: ninf,
                    lm: b.lm + lm.map_or(0.0, |m| m.log_prob(prefix, k)),
                });
                e.non_blank = log_add(e.non_blank, from + p);
            }
        }
        let mut ranked: Vec<(Vec<usize>, Beam)> = next.into_iter().filter(|(_, b)| b.total() > ninf).collect();
        ranked.sort_by(|a, b| {
            combined(&b.1)
                .partial_cmp(&combined(&a.1))
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        if ranked.len() > beam {
            pruned = true;
            ranked.truncate(beam);
        }
        beams = ranked;
    }
    (beams.into_iter().map(|(p, b)| (p, b.lm)).collect(), pruned)
}

/// One line per hypothesis: utt_id, rank, combined, acoustic, lm, token surfaces
/// (tab-separated; surfaces space-separated).
pub fn format_nbest(utt_id: &str, hyps: &[Hypothesis], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (rank, h) in hyps.iter().enumerate() {
        let words: Vec<&str> = h.tokens.iter().map(|&k| vocab.surface(k)).collect();
        let _ = writeln!(
            out,
            "{utt_id}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            rank + 1,
            h.score,
            h.acoustic,
            h.lm,
            words.join(" ")
        );
    }
    out
}

/// Parsed n-best line.
#[derive(Clone, Debug, PartialEq)]
pub struct NbestEntry {
    pub utt_id: String,
    pub rank: usize,
    pub score: f64,
    pub acoustic: f64,
    pub lm: f64,
    pub tokens: Vec<usize>,
}

pub fn parse_nbest(text: &str, vocab: &Vocabulary) -> Result<Vec<NbestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("n-best line {}: {what}", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad score"));
        let tokens = f[5]
            .split_whitespace()
            .map(|w| vocab.id(w).ok_or_else(|| bad(&format!("unknown token {w:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(NbestEntry {
            utt_id: f[0].to_string(),
            rank: f[1].parse().map_err(|_| bad("bad rank"))?,
            score: num(f[2])?,
            acoustic: num(f[3])?,
            lm: num(f[4])?,
            tokens,
        });
    }
    Ok(out)
}

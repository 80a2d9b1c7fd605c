use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vocab::{Lang, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

/// One aligned position; `reference`/`hypothesis` index the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignedPair {
    pub op: EditOp,
    pub reference: Option<usize>,
    pub hypothesis: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl AlignmentCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S+D+I)/N`, undefined for an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.ref_len > 0).then(|| self.errors() as f64 / self.ref_len as f64)
    }

    pub fn add(&mut self, o: &AlignmentCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_len += o.ref_len;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub counts: AlignmentCounts,
    pub trace: Vec<AlignedPair>,
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers substitution (or match), then insertion, then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut trace = Vec::with_capacity(n.max(m));
    let mut counts = AlignmentCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                let op = if same {
                    EditOp::Match
                } else {
                    counts.substitutions += 1;
                    EditOp::Sub
                };
                trace.push(AlignedPair {
                    op,
                    reference: Some(i - 1),
                    hypothesis: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            counts.insertions += 1;
            trace.push(AlignedPair {
                op: EditOp::Ins,
                reference: None,
                hypothesis: Some(j - 1),
            });
            j -= 1;
        } else {
            counts.deletions += 1;
            trace.push(AlignedPair {
                op: EditOp::Del,
                reference: Some(i - 1),
                hypothesis: None,
            });
            i -= 1;
        }
    }
    trace.reverse();
    Alignment { counts, trace }
}

/// Global counts plus the per-language split (indexed by [`Lang::index`]).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixedScore {
    pub total: AlignmentCounts,
    pub by_lang: [AlignmentCounts; 2],
}

impl MixedScore {
    pub fn mer(&self) -> Option<f64> {
        self.total.rate()
    }

    pub fn er(&self, lang: Lang) -> Option<f64> {
        self.by_lang[lang.index()].rate()
    }

    pub fn add(&mut self, o: &MixedScore) {
        self.total.add(&o.total);
        for (a, b) in self.by_lang.iter_mut().zip(&o.by_lang) {
            a.add(b);
        }
    }
}

/// Scores one utterance. Substitutions and deletions count toward the
/// reference token's language, insertions toward the hypothesis token's.
/// Special symbols in the hypothesis are dropped first; every reference
/// token must belong to a language.
pub fn score_utterance(reference: &[usize], hypothesis: &[usize], vocab: &Vocabulary) -> Result<MixedScore> {
    let lang_of = |id: usize| {
        vocab
            .lang(id)
            .ok_or_else(|| Error::Data(format!("reference token {id} has no language tag")))
    };
    let hyp: Vec<usize> = hypothesis.iter().copied().filter(|&k| vocab.lang(k).is_some()).collect();
    let al = edit_distance(reference, &hyp);
    let mut by_lang = [AlignmentCounts::default(); 2];
    for &r in reference {
        by_lang[lang_of(r)?.index()].ref_len += 1;
    }
    for p in &al.trace {
        match p.op {
            EditOp::Match => {}
            EditOp::Sub => by_lang[lang_of(reference[p.reference.unwrap()])?.index()].substitutions += 1,
            EditOp::Del => by_lang[lang_of(reference[p.reference.unwrap()])?.index()].deletions += 1,
            EditOp::Ins => {
                let k = hyp[p.hypothesis.unwrap()];
                by_lang[vocab.lang(k).expect("specials filtered").index()].insertions += 1;
            }
        }
    }
    Ok(MixedScore {
        total: al.counts,
        by_lang,
    })
}

/// Corpus-level MER and per-language error rates over paired sequences.
pub fn mixed_error_rate(refs: &[Vec<usize>], hyps: &[Vec<usize>], vocab: &Vocabulary) -> Result<MixedScore> {
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let mut out = MixedScore::default();
    for (r, h) in refs.iter().zip(hyps) {
        out.add(&score_utterance(r, h, vocab)?);
    }
    Ok(out)
}

/// One row of the score report.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub partition: String,
    pub system: String,
    pub score: MixedScore,
}

pub const REPORT_HEADER: &str = "partition,system,MER,ER_A,ER_B,N,S,D,I";

/// Rates are percentages with three decimals; `NA` marks an empty reference.
pub fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "NA".to_string(), |x| format!("{:.3}", 100.0 * x))
}

pub fn score_report(rows: &[ScoreRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let t = &r.score.total;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.partition,
            r.system,
            fmt_rate(r.score.mer()),
            fmt_rate(r.score.er(Lang::A)),
            fmt_rate(r.score.er(Lang::B)),
            t.ref_len,
            t.substitutions,
            t.deletions,
            t.insertions
        );
    }
    out
}

/// Per-utterance error counts, the input of the significance test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UttErrors {
    pub utt_id: String,
    pub errors: usize,
    pub ref_len: usize,
}

pub const PER_UTT_HEADER: &str = "utt_id\terrors\tref_len";

pub fn per_utt_tsv(rows: &[UttErrors]) -> String {
    let mut out = format!("{PER_UTT_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.utt_id, r.errors, r.ref_len);
    }
    out
}

pub fn parse_per_utt(text: &str) -> Result<Vec<UttErrors>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(PER_UTT_HEADER) {
        return Err(Error::Data(format!("per-utterance file must start with {PER_UTT_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("per-utterance line {}: expected utt_id, errors, ref_len", i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(UttErrors {
            utt_id: f[0].to_string(),
            errors: f[1].parse().map_err(|_| bad())?,
            ref_len: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

//! Token-level n-gram language model with interpolated Witten-Bell
//! smoothing, stored in backoff form and serialized as ARPA text.
//!
//! For a history `h` seen `c(h)` times with `N1+(h)` distinct followers,
//! `p(w|h) = (c(h,w) + N1+(h) p(w|h')) / (c(h) + N1+(h))`, where `h'` drops the
//! oldest token. The unigram level interpolates with the uniform distribution
//! over the model vocabulary (every known word, `</s>` and `<unk>`). Unseen
//! continuations back off with weight `N1+(h) / (c(h) + N1+(h))`, which makes the
//! backoff form exactly equal to the interpolated model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::ctc::TokenLm;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNK_ID: u32 = 2;

/// log10 probability written for `<s>`, which is never predicted.
const BOS_LOG10: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log10p: f64,
    log10bow: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    order: usize,
    symbols: Vec<String>,
    index: HashMap<String, u32>,
    /// `tables[k]` holds the (k+1)-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

fn symbol_table(words: impl IntoIterator<Item = String>) -> (Vec<String>, HashMap<String, u32>) {
    let mut rest: Vec<String> = words
        .into_iter()
        .filter(|w| w != BOS && w != EOS && w != UNK)
        .collect();
    rest.sort();
    rest.dedup();
    let symbols: Vec<String> = [BOS, EOS, UNK].iter().map(|s| s.to_string()).chain(rest).collect();
    let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
    (symbols, index)
}

impl NgramModel {
    /// Trains on whitespace-free token sequences. `extra_vocab` adds words
    /// that should receive probability even if unseen.
    pub fn train<S: AsRef<str>>(transcripts: &[Vec<S>], order: usize, extra_vocab: &[String]) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if transcripts.is_empty() {
            return Err(Error::Data("n-gram training needs at least one transcript".into()));
        }
        let words = transcripts
            .iter()
            .flatten()
            .map(|w| w.as_ref().to_string())
            .chain(extra_vocab.iter().cloned());
        let (symbols, index) = symbol_table(words);
        let sentences: Vec<Vec<u32>> = transcripts
            .iter()
            .map(|s| {
                std::iter::once(BOS_ID)
                    .chain(s.iter().map(|w| index.get(w.as_ref()).copied().unwrap_or(UNK_ID)))
                    .chain(std::iter::once(EOS_ID))
                    .collect()
            })
            .collect();

        // counts[k][(h, w)] for (k+1)-grams, histories truncated at <s>.
        let mut counts: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); order];
        for s in &sentences {
            for end in 1..s.len() {
                for k in 0..order {
                    if k > end {
                        break;
                    }
                    let gram = &s[end - k..=end];
                    *counts[k].entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }

        let mut model = NgramModel {
            order,
            symbols,
            index,
            tables: vec![HashMap::new(); order],
        };
        let vocab_size = (model.symbols.len() - 1) as f64;

        // Unigrams: interpolate with uniform over everything except <s>.
        let total: u64 = counts[0].values().sum();
        let types = counts[0].len() as f64;
        let denom = total as f64 + types;
        for w in 1..model.symbols.len() as u32 {
            let c = counts[0].get(&vec![w]).copied().unwrap_or(0) as f64;
            let p = (c + types / vocab_size) / denom;
            model.tables[0].insert(vec![w], Entry { log10p: p.log10(), log10bow: None });
        }
        model.tables[0].insert(vec![BOS_ID], Entry { log10p: BOS_LOG10, log10bow: None });

        for k in 1..order {
            let mut hist: BTreeMap<&[u32], (u64, u64)> = BTreeMap::new();
            for (gram, &c) in &counts[k] {
                let e = hist.entry(&gram[..k]).or_insert((0, 0));
                e.0 += c;
                e.1 += 1;
            }
            for (gram, &c) in &counts[k] {
                let (ch, n1) = hist[&gram[..k]];
                let lower = model.prob_ids(&gram[1..k], gram[k]);
                let p = (c as f64 + n1 as f64 * lower) / (ch + n1) as f64;
                model.tables[k].insert(gram.clone(), Entry { log10p: p.log10(), log10bow: None });
            }
            for (h, (ch, n1)) in hist {
                let bow = n1 as f64 / (ch + n1) as f64;
                let e = model.tables[k - 1]
                    .get_mut(h)
                    .expect("every history is itself a stored n-gram");
                e.log10bow = Some(bow.log10());
            }
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Words that can be predicted (known words, `</s>`, `<unk>`).
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.symbols.iter().skip(1).map(String::as_str)
    }

    fn sym(&self, w: &str) -> u32 {
        self.index.get(w).copied().filter(|&i| i != BOS_ID).unwrap_or(UNK_ID)
    }

    /// `p(w | h)` in backoff form; `h` is already truncated to at most order-1.
    fn prob_ids(&self, h: &[u32], w: u32) -> f64 {
        10f64.powf(self.log10_ids(h, w))
    }

    fn log10_ids(&self, h: &[u32], w: u32) -> f64 {
        let mut h = h;
        let mut bow = 0.0;
        loop {
            let k = h.len();
            let mut key = [0u32; 16];
            if k < key.len() {
                key[..k].copy_from_slice(h);
                key[k] = w;
                if let Some(e) = self.tables[k].get(&key[..=k]) {
                    return bow + e.log10p;
                }
            }
            if k == 0 {
                // Only <s> itself is missing from the unigram table's support.
                return bow + BOS_LOG10;
            }
            if let Some(b) = self.tables[k - 1].get(h).and_then(|e| e.log10bow) {
                bow += b;
            }
            h = &h[1..];
        }
    }

    fn history(&self, context: &[u32]) -> Vec<u32> {
        let keep = self.order - 1;
        let mut h: Vec<u32> = std::iter::once(BOS_ID).chain(context.iter().copied()).collect();
        if h.len() > keep {
            h.drain(..h.len() - keep);
        }
        h
    }

    /// Natural-log `p(word | context)`, sentence start implied before `context`.
    pub fn log_prob(&self, context: &[&str], word: &str) -> f64 {
        let ids: Vec<u32> = context.iter().map(|w| self.sym(w)).collect();
        self.log10_ids(&self.history(&ids), self.sym(word)) * std::f64::consts::LN_10
    }

    /// Natural-log probability of a whole sentence including `</s>`.
    pub fn score(&self, sentence: &[&str]) -> f64 {
        let mut total = 0.0;
        for i in 0..=sentence.len() {
            let w = sentence.get(i).copied().unwrap_or(EOS);
            total += self.log_prob(&sentence[..i], w);
        }
        total
    }

    /// `exp(-mean log p)` over every predicted token, `</s>` included.
    pub fn perplexity(&self, corpus: &[Vec<&str>]) -> f64 {
        let (mut lp, mut n) = (0.0, 0usize);
        for s in corpus {
            lp += self.score(s);
            n += s.len() + 1;
        }
        (-lp / n.max(1) as f64).exp()
    }

    /// Histories with a stored backoff weight, as symbol strings.
    pub fn contexts(&self) -> Vec<Vec<&str>> {
        let mut out: Vec<Vec<&str>> = self
            .tables
            .iter()
            .flat_map(|t| t.iter().filter(|(_, e)| e.log10bow.is_some()).map(|(g, _)| g))
            .map(|g| g.iter().map(|&i| self.symbols[i as usize].as_str()).collect())
            .collect();
        out.sort();
        out
    }

    /// Natural-log `p(w | h)` for an explicit history (no implied `<s>`).
    pub fn log_prob_given(&self, history: &[&str], word: &str) -> f64 {
        let ids: Vec<u32> = history
            .iter()
            .map(|w| self.index.get(*w).copied().unwrap_or(UNK_ID))
            .collect();
        let start = ids.len().saturating_sub(self.order - 1);
        self.log10_ids(&ids[start..], self.sym(word)) * std::f64::consts::LN_10
    }

    /// ARPA text: `\data\` counts, then per order the lines
    /// `log10p <TAB> tokens [<TAB> log10bow]` sorted by token strings.
    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (k, t) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, t.len());
        }
        for (k, t) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let mut rows: Vec<(Vec<&str>, &Entry)> = t
                .iter()
                .map(|(g, e)| (g.iter().map(|&i| self.symbols[i as usize].as_str()).collect(), e))
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (g, e) in rows {
                let _ = write!(out, "{}\t{}", e.log10p, g.join(" "));
                if let Some(b) = e.log10bow {
                    let _ = write!(out, "\t{b}");
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Data(format!("ARPA line {}: {m}", line + 1));
        let mut declared: Vec<usize> = Vec::new();
        let mut rows: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut seen_end = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line == "\\data\\" {
                continue;
            }
            if line == "\\end\\" {
                seen_end = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, n) = rest.split_once('=').ok_or_else(|| bad(i, "bad count line"))?;
                let k: usize = k.trim().parse().map_err(|_| bad(i, "bad order"))?;
                if k != declared.len() + 1 {
                    return Err(bad(i, "orders must be declared in sequence"));
                }
                declared.push(n.trim().parse().map_err(|_| bad(i, "bad count"))?);
                rows.push(Vec::new());
                continue;
            }
            if let Some(k) = line.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let k: usize = k.parse().map_err(|_| bad(i, "bad section"))?;
                if k == 0 || k > declared.len() {
                    return Err(bad(i, "section for undeclared order"));
                }
                section = Some(k - 1);
                continue;
            }
            let k = section.ok_or_else(|| bad(i, "entry outside a section"))?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 2 && f.len() != 3 {
                return Err(bad(i, "expected 2 or 3 tab-separated fields"));
            }
            let toks: Vec<String> = f[1].split(' ').map(str::to_string).collect();
            if toks.len() != k + 1 {
                return Err(bad(i, "n-gram length does not match its section"));
            }
            let log10p = f[0].parse().map_err(|_| bad(i, "bad probability"))?;
            let log10bow = f.get(2).map(|b| b.parse()).transpose().map_err(|_| bad(i, "bad backoff"))?;
            rows[k].push((toks, Entry { log10p, log10bow }));
        }
        if !seen_end {
            return Err(Error::Data("ARPA text has no \\end\\ marker".into()));
        }
        if declared.is_empty() {
            return Err(Error::Data("ARPA text declares no n-grams".into()));
        }
        for (k, (&n, r)) in declared.iter().zip(&rows).enumerate() {
            if n != r.len() {
                return Err(Error::Data(format!("{}-grams: declared {n}, found {}", k + 1, r.len())));
            }
        }
        let (symbols, index) = symbol_table(rows[0].iter().map(|(t, _)| t[0].clone()));
        let mut tables = vec![HashMap::new(); declared.len()];
        for (k, r) in rows.into_iter().enumerate() {
            for (toks, e) in r {
                let ids = toks
                    .iter()
                    .map(|t| {
                        index
                            .get(t)
                            .copied()
                            .ok_or_else(|| Error::Data(format!("{t:?} appears in a {}-gram but not as a unigram", k + 1)))
                    })
                    .collect::<Result<Vec<u32>>>()?;
                tables[k].insert(ids, e);
            }
        }
        Ok(NgramModel {
            order: declared.len(),
            symbols,
            index,
            tables,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_arpa()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arpa(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Fuses an [`NgramModel`] into CTC decoding over vocabulary ids. Specials
/// (blank and masks) map to `<unk>`.
pub struct VocabLm<'a> {
    model: &'a NgramModel,
    map: Vec<u32>,
}

impl<'a> VocabLm<'a> {
    pub fn new(model: &'a NgramModel, vocab: &Vocabulary) -> Self {
        let map = (0..vocab.len())
            .map(|i| match vocab.lang(i) {
                Some(_) => model.sym(vocab.surface(i)),
                None => UNK_ID,
            })
            .collect();
        VocabLm { model, map }
    }
}

impl TokenLm for VocabLm<'_> {
    fn log_prob(&self, context: &[usize], token: usize) -> f64 {
        let keep = self.model.order - 1;
        let mut h = [0u32; 16];
        let full = context.len() + 1;
        let n = keep.min(full).min(h.len());
        // The last n symbols of <s> + context.
        for (j, slot) in h[..n].iter_mut().enumerate() {
            let pos = full - n + j;
            *slot = if pos == 0 { BOS_ID } else { self.map[context[pos - 1]] };
        }
        self.model.log10_ids(&h[..n], self.map[token]) * std::f64::consts::LN_10
    }
}

/// Training transcripts from vocabulary ids (surfaces of language tokens only).
pub fn transcripts_from_ids<'v>(seqs: impl IntoIterator<Item = &'v [usize]>, vocab: &'v Vocabulary) -> Vec<Vec<&'v str>> {
    seqs.into_iter()
        .map(|s| s.iter().filter(|&&i| vocab.lang(i).is_some()).map(|&i| vocab.surface(i)).collect())
        .collect()
}

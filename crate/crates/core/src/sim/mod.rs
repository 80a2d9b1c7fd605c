//! Synthetic two-language corpus. Each token of language A is a prototype
//! vector in feature dims `[0, F/2)`, each token of B lives in `[F/2, F)`;
//! a token is rendered as its prototype plus Gaussian noise for a sampled
//! number of frames.

mod io;

pub use io::{
    read_features, read_manifest, write_features, write_manifest, Corpus, ManifestRecord, Utterance, FEATURE_MAGIC,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::{Lang, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    TrainMonoA,
    TrainMonoB,
    TrainCs,
    TrainSimuCs,
    EvalMonoA,
    EvalMonoB,
    EvalCs,
}

impl Partition {
    pub const ALL: [Partition; 7] = [
        Partition::TrainMonoA,
        Partition::TrainMonoB,
        Partition::TrainCs,
        Partition::TrainSimuCs,
        Partition::EvalMonoA,
        Partition::EvalMonoB,
        Partition::EvalCs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::TrainMonoA => "train-mono-A",
            Partition::TrainMonoB => "train-mono-B",
            Partition::TrainCs => "train-CS",
            Partition::TrainSimuCs => "train-simu-CS",
            Partition::EvalMonoA => "eval-mono-A",
            Partition::EvalMonoB => "eval-mono-B",
            Partition::EvalCs => "eval-CS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Partition::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown partition {s:?}")))
    }

    pub fn is_train(self) -> bool {
        matches!(
            self,
            Partition::TrainMonoA | Partition::TrainMonoB | Partition::TrainCs | Partition::TrainSimuCs
        )
    }

    fn prefix(self) -> &'static str {
        match self {
            Partition::TrainMonoA => "trA",
            Partition::TrainMonoB => "trB",
            Partition::TrainCs => "trCS",
            Partition::TrainSimuCs => "trSim",
            Partition::EvalMonoA => "evA",
            Partition::EvalMonoB => "evB",
            Partition::EvalCs => "evCS",
        }
    }
}

/// Generator knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub tokens_per_lang: usize,
    pub feat_dim: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub noise_std: f64,
    /// Prototype entries are uniform in `[-scale, scale]`.
    pub proto_scale: f64,
    pub utt_tokens_min: usize,
    pub utt_tokens_max: usize,
    /// Silence frames (noise only) before and after each rendered utterance, `0..=max`.
    pub silence_max: usize,
    pub switch_min: usize,
    pub switch_max: usize,
    pub cap_frames: usize,
    pub splice_retries: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tokens_per_lang: 20,
            feat_dim: 16,
            dur_min: 8,
            dur_max: 12,
            noise_std: 0.1,
            proto_scale: 1.0,
            utt_tokens_min: 3,
            utt_tokens_max: 8,
            silence_max: 4,
            switch_min: 1,
            switch_max: 3,
            cap_frames: 300,
            splice_retries: 50,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feat_dim < 2 || !self.feat_dim.is_multiple_of(2) {
            return bad("feat_dim must be even and >= 2");
        }
        if self.tokens_per_lang == 0 || self.tokens_per_lang > 99 {
            return bad("tokens_per_lang must be in 1..=99");
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return bad("need 1 <= dur_min <= dur_max");
        }
        if self.utt_tokens_min == 0 || self.utt_tokens_min > self.utt_tokens_max {
            return bad("need 1 <= utt_tokens_min <= utt_tokens_max");
        }
        if self.switch_min == 0 || self.switch_min > self.switch_max {
            return bad("need 1 <= switch_min <= switch_max");
        }
        if self.switch_max + 1 > self.utt_tokens_max {
            return bad("switch_max + 1 exceeds utt_tokens_max");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !(self.proto_scale > 0.0) {
            return bad("noise_std must be >= 0 and proto_scale > 0");
        }
        let longest = self.utt_tokens_max * self.dur_max + 2 * self.silence_max;
        if longest > self.cap_frames {
            return bad("a single utterance can exceed cap_frames");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.tokens_per_lang, self.tokens_per_lang)
    }
}

/// Independent generator for a named stream.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(index.to_le_bytes());
    let d: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(d)
}

#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    pub lang: Lang,
    /// Vocabulary ids of this language's tokens, parallel to `prototypes`.
    pub ids: Vec<usize>,
    pub prototypes: Vec<Vec<f32>>,
}

impl SyntheticLanguage {
    pub fn active_dims(lang: Lang, feat_dim: usize) -> std::ops::Range<usize> {
        let half = feat_dim / 2;
        match lang {
            Lang::A => 0..half,
            Lang::B => half..feat_dim,
        }
    }

    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in i + 1..self.prototypes.len() {
                best = best.min(l2(&self.prototypes[i], &self.prototypes[j]));
            }
        }
        best
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// The two languages of a corpus.
#[derive(Clone, Debug)]
pub struct Languages {
    pub config: SimConfig,
    pub vocab: Vocabulary,
    pub langs: [SyntheticLanguage; 2],
}

impl Languages {
    pub fn new(config: SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocabulary();
        let make = |lang: Lang| -> Result<SyntheticLanguage> {
            let mut rng = derive_rng(seed, "prototypes", lang.index() as u64);
            let dims = SyntheticLanguage::active_dims(lang, config.feat_dim);
            // Also keep every prototype away from silence (the zero vector).
            let floor = (4.0 * config.noise_std).max(1e-3);
            for _ in 0..1000 {
                let prototypes: Vec<Vec<f32>> = (0..config.tokens_per_lang)
                    .map(|_| {
                        let mut v = vec![0f32; config.feat_dim];
                        for d in dims.clone() {
                            v[d] = rng.gen_range(-config.proto_scale..config.proto_scale) as f32;
                        }
                        v
                    })
                    .collect();
                let l = SyntheticLanguage {
                    lang,
                    ids: vocab.lang_ids(lang),
                    prototypes,
                };
                let zero = vec![0f32; config.feat_dim];
                if l.min_distance() > floor && l.prototypes.iter().all(|p| l2(p, &zero) > floor) {
                    return Ok(l);
                }
            }
            Err(Error::Config(format!(
                "could not place {} prototypes {floor:.3} apart; raise proto_scale or lower noise_std",
                config.tokens_per_lang
            )))
        };
        let langs = [make(Lang::A)?, make(Lang::B)?];
        Ok(Languages { config, vocab, langs })
    }

    pub fn lang(&self, lang: Lang) -> &SyntheticLanguage {
        &self.langs[lang.index()]
    }

    fn prototype(&self, id: usize) -> &[f32] {
        let lang = self.vocab.lang(id).expect("language token");
        &self.lang(lang).prototypes[id - self.lang(lang).ids[0]]
    }

    /// Renders a token sequence contiguously, with optional silence at both ends.
    pub fn render(&self, utt_id: &str, ids: &[usize], rng: &mut ChaCha8Rng) -> Utterance {
        let c = &self.config;
        let f = c.feat_dim;
        let noise = Normal::new(0.0, c.noise_std).expect("valid std");
        let mut feats: Vec<f32> = Vec::new();
        let push_frames = |feats: &mut Vec<f32>, proto: Option<&[f32]>, n: usize, rng: &mut ChaCha8Rng| {
            for _ in 0..n {
                for d in 0..f {
                    let base = proto.map_or(0.0, |p| p[d]);
                    let eps = if c.noise_std > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                    feats.push(base + eps);
                }
            }
        };
        let lead = rng.gen_range(0..=c.silence_max);
        push_frames(&mut feats, None, lead, rng);
        let mut boundaries = Vec::with_capacity(ids.len());
        let mut t = lead;
        for &id in ids {
            let dur = rng.gen_range(c.dur_min..=c.dur_max);
            push_frames(&mut feats, Some(self.prototype(id)), dur, rng);
            boundaries.push((t, t + dur));
            t += dur;
        }
        let trail = rng.gen_range(0..=c.silence_max);
        push_frames(&mut feats, None, trail, rng);
        let frames = feats.len() / f;
        Utterance {
            utt_id: utt_id.to_string(),
            partition: None,
            frames,
            feat_dim: f,
            features: feats,
            ids: ids.to_vec(),
            tags: ids.iter().map(|&i| self.vocab.lang(i).expect("language token")).collect(),
            boundaries,
        }
    }

    fn sample_tokens(&self, lang: Lang, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let ids = &self.lang(lang).ids;
        (0..n).map(|_| ids[rng.gen_range(0..ids.len())]).collect()
    }

    /// Monolingual utterance with a uniform token count in `utt_tokens_min..=max`.
    pub fn gen_monolingual(&self, utt_id: &str, lang: Lang, rng: &mut ChaCha8Rng) -> Utterance {
        let n = rng.gen_range(self.config.utt_tokens_min..=self.config.utt_tokens_max);
        let ids = self.sample_tokens(lang, n, rng);
        self.render(utt_id, &ids, rng)
    }

    /// Code-switched utterance rendered in one piece, with `switch_min..=max`
    /// language changes.
    pub fn gen_native_cs(&self, utt_id: &str, rng: &mut ChaCha8Rng) -> Utterance {
        let c = &self.config;
        let switches = rng.gen_range(c.switch_min..=c.switch_max);
        let n = rng.gen_range(c.utt_tokens_min.max(switches + 1)..=c.utt_tokens_max);
        // Choose `switches` distinct cut points among the n-1 gaps.
        let mut gaps: Vec<usize> = (1..n).collect();
        gaps.shuffle(rng);
        let mut cuts: Vec<usize> = gaps[..switches].to_vec();
        cuts.sort_unstable();
        let mut lang = if rng.gen_bool(0.5) { Lang::A } else { Lang::B };
        let mut ids = Vec::with_capacity(n);
        let mut start = 0;
        for end in cuts.into_iter().chain(std::iter::once(n)) {
            ids.extend(self.sample_tokens(lang, end - start, rng));
            lang = lang.other();
            start = end;
        }
        self.render(utt_id, &ids, rng)
    }
}

/// Concatenates utterances along time; targets, tags and re-offset
/// boundaries follow in order. Empty inputs contribute nothing.
pub fn splice(utt_id: &str, parts: &[&Utterance]) -> Result<Utterance> {
    let feat_dim = parts.iter().find(|u| u.frames > 0).map_or(0, |u| u.feat_dim);
    let mut out = Utterance {
        utt_id: utt_id.to_string(),
        partition: None,
        frames: 0,
        feat_dim,
        features: Vec::new(),
        ids: Vec::new(),
        tags: Vec::new(),
        boundaries: Vec::new(),
    };
    for u in parts {
        if u.frames == 0 && u.ids.is_empty() {
            continue;
        }
        if u.feat_dim != feat_dim {
            return Err(Error::Data(format!("splice: {} has {} dims, expected {feat_dim}", u.utt_id, u.feat_dim)));
        }
        let off = out.frames;
        out.features.extend_from_slice(&u.features);
        out.ids.extend_from_slice(&u.ids);
        out.tags.extend_from_slice(&u.tags);
        out.boundaries.extend(u.boundaries.iter().map(|&(s, e)| (s + off, e + off)));
        out.frames += u.frames;
    }
    Ok(out)
}

/// Splices alternating-language segments drawn from `pool_a` / `pool_b`.
/// Segment count is 2..=`switch_max + 1`; draws that exceed the frame cap are
/// retried, with fewer segments on each failure.
pub fn splice_code_switch(
    id: &str,
    pool_a: &[Utterance],
    pool_b: &[Utterance],
    config: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    if pool_a.is_empty() || pool_b.is_empty() {
        return Err(Error::Data("splice_code_switch needs both monolingual pools".into()));
    }
    let mut segments = rng.gen_range(config.switch_min + 1..=config.switch_max + 1);
    for _ in 0..config.splice_retries {
        let mut lang = if rng.gen_bool(0.5) { Lang::A } else { Lang::B };
        let mut parts = Vec::with_capacity(segments);
        for _ in 0..segments {
            let pool = match lang {
                Lang::A => pool_a,
                Lang::B => pool_b,
            };
            parts.push(&pool[rng.gen_range(0..pool.len())]);
            lang = lang.other();
        }
        if parts.iter().map(|u| u.frames).sum::<usize>() <= config.cap_frames {
            return splice(id, &parts);
        }
        segments = (segments - 1).max(2);
    }
    Err(Error::Data(format!(
        "splice {id}: no draw under {} frames after {} retries",
        config.cap_frames, config.splice_retries
    )))
}

/// Utterance counts per partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub counts: Vec<(Partition, usize)>,
}

impl CorpusSpec {
    /// 2000/2000/1000 train (mono-A, mono-B, native CS), 200 per eval partition.
    pub fn stock() -> Self {
        CorpusSpec {
            counts: vec![
                (Partition::TrainMonoA, 2000),
                (Partition::TrainMonoB, 2000),
                (Partition::TrainCs, 1000),
                (Partition::TrainSimuCs, 0),
                (Partition::EvalMonoA, 200),
                (Partition::EvalMonoB, 200),
                (Partition::EvalCs, 200),
            ],
        }
    }

    pub fn count(&self, p: Partition) -> usize {
        self.counts.iter().find(|(q, _)| *q == p).map_or(0, |(_, n)| *n)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, n)| n).sum()
    }
}

/// Generates every partition in memory. Each utterance has its own generator
/// derived from `(seed, partition, index)`.
pub fn gen_corpus(spec: &CorpusSpec, sim: &SimConfig, seed: u64) -> Result<Corpus> {
    let langs = Languages::new(sim.clone(), seed)?;
    let mut utts = Vec::with_capacity(spec.total());
    let by_part = |p: Partition, langs: &Languages, pools: Option<(&[Utterance], &[Utterance])>| -> Result<Vec<Utterance>> {
        (0..spec.count(p))
            .map(|i| {
                let mut rng = derive_rng(seed, p.name(), i as u64);
                let id = format!("{}-{:05}", p.prefix(), i);
                let mut u = match p {
                    Partition::TrainMonoA | Partition::EvalMonoA => langs.gen_monolingual(&id, Lang::A, &mut rng),
                    Partition::TrainMonoB | Partition::EvalMonoB => langs.gen_monolingual(&id, Lang::B, &mut rng),
                    Partition::TrainCs | Partition::EvalCs => langs.gen_native_cs(&id, &mut rng),
                    Partition::TrainSimuCs => {
                        let (a, b) = pools.expect("pools given for simu-CS");
                        splice_code_switch(&id, a, b, &langs.config, &mut rng)?
                    }
                };
                u.partition = Some(p);
                Ok(u)
            })
            .collect()
    };
    let mono_a = by_part(Partition::TrainMonoA, &langs, None)?;
    let mono_b = by_part(Partition::TrainMonoB, &langs, None)?;
    let simu = if spec.count(Partition::TrainSimuCs) > 0 {
        by_part(Partition::TrainSimuCs, &langs, Some((&mono_a, &mono_b)))?
    } else {
        Vec::new()
    };
    let cs = by_part(Partition::TrainCs, &langs, None)?;
    utts.extend(mono_a);
    utts.extend(mono_b);
    utts.extend(cs);
    utts.extend(simu);
    for p in [Partition::EvalMonoA, Partition::EvalMonoB, Partition::EvalCs] {
        utts.extend(by_part(p, &langs, None)?);
    }
    Ok(Corpus {
        vocab: langs.vocab,
        utterances: utts,
    })
}

/// Generates and writes a corpus: `vocab.tsv`, `manifest.tsv` and one
/// feature file per utterance under `feats/`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    io::write_corpus(corpus, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs(noise: f64) -> Languages {
        Languages::new(
            SimConfig {
                noise_std: noise,
                ..SimConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn nearest(l: &Languages, frame: &[f32]) -> Option<usize> {
        let mut best = (l2(frame, &vec![0.0; frame.len()]), None);
        for lang in &l.langs {
            for (i, p) in lang.prototypes.iter().enumerate() {
                let d = l2(frame, p);
                if d < best.0 {
                    best = (d, Some(lang.ids[i]));
                }
            }
        }
        best.1
    }

    fn frame_labels(u: &Utterance) -> Vec<Option<usize>> {
        let mut lab = vec![None; u.frames];
        for (&(s, e), &id) in u.boundaries.iter().zip(&u.ids) {
            lab[s..e].fill(Some(id));
        }
        lab
    }

    #[test]
    fn noiseless_render_is_exact_and_classifiable() {
        let l = langs(0.0);
        let mut rng = derive_rng(1, "t", 0);
        let u = l.gen_monolingual("u", Lang::A, &mut rng);
        for (t, lab) in frame_labels(&u).into_iter().enumerate() {
            let frame = u.frame(t);
            assert_eq!(nearest(&l, frame), lab);
            if let Some(id) = lab {
                assert_eq!(frame, l.prototype(id));
            }
        }
        assert!(u.features.iter().skip(8).step_by(16).all(|&x| x == 0.0));
        for t in 0..u.frames {
            assert!(u.frame(t)[8..].iter().all(|&x| x == 0.0));
        }
        assert!(u.tags.iter().all(|&t| t == Lang::A));
    }

    #[test]
    fn separable_at_quarter_min_distance() {
        let base = langs(0.1);
        let d = base.langs.iter().map(|l| l.min_distance()).fold(f64::INFINITY, f64::min);
        let l = langs(0.25 * d);
        let (mut ok, mut total) = (0usize, 0usize);
        for i in 0..100 {
            let mut rng = derive_rng(2, "sep", i);
            let u = if i % 2 == 0 { l.gen_monolingual("u", Lang::B, &mut rng) } else { l.gen_native_cs("u", &mut rng) };
            for (t, lab) in frame_labels(&u).into_iter().enumerate() {
                ok += usize::from(nearest(&l, u.frame(t)) == lab);
                total += 1;
            }
        }
        assert!(ok as f64 / total as f64 >= 0.99, "{ok}/{total}");
    }

    #[test]
    fn inactive_half_stays_at_noise_floor() {
        let l = langs(0.1);
        for i in 0..50 {
            let mut rng = derive_rng(4, "floor", i);
            let u = l.gen_monolingual("u", Lang::A, &mut rng);
            let bound = 3.0 * 0.1 / (u.frames as f64).sqrt();
            for d in 8..16 {
                let mean = (0..u.frames).map(|t| u.frame(t)[d] as f64).sum::<f64>() / u.frames as f64;
                assert!(mean.abs() <= bound, "utt {i} dim {d}: {mean} > {bound}");
            }
        }
    }

    #[test]
    fn prototypes_are_spread_and_deterministic() {
        let a = langs(0.1);
        let b = langs(0.1);
        for (x, y) in a.langs.iter().zip(&b.langs) {
            assert!(x.min_distance() > 0.4);
            assert_eq!(x.prototypes, y.prototypes);
        }
        let mut r1 = derive_rng(5, "x", 7);
        let mut r2 = derive_rng(5, "x", 7);
        assert_eq!(a.gen_native_cs("u", &mut r1), a.gen_native_cs("u", &mut r2));
    }

    #[test]
    fn native_cs_switch_count() {
        let l = langs(0.1);
        for i in 0..200 {
            let mut rng = derive_rng(6, "cs", i);
            let u = l.gen_native_cs("u", &mut rng);
            let switches = u.tags.windows(2).filter(|w| w[0] != w[1]).count();
            assert!((1..=3).contains(&switches), "{switches}");
            assert!(u.boundaries.windows(2).all(|w| w[0].1 <= w[1].0));
            assert!(u.boundaries.last().unwrap().1 <= u.frames);
        }
    }

    #[test]
    fn splice_concatenates() {
        let l = langs(0.1);
        let mut rng = derive_rng(7, "sp", 0);
        let a = l.gen_monolingual("a", Lang::A, &mut rng);
        let b = l.gen_monolingual("b", Lang::B, &mut rng);
        let s = splice("s", &[&a, &b]).unwrap();
        assert_eq!(s.frames, a.frames + b.frames);
        assert_eq!(s.ids, [a.ids.clone(), b.ids.clone()].concat());
        assert_eq!(s.tags.iter().filter(|&&t| t == Lang::A).count(), a.ids.len());
        assert_eq!(&s.tags[a.ids.len()..], vec![Lang::B; b.ids.len()].as_slice());
        for (i, &(st, _)) in b.boundaries.iter().enumerate() {
            assert_eq!(s.boundaries[a.ids.len() + i].0, st + a.frames);
        }
        let empty = splice("e", &[]).unwrap();
        let same = splice("a", &[&a, &empty]).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn splice_respects_cap() {
        let l = langs(0.1);
        let mut rng = derive_rng(8, "pool", 0);
        let pa: Vec<_> = (0..20).map(|i| l.gen_monolingual(&format!("a{i}"), Lang::A, &mut rng)).collect();
        let pb: Vec<_> = (0..20).map(|i| l.gen_monolingual(&format!("b{i}"), Lang::B, &mut rng)).collect();
        for i in 0..50 {
            let mut r = derive_rng(8, "sim", i);
            let u = splice_code_switch("s", &pa, &pb, &l.config, &mut r).unwrap();
            assert!(u.frames <= 300);
            assert!(u.tags.windows(2).any(|w| w[0] != w[1]));
        }
        let tight = SimConfig {
            cap_frames: 10,
            ..l.config.clone()
        };
        let mut r = derive_rng(8, "sim", 0);
        assert!(matches!(splice_code_switch("s", &pa, &pb, &tight, &mut r), Err(Error::Data(_))));
    }

    #[test]
    fn stock_counts_and_unique_ids() {
        let spec = CorpusSpec::stock();
        assert_eq!(spec.total(), 5600);
        let small = CorpusSpec {
            counts: spec.counts.iter().map(|&(p, n)| (p, n / 100)).collect(),
        };
        let c = gen_corpus(&small, &SimConfig::default(), 1).unwrap();
        assert_eq!(c.utterances.len(), small.total());
        let mut ids: Vec<&str> = c.utterances.iter().map(|u| u.utt_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), small.total());
    }
}

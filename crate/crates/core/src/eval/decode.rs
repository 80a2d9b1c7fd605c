use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::score::{edit_distance, score_utterance, AlignmentCounts, MixedScore, UttErrors};
use crate::ctc::{prefix_beam_search, Hypothesis, TokenLm};
use crate::error::{Error, Result};
use crate::model::LaeModel;
use crate::nnet::{Graph, Mode, Real};
use crate::sim::Utterance;
use crate::vocab::{Lang, Vocabulary};

/// Which classifier produces the decoding grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Global,
    Aux(Lang),
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderKind::Global => f.write_str("global"),
            DecoderKind::Aux(l) => write!(f, "aux{l}"),
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(DecoderKind::Global),
            "auxA" => Ok(DecoderKind::Aux(Lang::A)),
            "auxB" => Ok(DecoderKind::Aux(Lang::B)),
            _ => Err(Error::Usage(format!("unknown decoder {s:?} (global, auxA, auxB)"))),
        }
    }
}

/// Natural-log posteriors (`frames x vocab`, row-major) from every decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Grids {
    pub frames: usize,
    pub vocab: usize,
    pub global: Vec<f64>,
    /// Auxiliary decoder on `h_A` and `h_B`; absent for vanilla models.
    pub aux: Option<[Vec<f64>; 2]>,
}

impl Grids {
    pub fn get(&self, kind: DecoderKind) -> Result<&[f64]> {
        match kind {
            DecoderKind::Global => Ok(&self.global),
            DecoderKind::Aux(l) => self
                .aux
                .as_ref()
                .map(|a| a[l.index()].as_slice())
                .ok_or_else(|| Error::Config("model has no auxiliary decoder".into())),
        }
    }
}

/// Runs the encoder once in eval mode. `None` when the input is shorter than
/// the subsampler accepts.
pub fn compute_grids<R: Real>(model: &LaeModel<R>, utt: &Utterance) -> Result<Option<Grids>> {
    let mut g = Graph::new(&model.params, Mode::Eval, 0);
    let x = utt.to_tensor()?.cast::<R>();
    let enc = match model.encode_features(&mut g, &x) {
        Ok(e) => e,
        Err(Error::Data(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let grid = |g: &mut Graph<'_, R>, logits| {
        let lp = g.log_softmax(logits);
        g.value(lp).iter().map(|v| v.as_f64()).collect::<Vec<f64>>()
    };
    let logits = model.global_logits(&mut g, enc.h_bil)?;
    let (frames, vocab) = g.shape(logits);
    let global = grid(&mut g, logits);
    let aux = match (enc.h_a, enc.h_b, model.has_aux_decoder()) {
        (Some(a), Some(b), true) => {
            let la = model.aux_logits(&mut g, a)?;
            let lb = model.aux_logits(&mut g, b)?;
            Some([grid(&mut g, la), grid(&mut g, lb)])
        }
        _ => None,
    };
    Ok(Some(Grids {
        frames,
        vocab,
        global,
        aux,
    }))
}

#[derive(Clone, Copy)]
pub struct DecodeOptions<'a> {
    pub kind: DecoderKind,
    pub beam: usize,
    pub lm: Option<&'a (dyn TokenLm + Sync)>,
    pub lm_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub utt_id: String,
    /// Best first; empty when the utterance was too short to encode.
    pub hyps: Vec<Hypothesis>,
}

impl Decoded {
    pub fn best(&self) -> &[usize] {
        self.hyps.first().map_or(&[], |h| h.tokens.as_slice())
    }
}

/// Decodes utterances in parallel; output order follows the input.
pub fn decode_utterances<R: Real>(model: &LaeModel<R>, utts: &[&Utterance], opts: DecodeOptions<'_>) -> Result<Vec<Decoded>> {
    if opts.kind != DecoderKind::Global && !model.has_aux_decoder() {
        return Err(Error::Config(format!("decoder {} needs a branched model", opts.kind)));
    }
    utts.par_iter()
        .map(|u| {
            let hyps = match compute_grids(model, u)? {
                None => Vec::new(),
                Some(gr) => {
                    let lm = opts.lm.map(|l| l as &dyn TokenLm);
                    prefix_beam_search(gr.get(opts.kind)?, gr.vocab, opts.beam, lm, opts.lm_weight)?
                }
            };
            Ok(Decoded {
                utt_id: u.utt_id.clone(),
                hyps,
            })
        })
        .collect()
}

/// Scores best hypotheses against the utterances' references.
pub fn score_decoded(utts: &[&Utterance], decoded: &[Decoded], vocab: &Vocabulary) -> Result<(MixedScore, Vec<UttErrors>)> {
    let mut total = MixedScore::default();
    let mut per_utt = Vec::with_capacity(utts.len());
    for (u, d) in utts.iter().zip(decoded) {
        if u.utt_id != d.utt_id {
            return Err(Error::Data(format!("hypothesis for {} paired with reference {}", d.utt_id, u.utt_id)));
        }
        let s = score_utterance(&u.ids, d.best(), vocab)?;
        per_utt.push(UttErrors {
            utt_id: u.utt_id.clone(),
            errors: s.total.errors(),
            ref_len: s.total.ref_len,
        });
        total.add(&s);
    }
    Ok((total, per_utt))
}

/// Language-specific decoding analysis for one auxiliary decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxDecodeReport {
    pub which: Lang,
    /// Hypotheses (mask symbols dropped) against the full references.
    pub full: MixedScore,
    /// Target-language projection of hypotheses against that of references.
    pub projected: AlignmentCounts,
    /// Other-language projection of both sides.
    pub other: AlignmentCounts,
    pub hyp_tokens: usize,
    /// Emitted tokens that belong to the other language.
    pub other_lang_tokens: usize,
    pub mask_tokens: usize,
}

pub fn aux_decode_eval<R: Real>(model: &LaeModel<R>, utts: &[&Utterance], vocab: &Vocabulary, which: Lang, beam: usize) -> Result<AuxDecodeReport> {
    let decoded = decode_utterances(
        model,
        utts,
        DecodeOptions {
            kind: DecoderKind::Aux(which),
            beam,
            lm: None,
            lm_weight: 0.0,
        },
    )?;
    let (full, _) = score_decoded(utts, &decoded, vocab)?;
    let only = |xs: &[usize], l: Lang| -> Vec<usize> { xs.iter().copied().filter(|&k| vocab.lang(k) == Some(l)).collect() };
    let mut projected = AlignmentCounts::default();
    let mut other = AlignmentCounts::default();
    let (mut hyp_tokens, mut other_lang_tokens, mut mask_tokens) = (0, 0, 0);
    for (u, d) in utts.iter().zip(&decoded) {
        let h = d.best();
        projected.add(&edit_distance(&only(&u.ids, which), &only(h, which)).counts);
        other.add(&edit_distance(&only(&u.ids, which.other()), &only(h, which.other())).counts);
        hyp_tokens += h.len();
        other_lang_tokens += h.iter().filter(|&&k| vocab.lang(k) == Some(which.other())).count();
        mask_tokens += h.iter().filter(|&&k| k == which.other().mask()).count();
    }
    Ok(AuxDecodeReport {
        which,
        full,
        projected,
        other,
        hyp_tokens,
        other_lang_tokens,
        mask_tokens,
    })
}

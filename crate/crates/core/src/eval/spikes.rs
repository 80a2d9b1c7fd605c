use std::fmt::Write as _;

use super::decode::compute_grids;
use crate::error::{Error, Result};
use crate::model::LaeModel;
use crate::nnet::Real;
use crate::sim::Utterance;
use crate::vocab::{Lang, Vocabulary, BLANK};

/// Top token, its probability and the blank probability at one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePeak {
    pub top: usize,
    pub prob: f64,
    pub blank: f64,
}

impl FramePeak {
    fn of(row: &[f64]) -> Self {
        let top = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        FramePeak {
            top,
            prob: row[top].exp(),
            blank: row[BLANK].exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRow {
    /// Subsampled frame index.
    pub frame: usize,
    /// Input frame at the centre of this frame's receptive field.
    pub center: usize,
    /// Language of the reference token spanning `center`, if any.
    pub span_lang: Option<Lang>,
    pub aux_a: FramePeak,
    pub aux_b: FramePeak,
    pub global: FramePeak,
}

impl SpikeRow {
    pub fn aux(&self, lang: Lang) -> &FramePeak {
        match lang {
            Lang::A => &self.aux_a,
            Lang::B => &self.aux_b,
        }
    }
}

/// Per-frame peaks of the two auxiliary views and the global decoder.
/// Subsampled frame `t` is centred on input frame `4t + 3`.
pub fn export_spikes<R: Real>(model: &LaeModel<R>, utt: &Utterance) -> Result<Vec<SpikeRow>> {
    let grids = compute_grids(model, utt)?
        .ok_or_else(|| Error::Data(format!("{}: too short to encode", utt.utt_id)))?;
    let aux = grids
        .aux
        .as_ref()
        .ok_or_else(|| Error::Config("spike export needs a branched model".into()))?;
    let v = grids.vocab;
    Ok((0..grids.frames)
        .map(|t| {
            let center = (4 * t + 3).min(utt.frames - 1);
            let span_lang = utt
                .boundaries
                .iter()
                .position(|&(s, e)| s <= center && center < e)
                .map(|i| utt.tags[i]);
            let row = |g: &[f64]| FramePeak::of(&g[t * v..(t + 1) * v]);
            SpikeRow {
                frame: t,
                center,
                span_lang,
                aux_a: row(&aux[0]),
                aux_b: row(&aux[1]),
                global: row(&grids.global),
            }
        })
        .collect())
}

pub const SPIKES_HEADER: &str =
    "frame,center,span_lang,auxA_top,auxA_prob,auxA_blank,auxB_top,auxB_prob,auxB_blank,global_top,global_prob,global_blank";

pub fn spikes_csv(rows: &[SpikeRow], vocab: &Vocabulary) -> String {
    let mut out = format!("{SPIKES_HEADER}\n");
    for r in rows {
        let lang = r.span_lang.map_or("-".to_string(), |l| l.to_string());
        let _ = write!(out, "{},{},{lang}", r.frame, r.center);
        for p in [&r.aux_a, &r.aux_b, &r.global] {
            let _ = write!(out, ",{},{:.6},{:.6}", vocab.surface(p.top), p.prob, p.blank);
        }
        out.push('\n');
    }
    out
}

/// Non-blank auxiliary spikes inside other-language spans, and how many of
/// them are that language's mask symbol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpikeStats {
    pub spikes: usize,
    pub masked: usize,
}

impl SpikeStats {
    pub fn rate(&self) -> Option<f64> {
        (self.spikes > 0).then(|| self.masked as f64 / self.spikes as f64)
    }

    pub fn add(&mut self, o: &SpikeStats) {
        self.spikes += o.spikes;
        self.masked += o.masked;
    }
}

pub fn spike_mask_stats(rows: &[SpikeRow]) -> SpikeStats {
    let mut s = SpikeStats::default();
    for r in rows {
        let Some(span) = r.span_lang else { continue };
        let p = r.aux(span.other());
        if p.top != BLANK {
            s.spikes += 1;
            if p.top == span.mask() {
                s.masked += 1;
            }
        }
    }
    s
}

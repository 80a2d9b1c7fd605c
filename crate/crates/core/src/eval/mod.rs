//! Scoring with per-language attribution, the utterance-level language
//! probe, language-specific decoding analysis, spike export and the
//! matched-pairs significance test.

mod decode;
mod probe;
mod score;
mod sig;
mod spikes;

pub use decode::{
    aux_decode_eval, compute_grids, decode_utterances, score_decoded, AuxDecodeReport, DecodeOptions, Decoded,
    DecoderKind, Grids,
};
pub use probe::{embed, evaluate_probe, train_probe, Probe, ProbeConfig, ProbePrediction, ProbeResult, CLASS_NAMES};
pub use score::{
    edit_distance, fmt_rate, mixed_error_rate, parse_per_utt, per_utt_tsv, score_report, score_utterance, AlignedPair,
    Alignment, AlignmentCounts, EditOp, MixedScore, ScoreRow, UttErrors, PER_UTT_HEADER, REPORT_HEADER,
};
pub use sig::{mapsswe_test, SigTest, PERMUTATION_RESAMPLES};
pub use spikes::{export_spikes, spike_mask_stats, spikes_csv, SpikeRow, SpikeStats, SPIKES_HEADER};

//! Run directories and the desk-scale comparison pipeline.
//!
//! A training run directory holds the per-epoch checkpoints, `metrics.csv`,
//! the normalized configuration (`config.txt`, whose SHA-256 every
//! checkpoint carries), the vocabulary digest (`vocab.sha256`) and the
//! averaged model (`final.ckpt` with its source list `final.sources`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{hex, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{
    aux_decode_eval, decode_utterances, export_spikes, fmt_rate, mapsswe_test, per_utt_tsv, score_decoded,
    score_report, spike_mask_stats, spikes_csv, train_probe, evaluate_probe, AuxDecodeReport, DecodeOptions,
    DecoderKind, MixedScore, ProbeConfig, ProbeResult, ScoreRow, SigTest, SpikeStats, UttErrors,
};
use crate::model::{Architecture, LaeModel};
use crate::ngram::{transcripts_from_ids, NgramModel, VocabLm};
use crate::nnet::checkpoint::average;
use crate::nnet::Checkpoint;
use crate::sim::{gen_corpus, write_corpus, Corpus, Partition, Utterance};
use crate::train::{train, TrainSink};
use crate::vocab::{Lang, Vocabulary};

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_DIGEST_FILE: &str = "vocab.sha256";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_sidecars(dir: &Path, cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<()> {
    write(&dir.join(CONFIG_FILE), cfg.normalized())?;
    write(&dir.join(VOCAB_DIGEST_FILE), format!("{}\n", hex(&vocab.digest())))
}

/// A model restored from a checkpoint and the sidecars beside it.
pub struct LoadedModel {
    pub config: ExperimentConfig,
    pub model: LaeModel<f32>,
    pub vocab_digest: String,
    pub step: u64,
}

impl LoadedModel {
    /// Refuses a vocabulary other than the one the model was trained on.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let have = hex(&vocab.digest());
        if have != self.vocab_digest {
            return Err(Error::Data(format!(
                "vocabulary digest mismatch: checkpoint was trained with {}, data has {have}",
                self.vocab_digest
            )));
        }
        Ok(())
    }
}

pub fn load_model(ckpt_path: &Path) -> Result<LoadedModel> {
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::parse(&read(&dir.join(CONFIG_FILE))?)?;
    let vocab_digest = read(&dir.join(VOCAB_DIGEST_FILE))?.trim().to_string();
    let ckpt = Checkpoint::load(ckpt_path)?;
    if ckpt.digest != config.digest() {
        return Err(Error::Data(format!(
            "config digest mismatch: {} carries {}, {} hashes to {}",
            ckpt_path.display(),
            hex(&ckpt.digest),
            dir.join(CONFIG_FILE).display(),
            config.digest_hex()
        )));
    }
    let mut model = LaeModel::build(config.model.clone())?;
    ckpt.load_into(&mut model.params)?;
    Ok(LoadedModel {
        config,
        model,
        vocab_digest,
        step: ckpt.step,
    })
}

/// Averages checkpoints into `out` and records the sources beside it.
pub fn average_into(paths: &[PathBuf], out: &Path) -> Result<Checkpoint> {
    let (avg, steps) = crate::train::average_checkpoints(paths)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    avg.save(out)?;
    let mut sources = String::new();
    for (p, s) in paths.iter().zip(&steps) {
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        let _ = writeln!(sources, "{name}\t{s}");
    }
    write(&out.with_extension("sources"), sources)?;
    Ok(avg)
}

pub fn select<'c>(corpus: &'c Corpus, parts: &[Partition]) -> Vec<&'c Utterance> {
    corpus
        .utterances
        .iter()
        .filter(|u| u.partition.is_some_and(|p| parts.contains(&p)))
        .collect()
}

/// Trains on `cfg.train_partitions`, writes the run directory and returns
/// the model holding the average of the last `average_last` epochs.
pub fn train_run(cfg: &ExperimentConfig, corpus: &Corpus, dir: &Path) -> Result<(LaeModel<f32>, Vec<crate::train::EpochMetrics>)> {
    if corpus.vocab != cfg.sim.vocabulary() {
        return Err(Error::Data(format!(
            "corpus vocabulary ({} symbols) differs from the one the config describes ({})",
            corpus.vocab.len(),
            cfg.model.vocab_size
        )));
    }
    let utts = select(corpus, &cfg.train_partitions);
    if let Some(u) = utts.iter().find(|u| u.feat_dim != cfg.model.feat_dim) {
        return Err(Error::Data(format!("{} has {} feature dims, config says {}", u.utt_id, u.feat_dim, cfg.model.feat_dim)));
    }
    if utts.is_empty() {
        return Err(Error::Data("no utterances in the training partitions".into()));
    }
    write_sidecars(dir, cfg, &corpus.vocab)?;
    let mut model = LaeModel::build(cfg.model.clone())?;
    let sink = TrainSink {
        dir: dir.to_path_buf(),
        digest: cfg.digest(),
    };
    let out = train(&mut model, &utts, &corpus.vocab, &cfg.train, Some(&sink))?;
    let first = cfg.train.epochs + 1 - out.recent.len();
    let paths: Vec<PathBuf> = (first..=cfg.train.epochs).map(|e| sink.checkpoint_path(e)).collect();
    let avg = average_into(&paths, &dir.join(FINAL_CHECKPOINT))?;
    debug_assert_eq!(avg, average(&out.recent)?);
    avg.load_into(&mut model.params)?;
    Ok((model, out.metrics))
}

/// One trained system of the comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub name: &'static str,
    pub architecture: Architecture,
    pub aux_loss: bool,
    pub partitions: Vec<Partition>,
}

pub const VANILLA: &str = "vanilla";
pub const LAE: &str = "lae";
pub const LAE_MONO: &str = "lae-mono";
pub const LAE_MONO_SIMU: &str = "lae-mono-simu";

/// Vanilla and LAE on mono + native CS; LAE on mono only and on mono +
/// spliced CS (the latter two only when the corpus has spliced data).
pub fn stock_systems(with_simu: bool) -> Vec<SystemSpec> {
    use Partition::*;
    let mut v = vec![
        SystemSpec {
            name: VANILLA,
            architecture: Architecture::Vanilla,
            aux_loss: false,
            partitions: vec![TrainMonoA, TrainMonoB, TrainCs],
        },
        SystemSpec {
            name: LAE,
            architecture: Architecture::Lae,
            aux_loss: true,
            partitions: vec![TrainMonoA, TrainMonoB, TrainCs],
        },
    ];
    if with_simu {
        v.push(SystemSpec {
            name: LAE_MONO,
            architecture: Architecture::Lae,
            aux_loss: true,
            partitions: vec![TrainMonoA, TrainMonoB],
        });
        v.push(SystemSpec {
            name: LAE_MONO_SIMU,
            architecture: Architecture::Lae,
            aux_loss: true,
            partitions: vec![TrainMonoA, TrainMonoB, TrainSimuCs],
        });
    }
    v
}

/// The base configuration specialised to one system.
pub fn system_config(base: &ExperimentConfig, spec: &SystemSpec) -> Result<ExperimentConfig> {
    let mut text = base.normalized();
    text = text
        .lines()
        .filter(|l| !l.starts_with("model.shared_layers=") && !l.starts_with("model.branch_layers="))
        .map(|l| {
            if l.starts_with("model.architecture=") {
                format!("model.architecture={}", spec.architecture)
            } else if l.starts_with("train.aux_loss=") {
                format!("train.aux_loss={}", spec.aux_loss)
            } else if l.starts_with("train.partitions=") {
                let parts: Vec<&str> = spec.partitions.iter().map(|p| p.name()).collect();
                format!("train.partitions={}", parts.join(","))
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    ExperimentConfig::parse(&text)
}

pub const EVAL_PARTITIONS: [Partition; 3] = [Partition::EvalMonoA, Partition::EvalMonoB, Partition::EvalCs];

/// Everything the comparison measures.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub digest: String,
    pub param_counts: BTreeMap<String, usize>,
    /// Keyed by (system, partition name).
    pub scores: BTreeMap<(String, String), MixedScore>,
    pub per_utt: BTreeMap<(String, String), Vec<UttErrors>>,
    /// (label, better-system candidate, baseline, test on eval-CS errors).
    pub sig: Vec<(String, String, String, SigTest)>,
    pub probe: ProbeResult,
    /// (partition name, report) for both auxiliary views.
    pub aux: Vec<(String, AuxDecodeReport)>,
    pub spikes: SpikeStats,
    pub spike_utts: Vec<String>,
    /// eval-CS scores of the LAE system without and with the n-gram.
    pub fusion: (MixedScore, MixedScore),
    pub lm_weight: f64,
}

impl ExperimentReport {
    pub fn score(&self, system: &str, p: Partition) -> Option<&MixedScore> {
        self.scores.get(&(system.to_string(), p.name().to_string()))
    }

    pub fn sig(&self, label: &str) -> Option<&SigTest> {
        self.sig.iter().find(|s| s.0 == label).map(|s| &s.3)
    }
}

pub const SIG_LAE_VS_VANILLA: &str = "lae-vs-vanilla";
pub const SIG_SIMU: &str = "simu-vs-mono";
pub const SPIKE_SAMPLES: usize = 5;

/// Generates the corpus, trains every stock system, then scores, probes,
/// analyses the auxiliary decoders, exports spikes and checks LM fusion.
/// Every report is written under `out`; nothing written depends on timing
/// or thread count.
pub fn run_experiment(base: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    write(&out.join(CONFIG_FILE), base.normalized())?;
    write(&out.join("config.sha256"), format!("{}\n", base.digest_hex()))?;
    let corpus = gen_corpus(&base.corpus, &base.sim, base.seed)?;
    write_corpus(&corpus, &out.join("corpus"))?;
    let vocab = &corpus.vocab;
    let with_simu = base.corpus.count(Partition::TrainSimuCs) > 0;
    let decode = DecodeOptions {
        kind: DecoderKind::Global,
        beam: base.decode.beam,
        lm: None,
        lm_weight: 0.0,
    };

    let mut models = BTreeMap::new();
    let mut param_counts = BTreeMap::new();
    let mut scores = BTreeMap::new();
    let mut per_utt = BTreeMap::new();
    let mut rows = Vec::new();
    for spec in stock_systems(with_simu) {
        let cfg = system_config(base, &spec)?;
        let (model, _) = train_run(&cfg, &corpus, &out.join("systems").join(spec.name))?;
        param_counts.insert(spec.name.to_string(), model.asr_param_count());
        for p in EVAL_PARTITIONS {
            let utts: Vec<&Utterance> = corpus.partition(p).collect();
            let decoded = decode_utterances(&model, &utts, decode)?;
            let (score, errs) = score_decoded(&utts, &decoded, vocab)?;
            write(&out.join("per_utt").join(format!("{}.{}.tsv", spec.name, p.name())), per_utt_tsv(&errs))?;
            rows.push(ScoreRow {
                partition: p.name().to_string(),
                system: spec.name.to_string(),
                score,
            });
            scores.insert((spec.name.to_string(), p.name().to_string()), score);
            per_utt.insert((spec.name.to_string(), p.name().to_string()), errs);
        }
        models.insert(spec.name, model);
    }
    write(&out.join("scores.csv"), score_report(&rows))?;

    let cs = Partition::EvalCs.name().to_string();
    let errors = |sys: &str| -> Vec<f64> {
        per_utt[&(sys.to_string(), cs.clone())].iter().map(|u| u.errors as f64).collect()
    };
    let mut sig = vec![(SIG_LAE_VS_VANILLA.to_string(), LAE.to_string(), VANILLA.to_string())];
    if with_simu {
        sig.push((SIG_SIMU.to_string(), LAE_MONO_SIMU.to_string(), LAE_MONO.to_string()));
    }
    let sig = sig
        .into_iter()
        .map(|(label, a, b)| {
            let t = mapsswe_test(&errors(&a), &errors(&b), base.seed)?;
            Ok((label, a, b, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::from("test,system,baseline,n,mean_diff,z,p_normal,p_permutation\n");
    for (label, a, b, t) in &sig {
        let _ = writeln!(
            text,
            "{label},{a},{b},{},{:.6},{:.6},{:.6e},{:.6e}",
            t.n, t.mean_diff, t.z, t.p_normal, t.p_permutation
        );
    }
    write(&out.join("sig.csv"), text)?;

    let lae = &models[LAE];
    let lae_train = select(&corpus, &[Partition::TrainMonoA, Partition::TrainMonoB, Partition::TrainCs]);
    let probe = train_probe(lae, &lae_train, &ProbeConfig::default())?;
    let eval_utts = select(&corpus, &EVAL_PARTITIONS);
    let probe_result = evaluate_probe(lae, &probe, &eval_utts)?;
    write(&out.join("probe.csv"), probe_result.report())?;

    let mut aux = Vec::new();
    let mut text = String::from(
        "decoder,partition,ER_A_full,ER_B_full,ER_target_projected,ER_other_projected,global_ER_target,hyp_tokens,other_lang_tokens,mask_tokens\n",
    );
    for which in [Lang::A, Lang::B] {
        for p in EVAL_PARTITIONS {
            let utts: Vec<&Utterance> = corpus.partition(p).collect();
            let r = aux_decode_eval(lae, &utts, vocab, which, base.decode.beam)?;
            let global = scores[&(LAE.to_string(), p.name().to_string())].er(which);
            let _ = writeln!(
                text,
                "aux{which},{},{},{},{},{},{},{},{},{}",
                p.name(),
                fmt_rate(r.full.er(Lang::A)),
                fmt_rate(r.full.er(Lang::B)),
                fmt_rate(r.projected.rate()),
                fmt_rate(r.other.rate()),
                fmt_rate(global),
                r.hyp_tokens,
                r.other_lang_tokens,
                r.mask_tokens
            );
            aux.push((p.name().to_string(), r));
        }
    }
    write(&out.join("aux.csv"), text)?;

    let mut spikes = SpikeStats::default();
    let mut spike_utts = Vec::new();
    for (i, u) in corpus.partition(Partition::EvalCs).enumerate() {
        let rows = export_spikes(lae, u)?;
        spikes.add(&spike_mask_stats(&rows));
        if i < SPIKE_SAMPLES {
            write(&out.join("spikes").join(format!("{}.csv", u.utt_id)), spikes_csv(&rows, vocab))?;
            spike_utts.push(u.utt_id.clone());
        }
    }
    write(
        &out.join("spikes_summary.csv"),
        format!(
            "partition,spikes_in_other_language_spans,mask_spikes,mask_rate\n{cs},{},{},{}\n",
            spikes.spikes,
            spikes.masked,
            spikes.rate().map_or("NA".into(), |r| format!("{r:.6}"))
        ),
    )?;

    let transcripts = transcripts_from_ids(lae_train.iter().map(|u| u.ids.as_slice()), vocab);
    let lm = NgramModel::train(&transcripts, base.decode.lm_order, &[])?;
    lm.save(&out.join("lm.arpa"))?;
    let token_lm = VocabLm::new(&lm, vocab);
    let cs_utts: Vec<&Utterance> = corpus.partition(Partition::EvalCs).collect();
    let mut fused = Vec::new();
    for weight in [0.0, base.decode.lm_weight] {
        let opts = DecodeOptions {
            lm: Some(&token_lm),
            lm_weight: weight,
            ..decode
        };
        fused.push(score_decoded(&cs_utts, &decode_utterances(lae, &cs_utts, opts)?, vocab)?.0);
    }
    let fusion = (fused[0], fused[1]);
    write(
        &out.join("fusion.csv"),
        format!(
            "partition,system,lm_weight,MER\n{cs},{LAE},0,{}\n{cs},{LAE},{},{}\n",
            fmt_rate(fusion.0.mer()),
            base.decode.lm_weight,
            fmt_rate(fusion.1.mer())
        ),
    )?;

    let mut text = String::from("system,asr_params\n");
    for (k, v) in &param_counts {
        let _ = writeln!(text, "{k},{v}");
    }
    write(&out.join("params.csv"), text)?;

    Ok(ExperimentReport {
        digest: base.digest_hex(),
        param_counts,
        scores,
        per_utt,
        sig,
        probe: probe_result,
        aux,
        spikes,
        spike_utts,
        fusion,
        lm_weight: base.decode.lm_weight,
    })
}

/// Every file under `out`, relative to it, in sorted order.
pub fn report_files(out: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for e in walkdir::WalkDir::new(out).sort_by_file_name() {
        let e = e.map_err(|e| Error::io(out, e.into()))?;
        if e.file_type().is_file() {
            files.push(e.path().strip_prefix(out).expect("under out").to_path_buf());
        }
    }
    Ok(files)
}

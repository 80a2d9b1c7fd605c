//! `lae`: one binary wiring corpus generation, training, decoding and
//! evaluation into reproducible runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand};

use lae_core::config::{hex, ExperimentConfig};
use lae_core::ctc::{format_nbest, parse_nbest};
use lae_core::eval::{
    decode_utterances, evaluate_probe, export_spikes, fmt_rate, mapsswe_test, parse_per_utt, per_utt_tsv,
    score_report, score_utterance, spikes_csv, train_probe, DecodeOptions, DecoderKind, MixedScore, ProbeConfig,
    ScoreRow, UttErrors,
};
use lae_core::experiment::{average_into, CONFIG_FILE, VOCAB_DIGEST_FILE, load_model, run_experiment, select, train_run};
use lae_core::ngram::{transcripts_from_ids, NgramModel, VocabLm};
use lae_core::sim::{gen_corpus, read_manifest, write_corpus, Corpus, Partition};
use lae_core::train::last_epoch_checkpoints;
use lae_core::{Error, Vocabulary};

#[derive(Parser)]
#[command(name = "lae", version, about = "Language-aware encoder experiments on synthetic code-switched data")]
struct Cli {
    /// Worker threads; 1 gives fully deterministic scheduling.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes epoch checkpoints, metrics.csv and final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the last K epoch checkpoints of a training directory.
    Average {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        last: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-search decode one partition into an n-best file.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        partition: String,
        #[arg(long)]
        beam: Option<usize>,
        /// ARPA n-gram model for shallow fusion.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long, default_value = "global")]
        decoder: DecoderKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an n-gram LM on the transcripts of the given partitions.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated partition names.
        #[arg(long, default_value = "train-mono-A,train-mono-B,train-CS")]
        partitions: String,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score best hypotheses against a manifest; writes the score report.
    Score {
        #[arg(long)]
        ref_manifest: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-utterance error counts for significance testing.
        #[arg(long)]
        per_utt: Option<PathBuf>,
        /// System label in the report.
        #[arg(long, default_value = "system")]
        system: String,
    },
    /// Fit a language probe on training embeddings and report accuracy per eval partition.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame decoder peaks for one utterance.
    Spikes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-pairs test on two per-utterance error files.
    Sigtest {
        #[arg(long)]
        per_utt_a: PathBuf,
        #[arg(long)]
        per_utt_b: PathBuf,
        /// Seed of the sign-permutation resampling.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Full comparison: corpus, all systems, every report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sidecar `<file>.sha256` naming the config and vocabulary behind an output.
fn digest_sidecar(out: &Path, config: &str, vocab: &Vocabulary) -> Result<()> {
    let path = sidecar_path(out);
    fs::write(&path, format!("config={config}\nvocab={}\n", hex(&vocab.digest()))).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256");
    out.with_file_name(name)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus::load(dir)?)
}

fn partition_utts<'c>(corpus: &'c Corpus, name: &str) -> Result<Vec<&'c lae_core::sim::Utterance>> {
    let p = Partition::parse(name).map_err(|_| Error::Usage(format!("unknown partition {name:?}")))?;
    Ok(corpus.partition(p).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let corpus = gen_corpus(&cfg.corpus, &cfg.sim, cfg.seed)?;
            write_corpus(&corpus, &out)?;
            write_out(&out.join("config.txt"), &cfg.normalized())?;
            digest_sidecar(&out.join("manifest.tsv"), &cfg.digest_hex(), &corpus.vocab)?;
            println!("{} utterances written to {}", corpus.utterances.len(), out.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let corpus = load_corpus(&data)?;
            let (_, metrics) = train_run(&cfg, &corpus, &out)?;
            let last = metrics.last().ok_or_else(|| anyhow!("no epochs ran"))?;
            println!("epoch {} J={:.6} J_ori={:.6} skipped={}", last.epoch, last.j, last.j_ori, last.skipped);
        }
        Cmd::Average { in_dir, last, out } => {
            let paths = last_epoch_checkpoints(&in_dir, last)?;
            let avg = average_into(&paths, &out)?;
            // Keep the sidecars next to the average so it can be loaded.
            let dest = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            for name in [CONFIG_FILE, VOCAB_DIGEST_FILE] {
                let (from, to) = (in_dir.join(name), dest.join(name));
                if !to.exists() {
                    fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
                }
            }
            println!("averaged {} checkpoints (last step {})", paths.len(), avg.step);
        }
        Cmd::Decode {
            ckpt,
            data,
            partition,
            beam,
            lm,
            lm_weight,
            decoder,
            out,
        } => {
            let loaded = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            loaded.check_vocab(&corpus.vocab)?;
            let utts = partition_utts(&corpus, &partition)?;
            let ngram = lm.as_deref().map(NgramModel::load).transpose()?;
            let token_lm = ngram.as_ref().map(|m| VocabLm::new(m, &corpus.vocab));
            let opts = DecodeOptions {
                kind: decoder,
                beam: beam.unwrap_or(loaded.config.decode.beam),
                lm: token_lm.as_ref().map(|l| l as _),
                lm_weight: match (&token_lm, lm_weight) {
                    (None, Some(w)) if w != 0.0 => bail!(Error::Usage("--lm-weight needs --lm".into())),
                    (None, _) => 0.0,
                    (Some(_), w) => w.unwrap_or(loaded.config.decode.lm_weight),
                },
            };
            let decoded = decode_utterances(&loaded.model, &utts, opts)?;
            let text: String = decoded.iter().map(|d| format_nbest(&d.utt_id, &d.hyps, &corpus.vocab)).collect();
            write_out(&out, &text)?;
            digest_sidecar(&out, &loaded.config.digest_hex(), &corpus.vocab)?;
            println!("decoded {} utterances of {partition} with the {decoder} decoder", decoded.len());
        }
        Cmd::TrainLm {
            data,
            partitions,
            order,
            out,
        } => {
            let corpus = load_corpus(&data)?;
            let parts = partitions.split(',').map(|p| Partition::parse(p.trim())).collect::<Result<Vec<_>, _>>()?;
            let utts = select(&corpus, &parts);
            let transcripts = transcripts_from_ids(utts.iter().map(|u| u.ids.as_slice()), &corpus.vocab);
            let model = NgramModel::train(&transcripts, order, &[])?;
            model.save(&out)?;
            println!("order-{order} LM on {} sentences written to {}", transcripts.len(), out.display());
        }
        Cmd::Score {
            ref_manifest,
            hyp,
            out,
            per_utt,
            system,
        } => {
            let dir = ref_manifest.parent().unwrap_or(Path::new("."));
            let vpath = dir.join("vocab.tsv");
            let vocab = Vocabulary::from_tsv(&fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?)?;
            let side = sidecar_path(&hyp);
            if let Ok(text) = fs::read_to_string(&side) {
                let want = format!("vocab={}", hex(&vocab.digest()));
                if !text.lines().any(|l| l == want) {
                    bail!(Error::Data(format!(
                        "{} was decoded with a different vocabulary than {}",
                        hyp.display(),
                        vpath.display()
                    )));
                }
            }
            let records = read_manifest(&ref_manifest)?;
            let text = fs::read_to_string(&hyp).map_err(|e| Error::io(&hyp, e))?;
            let mut best: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for e in parse_nbest(&text, &vocab)? {
                if e.rank == 1 {
                    best.insert(e.utt_id, e.tokens);
                }
            }
            let mut wanted: Vec<_> = records.iter().filter(|r| best.contains_key(&r.utt_id)).collect();
            if wanted.is_empty() {
                // Utterances too short to encode produce no lines; a file with
                // none of the manifest's utterances is a mismatch.
                bail!(Error::Data(format!("{} shares no utterances with {}", hyp.display(), ref_manifest.display())));
            }
            let partition = wanted[0].partition;
            wanted = records.iter().filter(|r| r.partition == partition).collect();
            let mut score = MixedScore::default();
            let mut rows = Vec::new();
            for r in &wanted {
                let h = best.get(&r.utt_id).map_or(&[][..], Vec::as_slice);
                let s = score_utterance(&r.ids, h, &vocab)?;
                score.add(&s);
                rows.push(UttErrors {
                    utt_id: r.utt_id.clone(),
                    errors: s.total.errors(),
                    ref_len: s.total.ref_len,
                });
            }
            let report = score_report(&[ScoreRow {
                partition: partition.name().to_string(),
                system,
                score,
            }]);
            write_out(&out, &report)?;
            if let Some(p) = per_utt {
                write_out(&p, &per_utt_tsv(&rows))?;
            }
            print!("{report}");
        }
        Cmd::Probe { ckpt, data, out } => {
            let loaded = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            loaded.check_vocab(&corpus.vocab)?;
            let train_parts = [Partition::TrainMonoA, Partition::TrainMonoB, Partition::TrainCs];
            let probe = train_probe(&loaded.model, &select(&corpus, &train_parts), &ProbeConfig::default())?;
            let evals = [Partition::EvalMonoA, Partition::EvalMonoB, Partition::EvalCs];
            let result = evaluate_probe(&loaded.model, &probe, &select(&corpus, &evals))?;
            let report = result.report();
            write_out(&out, &report)?;
            digest_sidecar(&out, &loaded.config.digest_hex(), &corpus.vocab)?;
            print!("{report}");
        }
        Cmd::Spikes { ckpt, data, utt, out } => {
            let loaded = load_model(&ckpt)?;
            let corpus = load_corpus(&data)?;
            loaded.check_vocab(&corpus.vocab)?;
            let u = corpus.get(&utt).ok_or_else(|| Error::Data(format!("no utterance {utt} in {}", data.display())))?;
            write_out(&out, &spikes_csv(&export_spikes(&loaded.model, u)?, &corpus.vocab))?;
            digest_sidecar(&out, &loaded.config.digest_hex(), &corpus.vocab)?;
        }
        Cmd::Sigtest {
            per_utt_a,
            per_utt_b,
            seed,
        } => {
            let read = |p: &Path| -> Result<Vec<UttErrors>> {
                Ok(parse_per_utt(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?)
            };
            let (a, b) = (read(&per_utt_a)?, read(&per_utt_b)?);
            if a.iter().map(|u| &u.utt_id).ne(b.iter().map(|u| &u.utt_id)) {
                bail!(Error::Data("per-utterance files list different utterances".into()));
            }
            let errs = |v: &[UttErrors]| v.iter().map(|u| u.errors as f64).collect::<Vec<_>>();
            let t = mapsswe_test(&errs(&a), &errs(&b), seed)?;
            println!(
                "n={} mean_diff={:.6} z={:.6} p_normal={:.6e} p_permutation={:.6e}",
                t.n, t.mean_diff, t.z, t.p_normal, t.p_permutation
            );
        }
        Cmd::Experiment { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = run_experiment(&cfg, &out)?;
            for ((system, partition), s) in &r.scores {
                println!("{partition} {system} MER={}", fmt_rate(s.mer()));
            }
            for (label, _, _, t) in &r.sig {
                println!("{label} z={:.4} p={:.4e}", t.z, t.p_normal);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error kind=usage code=2 message=\"cannot set up {n} threads: {e}\"");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already name their cause; others show the chain.
            let (kind, code, msg) = match e.downcast_ref::<Error>() {
                Some(le) => (le.kind(), le.exit_code(), le.to_string()),
                None => ("internal", 1, format!("{e:#}")),
            };
            let msg = msg.replace('\n', " ").replace('"', "'");
            eprintln!("error kind={kind} code={code} message=\"{msg}\"");
            ExitCode::from(code as u8)
        }
    }
}

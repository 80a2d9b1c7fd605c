//! Line-based `key=value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! rejected. The digest is SHA-256 over [`ExperimentConfig::normalized`],
//! which lists every key with its resolved value in a fixed order, so two
//! files that differ only in layout, comments or spelled-out defaults share
//! a digest. Paths do not enter the digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};
use crate::sim::{CorpusSpec, Partition, SimConfig};
use crate::train::{SpecAugment, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub lm_weight: f64,
    pub lm_order: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 10,
            lm_weight: 0.2,
            lm_order: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub corpus: CorpusSpec,
    /// `feat_dim`, `vocab_size` and `seed` follow `sim` and `seed`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Partitions the `train` command reads.
    pub train_partitions: Vec<Partition>,
    pub decode: DecodeConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let seed = 1;
        ExperimentConfig {
            model: ModelConfig::stock(Architecture::Lae, sim.feat_dim, sim.vocabulary().len(), seed),
            seed,
            sim,
            corpus: CorpusSpec::stock(),
            train: TrainConfig::default(),
            train_partitions: vec![Partition::TrainMonoA, Partition::TrainMonoB, Partition::TrainCs],
            decode: DecodeConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some((first, _)) = pairs.insert(k.clone(), (i + 1, v)) {
                return Err(Error::Config(format!("line {}: {k} already set on line {first}", i + 1)));
            }
        }
        let mut cfg = ExperimentConfig::default();
        // The architecture picks the stock layer split; explicit counts override it.
        if let Some((_, v)) = pairs.remove("model.architecture") {
            let arch: Architecture = v.parse()?;
            cfg.model = ModelConfig::stock(arch, cfg.model.feat_dim, cfg.model.vocab_size, cfg.seed);
        }
        for (k, (line, v)) in &pairs {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                e => e,
            })?;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn resolve(&mut self) {
        self.model.feat_dim = self.sim.feat_dim;
        self.model.vocab_size = self.sim.vocabulary().len();
        self.model.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train_partitions.is_empty() || self.train_partitions.iter().any(|p| !p.is_train()) {
            return Err(Error::Config("train.partitions must list training partitions".into()));
        }
        if self.decode.beam == 0 || self.decode.lm_order == 0 {
            return Err(Error::Config("decode.beam and decode.lm_order must be positive".into()));
        }
        if !(self.decode.lm_weight >= 0.0 && self.decode.lm_weight.is_finite()) {
            return Err(Error::Config("decode.lm_weight must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.sim;
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut t.spec_augment;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "sim.tokens_per_lang" => s.tokens_per_lang = parse(key, v)?,
            "sim.feat_dim" => s.feat_dim = parse(key, v)?,
            "sim.dur_min" => s.dur_min = parse(key, v)?,
            "sim.dur_max" => s.dur_max = parse(key, v)?,
            "sim.noise_std" => s.noise_std = parse(key, v)?,
            "sim.proto_scale" => s.proto_scale = parse(key, v)?,
            "sim.utt_tokens_min" => s.utt_tokens_min = parse(key, v)?,
            "sim.utt_tokens_max" => s.utt_tokens_max = parse(key, v)?,
            "sim.silence_max" => s.silence_max = parse(key, v)?,
            "sim.switch_min" => s.switch_min = parse(key, v)?,
            "sim.switch_max" => s.switch_max = parse(key, v)?,
            "sim.cap_frames" => s.cap_frames = parse(key, v)?,
            "sim.splice_retries" => s.splice_retries = parse(key, v)?,
            "model.shared_layers" => m.shared_layers = parse(key, v)?,
            "model.branch_layers" => m.branch_layers = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.d_ff" => m.d_ff = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.subsample_channels" => m.subsample_channels = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.mirror_branch_init" => m.mirror_branch_init = parse_bool(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.accumulation" => t.accumulation = parse(key, v)?,
            "train.peak_lr" => t.peak_lr = parse(key, v)?,
            "train.warmup" => t.warmup = parse(key, v)?,
            "train.aux_loss" => t.aux_loss = parse_bool(key, v)?,
            "train.probe_loss" => t.probe_loss = parse_bool(key, v)?,
            "train.average_last" => t.average_last = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.partitions" => {
                self.train_partitions = v
                    .split(',')
                    .map(|p| Partition::parse(p.trim()).map_err(|_| Error::Config(format!("{key}: unknown partition {p:?}"))))
                    .collect::<Result<_>>()?;
            }
            "train.spec_time_masks" => a.n_time = parse(key, v)?,
            "train.spec_time_width" => a.max_time = parse(key, v)?,
            "train.spec_freq_masks" => a.n_freq = parse(key, v)?,
            "train.spec_freq_width" => a.max_freq = parse(key, v)?,
            "decode.beam" => self.decode.beam = parse(key, v)?,
            "decode.lm_weight" => self.decode.lm_weight = parse(key, v)?,
            "decode.lm_order" => self.decode.lm_order = parse(key, v)?,
            "paths.data" => self.paths.data = Some(PathBuf::from(v)),
            "paths.out" => self.paths.out = Some(PathBuf::from(v)),
            _ => {
                if let Some(name) = key.strip_prefix("corpus.") {
                    let p = Partition::parse(name).map_err(|_| Error::Config(format!("unknown key {key}")))?;
                    let n: usize = parse(key, v)?;
                    match self.corpus.counts.iter_mut().find(|(q, _)| *q == p) {
                        Some(slot) => slot.1 = n,
                        None => self.corpus.counts.push((p, n)),
                    }
                } else {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
            }
        }
        Ok(())
    }

    /// Every key except `paths.*`, one `key=value` per line, in a fixed order.
    pub fn normalized(&self) -> String {
        let (s, m, t) = (&self.sim, &self.model, &self.train);
        let SpecAugment {
            n_time,
            max_time,
            n_freq,
            max_freq,
        } = t.spec_augment;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        for p in Partition::ALL {
            put(&format!("corpus.{}", p.name()), self.corpus.count(p).to_string());
        }
        put("sim.tokens_per_lang", s.tokens_per_lang.to_string());
        put("sim.feat_dim", s.feat_dim.to_string());
        put("sim.dur_min", s.dur_min.to_string());
        put("sim.dur_max", s.dur_max.to_string());
        put("sim.noise_std", s.noise_std.to_string());
        put("sim.proto_scale", s.proto_scale.to_string());
        put("sim.utt_tokens_min", s.utt_tokens_min.to_string());
        put("sim.utt_tokens_max", s.utt_tokens_max.to_string());
        put("sim.silence_max", s.silence_max.to_string());
        put("sim.switch_min", s.switch_min.to_string());
        put("sim.switch_max", s.switch_max.to_string());
        put("sim.cap_frames", s.cap_frames.to_string());
        put("sim.splice_retries", s.splice_retries.to_string());
        put("model.architecture", m.architecture.to_string());
        put("model.shared_layers", m.shared_layers.to_string());
        put("model.branch_layers", m.branch_layers.to_string());
        put("model.d_model", m.d_model.to_string());
        put("model.d_ff", m.d_ff.to_string());
        put("model.heads", m.heads.to_string());
        put("model.subsample_channels", m.subsample_channels.to_string());
        put("model.dropout", m.dropout.to_string());
        put("model.mirror_branch_init", m.mirror_branch_init.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.accumulation", t.accumulation.to_string());
        put("train.peak_lr", t.peak_lr.to_string());
        put("train.warmup", t.warmup.to_string());
        put("train.aux_loss", t.aux_loss.to_string());
        put("train.probe_loss", t.probe_loss.to_string());
        put("train.average_last", t.average_last.to_string());
        put("train.clip_norm", t.clip_norm.to_string());
        let parts: Vec<&str> = self.train_partitions.iter().map(|p| p.name()).collect();
        put("train.partitions", parts.join(","));
        put("train.spec_time_masks", n_time.to_string());
        put("train.spec_time_width", max_time.to_string());
        put("train.spec_freq_masks", n_freq.to_string());
        put("train.spec_freq_width", max_freq.to_string());
        put("decode.beam", self.decode.beam.to_string());
        put("decode.lm_weight", self.decode.lm_weight.to_string());
        put("decode.lm_order", self.decode.lm_order.to_string());
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.normalized().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_normalized_text() {
        let d = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&d.normalized()).unwrap();
        assert_eq!(back, d);
        assert_eq!(ExperimentConfig::parse("").unwrap().digest(), d.digest());
        assert_eq!(d.model.vocab_size, 43);
        assert_eq!(d.digest_hex().len(), 64);
    }

    #[test]
    fn layout_comments_and_paths_do_not_change_the_digest() {
        let a = ExperimentConfig::parse("seed=7\ntrain.epochs=6\n").unwrap();
        let b = ExperimentConfig::parse("# run\n  train.epochs = 6  # short\n\nseed=7\npaths.out=/tmp/x\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(b.paths.out, Some(PathBuf::from("/tmp/x")));
        assert_eq!((a.model.seed, a.train.seed), (7, 7));
        assert_ne!(a.digest(), ExperimentConfig::parse("seed=8\ntrain.epochs=6\n").unwrap().digest());
    }

    #[test]
    fn architecture_sets_stock_layers_and_explicit_counts_win() {
        let v = ExperimentConfig::parse("model.architecture=vanilla").unwrap();
        assert_eq!((v.model.shared_layers, v.model.branch_layers), (5, 0));
        let l = ExperimentConfig::parse("model.shared_layers=2\nmodel.architecture=lae").unwrap();
        assert_eq!((l.model.shared_layers, l.model.branch_layers), (2, 1));
        let c = ExperimentConfig::parse("corpus.train-simu-CS=40\ncorpus.eval-CS=5").unwrap();
        assert_eq!((c.corpus.count(Partition::TrainSimuCs), c.corpus.count(Partition::EvalCs)), (40, 5));
        let t = ExperimentConfig::parse("train.partitions=train-mono-A, train-simu-CS").unwrap();
        assert_eq!(t.train_partitions, vec![Partition::TrainMonoA, Partition::TrainSimuCs]);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "bogus=1",
            "seed",
            "seed=1\nseed=2",
            "train.epochs=x",
            "train.aux_loss=maybe",
            "corpus.train-X=3",
            "train.partitions=eval-CS",
            "train.partitions=",
            "model.heads=5",
            "decode.beam=0",
        ] {
            let e = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
        assert!(ExperimentConfig::parse("x=1\n").unwrap_err().to_string().contains("line 1"));
    }
}

//! Language-aware training: masked auxiliary targets, the combined CTC
//! objective, SpecAugment, the epoch loop and checkpoint averaging.

mod augment;
mod targets;

pub use augment::{Masks, SpecAugment};
pub use targets::{combine_objective, mask_targets, MaskedTargets};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::ctc::ctc_node;
use crate::error::{Error, Result};
use crate::model::LaeModel;
use crate::nnet::checkpoint::average;
use crate::nnet::{clip_norm_where, Adam, Checkpoint, Graph, LrSchedule, Mode, Real, Tensor, Var};
use crate::sim::{derive_rng, Utterance};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Adds the two masked-target CTC terms.
    pub aux_loss: bool,
    /// Trains the language probe head alongside (its gradient stops at `h_bil`).
    pub probe_loss: bool,
    pub spec_augment: SpecAugment,
    pub average_last: usize,
    /// Global-norm clip for the recognition parameters; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            accumulation: 1,
            peak_lr: 1e-3,
            warmup: 500,
            aux_loss: true,
            probe_loss: true,
            spec_augment: SpecAugment::default(),
            average_last: 5,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation == 0 || self.warmup == 0 {
            return bad("epochs, batch_size, accumulation and warmup must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.average_last == 0 || self.average_last > self.epochs {
            return bad(format!("average_last {} must be in 1..=epochs", self.average_last));
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0".into());
        }
        Ok(())
    }
}

/// Per-utterance loss terms; `None` values mark a skipped utterance.
#[derive(Clone, Copy, Debug)]
pub struct UttLoss {
    /// Backward root: `J` plus the probe cross-entropy when enabled.
    pub root: Var,
    pub j: f64,
    pub j_ori: f64,
    pub j_a: f64,
    pub j_b: f64,
    pub probe: f64,
}

/// Builds the training objective for one utterance on `g`. Returns `None`
/// when the input is too short or a needed target cannot be aligned.
pub fn utterance_loss<R: Real>(
    model: &LaeModel<R>,
    g: &mut Graph<'_, R>,
    features: &Tensor<R>,
    targets: &MaskedTargets,
    aux: bool,
    probe_class: Option<usize>,
) -> Result<Option<UttLoss>> {
    let enc = match model.encode_features(g, features) {
        Ok(e) => e,
        Err(Error::Data(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let logits = model.global_logits(g, enc.h_bil)?;
    let lp = g.log_softmax(logits);
    let Some((ori, j_ori)) = ctc_node(g, lp, &targets.y)? else {
        return Ok(None);
    };
    let (mut root, mut j_a, mut j_b) = (ori, 0.0, 0.0);
    if aux && model.has_aux_decoder() {
        let mut side = |h: Option<Var>, y: &[usize]| -> Result<Option<(Var, f64)>> {
            let h = h.expect("branched models expose both branches");
            let logits = model.aux_logits(g, h)?;
            let lp = g.log_softmax(logits);
            ctc_node(g, lp, y)
        };
        let Some((na, la)) = side(enc.h_a, &targets.y_a)? else {
            return Ok(None);
        };
        let Some((nb, lb)) = side(enc.h_b, &targets.y_b)? else {
            return Ok(None);
        };
        let s = g.add(na, nb)?;
        let half = g.scale(s, R::lit(0.5));
        root = g.add(ori, half)?;
        j_a = la;
        j_b = lb;
    }
    let j = combine_objective(j_ori, j_a, j_b, aux && model.has_aux_decoder());
    let mut probe = 0.0;
    if let Some(class) = probe_class {
        let logits = model.probe_logits(g, enc.h_bil)?;
        let lp = g.log_softmax(logits);
        let (_, classes) = g.shape(lp);
        probe = -g.value(lp)[class].as_f64();
        let mut grad = vec![R::zero(); classes];
        grad[class] = -R::one();
        let node = g.scalar_loss(lp, R::lit(probe), grad)?;
        root = g.add(root, node)?;
    }
    Ok(Some(UttLoss {
        root,
        j,
        j_ori,
        j_a,
        j_b,
        probe,
    }))
}

/// One row of the metrics log (means over the epoch's trained utterances).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub j: f64,
    pub j_ori: f64,
    pub j_a: f64,
    pub j_b: f64,
    pub lr: f64,
    pub skipped: usize,
}

pub const METRICS_HEADER: &str = "epoch,step,J,J_ori,J_A,J_B,lr,skipped_count";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.j, r.j_ori, r.j_a, r.j_b, r.lr, r.skipped
        );
    }
    out
}

/// Where per-epoch checkpoints and the metrics CSV go.
#[derive(Clone, Debug)]
pub struct TrainSink {
    pub dir: PathBuf,
    pub digest: [u8; 32],
}

impl TrainSink {
    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ckpt"))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub metrics: Vec<EpochMetrics>,
    /// Mean `J_ori` over the first batch, before any update.
    pub initial_j_ori: f64,
    pub step: u64,
    /// Parameter snapshots of the last `average_last` epochs.
    pub recent: Vec<Checkpoint>,
}

#[derive(Default)]
struct Sums {
    j: f64,
    j_ori: f64,
    j_a: f64,
    j_b: f64,
    n: usize,
}

/// Trains `model` in place. Epochs shuffle `utts` with a seed derived from
/// `(seed, epoch)`; augmentation and dropout use per-utterance seeds.
pub fn train(
    model: &mut LaeModel<f32>,
    utts: &[&Utterance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    sink: Option<&TrainSink>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    if let Some(u) = utts.iter().find(|u| u.feat_dim != model.config.feat_dim) {
        return Err(Error::Data(format!("{} has {} feature dims, model expects {}", u.utt_id, u.feat_dim, model.config.feat_dim)));
    }
    let targets: Vec<MaskedTargets> = utts
        .iter()
        .map(|u| mask_targets(&u.utt_id, &u.ids, vocab))
        .collect::<Result<_>>()?;
    if let Some(s) = sink {
        fs::create_dir_all(&s.dir).map_err(|e| Error::io(&s.dir, e))?;
    }

    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup)?;
    let mut adam = Adam::new(&model.params);
    let mut step = 0u64;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut recent = Vec::new();
    let mut initial_j_ori = f64::NAN;
    let mut order: Vec<usize> = (0..utts.len()).collect();
    let mut pending = 0usize;
    model.params.zero_grads();

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derive_rng(cfg.seed, "shuffle", epoch as u64));
        let mut sums = Sums::default();
        let mut skipped = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut batch_sums = Sums::default();
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let u = utts[i];
                let key = ((epoch as u64) << 32) | i as u64;
                let mut rng = derive_rng(cfg.seed, "augment", key);
                let mut feats = u.features.clone();
                cfg.spec_augment.apply(&mut feats, u.frames, u.feat_dim, &mut rng);
                let x = Tensor::matrix(u.frames, u.feat_dim, feats)?;
                let mut g = Graph::new(&model.params, Mode::Train, rng.next_u64());
                let probe = cfg.probe_loss.then(|| u.language_class());
                let Some(l) = utterance_loss(model, &mut g, &x, &targets[i], cfg.aux_loss, probe)? else {
                    skipped += 1;
                    continue;
                };
                if !l.j.is_finite() {
                    return Err(diverged(sink, epoch, &u.utt_id));
                }
                grads.push(g.backward(l.root)?);
                for (s, v) in [
                    (&mut batch_sums.j, l.j),
                    (&mut batch_sums.j_ori, l.j_ori),
                    (&mut batch_sums.j_a, l.j_a),
                    (&mut batch_sums.j_b, l.j_b),
                ] {
                    *s += v;
                }
                batch_sums.n += 1;
            }
            if initial_j_ori.is_nan() && batch_sums.n > 0 {
                initial_j_ori = batch_sums.j_ori / batch_sums.n as f64;
            }
            if batch_sums.n == 0 {
                continue;
            }
            let scale = 1.0 / (batch_sums.n * cfg.accumulation) as f32;
            for gr in &grads {
                model.params.accumulate(gr, scale);
            }
            sums.j += batch_sums.j;
            sums.j_ori += batch_sums.j_ori;
            sums.j_a += batch_sums.j_a;
            sums.j_b += batch_sums.j_b;
            sums.n += batch_sums.n;
            pending += 1;
            if pending == cfg.accumulation {
                step += 1;
                apply_update(model, &mut adam, &schedule, cfg, step).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m}; {}", last_good(sink, epoch))),
                    e => e,
                })?;
                pending = 0;
            }
        }
        if sums.n == 0 {
            return Err(Error::Data(format!("epoch {epoch}: every utterance was skipped")));
        }
        let n = sums.n as f64;
        let row = EpochMetrics {
            epoch,
            step,
            j: sums.j / n,
            j_ori: sums.j_ori / n,
            j_a: sums.j_a / n,
            j_b: sums.j_b / n,
            lr: schedule.lr(step.max(1)),
            skipped,
        };
        if !row.j.is_finite() {
            return Err(diverged(sink, epoch, "epoch mean"));
        }
        metrics.push(row);
        let ckpt = Checkpoint::from_store(&model.params, step, sink.map_or([0; 32], |s| s.digest));
        if let Some(s) = sink {
            ckpt.save(&s.checkpoint_path(epoch))?;
            let path = s.dir.join("metrics.csv");
            fs::write(&path, metrics_csv(&metrics)).map_err(|e| Error::io(&path, e))?;
        }
        if epoch + cfg.average_last > cfg.epochs {
            recent.push(ckpt);
        }
    }
    Ok(TrainOutput {
        metrics,
        initial_j_ori,
        step,
        recent,
    })
}

fn apply_update(
    model: &mut LaeModel<f32>,
    adam: &mut Adam<f32>,
    schedule: &LrSchedule,
    cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    // Clip the probe head separately so it never rescales encoder updates.
    let is_probe = |n: &str| n.starts_with("probe.");
    clip_norm_where(&mut model.params, cfg.clip_norm, |n| !is_probe(n));
    clip_norm_where(&mut model.params, cfg.clip_norm, is_probe);
    adam.step(&mut model.params, schedule.lr(step), step)?;
    model.params.zero_grads();
    Ok(())
}

fn last_good(sink: Option<&TrainSink>, epoch: usize) -> String {
    match sink {
        Some(s) if epoch > 1 => format!("last good checkpoint {}", s.checkpoint_path(epoch - 1).display()),
        _ => "no checkpoint written yet".to_string(),
    }
}

fn diverged(sink: Option<&TrainSink>, epoch: usize, at: &str) -> Error {
    Error::Numeric(format!("training diverged in epoch {epoch} at {at}; {}", last_good(sink, epoch)))
}

/// Averages checkpoint files elementwise. Returns the average and the step
/// of each source, in input order.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<(Checkpoint, Vec<u64>)> {
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    if let Some(c) = ckpts.iter().find(|c| c.digest != ckpts[0].digest) {
        return Err(Error::Data(format!("checkpoint at step {} has a different config digest", c.step)));
    }
    let steps = ckpts.iter().map(|c| c.step).collect();
    Ok((average(&ckpts)?, steps))
}

/// The last `k` epoch checkpoints in a training output directory.
pub fn last_epoch_checkpoints(dir: &Path, k: usize) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    if k == 0 || found.len() < k {
        return Err(Error::Data(format!(
            "{} holds {} epoch checkpoints, {k} requested",
            dir.display(),
            found.len()
        )));
    }
    Ok(found.split_off(found.len() - k))
}

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LaeModel, PROBE_CLASSES};
use crate::nnet::{Graph, Mode, Real};
use crate::sim::Utterance;

pub const CLASS_NAMES: [&str; PROBE_CLASSES] = ["mono-A", "mono-B", "code-switched"];

/// Time-mean of `h_bil` in eval mode; `None` for inputs too short to encode.
pub fn embed<R: Real>(model: &LaeModel<R>, utt: &Utterance) -> Result<Option<Vec<f64>>> {
    let mut g = Graph::new(&model.params, Mode::Eval, 0);
    let x = utt.to_tensor()?.cast::<R>();
    let enc = match model.encode_features(&mut g, &x) {
        Ok(e) => e,
        Err(Error::Data(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let m = g.mean_rows(enc.h_bil);
    Ok(Some(g.value(m).iter().map(|v| v.as_f64()).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum coefficient.
    pub momentum: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 1000,
            learning_rate: 0.5,
            momentum: 0.9,
            l2: 1e-4,
        }
    }
}

/// Three-way softmax regression on standardized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    dim: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `dim x PROBE_CLASSES`, row-major.
    weight: Vec<f64>,
    bias: [f64; PROBE_CLASSES],
    fitted: bool,
}

impl Probe {
    pub fn new(dim: usize) -> Self {
        Probe {
            dim,
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
            weight: vec![0.0; dim * PROBE_CLASSES],
            bias: [0.0; PROBE_CLASSES],
            fitted: false,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn logits(&self, x: &[f64]) -> [f64; PROBE_CLASSES] {
        let mut z = self.bias;
        for (i, &v) in x.iter().enumerate() {
            let s = (v - self.mean[i]) * self.inv_std[i];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += s * self.weight[i * PROBE_CLASSES + c];
            }
        }
        z
    }

    /// Full-batch gradient descent on the mean cross-entropy.
    pub fn fit(&mut self, xs: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig) -> Result<()> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::Data(format!("{} embeddings, {} labels", xs.len(), labels.len())));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.dim) {
            return Err(Error::Data(format!("embedding of width {} for a {}-dim probe", x.len(), self.dim)));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= PROBE_CLASSES) {
            return Err(Error::Data(format!("class {c} out of range")));
        }
        let n = xs.len() as f64;
        for i in 0..self.dim {
            let m = xs.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / n;
            self.mean[i] = m;
            self.inv_std[i] = 1.0 / var.sqrt().max(1e-6);
        }
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        self.bias = [0.0; PROBE_CLASSES];
        let mut vw = vec![0.0; self.weight.len()];
        let mut vb = [0.0; PROBE_CLASSES];
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; self.weight.len()];
            let mut gb = [0.0; PROBE_CLASSES];
            for (x, &y) in xs.iter().zip(labels) {
                let z = self.logits(x);
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in 0..PROBE_CLASSES {
                    let d = e[c] / sum - f64::from(u8::from(c == y));
                    gb[c] += d;
                    for i in 0..self.dim {
                        gw[i * PROBE_CLASSES + c] += d * (x[i] - self.mean[i]) * self.inv_std[i];
                    }
                }
            }
            for ((w, v), g) in self.weight.iter_mut().zip(&mut vw).zip(&gw) {
                *v = cfg.momentum * *v + g / n + cfg.l2 * *w;
                *w -= cfg.learning_rate * *v;
            }
            for ((b, v), g) in self.bias.iter_mut().zip(&mut vb).zip(&gb) {
                *v = cfg.momentum * *v + g / n;
                *b -= cfg.learning_rate * *v;
            }
        }
        self.fitted = true;
        Ok(())
    }

    /// Arg-max class (lowest index on ties).
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        if !self.fitted {
            return Err(Error::Usage("probe has not been trained".into()));
        }
        if x.len() != self.dim {
            return Err(Error::Data(format!("embedding of width {} for a {}-dim probe", x.len(), self.dim)));
        }
        let z = self.logits(x);
        Ok((0..PROBE_CLASSES).fold(0, |b, c| if z[c] > z[b] { c } else { b }))
    }
}

fn embed_all<R: Real>(model: &LaeModel<R>, utts: &[&Utterance]) -> Result<Vec<Option<Vec<f64>>>> {
    utts.par_iter().map(|u| embed(model, u)).collect()
}

/// Fits a probe on the frozen encoder's embeddings of `utts`, labelled by
/// their utterance-level language class.
pub fn train_probe<R: Real>(model: &LaeModel<R>, utts: &[&Utterance], cfg: &ProbeConfig) -> Result<Probe> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (u, e) in utts.iter().zip(embed_all(model, utts)?) {
        if let Some(e) = e {
            xs.push(e);
            ys.push(u.language_class());
        }
    }
    let mut p = Probe::new(model.config.d_model);
    p.fit(&xs, &ys, cfg)?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePrediction {
    pub utt_id: String,
    pub truth: usize,
    /// `None` when the utterance could not be encoded (counted as wrong).
    pub predicted: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub predictions: Vec<ProbePrediction>,
    /// Per partition name: (correct, total, predicted-class histogram).
    pub partitions: BTreeMap<String, (usize, usize, [usize; PROBE_CLASSES])>,
}

impl ProbeResult {
    pub fn accuracy(&self, partition: &str) -> Option<f64> {
        self.partitions
            .get(partition)
            .filter(|p| p.1 > 0)
            .map(|&(c, n, _)| c as f64 / n as f64)
    }

    pub fn report(&self) -> String {
        let mut out = String::from("partition,n,accuracy,pred_mono-A,pred_mono-B,pred_code-switched\n");
        for (name, (c, n, h)) in &self.partitions {
            let acc = if *n > 0 { format!("{:.4}", *c as f64 / *n as f64) } else { "NA".into() };
            out.push_str(&format!("{name},{n},{acc},{},{},{}\n", h[0], h[1], h[2]));
        }
        out
    }
}

pub fn evaluate_probe<R: Real>(model: &LaeModel<R>, probe: &Probe, utts: &[&Utterance]) -> Result<ProbeResult> {
    if !probe.is_fitted() {
        return Err(Error::Usage("probe has not been trained".into()));
    }
    let mut predictions = Vec::with_capacity(utts.len());
    let mut partitions: BTreeMap<String, (usize, usize, [usize; PROBE_CLASSES])> = BTreeMap::new();
    for (u, e) in utts.iter().zip(embed_all(model, utts)?) {
        let predicted = e.map(|e| probe.classify(&e)).transpose()?;
        let truth = u.language_class();
        let key = u.partition.map_or("unassigned", |p| p.name()).to_string();
        let slot = partitions.entry(key).or_default();
        slot.1 += 1;
        if let Some(c) = predicted {
            slot.2[c] += 1;
            if c == truth {
                slot.0 += 1;
            }
        }
        predictions.push(ProbePrediction {
            utt_id: u.utt_id.clone(),
            truth,
            predicted,
        });
    }
    Ok(ProbeResult { predictions, partitions })
}

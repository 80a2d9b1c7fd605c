//! Encoder topologies: the language-aware encoder (shared block, two
//! language-specific blocks summed frame by frame), plus the Vanilla and
//! Bi-Encoder baselines. All three share the subsampler, the global CTC
//! classifier and the utterance-level language probe head.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nnet::layers::{Init, LayerDims, LayerStack, Linear, Subsampler};
use crate::nnet::{Graph, ParamStore, Real, Tensor, Var};
use crate::vocab::Lang;

/// Classes predicted by the language probe.
pub const PROBE_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// One stack of `shared_layers`.
    Vanilla,
    /// `shared_layers` front layers, then two independent stacks of `branch_layers`.
    BiEncoder,
    /// Shared block of `shared_layers`, then language blocks of `branch_layers`.
    Lae,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Vanilla => "vanilla",
            Architecture::BiEncoder => "bi-encoder",
            Architecture::Lae => "lae",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Architecture::Vanilla),
            "bi-encoder" => Ok(Architecture::BiEncoder),
            "lae" => Ok(Architecture::Lae),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub shared_layers: usize,
    pub branch_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub feat_dim: usize,
    pub subsample_channels: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Initialize both language branches from the same per-layer seeds.
    pub mirror_branch_init: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configurations with matched parameter budgets:
    /// vanilla 5 layers, bi-encoder 1 front + 2 per branch, LAE 3 shared + 1 per branch.
    pub fn stock(architecture: Architecture, feat_dim: usize, vocab_size: usize, seed: u64) -> Self {
        let (shared_layers, branch_layers) = match architecture {
            Architecture::Vanilla => (5, 0),
            Architecture::BiEncoder => (1, 2),
            Architecture::Lae => (3, 1),
        };
        ModelConfig {
            architecture,
            shared_layers,
            branch_layers,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            feat_dim,
            subsample_channels: 64,
            vocab_size,
            dropout: 0.1,
            mirror_branch_init: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_ff == 0 || self.feat_dim == 0 || self.subsample_channels == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIALS {
            return bad(format!("vocabulary of {} has no language tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.architecture {
            Architecture::Vanilla if self.shared_layers == 0 || self.branch_layers != 0 => {
                bad(format!(
                    "vanilla needs shared_layers >= 1 and branch_layers = 0 (got {}, {})",
                    self.shared_layers, self.branch_layers
                ))
            }
            Architecture::BiEncoder if self.branch_layers == 0 => {
                bad("bi-encoder needs branch_layers >= 1".into())
            }
            Architecture::Lae if self.shared_layers == 0 || self.branch_layers == 0 => bad(format!(
                "lae needs shared_layers >= 1 and branch_layers >= 1 (got {}, {})",
                self.shared_layers, self.branch_layers
            )),
            _ => Ok(()),
        }
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    pub fn has_branches(&self) -> bool {
        self.architecture != Architecture::Vanilla
    }
}

/// Hidden representations of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h_a: Option<Var>,
    pub h_b: Option<Var>,
    pub h_bil: Var,
}

impl Encoded {
    pub fn branch(&self, lang: Lang) -> Option<Var> {
        match lang {
            Lang::A => self.h_a,
            Lang::B => self.h_b,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LaeModel<R: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    subsampler: Subsampler,
    shared: LayerStack,
    branches: Option<[LayerStack; 2]>,
    global_decoder: Linear,
    aux_decoder: Option<Linear>,
    probe: Linear,
}

impl<R: Real> LaeModel<R> {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            seed: config.seed,
        };
        let dims = config.layer_dims();
        let subsampler = Subsampler::new(
            &mut init,
            "sub",
            config.feat_dim,
            config.subsample_channels,
            config.d_model,
        )?;
        let shared = LayerStack::new(&mut init, "shared", "shared", config.shared_layers, dims)?;
        let branches = if config.has_branches() {
            let key = |k: &str| if config.mirror_branch_init { "block".to_string() } else { k.to_string() };
            Some([
                LayerStack::new(&mut init, "blockA", &key("blockA"), config.branch_layers, dims)?,
                LayerStack::new(&mut init, "blockB", &key("blockB"), config.branch_layers, dims)?,
            ])
        } else {
            None
        };
        let global_decoder = Linear::new(&mut init, "dec.global", "dec.global", config.d_model, config.vocab_size)?;
        let aux_decoder = if config.has_branches() {
            Some(Linear::new(&mut init, "dec.aux", "dec.aux", config.d_model, config.vocab_size)?)
        } else {
            None
        };
        let probe = Linear::new(&mut init, "probe", "probe", config.d_model, PROBE_CLASSES)?;
        Ok(LaeModel {
            config,
            params,
            subsampler,
            shared,
            branches,
            global_decoder,
            aux_decoder,
            probe,
        })
    }

    /// Same topology and values in another precision.
    pub fn cast<S: Real>(&self) -> LaeModel<S> {
        LaeModel {
            config: self.config.clone(),
            params: self.params.cast(),
            subsampler: self.subsampler.clone(),
            shared: self.shared.clone(),
            branches: self.branches.clone(),
            global_decoder: self.global_decoder.clone(),
            aux_decoder: self.aux_decoder.clone(),
            probe: self.probe.clone(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable parameters excluding the language probe.
    pub fn asr_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && !p.name.starts_with("probe."))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("sub.") || name.starts_with("shared.") || name.starts_with("block")
    }

    pub fn has_aux_decoder(&self) -> bool {
        self.aux_decoder.is_some()
    }

    pub fn encode(&self, g: &mut Graph<'_, R>, features: Var) -> Result<Encoded> {
        let h = self.subsampler.forward(g, features)?;
        let h = self.shared.forward(g, h)?;
        match &self.branches {
            None => Ok(Encoded {
                h_a: None,
                h_b: None,
                h_bil: h,
            }),
            Some([a, b]) => {
                let h_a = a.forward(g, h)?;
                let h_b = b.forward(g, h)?;
                let h_bil = combine(g, h_a, h_b)?;
                Ok(Encoded {
                    h_a: Some(h_a),
                    h_b: Some(h_b),
                    h_bil,
                })
            }
        }
    }

    pub fn encode_features(&self, g: &mut Graph<'_, R>, features: &Tensor<R>) -> Result<Encoded> {
        let x = g.input_tensor(features)?;
        self.encode(g, x)
    }

    /// Per-frame logits of the global classifier (no softmax).
    pub fn global_logits(&self, g: &mut Graph<'_, R>, h_bil: Var) -> Result<Var> {
        self.global_decoder.forward(g, h_bil)
    }

    /// Per-frame logits of the auxiliary classifier, one parameter set for
    /// both language branches.
    pub fn aux_logits(&self, g: &mut Graph<'_, R>, h_lang: Var) -> Result<Var> {
        let dec = self
            .aux_decoder
            .as_ref()
            .ok_or_else(|| Error::Config("vanilla models have no auxiliary decoder".into()))?;
        dec.forward(g, h_lang)
    }

    /// Probe logits from the time-mean of `h_bil`, with the gradient stopped
    /// before the encoder.
    pub fn probe_logits(&self, g: &mut Graph<'_, R>, h_bil: Var) -> Result<Var> {
        let h = g.detach(h_bil);
        let m = g.mean_rows(h);
        self.probe.forward(g, m)
    }

    pub fn probe_layer(&self) -> &Linear {
        &self.probe
    }
}

/// Frame-level addition of the two language-specific representations.
pub fn combine<R: Real>(g: &mut Graph<'_, R>, h_a: Var, h_b: Var) -> Result<Var> {
    g.add(h_a, h_b)
}

/// [`combine`] on plain tensors.
pub fn combine_tensors<R: Real>(h_a: &Tensor<R>, h_b: &Tensor<R>) -> Result<Tensor<R>> {
    if h_a.shape() != h_b.shape() {
        return Err(Error::Config(format!(
            "combine shape mismatch {:?} vs {:?}",
            h_a.shape(),
            h_b.shape()
        )));
    }
    let data = h_a.data().iter().zip(h_b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(h_a.shape().to_vec(), data)
}

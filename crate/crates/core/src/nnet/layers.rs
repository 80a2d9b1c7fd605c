//! Layers built on the tape: affine maps, layer norm, pre-norm encoder
//! layers and the two-stage temporal subsampler.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::{ParamId, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

/// Seed for one parameter, derived from the model seed and a name key.
pub fn param_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Initializes parameters under a name prefix. `init_key` replaces the
/// prefix when deriving init seeds, so two prefixes sharing a key get
/// identical initial values.
pub struct Init<'a, R: Real> {
    pub store: &'a mut ParamStore<R>,
    pub seed: u64,
}

impl<R: Real> Init<'_, R> {
    fn uniform(&mut self, name: &str, key: &str, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(self.seed, key));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| R::lit(rng.gen_range(-bound..=bound))).collect();
        self.store.add(name, Tensor::new(shape, data)?, true)
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.store.add(name, Tensor::new(shape, vec![R::lit(value); n])?, true)
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, key: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = init.uniform(&format!("{name}.w"), &format!("{key}.w"), vec![fan_in, fan_out], bound)?;
        let bias = init.constant(&format!("{name}.b"), vec![fan_out], 0.0)?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&format!("{name}.gamma"), vec![dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), vec![dim], 0.0)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDims {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
}

/// Pre-norm self-attention + feed-forward (Swish) block, residual around each.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub dims: LayerDims,
    norm_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl EncoderLayer {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, key: &str, dims: LayerDims) -> Result<Self> {
        if dims.heads == 0 || !dims.d_model.is_multiple_of(dims.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                dims.d_model, dims.heads
            )));
        }
        let d = dims.d_model;
        let lin = |init: &mut Init<'_, R>, part: &str, i, o| {
            Linear::new(init, &format!("{name}.{part}"), &format!("{key}.{part}"), i, o)
        };
        Ok(EncoderLayer {
            dims,
            norm_attn: LayerNorm::new(init, &format!("{name}.attn.norm"), d)?,
            wq: lin(init, "attn.wq", d, d)?,
            wk: lin(init, "attn.wk", d, d)?,
            wv: lin(init, "attn.wv", d, d)?,
            wo: lin(init, "attn.wo", d, d)?,
            norm_ff: LayerNorm::new(init, &format!("{name}.ff.norm"), d)?,
            ff_in: lin(init, "ff.w1", d, dims.d_ff)?,
            ff_out: lin(init, "ff.w2", dims.d_ff, d)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let (_, d) = g.shape(x);
        if d != self.dims.d_model {
            return Err(Error::Config(format!(
                "encoder layer expects width {}, got {d}",
                self.dims.d_model
            )));
        }
        let h = self.norm_attn.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let a = g.attention(q, k, v, self.dims.heads)?;
        let a = self.wo.forward(g, a)?;
        let a = g.dropout(a, self.dims.dropout);
        let x = g.add(x, a)?;

        let h = self.norm_ff.forward(g, x)?;
        let h = self.ff_in.forward(g, h)?;
        let h = g.swish(h);
        let h = g.dropout(h, self.dims.dropout);
        let h = self.ff_out.forward(g, h)?;
        let h = g.dropout(h, self.dims.dropout);
        g.add(x, h)
    }
}

/// A sequence of encoder layers; empty stacks are the identity.
#[derive(Clone, Debug, Default)]
pub struct LayerStack {
    pub layers: Vec<EncoderLayer>,
}

impl LayerStack {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, key: &str, count: usize, dims: LayerDims) -> Result<Self> {
        let layers = (0..count)
            .map(|i| EncoderLayer::new(init, &format!("{name}.layer{i}"), &format!("{key}.layer{i}"), dims))
            .collect::<Result<_>>()?;
        Ok(LayerStack { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}

pub const SUBSAMPLE_KERNEL: usize = 3;
pub const SUBSAMPLE_STRIDE: usize = 2;

/// Output length of the two-stage subsampler.
///
/// Each stage is an unpadded convolution with kernel 3 and stride 2, mapping
/// `n -> floor((n - 3) / 2) + 1 = floor((n - 1) / 2)`. Composed:
/// `T' = floor((floor((T - 1) / 2) - 1) / 2)`, so `T >= 7` gives `T' >= 1`.
pub fn subsampled_len(t: usize) -> Option<usize> {
    let stage = |n: usize| (n >= SUBSAMPLE_KERNEL).then(|| (n - SUBSAMPLE_KERNEL) / SUBSAMPLE_STRIDE + 1);
    stage(t).and_then(stage)
}

/// Smallest input length the subsampler admits.
pub const MIN_SUBSAMPLE_INPUT: usize = 7;

/// Two strided temporal convolutions (ReLU after each) and a projection to
/// the model width. Overall temporal reduction is 4.
#[derive(Clone, Debug)]
pub struct Subsampler {
    pub feat_dim: usize,
    pub channels: usize,
    conv1: Linear,
    conv2: Linear,
    proj: Linear,
}

impl Subsampler {
    pub fn new<R: Real>(init: &mut Init<'_, R>, name: &str, feat_dim: usize, channels: usize, d_model: usize) -> Result<Self> {
        let k = SUBSAMPLE_KERNEL;
        Ok(Subsampler {
            feat_dim,
            channels,
            conv1: Linear::new(init, &format!("{name}.conv1"), &format!("{name}.conv1"), k * feat_dim, channels)?,
            conv2: Linear::new(init, &format!("{name}.conv2"), &format!("{name}.conv2"), k * channels, channels)?,
            proj: Linear::new(init, &format!("{name}.proj"), &format!("{name}.proj"), channels, d_model)?,
        })
    }

    /// Convolution output before the first nonlinearity.
    pub fn first_stage<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let f = g.frames(x, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE)?;
        self.conv1.forward(g, f)
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let (t, f) = g.shape(x);
        if f != self.feat_dim {
            return Err(Error::Config(format!("expected {} feature dims, got {f}", self.feat_dim)));
        }
        if subsampled_len(t).is_none() {
            return Err(Error::Data(format!(
                "input of {t} frames is shorter than the subsampler minimum of {MIN_SUBSAMPLE_INPUT}"
            )));
        }
        let h = self.first_stage(g, x)?;
        let h = g.relu(h);
        let h = g.frames(h, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE)?;
        let h = self.conv2.forward(g, h)?;
        let h = g.relu(h);
        self.proj.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::graph::Mode;

    fn dims() -> LayerDims {
        LayerDims {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            dropout: 0.1,
        }
    }

    #[test]
    fn subsample_length_formula() {
        assert_eq!(subsampled_len(32), Some(7));
        assert_eq!(subsampled_len(8), Some(1));
        assert_eq!(subsampled_len(7), Some(1));
        assert_eq!(subsampled_len(6), None);
        let mut prev = 0;
        for t in MIN_SUBSAMPLE_INPUT..500 {
            let n = subsampled_len(t).unwrap();
            let formula = ((t - 1) / 2 - 1) / 2;
            assert_eq!(n, formula);
            assert!(n >= prev && n >= 1);
            prev = n;
        }
    }

    #[test]
    fn subsampler_output_shape_and_rejection() {
        let mut store = ParamStore::<f64>::new();
        let sub = Subsampler::new(&mut Init { store: &mut store, seed: 1 }, "sub", 4, 6, 8).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input(32, 4, vec![0.3; 128]).unwrap();
        let y = sub.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), (7, 8));
        let short = g.input(6, 4, vec![0.0; 24]).unwrap();
        assert!(matches!(sub.forward(&mut g, short), Err(Error::Data(_))));
    }

    #[test]
    fn zero_input_gives_zero_preactivation() {
        let mut store = ParamStore::<f32>::new();
        let sub = Subsampler::new(&mut Init { store: &mut store, seed: 3 }, "sub", 4, 6, 8).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input(16, 4, vec![0.0; 64]).unwrap();
        let h = sub.first_stage(&mut g, x).unwrap();
        assert!(g.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_layers_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let stack = LayerStack::new(&mut Init { store: &mut store, seed: 9 }, "enc", "enc", 2, dims()).unwrap();
        for p in store.iter_mut() {
            if !p.name.contains("norm") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new(&store, Mode::Train, 0);
        let data: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.input(5, 8, data.clone()).unwrap();
        let y = stack.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn empty_stack_and_determinism() {
        let mut store = ParamStore::<f32>::new();
        let stack = LayerStack::new(&mut Init { store: &mut store, seed: 5 }, "enc", "enc", 1, dims()).unwrap();
        let empty = LayerStack::default();
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut g = Graph::new(&store, Mode::Train, 42);
        let x = g.input(3, 8, data.clone()).unwrap();
        let y = empty.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), data.as_slice());
        let a = {
            let mut g = Graph::new(&store, Mode::Train, 42);
            let x = g.input(3, 8, data.clone()).unwrap();
            let y = stack.forward(&mut g, x).unwrap();
            g.value(y).to_vec()
        };
        let b = {
            let mut g = Graph::new(&store, Mode::Train, 42);
            let x = g.input(3, 8, data.clone()).unwrap();
            let y = stack.forward(&mut g, x).unwrap();
            g.value(y).to_vec()
        };
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut store = ParamStore::<f32>::new();
        let stack = LayerStack::new(&mut Init { store: &mut store, seed: 5 }, "enc", "enc", 1, dims()).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, 0);
        let x = g.input(3, 4, vec![0.0; 12]).unwrap();
        assert!(matches!(stack.forward(&mut g, x), Err(Error::Config(_))));
    }
}

//! Central finite-difference checks used by tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, Mode, Var};
use super::layers::{subsampled_len, Init, LayerDims, LayerStack, Subsampler};
use super::real::Real;
use super::tensor::{ParamId, ParamStore, Tensor};

/// Max-norm relative error between analytic and numeric gradients over
/// every trainable parameter: `max|a - n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}

#[derive(Clone, Copy, Debug)]
pub struct CheckResult {
    pub rel_err: f64,
    /// Distance of the closest ReLU input from its kink at the base point.
    /// Finite differences are only meaningful when this exceeds the stencil.
    pub relu_margin: f64,
}

/// Compares the tape gradient of `build` with the five-point central
/// difference `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, perturbing
/// each listed parameter entry.
pub fn check<R: Real, F>(store: &mut ParamStore<R>, ids: &[ParamId], h: f64, build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph<'_, R>) -> Result<Var>,
{
    let (analytic, relu_margin): (Vec<f64>, f64) = {
        let mut g = Graph::new(&*store, Mode::Train, 0);
        let loss = build(&mut g)?;
        let grads = g.backward(loss)?;
        let a = ids
            .iter()
            .flat_map(|&id| grads.get(id).unwrap().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .collect();
        (a, g.relu_margin())
    };
    let eval = |store: &ParamStore<R>| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Train, 0);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss).as_f64())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in ids {
        for i in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data()[i];
            let mut at = |k: f64| -> Result<f64> {
                store.get_mut(id).tensor.data_mut()[i] = orig + R::lit(k * h);
                eval(store)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            numeric.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h));
        }
    }
    Ok(CheckResult {
        rel_err: relative_error(&analytic, &numeric, 1e-8),
        relu_margin,
    })
}

/// Reduces a node to a scalar with fixed weights: `sum(x * w)`.
pub fn weighted_sum<R: Real>(g: &mut Graph<'_, R>, x: Var, weights: &[R]) -> Result<Var> {
    let value = g.value(x).iter().zip(weights).map(|(&a, &b)| a * b).sum();
    g.scalar_loss(x, value, weights.to_vec())
}

/// Worst relative error over `trials` random instances of each
/// differentiable operation, checked in 64-bit mode.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cases: [(&'static str, Case); 8] = [
        ("matmul+add_row", matmul_add_row),
        ("add+scale+relu", add_scale_relu),
        ("swish", swish),
        ("layer_norm", layer_norm),
        ("attention", attention),
        ("frames+log_softmax+mean_rows", frames_log_softmax_mean),
        ("dropout+detach", dropout_detach),
        ("subsampler+encoder_layer", encoder_stack),
    ];
    for (name, case) in cases {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(case(&mut rng)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn matrix(store: &mut ParamStore<f64>, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Result<ParamId> {
    store.add(name, Tensor::matrix(rows, cols, data)?, true)
}

fn matmul_add_row(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let mut s = ParamStore::new();
    let a = matrix(&mut s, "a", m, k, rand_vec(rng, m * k))?;
    let b = matrix(&mut s, "b", k, n, rand_vec(rng, k * n))?;
    let c = matrix(&mut s, "c", 1, n, rand_vec(rng, n))?;
    let w = rand_vec(rng, m * n);
    let r = check(&mut s, &[a, b, c], 1e-3, |g| {
        let (va, vb, vc) = (g.param(a), g.param(b), g.param(c));
        let y = g.matmul(va, vb)?;
        let y = g.add_row(y, vc)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(r.rel_err)
}

fn add_scale_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let mut s = ParamStore::new();
    let a = matrix(&mut s, "a", m, n, rand_away_from_zero(rng, m * n))?;
    let b = matrix(&mut s, "b", m, n, rand_vec(rng, m * n))?;
    let k: f64 = rng.gen_range(-2.0..2.0);
    let w = rand_vec(rng, m * n);
    let r = check(&mut s, &[a, b], 1e-3, |g| {
        let (va, vb) = (g.param(a), g.param(b));
        let r = g.relu(va);
        let y = g.scale(vb, k);
        let y = g.add(r, y)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(r.rel_err)
}

fn swish(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let mut s = ParamStore::new();
    let data = (0..m * n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let a = matrix(&mut s, "a", m, n, data)?;
    let w = rand_vec(rng, m * n);
    let r = check(&mut s, &[a], 1e-3, |g| {
        let va = g.param(a);
        let y = g.swish(va);
        weighted_sum(g, y, &w)
    })?;
    Ok(r.rel_err)
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (rng.gen_range(1..4), rng.gen_range(2..6));
    let mut s = ParamStore::new();
    // Keeps every row's variance well above eps.
    let data = (0..m * n).map(|i| (i % n) as f64 * 0.5 + rng.gen_range(-0.2..0.2)).collect();
    let x = matrix(&mut s, "x", m, n, data)?;
    let gm = matrix(&mut s, "g", 1, n, rand_vec(rng, n))?;
    let bt = matrix(&mut s, "b", 1, n, rand_vec(rng, n))?;
    let w = rand_vec(rng, m * n);
    let r = check(&mut s, &[x, gm, bt], 1e-3, |g| {
        let (vx, vg, vb) = (g.param(x), g.param(gm), g.param(bt));
        let y = g.layer_norm(vx, vg, vb, 1e-5)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(r.rel_err)
}

fn attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let heads = rng.gen_range(1..3);
    let d = heads * rng.gen_range(1..3);
    let t = rng.gen_range(1..5);
    let mut s = ParamStore::new();
    let q = matrix(&mut s, "q", t, d, rand_vec(rng, t * d))?;
    let k = matrix(&mut s, "k", t, d, rand_vec(rng, t * d))?;
    let v = matrix(&mut s, "v", t, d, rand_vec(rng, t * d))?;
    let w = rand_vec(rng, t * d);
    let r = check(&mut s, &[q, k, v], 1e-3, |g| {
        let (vq, vk, vv) = (g.param(q), g.param(k), g.param(v));
        let y = g.attention(vq, vk, vv, heads)?;
        weighted_sum(g, y, &w)
    })?;
    Ok(r.rel_err)
}

fn frames_log_softmax_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, f) = (rng.gen_range(3..8), rng.gen_range(1..4));
    let mut s = ParamStore::new();
    let x = matrix(&mut s, "x", t, f, rand_vec(rng, t * f))?;
    let out_t = (t - 3) / 2 + 1;
    let w1 = rand_vec(rng, out_t * 3 * f);
    let w2 = rand_vec(rng, 3 * f);
    let r = check(&mut s, &[x], 1e-3, |g| {
        let vx = g.param(x);
        let fr = g.frames(vx, 3, 2)?;
        let ls = g.log_softmax(fr);
        let a = weighted_sum(g, ls, &w1)?;
        let mr = g.mean_rows(fr);
        let b = weighted_sum(g, mr, &w2)?;
        g.add(a, b)
    })?;
    Ok(r.rel_err)
}

/// Dropout draws the same mask for every evaluation under one graph seed.
/// A detached branch must leave the tape gradient unchanged; a violation
/// reports an infinite error.
fn dropout_detach(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let mut s = ParamStore::new();
    let a = matrix(&mut s, "a", m, n, rand_vec(rng, m * n))?;
    let w = rand_vec(rng, m * n);
    let build = |g: &mut Graph<'_, f64>, with_detached: bool| -> Result<Var> {
        let va = g.param(a);
        let mut y = g.dropout(va, 0.3);
        if with_detached {
            let frozen = g.detach(va);
            let sq = g.swish(frozen);
            y = g.add(y, sq)?;
        }
        weighted_sum(g, y, &w)
    };
    let grad = |with_detached: bool| -> Result<Vec<f64>> {
        let mut g = Graph::new(&s, Mode::Train, 0);
        let loss = build(&mut g, with_detached)?;
        Ok(g.backward(loss)?.get(a).map(|v| v.to_vec()).unwrap_or_default())
    };
    if grad(true)? != grad(false)? {
        return Ok(f64::INFINITY);
    }
    Ok(check(&mut s, &[a], 1e-3, |g| build(g, false))?.rel_err)
}

fn encoder_stack(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let mut s = ParamStore::new();
        let dims = LayerDims {
            d_model: 4,
            d_ff: 6,
            heads: 2,
            dropout: 0.0,
        };
        let seed = rng.gen();
        let (sub, stack) = {
            let mut init = Init { store: &mut s, seed };
            let sub = Subsampler::new(&mut init, "sub", 2, 3, 4)?;
            let stack = LayerStack::new(&mut init, "enc", "enc", 1, dims)?;
            (sub, stack)
        };
        // Nonzero biases keep rows from collapsing to constants before layer norm.
        for p in s.iter_mut().filter(|p| p.name.ends_with(".b")) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let t = rng.gen_range(7..14);
        let feats = rand_vec(rng, t * 2);
        let t_out = subsampled_len(t).expect("t >= 7");
        let w = rand_vec(rng, t_out * 4);
        let ids: Vec<ParamId> = s.iter().map(|(id, _)| id).collect();
        let r = check(&mut s, &ids, 1e-3, |g| {
            let x = g.input(t, 2, feats.clone())?;
            let h = sub.forward(g, x)?;
            let h = stack.forward(g, h)?;
            weighted_sum(g, h, &w)
        })?;
        // The subsampler's ReLU has a kink; redraw when an input sits
        // within the stencil's reach of it.
        if r.relu_margin >= 1e-2 {
            return Ok(r.rel_err);
        }
    }
}

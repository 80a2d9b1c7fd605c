//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op appends a node; [`Graph::backward`] walks the tape in reverse and
//! returns per-parameter [`Gradients`]. Vectors (biases, scalars) are 1-row
//! matrices.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::real::{gemm, Real, View};
use super::tensor::{Gradients, ParamGrad, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Records caches for backward and applies dropout.
    Train,
    /// No dropout; backward is refused.
    Eval,
}

enum Value<R> {
    Owned(Vec<R>),
    Param(ParamId),
}

enum Op<R> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, R),
    Relu(Var),
    Swish(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<R>,
    },
    LogSoftmax(Var),
    Frames {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    MeanRows(Var),
    Mask(Var, Vec<R>),
    ScalarLoss(Var, Vec<R>),
}

struct Node<R> {
    rows: usize,
    cols: usize,
    value: Value<R>,
    op: Op<R>,
    needs_grad: bool,
}

pub struct Graph<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

fn dim_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Config(format!("dimension mismatch in {what}: {a:?} vs {b:?}"))
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamStore<R>, mode: Mode, seed: u64) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<R> {
        self.params
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[R] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).tensor.data(),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<R> {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> R {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<R>, op: Op<R>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(value),
            op,
            needs_grad: needs_grad && self.mode == Mode::Train,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<R>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Config(format!(
                "input of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn input_tensor(&mut self, t: &Tensor<R>) -> Result<Var> {
        let (r, c) = t.dims2();
        self.input(r, c, t.data().to_vec())
    }

    /// Constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let data = self.value(v).to_vec();
        self.push(r, c, data, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let (rows, cols) = p.tensor.dims2();
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: p.trainable && self.mode == Mode::Train,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(
            R::one(),
            self.value(a),
            View::row_major(m, k),
            self.value(b),
            View::row_major(k, n),
            R::zero(),
            &mut out,
            View::row_major(m, n),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// Adds a 1-row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != n {
            return Err(dim_err("add_row", (m, n), (br, bc)));
        }
        let b = self.value(bias);
        let out: Vec<R> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&a, &c)| a + c))
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(m, n, out, Op::AddRow(x, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let (m, n) = self.shape(a);
        let out: Vec<R> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let ng = self.needs(x);
        self.push(m, n, out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v.max(R::zero())).collect();
        let ng = self.needs(x);
        self.push(m, n, out, Op::Relu(x), ng)
    }

    /// `x * sigmoid(x)`
    pub fn swish(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| v / (R::one() + (-v).exp()))
            .collect();
        let ng = self.needs(x);
        self.push(m, n, out, Op::Swish(x), ng)
    }

    /// Smallest distance of any ReLU input on the tape from the kink at 0.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1-row each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(dim_err("layer_norm", (m, n), self.shape(gamma)));
        }
        let eps = R::lit(eps);
        let inv_n = R::one() / R::lit(n as f64);
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![R::zero(); m * n];
        let mut rstd = vec![R::zero(); m];
        let mut out = vec![R::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<R>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_n;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values (each `T x D`, heads split along columns).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.shape(q);
        if self.shape(k) != (t, d) || self.shape(v) != (t, d) {
            return Err(dim_err("attention", (t, d), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = R::one() / R::lit(dh as f64).sqrt();
        let mut probs = vec![R::zero(); heads * t * t];
        let mut out = vec![R::zero(); t * d];
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                scale,
                qs,
                View::block(t, d, h * dh, dh),
                ks,
                View::block(t, d, h * dh, dh).t(),
                R::zero(),
                p,
                View::row_major(t, t),
            );
            for row in p.chunks_mut(t) {
                softmax_in_place(row);
            }
            gemm(
                R::one(),
                p,
                View::row_major(t, t),
                vs,
                View::block(t, d, h * dh, dh),
                R::zero(),
                &mut out,
                View::block(t, d, h * dh, dh),
            );
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let probs = if ng { probs } else { Vec::new() };
        Ok(self.push(t, d, out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<R>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.needs(x);
        self.push(m, n, out, Op::LogSoftmax(x), ng)
    }

    /// Stacks `kernel` consecutive rows (hop `stride`) into one output row:
    /// the unfold step of a strided 1-D convolution without padding.
    pub fn frames(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, f) = self.shape(x);
        if kernel == 0 || stride == 0 || t < kernel {
            return Err(Error::Data(format!(
                "sequence of {t} frames too short for kernel {kernel}"
            )));
        }
        let out_t = (t - kernel) / stride + 1;
        let xs = self.value(x);
        let mut out = Vec::with_capacity(out_t * kernel * f);
        for o in 0..out_t {
            let start = o * stride * f;
            out.extend_from_slice(&xs[start..start + kernel * f]);
        }
        let ng = self.needs(x);
        Ok(self.push(out_t, kernel * f, out, Op::Frames { x, kernel, stride }, ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let inv = R::one() / R::lit(m as f64);
        let mut out = vec![R::zero(); n];
        for row in self.value(x).chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.needs(x);
        self.push(1, n, out, Op::MeanRows(x), ng)
    }

    /// Inverted dropout; identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let (m, n) = self.shape(x);
        let keep = R::lit(1.0 / (1.0 - rate));
        let mask: Vec<R> = (0..m * n)
            .map(|_| if self.rng.gen::<f64>() < rate { R::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let ng = self.needs(x);
        self.push(m, n, out, Op::Mask(x, mask), ng)
    }

    /// Scalar node whose value and gradient with respect to `x` were
    /// computed outside the tape (CTC, cross-entropy).
    pub fn scalar_loss(&mut self, x: Var, value: R, grad: Vec<R>) -> Result<Var> {
        let (m, n) = self.shape(x);
        if grad.len() != m * n {
            return Err(dim_err("scalar_loss", (m, n), (grad.len(), 1)));
        }
        let ng = self.needs(x);
        Ok(self.push(1, 1, vec![value], Op::ScalarLoss(x, grad), ng))
    }

    /// Reverse pass from a 1x1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.mode != Mode::Train {
            return Err(Error::Usage("backward called on a graph recorded in eval mode".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<R>>> = self.nodes.iter().map(|_| None).collect();
        let mut per_param: Vec<ParamGrad<R>> = self
            .params
            .iter()
            .map(|(_, p)| if p.trainable { ParamGrad::Zero(p.tensor.numel()) } else { ParamGrad::Frozen })
            .collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { per_param });
        }
        grads[loss.0] = Some(vec![R::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    match &mut per_param[id.0] {
                        ParamGrad::Frozen => {}
                        ParamGrad::Dense(buf) => add_into(buf, &g),
                        slot @ ParamGrad::Zero(_) => *slot = ParamGrad::Dense(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        gemm(R::one(), &g, View::row_major(m, n), self.value(*b), View::transposed(k, n), R::one(), ga, View::row_major(m, k));
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        gemm(R::one(), self.value(*a), View::transposed(m, k), &g, View::row_major(m, n), R::one(), gb, View::row_major(k, n));
                    }
                }
                Op::AddRow(x, b) => {
                    let n = node.cols;
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, n);
                        for row in g.chunks(n) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    if self.needs(*x) {
                        add_into(slot(&mut grads, *x, g.len()), &g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.needs(*b) {
                        add_into(slot(&mut grads, *b, g.len()), &g);
                    }
                }
                Op::Scale(x, s) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for (o, &v) in gx.iter_mut().zip(&g) {
                        *o += v * *s;
                    }
                }
                Op::Relu(x) => {
                    let xs = self.value(*x);
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &v), &xv) in gx.iter_mut().zip(&g).zip(xs) {
                        if xv > R::zero() {
                            *o += v;
                        }
                    }
                }
                Op::Swish(x) => {
                    let xs = self.value(*x);
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &v), &xv) in gx.iter_mut().zip(&g).zip(xs) {
                        let sig = R::one() / (R::one() + (-xv).exp());
                        *o += v * sig * (R::one() + xv * (R::one() - sig));
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = (node.rows, node.cols);
                    let gam = self.value(*gamma);
                    if self.needs(*gamma) {
                        let gg = slot(&mut grads, *gamma, n);
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                gg[c] += grow[c] * hrow[c];
                            }
                        }
                    }
                    if self.needs(*beta) {
                        let gb = slot(&mut grads, *beta, n);
                        for grow in g.chunks(n) {
                            add_into(gb, grow);
                        }
                    }
                    if self.needs(*x) {
                        let inv_n = R::one() / R::lit(n as f64);
                        let gx = slot(&mut grads, *x, m * n);
                        let mut dh = vec![R::zero(); n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let hrow = &xhat[r * n..(r + 1) * n];
                            let mut mean_dh = R::zero();
                            let mut mean_dhh = R::zero();
                            for c in 0..n {
                                dh[c] = grow[c] * gam[c];
                                mean_dh += dh[c];
                                mean_dhh += dh[c] * hrow[c];
                            }
                            mean_dh *= inv_n;
                            mean_dhh *= inv_n;
                            for c in 0..n {
                                gx[r * n + c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (t, d) = (node.rows, node.cols);
                    let dh = d / heads;
                    let scale = R::one() / R::lit(dh as f64).sqrt();
                    let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = vec![R::zero(); t * d];
                    let mut gk = vec![R::zero(); t * d];
                    let mut gv = vec![R::zero(); t * d];
                    let mut dp = vec![R::zero(); t * t];
                    for h in 0..*heads {
                        let p = &probs[h * t * t..(h + 1) * t * t];
                        let blk = View::block(t, d, h * dh, dh);
                        // dV = P^T dO
                        gemm(R::one(), p, View::transposed(t, t), &g, blk, R::zero(), &mut gv, blk);
                        // dP = dO V^T
                        gemm(R::one(), &g, blk, vs, blk.t(), R::zero(), &mut dp, View::row_major(t, t));
                        for (dprow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: R = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in dprow.iter_mut().zip(prow) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dS^T Q
                        gemm(R::one(), &dp, View::row_major(t, t), ks, blk, R::zero(), &mut gq, blk);
                        gemm(R::one(), &dp, View::transposed(t, t), qs, blk, R::zero(), &mut gk, blk);
                    }
                    for (var, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if self.needs(var) {
                            add_into(slot(&mut grads, var, t * d), &buf);
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let n = node.cols;
                    let out = self.value(Var(idx));
                    let gx = slot(&mut grads, *x, g.len());
                    for ((grow, orow), xrow) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: R = grow.iter().copied().sum();
                        for c in 0..n {
                            xrow[c] += grow[c] - orow[c].exp() * total;
                        }
                    }
                }
                Op::Frames { x, kernel, stride } => {
                    let (t, f) = self.shape(*x);
                    let width = kernel * f;
                    let gx = slot(&mut grads, *x, t * f);
                    for (o, grow) in g.chunks(width).enumerate() {
                        let start = o * stride * f;
                        add_into(&mut gx[start..start + width], grow);
                    }
                }
                Op::MeanRows(x) => {
                    let (m, n) = self.shape(*x);
                    let inv = R::one() / R::lit(m as f64);
                    let gx = slot(&mut grads, *x, m * n);
                    for row in gx.chunks_mut(n) {
                        for (o, &v) in row.iter_mut().zip(&g) {
                            *o += v * inv;
                        }
                    }
                }
                Op::Mask(x, mask) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &v), &k) in gx.iter_mut().zip(&g).zip(mask) {
                        *o += v * k;
                    }
                }
                Op::ScalarLoss(x, local) => {
                    let s = g[0];
                    let gx = slot(&mut grads, *x, local.len());
                    for (o, &v) in gx.iter_mut().zip(local) {
                        *o += s * v;
                    }
                }
            }
        }
        Ok(Gradients { per_param })
    }
}

fn slot<R: Real>(grads: &mut [Option<Vec<R>>], v: Var, len: usize) -> &mut [R] {
    grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

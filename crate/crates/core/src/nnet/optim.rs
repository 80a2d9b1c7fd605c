use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::ParamStore;

/// Linear warm-up followed by inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64) -> Result<Self> {
        if !(peak > 0.0) || warmup == 0 {
            return Err(Error::Config(format!(
                "learning-rate schedule needs peak > 0 and warmup > 0 (got {peak}, {warmup})"
            )));
        }
        Ok(LrSchedule { peak, warmup })
    }

    /// `peak * min(step / warmup, sqrt(warmup / step))`
    pub fn lr(&self, step: u64) -> f64 {
        if step == 0 {
            return 0.0;
        }
        let s = step as f64;
        let w = self.warmup as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<R: Real>(store: &mut ParamStore<R>, max_norm: f64) -> f64 {
    clip_norm_where(store, max_norm, |_| true)
}

/// [`clip_global_norm`] restricted to the parameters whose name passes `keep`.
pub fn clip_norm_where<R: Real>(store: &mut ParamStore<R>, max_norm: f64, keep: impl Fn(&str) -> bool) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| keep(&p.name))
        .filter_map(|(_, p)| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = R::lit(max_norm / norm);
        for p in store.iter_mut().filter(|p| keep(&p.name)) {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<R>>,
    second: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(store: &ParamStore<R>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![R::zero(); p.tensor.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam update at optimizer step `step >= 1`.
    /// Parameters without a gradient buffer are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<R>, lr: f64, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::Usage("adam step counter starts at 1".into()));
        }
        for p in store.iter_mut() {
            if let Some(g) = &p.tensor.grad {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {} at index {i}",
                        p.name
                    )));
                }
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let step_size = R::lit(lr / c1);
        let (rb1, rb2) = (R::lit(b1), R::lit(b2));
        let (ob1, ob2) = (R::lit(1.0 - b1), R::lit(1.0 - b2));
        let inv_c2 = R::lit(1.0 / c2);
        let eps = R::lit(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.tensor.grad.take() else { continue };
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = rb1 * *mi + ob1 * gi;
                *vi = rb2 * *vi + ob2 * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
            p.tensor.grad = Some(g);
        }
        Ok(())
    }
}

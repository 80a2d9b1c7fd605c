use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::real::Real;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    pub grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!("tensor shape {shape:?} must have positive dims")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![R::zero(); numel],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Rows and columns when viewed as a matrix; vectors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let cols = *s.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::lit(x.as_f64())).collect(),
            grad: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<R> {
    pub name: String,
    pub tensor: Tensor<R>,
    pub trainable: bool,
}

/// Named parameter collection. Names are unique and their lexicographic
/// order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
    index: BTreeMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<R>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<R>> {
        self.id(name).map(move |id| self.get_mut(id))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    /// Parameters in lexicographic name order.
    pub fn sorted(&self) -> impl Iterator<Item = &Parameter<R>> {
        self.index.values().map(|id| &self.params[id.0])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Adds `scale * grads` into every parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients<R>, scale: R) {
        for (p, g) in self.params.iter_mut().zip(&grads.per_param) {
            let n = match g {
                ParamGrad::Frozen => continue,
                ParamGrad::Zero(n) => *n,
                ParamGrad::Dense(g) => g.len(),
            };
            let buf = p.tensor.grad.get_or_insert_with(|| vec![R::zero(); n]);
            if let ParamGrad::Dense(g) = g {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += scale * x;
                }
            }
        }
    }

    /// Copies values from `other` for every parameter name both stores share.
    pub fn copy_values_from(&mut self, other: &ParamStore<R>) -> Result<()> {
        for p in &mut self.params {
            if let Some(src) = other.by_name(&p.name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(Error::Config(format!("shape mismatch for {}", p.name)));
                }
                p.tensor.data_mut().copy_from_slice(src.tensor.data());
            }
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ParamGrad<R> {
    Frozen,
    /// Trainable but not reached by the backward pass.
    Zero(usize),
    Dense(Vec<R>),
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<R> {
    pub per_param: Vec<ParamGrad<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a trainable parameter; `None` for frozen ones.
    pub fn get(&self, id: ParamId) -> Option<Cow<'_, [R]>> {
        match self.per_param.get(id.0)? {
            ParamGrad::Frozen => None,
            ParamGrad::Zero(n) => Some(Cow::Owned(vec![R::zero(); *n])),
            ParamGrad::Dense(g) => Some(Cow::Borrowed(g)),
        }
    }
}

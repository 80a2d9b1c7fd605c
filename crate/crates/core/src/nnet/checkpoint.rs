//! Binary checkpoint format.
//!
//! ```text
//! "LAEC"  u32 version  u32 param_count
//! per parameter, sorted by name:
//!     u32 name_len  name (UTF-8)  u32 rank  u32 dims[rank]  f32 data[prod(dims)]
//! u64 global_step  [u8; 32] config_digest
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LAEC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Sorted by name.
    pub params: Vec<(String, Tensor<f32>)>,
    pub step: u64,
    pub digest: [u8; 32],
}

impl Checkpoint {
    pub fn from_store<R: Real>(store: &ParamStore<R>, step: u64, digest: [u8; 32]) -> Self {
        Checkpoint {
            params: store
                .sorted()
                .map(|p| (p.name.clone(), p.tensor.cast::<f32>()))
                .collect(),
            step,
            digest,
        }
    }

    /// Writes the stored values into `store`. Name sets and shapes must match exactly.
    pub fn load_into<R: Real>(&self, store: &mut ParamStore<R>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let p = store
                .by_name_mut(name)
                .ok_or_else(|| Error::Data(format!("checkpoint parameter {name} not in model")))?;
            if p.tensor.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            for (d, &s) in p.tensor.data_mut().iter_mut().zip(t.data()) {
                *d = R::lit(s as f64);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.params[i].1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                read_exact(&mut r, &mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            let t = Tensor::new(dims, data).map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
            params.push((name, t));
        }
        if params.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Data("checkpoint parameters are not sorted by unique name".into()));
        }
        let mut step = [0u8; 8];
        read_exact(&mut r, &mut step)?;
        let mut digest = [0u8; 32];
        read_exact(&mut r, &mut digest)?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint footer".into()));
        }
        Ok(Checkpoint {
            params,
            step: u64::from_le_bytes(step),
            digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Elementwise mean of checkpoints with identical parameter names and shapes.
/// The result carries the last checkpoint's step and digest.
pub fn average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Usage("averaging needs at least one checkpoint".into()))?;
    let mut sums: Vec<Vec<f64>> = first
        .params
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    for c in ckpts {
        if c.params.len() != first.params.len() {
            return Err(Error::Data("checkpoints differ in parameter count".into()));
        }
        for ((sum, (name, t)), (name0, t0)) in sums.iter_mut().zip(&c.params).zip(&first.params) {
            if name != name0 || t.shape() != t0.shape() {
                return Err(Error::Data(format!(
                    "checkpoint mismatch: {name} {:?} vs {name0} {:?}",
                    t.shape(),
                    t0.shape()
                )));
            }
            for (s, &v) in sum.iter_mut().zip(t.data()) {
                *s += v as f64;
            }
        }
    }
    let k = ckpts.len() as f64;
    let last = ckpts.last().unwrap();
    Ok(Checkpoint {
        params: first
            .params
            .iter()
            .zip(sums)
            .map(|((name, t), sum)| {
                let data = sum.into_iter().map(|s| (s / k) as f32).collect();
                (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape unchanged"))
            })
            .collect(),
        step: last.step,
        digest: last.digest,
    })
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data("truncated checkpoint".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

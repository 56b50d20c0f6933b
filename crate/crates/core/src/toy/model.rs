//! One-hidden-layer tanh MLP mapping a key to a distribution over values.
//!
//! `p = softmax(downᵀ · tanh((up + ΔW)ᵀ · emb[key]))`

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterUpdate, ParamUpdate};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from};

pub const EMBEDDING: &str = "embedding";
pub const UP_PROJ: &str = "up_proj";
pub const DOWN_PROJ: &str = "down_proj";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub keys: usize,
    pub d: usize,
    pub h: usize,
    pub values: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    /// `K×d`
    pub embedding: Matrix,
    /// `d×h`, the adapted matrix
    pub up_proj: Matrix,
    /// `h×V`
    pub down_proj: Matrix,
}

impl ToyModel {
    pub fn new(embedding: Matrix, up_proj: Matrix, down_proj: Matrix) -> Result<Self> {
        if embedding.cols() != up_proj.rows() {
            return Err(Error::Shape { op: "toy model (embedding, up_proj)", left: embedding.shape(), right: up_proj.shape() });
        }
        if up_proj.cols() != down_proj.rows() {
            return Err(Error::Shape { op: "toy model (up_proj, down_proj)", left: up_proj.shape(), right: down_proj.shape() });
        }
        Ok(ToyModel { embedding, up_proj, down_proj })
    }

    /// Uniform init with unit-variance embeddings and fan-in scaled projections.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = rng_from(derive_seed(seed, "toy-init", &[]));
        let mut fill = |n: usize, std: f64| -> Vec<f32> {
            let a = 3f64.sqrt() * std;
            (0..n).map(|_| rng.random_range(-a..a) as f32).collect()
        };
        let emb = fill(dims.keys * dims.d, 1.0);
        let up = fill(dims.d * dims.h, 1.0 / (dims.d as f64).sqrt());
        let down = fill(dims.h * dims.values, 1.0 / (dims.h as f64).sqrt());
        ToyModel {
            embedding: Matrix::new(dims.keys, dims.d, emb).expect("finite"),
            up_proj: Matrix::new(dims.d, dims.h, up).expect("finite"),
            down_proj: Matrix::new(dims.h, dims.values, down).expect("finite"),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            keys: self.embedding.rows(),
            d: self.embedding.cols(),
            h: self.up_proj.cols(),
            values: self.down_proj.cols(),
        }
    }

    /// Distribution over values. `delta` is added to `up_proj`.
    pub fn forward(&self, key: usize, delta: Option<&Matrix>) -> Result<Vec<f64>> {
        let w = Weights::from_model(self);
        let eff = w.effective_up(delta.map(Matrix::to_f64).as_deref())?;
        w.check_key(key)?;
        Ok(w.forward(key, &eff).p)
    }

    /// As [`forward`](Self::forward), taking the `up_proj` entry of an
    /// adapter. Other parameter names are rejected.
    pub fn forward_adapter(&self, key: usize, adapter: Option<&AdapterUpdate>) -> Result<Vec<f64>> {
        let delta = adapter.map(|a| adapter_delta(self, a)).transpose()?;
        self.forward(key, delta.as_ref())
    }

    /// Stable identifier derived from the parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.embedding, &self.up_proj, &self.down_proj] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        let hex: String = d[..6].iter().map(|b| format!("{b:02x}")).collect();
        format!("toy-{hex}")
    }

    /// The base as a dense update (for persistence in the adapter container).
    pub fn to_adapter(&self) -> AdapterUpdate {
        let id = self.fingerprint();
        let entries = BTreeMap::from([
            (EMBEDDING.to_string(), ParamUpdate::dense(self.embedding.clone())),
            (UP_PROJ.to_string(), ParamUpdate::dense(self.up_proj.clone())),
            (DOWN_PROJ.to_string(), ParamUpdate::dense(self.down_proj.clone())),
        ]);
        AdapterUpdate::new(id.clone(), "base", id, entries).expect("ids are nonempty")
    }

    pub fn from_adapter(u: &AdapterUpdate) -> Result<Self> {
        let get = |name: &str| {
            u.entries
                .get(name)
                .map(|e| e.effective_delta().into_owned())
                .ok_or_else(|| Error::InvalidAdapter(format!("base model file lacks `{name}`")))
        };
        ToyModel::new(get(EMBEDDING)?, get(UP_PROJ)?, get(DOWN_PROJ)?)
    }
}

/// The `up_proj` delta of an adapter, checked against the model.
pub fn adapter_delta(model: &ToyModel, adapter: &AdapterUpdate) -> Result<Matrix> {
    if let Some(name) = adapter.param_names().find(|&n| n != UP_PROJ) {
        return Err(Error::InvalidAdapter(format!("toy adapters may only target `{UP_PROJ}`, found `{name}`")));
    }
    let entry = adapter
        .entries
        .get(UP_PROJ)
        .ok_or_else(|| Error::InvalidAdapter(format!("adapter `{}` has no `{UP_PROJ}` entry", adapter.id)))?;
    if entry.shape() != model.up_proj.shape() {
        return Err(Error::Shape { op: "adapter on up_proj", left: model.up_proj.shape(), right: entry.shape() });
    }
    Ok(entry.effective_delta().into_owned())
}

/// Option probabilities renormalized over the question's options.
pub fn option_probs(full: &[f64], options: &[usize]) -> Vec<f64> {
    let picked: Vec<f64> = options.iter().map(|&v| full[v]).collect();
    let total: f64 = picked.iter().sum();
    picked.iter().map(|p| p / total).collect()
}

/// f64 working copy of the weights.
#[derive(Clone, Debug)]
pub(crate) struct Weights {
    pub dims: Dims,
    pub emb: Vec<f64>,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

pub(crate) struct Pass {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
}

pub(crate) struct Grads {
    pub loss: f64,
    /// Gradient w.r.t. the embedding row of the key.
    pub emb_row: Vec<f64>,
    /// Gradient w.r.t. the effective `up_proj` (`d×h`).
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

impl Weights {
    pub fn from_model(m: &ToyModel) -> Self {
        Weights {
            dims: m.dims(),
            emb: m.embedding.to_f64(),
            up: m.up_proj.to_f64(),
            down: m.down_proj.to_f64(),
        }
    }

    pub fn to_model(&self) -> Result<ToyModel> {
        let Dims { keys, d, h, values } = self.dims;
        ToyModel::new(
            Matrix::from_f64(keys, d, &self.emb)?,
            Matrix::from_f64(d, h, &self.up)?,
            Matrix::from_f64(h, values, &self.down)?,
        )
    }

    pub fn check_key(&self, key: usize) -> Result<()> {
        if key >= self.dims.keys {
            return Err(Error::param("key", format!("{key} out of range for {} keys", self.dims.keys)));
        }
        Ok(())
    }

    pub fn effective_up(&self, delta: Option<&[f64]>) -> Result<Vec<f64>> {
        match delta {
            None => Ok(self.up.clone()),
            Some(dw) if dw.len() == self.up.len() => Ok(self.up.iter().zip(dw).map(|(u, d)| u + d).collect()),
            Some(dw) => Err(Error::Shape {
                op: "adapter on up_proj",
                left: (self.dims.d, self.dims.h),
                right: (dw.len(), 1),
            }),
        }
    }

    pub fn forward(&self, key: usize, up: &[f64]) -> Pass {
        let Dims { d, h, values, .. } = self.dims;
        let x = self.emb[key * d..(key + 1) * d].to_vec();
        let mut z = vec![0.0; h];
        for (i, &xi) in x.iter().enumerate() {
            for (zj, w) in z.iter_mut().zip(&up[i * h..(i + 1) * h]) {
                *zj += w * xi;
            }
        }
        let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let mut logits = vec![0.0; values];
        for (j, &aj) in a.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(&self.down[j * values..(j + 1) * values]) {
                *l += w * aj;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Pass { x, a, p }
    }

    /// Cross-entropy of `target` and its gradients.
    pub fn backward(&self, pass: &Pass, target: usize, up: &[f64]) -> Grads {
        let Dims { d, h, values, .. } = self.dims;
        let loss = -pass.p[target].max(f64::MIN_POSITIVE).ln();
        let mut g = pass.p.clone();
        g[target] -= 1.0;
        let mut down = vec![0.0; h * values];
        let mut dz = vec![0.0; h];
        for j in 0..h {
            let row = &self.down[j * values..(j + 1) * values];
            let mut da = 0.0;
            for v in 0..values {
                down[j * values + v] = pass.a[j] * g[v];
                da += row[v] * g[v];
            }
            dz[j] = da * (1.0 - pass.a[j] * pass.a[j]);
        }
        let mut dup = vec![0.0; d * h];
        let mut emb_row = vec![0.0; d];
        for i in 0..d {
            let w = &up[i * h..(i + 1) * h];
            let mut dx = 0.0;
            for j in 0..h {
                dup[i * h + j] = pass.x[i] * dz[j];
                dx += w[j] * dz[j];
            }
            emb_row[i] = dx;
        }
        Grads { loss, emb_row, up: dup, down }
    }
}

//! Model updates: low-rank (LoRA) and dense parameter deltas.

pub mod container;

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, matmul_f64, top_singular_value, Matrix};
use crate::merge::Provenance;

pub use container::{decode_adapter, encode_adapter, load_adapter, save_adapter, FormatError};

/// LoRA factors for one parameter. The effective delta is
/// `(alpha / rank) · b · a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankUpdate {
    a: Matrix,
    b: Matrix,
    alpha: f32,
}

impl LowRankUpdate {
    /// `a` is `r×d_in`, `b` is `d_out×r`.
    pub fn new(a: Matrix, b: Matrix, alpha: f32) -> Result<Self> {
        let rank = a.rows();
        if rank == 0 {
            return Err(Error::InvalidAdapter("LoRA rank must be at least 1".into()));
        }
        if b.cols() != rank {
            return Err(Error::Shape {
                op: "lora factors",
                left: b.shape(),
                right: a.shape(),
            });
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidAdapter(format!("alpha must be positive, got {alpha}")));
        }
        Ok(LowRankUpdate { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank() as f64
    }

    /// `(d_out, d_in)` of the effective delta.
    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn effective_delta(&self) -> Matrix {
        Matrix::from_f64(self.b.rows(), self.a.cols(), &self.effective_delta_f64())
            .expect("product of finite factors")
    }

    pub(crate) fn effective_delta_f64(&self) -> Vec<f64> {
        let (d_out, d_in) = self.shape();
        let mut out = matmul_f64(d_out, self.rank(), d_in, &self.b.to_f64(), &self.a.to_f64());
        let s = self.scale();
        out.iter_mut().for_each(|v| *v *= s);
        out
    }
}

/// `(alpha / rank) · b · a`.
pub fn effective_delta(u: &LowRankUpdate) -> Matrix {
    u.effective_delta()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseUpdate {
    pub delta: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamUpdate {
    LowRank(LowRankUpdate),
    Dense(DenseUpdate),
}

impl ParamUpdate {
    pub fn dense(delta: Matrix) -> Self {
        ParamUpdate::Dense(DenseUpdate { delta })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            ParamUpdate::LowRank(u) => u.shape(),
            ParamUpdate::Dense(d) => d.delta.shape(),
        }
    }

    pub fn effective_delta(&self) -> Cow<'_, Matrix> {
        match self {
            ParamUpdate::LowRank(u) => Cow::Owned(u.effective_delta()),
            ParamUpdate::Dense(d) => Cow::Borrowed(&d.delta),
        }
    }

    pub(crate) fn effective_delta_f64(&self) -> Vec<f64> {
        match self {
            ParamUpdate::LowRank(u) => u.effective_delta_f64(),
            ParamUpdate::Dense(d) => d.delta.to_f64(),
        }
    }
}

/// A named model update: parameter name → delta, plus identifying metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterUpdate {
    pub id: String,
    pub task_id: String,
    pub base_model_id: String,
    pub entries: BTreeMap<String, ParamUpdate>,
    /// Present on merge outputs.
    pub provenance: Option<Provenance>,
}

impl AdapterUpdate {
    pub fn new(
        id: impl Into<String>,
        task_id: impl Into<String>,
        base_model_id: impl Into<String>,
        entries: BTreeMap<String, ParamUpdate>,
    ) -> Result<Self> {
        let u = AdapterUpdate {
            id: id.into(),
            task_id: task_id.into(),
            base_model_id: base_model_id.into(),
            entries,
            provenance: None,
        };
        u.validate()?;
        Ok(u)
    }

    /// Single-parameter convenience constructor.
    pub fn single(
        id: impl Into<String>,
        task_id: impl Into<String>,
        base_model_id: impl Into<String>,
        param: impl Into<String>,
        update: ParamUpdate,
    ) -> Result<Self> {
        AdapterUpdate::new(id, task_id, base_model_id, BTreeMap::from([(param.into(), update)]))
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("id", &self.id),
            ("task_id", &self.task_id),
            ("base_model_id", &self.base_model_id),
        ] {
            if v.is_empty() {
                return Err(Error::InvalidAdapter(format!("{what} must be nonempty")));
            }
        }
        if self.entries.keys().any(|k| k.is_empty()) {
            return Err(Error::InvalidAdapter("empty parameter name".into()));
        }
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub frobenius: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    /// Unweighted mean over parameters.
    pub frobenius: f64,
    pub sigma_max: f64,
    pub per_parameter: BTreeMap<String, ParamStats>,
}

/// `‖ΔW‖_F` and `σ_max(ΔW)` of every effective delta, averaged over parameters.
pub fn weight_stats(u: &AdapterUpdate) -> Result<WeightStats> {
    let mut per_parameter = BTreeMap::new();
    for (name, entry) in &u.entries {
        let delta = entry.effective_delta();
        let frobenius = frobenius_norm(&delta);
        let sigma_max = if delta.is_empty() {
            0.0
        } else {
            top_singular_value(&delta)?.min(frobenius)
        };
        per_parameter.insert(name.clone(), ParamStats { frobenius, sigma_max });
    }
    let n = per_parameter.len().max(1) as f64;
    Ok(WeightStats {
        frobenius: per_parameter.values().map(|s| s.frobenius).sum::<f64>() / n,
        sigma_max: per_parameter.values().map(|s| s.sigma_max).sum::<f64>() / n,
        per_parameter,
    })
}

//! Merging algorithms over sets of [`AdapterUpdate`]s.
//!
//! Every algorithm works per parameter on effective (dense) deltas. Inputs
//! are put into a canonical order before any arithmetic, so results do not
//! depend on the order callers pass updates in.

mod knots;
mod ties;

use std::collections::BTreeMap;
use std::ops::Deref;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterUpdate, LowRankUpdate, ParamUpdate};
use crate::error::{Error, Result};
use crate::linalg::{self, svd_f64, Matrix};

pub use knots::knots_combine;
pub use ties::{ties_combine, trim_top_k};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeAlgorithm {
    Mean,
    Weighted,
    Ties,
    Knots,
}

impl MergeAlgorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeAlgorithm::Mean => "mean",
            MergeAlgorithm::Weighted => "weighted",
            MergeAlgorithm::Ties => "ties",
            MergeAlgorithm::Knots => "knots",
        }
    }
}

impl std::fmt::Display for MergeAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MergeAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(MergeAlgorithm::Mean),
            "weighted" => Ok(MergeAlgorithm::Weighted),
            "ties" => Ok(MergeAlgorithm::Ties),
            "knots" => Ok(MergeAlgorithm::Knots),
            other => Err(Error::param("algorithm", format!("unknown merge algorithm `{other}`"))),
        }
    }
}

fn one() -> f64 {
    1.0
}

/// Algorithm selector and its knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub algorithm: MergeAlgorithm,
    /// TIES/KnOTS keep-rate in `(0, 1]`.
    #[serde(default = "one")]
    pub density: f64,
    /// Post-merge rescale for TIES/KnOTS.
    #[serde(default = "one")]
    pub lambda: f64,
    /// Softmax temperature for `Weighted`.
    #[serde(default = "one")]
    pub tau: f64,
    /// Base-model accuracy per task id; required by `Weighted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_accuracies: Option<BTreeMap<String, f64>>,
    /// Re-factor the merged deltas to this LoRA rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_budget: Option<usize>,
    /// KnOTS only: keep the fewest components covering this fraction of Σσ².
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_threshold: Option<f64>,
}

impl MergeSpec {
    pub fn new(algorithm: MergeAlgorithm) -> Self {
        MergeSpec {
            algorithm,
            density: 1.0,
            lambda: 1.0,
            tau: 1.0,
            base_accuracies: None,
            rank_budget: None,
            energy_threshold: None,
        }
    }

    pub fn mean() -> Self {
        MergeSpec::new(MergeAlgorithm::Mean)
    }

    pub fn ties(density: f64, lambda: f64) -> Self {
        MergeSpec {
            density,
            lambda,
            ..MergeSpec::new(MergeAlgorithm::Ties)
        }
    }

    pub fn knots(density: f64, lambda: f64) -> Self {
        MergeSpec {
            density,
            lambda,
            ..MergeSpec::new(MergeAlgorithm::Knots)
        }
    }

    pub fn weighted(base_accuracies: BTreeMap<String, f64>, tau: f64) -> Self {
        MergeSpec {
            tau,
            base_accuracies: Some(base_accuracies),
            ..MergeSpec::new(MergeAlgorithm::Weighted)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_density(self.density)?;
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::param("lambda", format!("must be positive, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param("tau", format!("must be positive, got {}", self.tau)));
        }
        if self.rank_budget == Some(0) {
            return Err(Error::param("rank_budget", "must be at least 1"));
        }
        if let Some(t) = self.energy_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::param("energy_threshold", format!("must lie in (0, 1], got {t}")));
            }
        }
        if self.algorithm == MergeAlgorithm::Weighted && self.base_accuracies.is_none() {
            return Err(Error::param("base_accuracies", "weighted merging needs base accuracies"));
        }
        Ok(())
    }

    /// Short label for file names and report rows.
    pub fn label(&self) -> String {
        match self.algorithm {
            MergeAlgorithm::Mean => "mean".into(),
            MergeAlgorithm::Weighted => format!("weighted-tau{}", self.tau),
            MergeAlgorithm::Ties | MergeAlgorithm::Knots if self.density == 1.0 && self.lambda == 1.0 => {
                self.algorithm.to_string()
            }
            MergeAlgorithm::Ties | MergeAlgorithm::Knots => {
                format!("{}-d{}-l{}", self.algorithm, self.density, self.lambda)
            }
        }
    }
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::param("density", format!("must lie in (0, 1], got {density}")));
    }
    Ok(())
}

/// Audit record attached to every merge output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Input ids in caller order.
    pub inputs: Vec<String>,
    pub spec: MergeSpec,
    /// Per-input weights (caller order) when the algorithm is a weighted sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Frobenius error of low-rank re-factorization, per parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_error: Option<BTreeMap<String, f64>>,
}

/// A merge output. Always carries provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedUpdate(AdapterUpdate);

impl MergedUpdate {
    pub fn provenance(&self) -> &Provenance {
        self.0.provenance.as_ref().expect("merged updates carry provenance")
    }

    pub fn into_inner(self) -> AdapterUpdate {
        self.0
    }

    /// Dense delta of one parameter.
    pub fn delta(&self, param: &str) -> Option<Matrix> {
        self.0.entries.get(param).map(|e| e.effective_delta().into_owned())
    }
}

impl Deref for MergedUpdate {
    type Target = AdapterUpdate;

    fn deref(&self) -> &AdapterUpdate {
        &self.0
    }
}

/// Dispatches on `spec.algorithm`, then re-factors if `spec.rank_budget` is set.
pub fn merge(updates: &[&AdapterUpdate], spec: &MergeSpec) -> Result<MergedUpdate> {
    spec.validate()?;
    let merged = match spec.algorithm {
        MergeAlgorithm::Mean => merge_mean(updates),
        MergeAlgorithm::Weighted => {
            let accs = spec.base_accuracies.as_ref().expect("validated");
            let weights = update_weights(updates, accs, spec.tau)?;
            let mut m = merge_weighted(updates, &weights)?;
            m.0.provenance.as_mut().unwrap().spec = spec.clone();
            Ok(m)
        }
        MergeAlgorithm::Ties => merge_ties(updates, spec.density, spec.lambda),
        MergeAlgorithm::Knots => {
            merge_knots_with(updates, spec.density, spec.lambda, spec.energy_threshold)
        }
    }?;
    let mut merged = match spec.rank_budget {
        Some(budget) => refactor_low_rank(&merged, budget)?,
        None => merged,
    };
    merged.0.provenance.as_mut().unwrap().spec = spec.clone();
    Ok(merged)
}

/// `softmax((1 − Acc)/τ)` per task.
pub fn compute_inverse_accuracy_weights(
    accs: &BTreeMap<String, f64>,
    tau: f64,
) -> Result<BTreeMap<String, f64>> {
    let scores = inverse_scores(accs.iter().map(|(t, &a)| (t.as_str(), a)))?;
    let weights = linalg::softmax(&scores, tau)?;
    Ok(accs.keys().cloned().zip(weights).collect())
}

fn inverse_scores<'a>(accs: impl Iterator<Item = (&'a str, f64)>) -> Result<Vec<f64>> {
    accs.map(|(task, acc)| {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::param("base_accuracies", format!("accuracy {acc} for task `{task}` is outside [0, 1]")));
        }
        Ok(1.0 - acc)
    })
    .collect()
}

/// Per-update weights for `Weighted`, in caller order.
pub fn update_weights(
    updates: &[&AdapterUpdate],
    accs: &BTreeMap<String, f64>,
    tau: f64,
) -> Result<Vec<f64>> {
    let pairs = updates
        .iter()
        .map(|u| {
            accs.get(&u.task_id)
                .map(|&a| (u.task_id.as_str(), a))
                .ok_or_else(|| Error::param("base_accuracies", format!("no base accuracy for task `{}`", u.task_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    linalg::softmax(&inverse_scores(pairs.into_iter())?, tau)
}

pub fn merge_mean(updates: &[&AdapterUpdate]) -> Result<MergedUpdate> {
    if updates.is_empty() {
        return Err(Error::Merge("no updates to merge".into()));
    }
    let w = vec![1.0 / updates.len() as f64; updates.len()];
    let mut m = weighted_sum(updates, &w)?;
    m.0.provenance.as_mut().unwrap().spec = MergeSpec::mean();
    Ok(m)
}

/// `Σ wᵢ·ΔWᵢ` per parameter. Weights must sum to 1 within `1e-6`.
pub fn merge_weighted(updates: &[&AdapterUpdate], weights: &[f64]) -> Result<MergedUpdate> {
    if updates.is_empty() {
        return Err(Error::Merge("no updates to merge".into()));
    }
    if weights.len() != updates.len() {
        return Err(Error::Merge(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Merge(format!("weights sum to {total}, expected 1")));
    }
    weighted_sum(updates, weights)
}

fn weighted_sum(updates: &[&AdapterUpdate], weights: &[f64]) -> Result<MergedUpdate> {
    let set = DeltaSet::collect(updates)?;
    let order = set.canonical_order(Some(weights));
    let params: Vec<(String, Matrix)> = set
        .params
        .par_iter()
        .map(|p| {
            let mut acc = vec![0.0f64; p.rows * p.cols];
            for &i in &order {
                let w = weights[i];
                for (a, x) in acc.iter_mut().zip(&p.deltas[i]) {
                    *a += w * x;
                }
            }
            Ok((p.name.clone(), Matrix::from_f64(p.rows, p.cols, &acc)?))
        })
        .collect::<Result<_>>()?;
    set.finish(params, MergeSpec::new(MergeAlgorithm::Weighted), Some(weights.to_vec()))
}

pub fn merge_ties(updates: &[&AdapterUpdate], density: f64, lambda: f64) -> Result<MergedUpdate> {
    if updates.is_empty() {
        return Err(Error::Merge("no updates to merge".into()));
    }
    check_density(density)?;
    let set = DeltaSet::collect(updates)?;
    let order = set.canonical_order(None);
    let params: Vec<(String, Matrix)> = set
        .params
        .par_iter()
        .map(|p| {
            let trimmed: Vec<Vec<f64>> = order.iter().map(|&i| trim_top_k(&p.deltas[i], density)).collect();
            let mut merged = ties_combine(&trimmed);
            merged.iter_mut().for_each(|v| *v *= lambda);
            Ok((p.name.clone(), Matrix::from_f64(p.rows, p.cols, &merged)?))
        })
        .collect::<Result<_>>()?;
    set.finish(params, MergeSpec::ties(density, lambda), None)
}

pub fn merge_knots(updates: &[&AdapterUpdate], density: f64, lambda: f64) -> Result<MergedUpdate> {
    merge_knots_with(updates, density, lambda, None)
}

fn merge_knots_with(
    updates: &[&AdapterUpdate],
    density: f64,
    lambda: f64,
    energy_threshold: Option<f64>,
) -> Result<MergedUpdate> {
    if updates.is_empty() {
        return Err(Error::Merge("no updates to merge".into()));
    }
    check_density(density)?;
    let set = DeltaSet::collect(updates)?;
    let order = set.canonical_order(None);
    let params: Vec<(String, Matrix)> = set
        .params
        .par_iter()
        .map(|p| {
            let deltas: Vec<&[f64]> = order.iter().map(|&i| p.deltas[i].as_slice()).collect();
            let merged = knots_combine(p.rows, p.cols, &deltas, density, lambda, energy_threshold)?;
            Ok((p.name.clone(), Matrix::from_f64(p.rows, p.cols, &merged)?))
        })
        .collect::<Result<_>>()?;
    let mut spec = MergeSpec::knots(density, lambda);
    spec.energy_threshold = energy_threshold;
    set.finish(params, spec, None)
}

/// Truncated-SVD factorization `B = U√Σ`, `A = √Σ Vᵀ` of every merged delta,
/// stored with `alpha = rank` so the LoRA scale is 1.
pub fn refactor_low_rank(m: &MergedUpdate, rank_budget: usize) -> Result<MergedUpdate> {
    if rank_budget == 0 {
        return Err(Error::param("rank_budget", "must be at least 1"));
    }
    let mut entries = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for (name, entry) in &m.entries {
        let (rows, cols) = entry.shape();
        let delta = entry.effective_delta_f64();
        let s = svd_f64(rows, cols, &delta)?;
        let r = rank_budget.min(s.k);
        let mut b = vec![0.0; rows * r];
        let mut a = vec![0.0; r * cols];
        for j in 0..r {
            let root = s.sigma[j].sqrt();
            for i in 0..rows {
                b[i * r + j] = s.u[i * s.k + j] * root;
            }
            for c in 0..cols {
                a[j * cols + c] = s.vt[j * cols + c] * root;
            }
        }
        let lr = LowRankUpdate::new(Matrix::from_f64(r, cols, &a)?, Matrix::from_f64(rows, r, &b)?, r as f32)?;
        let rebuilt = lr.effective_delta_f64();
        let err = delta
            .iter()
            .zip(&rebuilt)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        errors.insert(name.clone(), err);
        entries.insert(name.clone(), ParamUpdate::LowRank(lr));
    }
    let mut out = m.0.clone();
    out.entries = entries;
    let p = out.provenance.as_mut().expect("merged updates carry provenance");
    p.spec.rank_budget = Some(rank_budget);
    p.reconstruction_error = Some(errors);
    Ok(MergedUpdate(out))
}

struct ParamDeltas {
    name: String,
    rows: usize,
    cols: usize,
    /// One `f64` effective delta per input, in caller order.
    deltas: Vec<Vec<f64>>,
}

struct DeltaSet<'a> {
    updates: &'a [&'a AdapterUpdate],
    params: Vec<ParamDeltas>,
}

impl<'a> DeltaSet<'a> {
    fn collect(updates: &'a [&'a AdapterUpdate]) -> Result<Self> {
        let first = updates[0];
        for u in &updates[1..] {
            if u.base_model_id != first.base_model_id {
                return Err(Error::Merge(format!(
                    "updates `{}` and `{}` target different base models (`{}` vs `{}`)",
                    first.id, u.id, first.base_model_id, u.base_model_id
                )));
            }
            if !u.entries.keys().eq(first.entries.keys()) {
                let a: Vec<_> = first.param_names().collect();
                let b: Vec<_> = u.param_names().collect();
                return Err(Error::Merge(format!(
                    "parameter sets differ: `{}` has {a:?}, `{}` has {b:?}",
                    first.id, u.id
                )));
            }
        }
        let mut params = Vec::with_capacity(first.entries.len());
        for (name, entry) in &first.entries {
            let shape = entry.shape();
            let mut deltas = Vec::with_capacity(updates.len());
            for u in updates {
                let e = &u.entries[name];
                if e.shape() != shape {
                    return Err(Error::Shape {
                        op: "merge",
                        left: shape,
                        right: e.shape(),
                    });
                }
                deltas.push(e.effective_delta_f64());
            }
            params.push(ParamDeltas {
                name: name.clone(),
                rows: shape.0,
                cols: shape.1,
                deltas,
            });
        }
        Ok(DeltaSet { updates, params })
    }

    /// Input indices sorted by id, then weight, then delta contents.
    fn canonical_order(&self, weights: Option<&[f64]>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.updates.len()).collect();
        order.sort_by(|&a, &b| {
            self.updates[a]
                .id
                .cmp(&self.updates[b].id)
                .then_with(|| match weights {
                    Some(w) => w[a].total_cmp(&w[b]),
                    None => std::cmp::Ordering::Equal,
                })
                .then_with(|| {
                    for p in &self.params {
                        for (x, y) in p.deltas[a].iter().zip(&p.deltas[b]) {
                            let c = x.total_cmp(y);
                            if c.is_ne() {
                                return c;
                            }
                        }
                    }
                    std::cmp::Ordering::Equal
                })
        });
        order
    }

    fn finish(self, params: Vec<(String, Matrix)>, spec: MergeSpec, weights: Option<Vec<f64>>) -> Result<MergedUpdate> {
        let inputs: Vec<String> = self.updates.iter().map(|u| u.id.clone()).collect();
        let mut sorted = inputs.clone();
        sorted.sort();
        let mut hasher = Sha256::new();
        for id in &sorted {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let short: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let entries = params
            .into_iter()
            .map(|(name, m)| (name, ParamUpdate::dense(m)))
            .collect();
        let mut out = AdapterUpdate::new(
            format!("merged-{}-{short}", spec.algorithm),
            "merged",
            self.updates[0].base_model_id.clone(),
            entries,
        )?;
        out.provenance = Some(Provenance {
            inputs,
            spec,
            weights,
            reconstruction_error: None,
        });
        Ok(MergedUpdate(out))
    }
}

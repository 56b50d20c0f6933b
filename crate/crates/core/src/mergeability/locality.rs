//! Does a fully mergeable set stay mergeable whatever it is merged with?
//!
//! A fixed set `F` of `S = 1` updates is merged with partners drawn from each
//! score bin in turn; accuracy is tracked on `F` and on the partners.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::bins::{bin_label, bin_scores};
use super::ScoreReport;
use crate::adapter::AdapterUpdate;
use crate::error::{Error, Result};
use crate::eval::{Evaluator, TrialInput};
use crate::linalg::{mean, standard_error};
use crate::merge::{merge, MergeSpec, MergedUpdate};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalityConfig {
    /// Size of the fixed set `F`.
    pub fixed_size: usize,
    pub partners_per_bin: usize,
    /// Independent partner draws per bin.
    pub repeats: usize,
    pub seed: u64,
    pub merge_spec: MergeSpec,
}

impl Default for LocalityConfig {
    fn default() -> Self {
        LocalityConfig { fixed_size: 10, partners_per_bin: 10, repeats: 5, seed: 0, merge_spec: MergeSpec::knots(1.0, 1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityRow {
    pub bin: String,
    pub partners_available: usize,
    pub fixed_accuracy: f64,
    pub fixed_se: f64,
    pub partner_accuracy: f64,
    pub partner_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityResult {
    pub fixed_ids: Vec<String>,
    pub rows: Vec<LocalityRow>,
    /// Max minus min of the per-bin means.
    pub fixed_range: f64,
    pub partner_range: f64,
    /// Variance (n−1) of the fixed-track means across bins.
    pub fixed_variance: f64,
}

fn range(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn accuracy<E: Evaluator + ?Sized>(evaluator: &E, members: &[&AdapterUpdate], merged: &MergedUpdate, trial: usize, seed: u64) -> Result<f64> {
    let scores = members
        .iter()
        .map(|&target| evaluator.evaluate(&TrialInput { target, partners: &[], merged: Some(merged), trial, seed }))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}

/// `reports` must align with `pool`. The bin containing `S = 1` is paired
/// with `F` itself.
pub fn locality_experiment<E: Evaluator + ?Sized>(
    pool: &[AdapterUpdate],
    reports: &[ScoreReport],
    evaluator: &E,
    edges: &[f64],
    cfg: &LocalityConfig,
) -> Result<LocalityResult> {
    if pool.len() != reports.len() || pool.iter().zip(reports).any(|(u, r)| u.id != r.target_id) {
        return Err(Error::Experiment("reports do not align with the pool".into()));
    }
    if cfg.fixed_size == 0 || cfg.partners_per_bin == 0 || cfg.repeats == 0 {
        return Err(Error::param("locality", "fixed_size, partners_per_bin and repeats must be positive"));
    }
    let perfect: Vec<usize> = (0..pool.len()).filter(|&i| reports[i].score == 1.0).collect();
    if perfect.is_empty() {
        return Err(Error::Experiment("no updates with S = 1.0; the fixed set F is empty".into()));
    }
    let mut rng = rng_from(derive_seed(cfg.seed, "locality-fixed", &[]));
    let mut fixed: Vec<usize> = sample(&mut rng, perfect.len(), cfg.fixed_size.min(perfect.len()))
        .into_iter()
        .map(|i| perfect[i])
        .collect();
    fixed.sort_unstable();

    let scores: Vec<f64> = reports.iter().map(|r| r.score).collect();
    let assignment = bin_scores(&scores, edges)?;
    let top = assignment.bins[fixed[0]];
    let n_bins = edges.len() - 1;
    let members: Vec<Vec<usize>> = (0..n_bins)
        .map(|b| {
            if b == top {
                fixed.clone()
            } else {
                (0..pool.len()).filter(|i| assignment.bins[*i] == b && !fixed.contains(i)).collect()
            }
        })
        .collect();
    let empty: Vec<String> = (0..n_bins).filter(|&b| members[b].is_empty()).map(|b| bin_label(edges, b)).collect();
    if !empty.is_empty() {
        return Err(Error::Experiment(format!("partner bins without updates: {}", empty.join(", "))));
    }

    let fixed_refs: Vec<&AdapterUpdate> = fixed.iter().map(|&i| &pool[i]).collect();
    let mut rows = Vec::with_capacity(n_bins);
    for (b, candidates) in members.iter().enumerate() {
        let mut f_acc = Vec::with_capacity(cfg.repeats);
        let mut p_acc = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats {
            let seed = derive_seed(cfg.seed, "locality", &[b as u64, r as u64]);
            let partners: Vec<&AdapterUpdate> = if b == top {
                fixed_refs.clone()
            } else {
                let mut rng = rng_from(seed);
                let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), cfg.partners_per_bin.min(candidates.len()))
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect();
                picked.sort_unstable();
                picked.into_iter().map(|i| &pool[i]).collect()
            };
            let set: Vec<&AdapterUpdate> = fixed_refs.iter().chain(&partners).copied().collect();
            let merged = merge(&set, &cfg.merge_spec)?;
            f_acc.push(accuracy(evaluator, &fixed_refs, &merged, r, seed)?);
            p_acc.push(accuracy(evaluator, &partners, &merged, r, seed)?);
        }
        rows.push(LocalityRow {
            bin: bin_label(edges, b),
            partners_available: candidates.len(),
            fixed_accuracy: mean(&f_acc),
            fixed_se: standard_error(&f_acc),
            partner_accuracy: mean(&p_acc),
            partner_se: standard_error(&p_acc),
        });
    }
    let f_means: Vec<f64> = rows.iter().map(|r| r.fixed_accuracy).collect();
    let p_means: Vec<f64> = rows.iter().map(|r| r.partner_accuracy).collect();
    let fixed_variance = if f_means.len() > 1 { crate::linalg::sample_std(&f_means).powi(2) } else { 0.0 };
    Ok(LocalityResult {
        fixed_ids: fixed_refs.iter().map(|u| u.id.clone()).collect(),
        fixed_range: range(&f_means),
        partner_range: range(&p_means),
        fixed_variance,
        rows,
    })
}

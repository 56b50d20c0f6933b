//! Binomial null model: every merge succeeds independently with one pool-wide
//! probability `p`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

use super::{EstimatorConfig, ScoreReport, PARTNER_DISTRIBUTION};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialBaseline {
    /// Successful merges / all merges.
    pub p: f64,
    pub trials_per_target: usize,
    pub pool_size: usize,
    /// Expected number of targets with score `k/N`, `k = 0..=N`.
    pub expected: Vec<f64>,
}

fn common_trials(reports: &[ScoreReport]) -> Result<usize> {
    let n = reports
        .first()
        .map(|r| r.trials.len())
        .ok_or_else(|| Error::Experiment("no reports".into()))?;
    if n == 0 {
        return Err(Error::Experiment("reports contain zero trials".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.trials.len() != n) {
        return Err(Error::Experiment(format!(
            "`{}` has {} trials, expected {n}",
            r.target_id,
            r.trials.len()
        )));
    }
    Ok(n)
}

/// `pool · C(N,k) pᵏ(1−p)^{N−k}` for `k = 0..=N`.
pub fn binomial_expected(trials: usize, p: f64, pool_size: usize) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::param("trials", "need at least one trial"));
    }
    let dist = Binomial::new(p, trials as u64).map_err(|e| Error::param("p", format!("{e}")))?;
    Ok((0..=trials as u64).map(|k| pool_size as f64 * dist.pmf(k)).collect())
}

/// Fits `p` from the trial records and returns the expected histogram.
pub fn binomial_baseline(reports: &[ScoreReport], success_cutoff: f64) -> Result<BinomialBaseline> {
    let n = common_trials(reports)?;
    let successes = reports
        .iter()
        .flat_map(|r| &r.trials)
        .filter(|t| t.score >= success_cutoff)
        .count();
    let p = successes as f64 / (n * reports.len()) as f64;
    Ok(BinomialBaseline {
        p,
        trials_per_target: n,
        pool_size: reports.len(),
        expected: binomial_expected(n, p, reports.len())?,
    })
}

/// Observed count of targets at each lattice score `k/N` (successes per target).
pub fn lattice_histogram(reports: &[ScoreReport], success_cutoff: f64) -> Result<Vec<usize>> {
    let n = common_trials(reports)?;
    let mut counts = vec![0; n + 1];
    for r in reports {
        counts[r.trials.iter().filter(|t| t.score >= success_cutoff).count()] += 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Lattice indices merged into each tested cell.
    pub cells: Vec<Vec<usize>>,
}

/// Pearson goodness-of-fit of `observed` against `expected`. Adjacent cells
/// are pooled until each expects at least 5; one degree of freedom is spent
/// on the fitted `p`.
pub fn chi_square_test(observed: &[usize], expected: &[f64]) -> Result<ChiSquareResult> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::Experiment("observed and expected histograms differ in length".into()));
    }
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut mass = 0.0;
    for (k, &e) in expected.iter().enumerate() {
        current.push(k);
        mass += e;
        if mass >= 5.0 {
            cells.push(std::mem::take(&mut current));
            mass = 0.0;
        }
    }
    if !current.is_empty() {
        match cells.last_mut() {
            Some(last) => last.extend(current),
            None => cells.push(current),
        }
    }
    if cells.len() < 3 {
        return Err(Error::Experiment(format!(
            "only {} cells with expected count ≥ 5; the pool is too small for a chi-square test",
            cells.len()
        )));
    }
    let statistic: f64 = cells
        .iter()
        .map(|c| {
            let o: f64 = c.iter().map(|&k| observed[k] as f64).sum();
            let e: f64 = c.iter().map(|&k| expected[k]).sum();
            (o - e).powi(2) / e
        })
        .sum();
    let dof = cells.len() - 2;
    let p_value = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Experiment(format!("chi-square: {e}")))?
        .sf(statistic);
    Ok(ChiSquareResult { statistic, dof, p_value, cells })
}

/// Pool-level record written next to the per-target reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub merge_spec: String,
    pub trials: usize,
    pub partners: usize,
    pub seed: u64,
    pub partner_distribution: String,
    pub success_cutoff: f64,
    pub pool_size: usize,
    pub success_rate: f64,
    pub observed: Vec<usize>,
    pub expected: Vec<f64>,
    pub mean_score: f64,
    /// `None` when the pool is too small to test.
    pub chi_square: Option<ChiSquareResult>,
}

pub fn summarize(reports: &[ScoreReport], config: &EstimatorConfig) -> Result<PoolSummary> {
    let baseline = binomial_baseline(reports, config.success_cutoff)?;
    let observed = lattice_histogram(reports, config.success_cutoff)?;
    let chi_square = match chi_square_test(&observed, &baseline.expected) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("{e}");
            None
        }
    };
    Ok(PoolSummary {
        merge_spec: config.merge_spec.label(),
        trials: config.trials,
        partners: reports.first().map_or(0, |r| r.trials[0].partner_ids.len()),
        seed: config.seed,
        partner_distribution: PARTNER_DISTRIBUTION.into(),
        success_cutoff: config.success_cutoff,
        pool_size: reports.len(),
        success_rate: baseline.p,
        observed,
        expected: baseline.expected,
        mean_score: reports.iter().map(|r| r.score).sum::<f64>() / reports.len() as f64,
        chi_square,
    })
}

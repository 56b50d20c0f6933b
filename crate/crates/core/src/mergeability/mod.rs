//! Monte-Carlo estimation of the mergeability score
//! `S = (1/N) Σᵢ f(𝓜({θ_Δ} ∪ partnersᵢ))`.

mod baseline;
mod bins;
mod locality;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterUpdate;
use crate::error::{Error, Result};
use crate::eval::{Evaluator, TrialInput};
use crate::merge::{merge, MergeSpec};
use crate::rng::{rng_from, trial_seed};

pub use baseline::{binomial_baseline, binomial_expected, chi_square_test, lattice_histogram, summarize, BinomialBaseline, ChiSquareResult, PoolSummary};
pub use bins::{bin_label, bin_scores, lattice_edges, uniform_edges, BinAssignment};
pub use locality::{locality_experiment, LocalityConfig, LocalityResult, LocalityRow};

pub const PARTNER_DISTRIBUTION: &str = "uniform over M-subsets of the pool without the target";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// `N`
    pub trials: usize,
    /// `M`, clamped to `pool − 1`.
    pub partners: usize,
    pub seed: u64,
    pub merge_spec: MergeSpec,
    /// Trial scores at or above this count as successes for the baseline.
    pub success_cutoff: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            trials: 5,
            partners: 50,
            seed: 0,
            merge_spec: MergeSpec::knots(1.0, 1.0),
            success_cutoff: 0.5,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::param("trials", "need at least one trial"));
        }
        if self.partners == 0 {
            return Err(Error::param("partners", "need at least one partner per trial"));
        }
        self.merge_spec.validate()
    }

    /// `M` for a pool of `pool_len`, clamped with a warning.
    pub fn effective_partners(&self, pool_len: usize) -> Result<usize> {
        if pool_len < 2 {
            return Err(Error::Experiment(format!("pool of {pool_len} cannot supply merge partners")));
        }
        if self.partners >= pool_len {
            log::warn!("M = {} exceeds pool size {pool_len} − 1; clamping to {}", self.partners, pool_len - 1);
            return Ok(pool_len - 1);
        }
        Ok(self.partners)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub partner_ids: Vec<String>,
    pub score: f64,
}

/// Score of one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub target_id: String,
    /// Mean of the trial scores.
    pub score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Partners for one trial: `m` distinct pool indices, never `target`.
pub fn sample_partners(pool_len: usize, target: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed);
    let mut picked: Vec<usize> = sample(&mut rng, pool_len - 1, m)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    picked.sort_unstable();
    picked
}

fn run_trial<E: Evaluator + ?Sized>(
    pool: &[AdapterUpdate],
    target: usize,
    trial: usize,
    m: usize,
    evaluator: &E,
    config: &EstimatorConfig,
) -> Result<TrialRecord> {
    let t = &pool[target];
    let seed = trial_seed(config.seed, &t.id, trial);
    let partners: Vec<&AdapterUpdate> = sample_partners(pool.len(), target, m, seed).into_iter().map(|i| &pool[i]).collect();
    let wrap = |e: Error| Error::Trial { target: t.id.clone(), trial, source: Box::new(e) };
    let merged = if evaluator.needs_merge() {
        let mut set = Vec::with_capacity(m + 1);
        set.push(t);
        set.extend(partners.iter().copied());
        Some(merge(&set, &config.merge_spec).map_err(wrap)?)
    } else {
        None
    };
    let input = TrialInput { target: t, partners: &partners, merged: merged.as_ref(), trial, seed };
    let score = evaluator.evaluate(&input).map_err(wrap)?;
    if !(0.0..=1.0).contains(&score) {
        return Err(wrap(Error::Experiment(format!("evaluator returned {score}, outside [0, 1]"))));
    }
    Ok(TrialRecord { trial, seed, partner_ids: partners.iter().map(|p| p.id.clone()).collect(), score })
}

fn report(target_id: &str, trials: Vec<TrialRecord>) -> ScoreReport {
    let score = trials.iter().map(|t| t.score).sum::<f64>() / trials.len() as f64;
    ScoreReport { target_id: target_id.to_string(), score, trials }
}

fn target_index(pool: &[AdapterUpdate], target: &AdapterUpdate) -> Result<usize> {
    pool.iter()
        .position(|u| u.id == target.id)
        .ok_or_else(|| Error::Experiment(format!("target `{}` is not in the pool", target.id)))
}

/// `N` trials for one target. Deterministic given `config.seed`.
pub fn estimate_score<E: Evaluator + ?Sized>(
    target: &AdapterUpdate,
    pool: &[AdapterUpdate],
    evaluator: &E,
    config: &EstimatorConfig,
) -> Result<ScoreReport> {
    config.validate()?;
    let idx = target_index(pool, target)?;
    let m = config.effective_partners(pool.len())?;
    let trials = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(pool, idx, t, m, evaluator, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(&target.id, trials))
}

/// Scores every pool member. Trials run in parallel; results come back in
/// pool order, trial order.
pub fn estimate_pool<E: Evaluator + ?Sized>(pool: &[AdapterUpdate], evaluator: &E, config: &EstimatorConfig) -> Result<Vec<ScoreReport>> {
    config.validate()?;
    check_unique_ids(pool)?;
    let m = config.effective_partners(pool.len())?;
    let n = config.trials;
    let records = (0..pool.len() * n)
        .into_par_iter()
        .map(|job| run_trial(pool, job / n, job % n, m, evaluator, config))
        .collect::<Result<Vec<_>>>()?;
    let mut it = records.into_iter();
    Ok(pool.iter().map(|u| report(&u.id, it.by_ref().take(n).collect())).collect())
}

fn check_unique_ids(pool: &[AdapterUpdate]) -> Result<()> {
    let mut ids: Vec<&str> = pool.iter().map(|u| u.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Experiment(format!("duplicate update id `{}` in pool", w[0])));
    }
    Ok(())
}

pub fn write_reports_jsonl(path: impl AsRef<Path>, reports: &[ScoreReport]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports_jsonl(path: impl AsRef<Path>) -> Result<Vec<ScoreReport>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::ParamUpdate;
    use crate::linalg::Matrix;

    pub(super) fn toy_pool(n: usize) -> Vec<AdapterUpdate> {
        (0..n)
            .map(|i| {
                let m = Matrix::from_rows(&[&[i as f32, 1.0]]).unwrap();
                AdapterUpdate::single(format!("u{i:03}"), format!("u{i:03}"), "base", "w", ParamUpdate::dense(m)).unwrap()
            })
            .collect()
    }

    struct Constant(f64);

    impl Evaluator for Constant {
        fn needs_merge(&self) -> bool {
            false
        }
        fn evaluate(&self, _: &TrialInput<'_>) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// Replays fixed outcomes by trial index.
    struct Scripted(Vec<f64>);

    impl Evaluator for Scripted {
        fn needs_merge(&self) -> bool {
            false
        }
        fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64> {
            Ok(self.0[input.trial])
        }
    }

    struct Failing;

    impl Evaluator for Failing {
        fn evaluate(&self, _: &TrialInput<'_>) -> Result<f64> {
            Err(Error::Experiment("boom".into()))
        }
    }

    /// Checks the merge really contains target plus partners.
    struct MergeProbe;

    impl Evaluator for MergeProbe {
        fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64> {
            let merged = input.merged.unwrap();
            let inputs = &merged.provenance().inputs;
            assert_eq!(inputs.len(), input.partners.len() + 1);
            assert_eq!(inputs[0], input.target.id);
            Ok(1.0)
        }
    }

    fn cfg(trials: usize, partners: usize) -> EstimatorConfig {
        EstimatorConfig { trials, partners, merge_spec: MergeSpec::mean(), ..Default::default() }
    }

    #[test]
    fn constant_evaluators() {
        let pool = toy_pool(10);
        assert_eq!(estimate_score(&pool[3], &pool, &Constant(1.0), &cfg(5, 4)).unwrap().score, 1.0);
        assert_eq!(estimate_score(&pool[3], &pool, &Constant(0.0), &cfg(5, 4)).unwrap().score, 0.0);
    }

    #[test]
    fn scripted_trials_average() {
        let pool = toy_pool(10);
        let r = estimate_score(&pool[0], &pool, &Scripted(vec![1.0, 0.0, 1.0, 1.0, 0.0]), &cfg(5, 3)).unwrap();
        assert_eq!(r.score, 0.6);
        assert_eq!(r.trials.len(), 5);
        assert!(r.trials.iter().enumerate().all(|(i, t)| t.trial == i));
    }

    #[test]
    fn partners_are_distinct_and_exclude_target() {
        for seed in 0..200 {
            let p = sample_partners(12, 5, 6, seed);
            assert_eq!(p.len(), 6);
            assert!(!p.contains(&5));
            assert!(p.windows(2).all(|w| w[0] < w[1]));
            assert!(p.iter().all(|&i| i < 12));
        }
        // Every non-target index shows up.
        let mut seen = [false; 12];
        for seed in 0..200 {
            for i in sample_partners(12, 0, 3, seed) {
                seen[i] = true;
            }
        }
        assert!(!seen[0] && seen[1..].iter().all(|&s| s));
    }

    #[test]
    fn merge_includes_target_and_partners() {
        let pool = toy_pool(8);
        estimate_score(&pool[2], &pool, &MergeProbe, &cfg(3, 4)).unwrap();
    }

    #[test]
    fn deterministic_and_parallel_equals_single() {
        let pool = toy_pool(20);
        struct Hash;
        impl Evaluator for Hash {
            fn needs_merge(&self) -> bool {
                false
            }
            fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64> {
                Ok((input.seed % 2) as f64)
            }
        }
        let c = cfg(5, 6);
        let all = estimate_pool(&pool, &Hash, &c).unwrap();
        assert_eq!(all, estimate_pool(&pool, &Hash, &c).unwrap());
        for (u, r) in pool.iter().zip(&all) {
            assert_eq!(&estimate_score(u, &pool, &Hash, &c).unwrap(), r);
            let k = r.score * 5.0;
            assert_eq!(k, k.round());
        }
    }

    #[test]
    fn errors() {
        let pool = toy_pool(5);
        let err = estimate_score(&pool[0], &pool, &Failing, &cfg(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Trial { trial: 0, .. }));
        let stranger = toy_pool(6).pop().unwrap();
        assert!(estimate_score(&stranger, &pool, &Constant(1.0), &cfg(2, 2)).is_err());
        assert!(estimate_score(&pool[0], &pool[..1], &Constant(1.0), &cfg(2, 2)).is_err());
        assert!(estimate_score(&pool[0], &pool, &Constant(1.0), &cfg(0, 2)).is_err());
        // M clamps to pool − 1.
        let r = estimate_score(&pool[0], &pool, &Constant(1.0), &cfg(2, 50)).unwrap();
        assert_eq!(r.trials[0].partner_ids.len(), 4);
    }

    #[test]
    fn reports_round_trip() {
        let pool = toy_pool(6);
        let reports = estimate_pool(&pool, &Scripted(vec![1.0, 0.0, 1.0]), &cfg(3, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_reports_jsonl(&path, &reports).unwrap();
        assert_eq!(read_reports_jsonl(&path).unwrap(), reports);
    }
}

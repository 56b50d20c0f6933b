//! Per-update cause metrics, binned summaries and correlations against `S`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{weight_stats, AdapterUpdate};
use crate::error::{Error, Result};
use crate::linalg::{mean, spearman, standard_error};
use crate::mergeability::{bin_label, bin_scores, ScoreReport};
use crate::toy::PoolRecord;

const NORMALIZATION_TOL: f64 = 1e-4;
/// Reference means below this are not divided by.
pub const RELATIVE_FLOOR: f64 = 1e-6;

fn check_probs(probs: &[f64], gold: usize) -> Result<()> {
    if gold >= probs.len() {
        return Err(Error::param("gold", format!("index {gold} out of range for {} options", probs.len())));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::param("probs", "entries must lie in [0, 1]"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::param("probs", format!("sums to {total}, not 1")));
    }
    Ok(())
}

/// `max(p) − p[gold]`.
pub fn delta_base(probs: &[f64], gold: usize) -> Result<f64> {
    check_probs(probs, gold)?;
    let max = probs.iter().copied().fold(0.0, f64::max);
    Ok(max - probs[gold])
}

/// `trained[gold] − base[gold]`.
pub fn delta_trained(base: &[f64], trained: &[f64], gold: usize) -> Result<f64> {
    check_probs(base, gold)?;
    check_probs(trained, gold)?;
    Ok(trained[gold] - base[gold])
}

/// Options with strictly higher probability than the gold one.
///
/// # Panics
/// If `gold` is out of range.
pub fn correct_rank(probs: &[f64], gold: usize) -> usize {
    let p = probs[gold];
    probs.iter().filter(|&&q| q > p).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub id: String,
    pub score: f64,
    pub delta_base: f64,
    pub delta_trained: f64,
    pub correct_rank: usize,
    pub base_p_correct: f64,
    pub base_perplexity: f64,
    pub context_length: usize,
    pub frobenius: f64,
    pub sigma_max: f64,
    /// Only for task-level runs.
    pub base_task_accuracy: Option<f64>,
}

/// Joins pool records, adapters and reports by id.
pub fn analysis_rows(records: &[PoolRecord], adapters: &[AdapterUpdate], reports: &[ScoreReport]) -> Result<Vec<AnalysisRow>> {
    if records.len() != adapters.len() {
        return Err(Error::Experiment("records and adapters differ in length".into()));
    }
    let by_id: BTreeMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    reports
        .iter()
        .map(|rep| {
            let i = *by_id
                .get(rep.target_id.as_str())
                .ok_or_else(|| Error::Experiment(format!("report for unknown update `{}`", rep.target_id)))?;
            let rec = &records[i];
            let stats = weight_stats(&adapters[i])?;
            Ok(AnalysisRow {
                id: rec.id.clone(),
                score: rep.score,
                delta_base: delta_base(&rec.base_probs, rec.gold_index)?,
                delta_trained: delta_trained(&rec.base_probs, &rec.trained_probs, rec.gold_index)?,
                correct_rank: correct_rank(&rec.base_probs, rec.gold_index),
                base_p_correct: rec.base_probs[rec.gold_index],
                base_perplexity: rec.base_perplexity,
                context_length: rec.context_length,
                frobenius: stats.frobenius,
                sigma_max: stats.sigma_max,
                base_task_accuracy: None,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Score,
    DeltaBase,
    DeltaTrained,
    CorrectRank,
    BasePCorrect,
    BasePerplexity,
    ContextLength,
    Frobenius,
    SigmaMax,
    BaseTaskAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Score,
        Metric::DeltaBase,
        Metric::DeltaTrained,
        Metric::CorrectRank,
        Metric::BasePCorrect,
        Metric::BasePerplexity,
        Metric::ContextLength,
        Metric::Frobenius,
        Metric::SigmaMax,
        Metric::BaseTaskAccuracy,
    ];

    /// The cause metrics correlated against `S` by default.
    pub const CAUSES: [Metric; 8] = [
        Metric::DeltaBase,
        Metric::DeltaTrained,
        Metric::CorrectRank,
        Metric::BasePCorrect,
        Metric::BasePerplexity,
        Metric::ContextLength,
        Metric::Frobenius,
        Metric::SigmaMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Score => "score",
            Metric::DeltaBase => "delta_base",
            Metric::DeltaTrained => "delta_trained",
            Metric::CorrectRank => "correct_rank",
            Metric::BasePCorrect => "base_p_correct",
            Metric::BasePerplexity => "base_perplexity",
            Metric::ContextLength => "context_length",
            Metric::Frobenius => "frobenius",
            Metric::SigmaMax => "sigma_max",
            Metric::BaseTaskAccuracy => "base_task_accuracy",
        }
    }

    pub fn value(self, row: &AnalysisRow) -> Option<f64> {
        Some(match self {
            Metric::Score => row.score,
            Metric::DeltaBase => row.delta_base,
            Metric::DeltaTrained => row.delta_trained,
            Metric::CorrectRank => row.correct_rank as f64,
            Metric::BasePCorrect => row.base_p_correct,
            Metric::BasePerplexity => row.base_perplexity,
            Metric::ContextLength => row.context_length as f64,
            Metric::Frobenius => row.frobenius,
            Metric::SigmaMax => row.sigma_max,
            Metric::BaseTaskAccuracy => return row.base_task_accuracy,
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param("metric", format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub metric: Metric,
    /// `None` for empty bins, missing values, or flagged relative ratios.
    pub mean: Option<f64>,
    pub se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub stats: Vec<MetricStat>,
}

impl BinSummary {
    pub fn stat(&self, metric: Metric) -> Option<&MetricStat> {
        self.stats.iter().find(|s| s.metric == metric)
    }
}

/// Mean and standard error of each metric per score bin. Empty bins are
/// kept with `count = 0` and no statistics.
pub fn aggregate_bins(rows: &[AnalysisRow], edges: &[f64], metrics: &[Metric]) -> Result<Vec<BinSummary>> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let assignment = bin_scores(&scores, edges)?;
    Ok((0..edges.len() - 1)
        .map(|b| {
            let members: Vec<&AnalysisRow> = rows.iter().zip(&assignment.bins).filter(|(_, &x)| x == b).map(|(r, _)| r).collect();
            let stats = metrics
                .iter()
                .map(|&metric| {
                    let values: Option<Vec<f64>> = members.iter().map(|r| metric.value(r)).collect();
                    match values {
                        Some(v) if !v.is_empty() => MetricStat { metric, mean: Some(mean(&v)), se: Some(standard_error(&v)) },
                        _ => MetricStat { metric, mean: None, se: None },
                    }
                })
                .collect();
            BinSummary { bin: bin_label(edges, b), lower: edges[b], upper: edges[b + 1], count: members.len(), stats }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeSummary {
    pub bins: Vec<BinSummary>,
    /// Metrics whose reference mean is below [`RELATIVE_FLOOR`] in magnitude.
    pub flagged: Vec<Metric>,
}

/// Divides every bin's mean and SE by the first (`S = 0`) bin's mean.
pub fn relative_to_first_bin(bins: &[BinSummary]) -> Result<RelativeSummary> {
    let reference = bins.first().ok_or_else(|| Error::Experiment("no bins".into()))?;
    if reference.count == 0 {
        return Err(Error::Experiment(format!("reference bin {} is empty; relative change is undefined", reference.bin)));
    }
    let mut flagged = Vec::new();
    let mut divisors = BTreeMap::new();
    for s in &reference.stats {
        match s.mean {
            Some(m) if m.abs() >= RELATIVE_FLOOR => {
                divisors.insert(s.metric, m);
            }
            _ => flagged.push(s.metric),
        }
    }
    let bins = bins
        .iter()
        .map(|b| BinSummary {
            stats: b
                .stats
                .iter()
                .map(|s| match divisors.get(&s.metric) {
                    Some(&d) => MetricStat { metric: s.metric, mean: s.mean.map(|m| m / d), se: s.se.map(|e| e / d.abs()) },
                    None => MetricStat { metric: s.metric, mean: None, se: None },
                })
                .collect(),
            ..b.clone()
        })
        .collect();
    Ok(RelativeSummary { bins, flagged })
}

/// `spearman(S, metric)` over rows that carry the metric.
pub fn correlate(rows: &[AnalysisRow], metric: Metric) -> Result<f64> {
    let (s, m): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| metric.value(r).map(|v| (r.score, v))).unzip();
    spearman(&s, &m).map_err(|e| match e {
        Error::UndefinedCorrelation(why) => Error::UndefinedCorrelation(format!("{metric}: {why}")),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: Metric,
    pub n: usize,
    /// `None` when undefined (constant input or too few rows).
    pub spearman: Option<f64>,
}

pub fn correlation_table(rows: &[AnalysisRow], metrics: &[Metric]) -> Vec<Correlation> {
    metrics
        .iter()
        .map(|&metric| {
            let n = rows.iter().filter(|r| metric.value(r).is_some()).count();
            let spearman = match correlate(rows, metric) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("{e}");
                    None
                }
            };
            Correlation { metric, n, spearman }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mergeability::{lattice_edges, uniform_edges};
    use proptest::prelude::*;

    fn row(score: f64, delta_base: f64) -> AnalysisRow {
        AnalysisRow {
            id: format!("r{score}"),
            score,
            delta_base,
            delta_trained: 0.5,
            correct_rank: 1,
            base_p_correct: 0.1,
            base_perplexity: 3.0,
            context_length: 5,
            frobenius: 1.0,
            sigma_max: 0.5,
            base_task_accuracy: None,
        }
    }

    #[test]
    fn metric_examples() {
        let p = [0.4, 0.1, 0.2, 0.3];
        assert!((delta_base(&p, 1).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(delta_base(&p, 0).unwrap(), 0.0);
        assert!(delta_base(&[0.5, 0.6], 0).is_err());
        assert!(delta_base(&[0.5, 0.5], 2).is_err());
        assert!((delta_trained(&[0.9, 0.1], &[0.1, 0.9], 1).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(delta_trained(&p, &p, 2).unwrap(), 0.0);
        assert_eq!(correct_rank(&[0.5, 0.3, 0.2], 2), 2);
        assert_eq!(correct_rank(&[0.5, 0.3, 0.2], 0), 0);
        let lowest = [0.2, 0.15, 0.15, 0.1, 0.1, 0.1, 0.1, 0.1 - 1e-3];
        assert_eq!(correct_rank(&lowest, 7), 7);
        assert_eq!(correct_rank(&[0.5, 0.5], 1), 0);
    }

    #[test]
    fn bins_and_standard_errors() {
        let rows = vec![row(0.0, 2.0), row(0.0, 4.0), row(1.0, 7.0)];
        let bins = aggregate_bins(&rows, &lattice_edges(5), &[Metric::DeltaBase]).unwrap();
        assert_eq!(bins.len(), 6);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 3);
        let first = bins[0].stat(Metric::DeltaBase).unwrap();
        assert_eq!(first.mean, Some(3.0));
        assert!((first.se.unwrap() - 1.0).abs() < 1e-12);
        let last = bins[5].stat(Metric::DeltaBase).unwrap();
        assert_eq!((last.mean, last.se), (Some(7.0), Some(0.0)));
        assert_eq!(bins[2].count, 0);
        assert_eq!(bins[2].stat(Metric::DeltaBase).unwrap().mean, None);
    }

    #[test]
    fn relative_mode() {
        let mut rows = vec![row(0.0, 2.0), row(0.0, 4.0), row(1.0, 6.0)];
        for r in &mut rows {
            r.delta_trained = 0.0;
        }
        let bins = aggregate_bins(&rows, &uniform_edges(5), &[Metric::DeltaBase, Metric::DeltaTrained]).unwrap();
        let rel = relative_to_first_bin(&bins).unwrap();
        assert_eq!(rel.bins[0].stat(Metric::DeltaBase).unwrap().mean, Some(1.0));
        assert_eq!(rel.bins[4].stat(Metric::DeltaBase).unwrap().mean, Some(2.0));
        assert_eq!(rel.flagged, vec![Metric::DeltaTrained]);
        assert_eq!(rel.bins[4].stat(Metric::DeltaTrained).unwrap().mean, None);

        let no_reference = aggregate_bins(&[row(1.0, 1.0)], &uniform_edges(5), &[Metric::DeltaBase]).unwrap();
        assert!(relative_to_first_bin(&no_reference).is_err());
    }

    #[test]
    fn correlation_cases() {
        let rows: Vec<AnalysisRow> = (0..6).map(|i| row(i as f64 / 5.0, 0.0)).collect();
        assert!((correlate(&rows, Metric::Score).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<AnalysisRow> = rows.iter().map(|r| AnalysisRow { delta_base: -r.score, ..r.clone() }).collect();
        assert!((correlate(&neg, Metric::DeltaBase).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(correlate(&rows, Metric::Frobenius), Err(Error::UndefinedCorrelation(_))));
        let table = correlation_table(&rows, &[Metric::Frobenius, Metric::BaseTaskAccuracy]);
        assert_eq!(table[0].spearman, None);
        assert_eq!(table[1].n, 0);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
    }

    fn probs() -> impl Strategy<Value = (Vec<f64>, usize)> {
        prop::collection::vec(0.0f64..1.0, 2..9).prop_flat_map(|raw| {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / raw.len() as f64) / total).collect();
            let n = p.len();
            (Just(p), 0..n)
        })
    }

    proptest! {
        #[test]
        fn zero_gap_iff_rank_zero((p, gold) in probs()) {
            let d = delta_base(&p, gold).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d == 0.0, correct_rank(&p, gold) == 0);
        }

        #[test]
        fn bin_counts_cover_rows(scores in prop::collection::vec(0usize..=5, 0..40)) {
            let rows: Vec<AnalysisRow> = scores.iter().map(|&k| row(k as f64 / 5.0, 0.1)).collect();
            let bins = aggregate_bins(&rows, &lattice_edges(5), &[Metric::DeltaBase]).unwrap();
            prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), rows.len());
        }
    }
}

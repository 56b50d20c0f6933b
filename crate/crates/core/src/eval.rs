//! Scoring functions: length-normalized option scores, argmax prediction,
//! binary correctness and task accuracy, plus the pluggable evaluator used by
//! the mergeability estimator.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterUpdate;
use crate::error::{Error, Result};
use crate::merge::MergedUpdate;

/// One multiple-choice item. Options are token sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub prompt_id: String,
    pub options: Vec<Vec<usize>>,
    pub gold_index: usize,
}

impl EvalExample {
    pub fn validate(&self) -> Result<()> {
        if self.options.is_empty() {
            return Err(Error::param("options", format!("`{}` has no options", self.prompt_id)));
        }
        if self.gold_index >= self.options.len() {
            return Err(Error::param(
                "gold_index",
                format!("`{}`: {} out of range for {} options", self.prompt_id, self.gold_index, self.options.len()),
            ));
        }
        for (i, o) in self.options.iter().enumerate() {
            if o.is_empty() {
                return Err(Error::param("options", format!("`{}`: option {i} is empty", self.prompt_id)));
            }
            if self.options[..i].contains(o) {
                return Err(Error::param("options", format!("`{}`: option {i} duplicates an earlier one", self.prompt_id)));
            }
        }
        Ok(())
    }

    /// Scores every option. `next_token` maps a token prefix (option tokens
    /// so far) to the model's distribution over the next token.
    pub fn option_scores<F>(&self, mut next_token: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[usize]) -> Result<Vec<f64>>,
    {
        self.options
            .iter()
            .map(|option| {
                let mut probs = Vec::with_capacity(option.len());
                for t in 0..option.len() {
                    let dist = next_token(&option[..t])?;
                    let p = *dist.get(option[t]).ok_or_else(|| {
                        Error::param("options", format!("token {} outside a {}-way distribution", option[t], dist.len()))
                    })?;
                    probs.push(p);
                }
                score_option(&probs)
            })
            .collect()
    }
}

/// `(1/|y|) Σ log p(yₜ | prefix)` from the per-token probabilities of one
/// option. A zero probability scores `-inf`.
pub fn score_option(token_probs: &[f64]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(Error::param("option", "empty token sequence"));
    }
    if let Some(p) = token_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::param("option", format!("probability {p} outside [0, 1]")));
    }
    let total: f64 = token_probs.iter().map(|p| p.ln()).sum();
    Ok(total / token_probs.len() as f64)
}

/// Index of the highest score, lowest index on ties. `None` for no options.
pub fn predict(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if !(s > scores[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn binary_correctness(prediction: usize, gold: usize) -> f64 {
    if prediction == gold {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task_id: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

impl TaskAccuracy {
    /// Ceiling filter for admitting fine-tuned tasks to experiments.
    pub fn passes(&self, threshold: f64) -> bool {
        self.accuracy >= threshold
    }
}

pub const DEFAULT_TASK_THRESHOLD: f64 = 0.99;

pub fn task_accuracy(task_id: impl Into<String>, correct: &[bool]) -> Result<TaskAccuracy> {
    let task_id = task_id.into();
    if correct.is_empty() {
        return Err(Error::param("examples", format!("task `{task_id}` has no examples")));
    }
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(TaskAccuracy {
        task_id,
        accuracy: hits as f64 / correct.len() as f64,
        correct: hits,
        total: correct.len(),
    })
}

/// Everything a scoring function may look at in one estimator trial.
pub struct TrialInput<'a> {
    pub target: &'a AdapterUpdate,
    pub partners: &'a [&'a AdapterUpdate],
    /// `None` when the evaluator declares it does not need the merge.
    pub merged: Option<&'a MergedUpdate>,
    pub trial: usize,
    pub seed: u64,
}

/// The scoring function `f`. Must be pure in its input.
pub trait Evaluator: Sync {
    /// Stubs that ignore the merged weights return `false` to skip merging.
    fn needs_merge(&self) -> bool {
        true
    }

    /// Score in `[0, 1]` of the target's own examples.
    fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64>;
}

pub fn write_examples_jsonl(path: impl AsRef<Path>, examples: &[EvalExample]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples_jsonl(path: impl AsRef<Path>) -> Result<Vec<EvalExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: EvalExample = serde_json::from_str(&line)?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn option_scores() {
        assert!((score_option(&[0.5]).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert!((score_option(&[0.5]).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
        let two = score_option(&[0.5, 0.25]).unwrap();
        assert!((two - (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
        assert!((two + 1.0397).abs() < 1e-4);
        assert_eq!(score_option(&[0.5, 0.0]).unwrap(), f64::NEG_INFINITY);
        assert!(score_option(&[]).is_err());
        assert!(score_option(&[1.5]).is_err());
    }

    #[test]
    fn duplicated_tokens_keep_score() {
        let p = [0.5, 0.25, 0.8];
        let doubled: Vec<f64> = p.iter().chain(p.iter()).copied().collect();
        assert!((score_option(&p).unwrap() - score_option(&doubled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(predict(&[-1.0, -0.5, -2.0]), Some(1));
        assert_eq!(predict(&[0.3, 0.3, 0.3]), Some(0));
        assert_eq!(predict(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), Some(0));
        assert_eq!(predict(&[f64::NEG_INFINITY, -3.0]), Some(1));
        assert_eq!(predict(&[]), None);
    }

    #[test]
    fn correctness_and_accuracy() {
        assert_eq!(binary_correctness(2, 2), 1.0);
        assert_eq!(binary_correctness(2, 3), 0.0);
        let t = task_accuracy("t", &[true, true, true, false]).unwrap();
        assert_eq!(t.accuracy, 0.75);
        assert_eq!((t.correct, t.total), (3, 4));
        assert_eq!(task_accuracy("t", &[true; 5]).unwrap().accuracy, 1.0);
        assert!(task_accuracy("t", &[]).is_err());
        let high = task_accuracy("t", &[true; 100]).unwrap();
        let low = task_accuracy("t", &[[true; 98].as_slice(), &[false; 2]].concat()).unwrap();
        assert!(high.passes(DEFAULT_TASK_THRESHOLD));
        assert!(!low.passes(DEFAULT_TASK_THRESHOLD));
        assert!(low.passes(0.75));
    }

    #[test]
    fn example_validation() {
        let ok = EvalExample { prompt_id: "q".into(), options: vec![vec![1], vec![2, 3]], gold_index: 1 };
        ok.validate().unwrap();
        let dup = EvalExample { options: vec![vec![1], vec![1]], ..ok.clone() };
        assert!(dup.validate().is_err());
        let out = EvalExample { gold_index: 2, ..ok.clone() };
        assert!(out.validate().is_err());
    }

    #[test]
    fn scores_via_next_token() {
        let ex = EvalExample { prompt_id: "q".into(), options: vec![vec![0], vec![1, 1]], gold_index: 1 };
        let scores = ex
            .option_scores(|prefix| Ok(if prefix.is_empty() { vec![0.5, 0.5] } else { vec![0.0, 1.0] }))
            .unwrap();
        assert!((scores[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((scores[1] - 0.5f64.ln() / 2.0).abs() < 1e-12);
        assert_eq!(predict(&scores), Some(1));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let exs = vec![
            EvalExample { prompt_id: "a".into(), options: vec![vec![1], vec![2]], gold_index: 0 },
            EvalExample { prompt_id: "b".into(), options: vec![vec![3, 4], vec![5]], gold_index: 1 },
        ];
        write_examples_jsonl(&path, &exs).unwrap();
        assert_eq!(read_examples_jsonl(&path).unwrap(), exs);
    }

    proptest! {
        #[test]
        fn predict_invariant_under_monotone_maps(scores in prop::collection::vec(-10.0f64..10.0, 1..12), c in -5.0f64..5.0) {
            let p = predict(&scores);
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
            let exped: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert_eq!(p, predict(&shifted));
            prop_assert_eq!(p, predict(&cubed));
            prop_assert_eq!(p, predict(&exped));
        }

        #[test]
        fn padding_keeps_normalized_score(probs in prop::collection::vec(0.01f64..1.0, 1..6), reps in 1usize..4) {
            let padded: Vec<f64> = (0..reps).flat_map(|_| probs.iter().copied()).collect();
            prop_assert!((score_option(&probs).unwrap() - score_option(&padded).unwrap()).abs() < 1e-12);
        }
    }
}

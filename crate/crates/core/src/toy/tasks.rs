//! Task-level setup: groups of facts with low or high base accuracy, one
//! adapter per task, and the weighted-versus-mean retention comparison.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{adapter_delta, ToyModel, UP_PROJ};
use super::pool::ToyEvaluator;
use super::train::{train_lora, Material, TrainConfig};
use super::universe::FactUniverse;
use crate::adapter::{AdapterUpdate, ParamUpdate};
use crate::error::{Error, Result};
use crate::eval::{task_accuracy, DEFAULT_TASK_THRESHOLD};
use crate::merge::{merge, MergeSpec};
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskGroup {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteConfig {
    pub keys_per_task: usize,
    pub low_tasks: usize,
    pub high_tasks: usize,
    /// Fraction of base-known facts placed in each group's tasks.
    pub low_known_fraction: f64,
    pub high_known_fraction: f64,
    /// Repetitions of every task fact in the training material.
    pub presentations: usize,
    pub train: TrainConfig,
    pub ceiling: f64,
    /// Softmax temperature of the weighted merge.
    pub tau: f64,
    pub seed: u64,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        TaskSuiteConfig {
            keys_per_task: 8,
            low_tasks: 2,
            high_tasks: 2,
            low_known_fraction: 0.25,
            high_known_fraction: 0.875,
            presentations: 4,
            train: TrainConfig { lora_rank: 8, lora_alpha: 16.0, lr: 3e-3, epochs: 10, seed: 0 },
            ceiling: DEFAULT_TASK_THRESHOLD,
            tau: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub group: TaskGroup,
    pub keys: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedTask {
    pub task: Task,
    pub base_accuracy: f64,
    pub finetuned_accuracy: f64,
    pub admitted: bool,
    pub adapter: AdapterUpdate,
}

/// Splits base-known and base-unknown keys into tasks of the requested mix.
pub fn select_tasks(base: &ToyModel, universe: &FactUniverse, cfg: &TaskSuiteConfig) -> Result<Vec<Task>> {
    let mix: Vec<(TaskGroup, f64)> = std::iter::repeat_n((TaskGroup::Low, cfg.low_known_fraction), cfg.low_tasks)
        .chain(std::iter::repeat_n((TaskGroup::High, cfg.high_known_fraction), cfg.high_tasks))
        .collect();
    select_mixed(base, universe, cfg, &mix)
}

/// `count` tasks whose known fractions step evenly from 0 to 1; tasks
/// below one half are `Low`.
pub fn select_graded_tasks(base: &ToyModel, universe: &FactUniverse, cfg: &TaskSuiteConfig, count: usize) -> Result<Vec<Task>> {
    let mix: Vec<(TaskGroup, f64)> = (0..count)
        .map(|i| {
            let f = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
            (if f < 0.5 { TaskGroup::Low } else { TaskGroup::High }, f)
        })
        .collect();
    select_mixed(base, universe, cfg, &mix)
}

fn select_mixed(base: &ToyModel, universe: &FactUniverse, cfg: &TaskSuiteConfig, mix: &[(TaskGroup, f64)]) -> Result<Vec<Task>> {
    if cfg.keys_per_task == 0 {
        return Err(Error::param("keys_per_task", "must be positive"));
    }
    let all: Vec<usize> = (0..universe.num_keys).collect();
    let eval = ToyEvaluator::new(base, universe, HashMap::new());
    let correct = eval.correctness(&all, None)?;
    let mut rng = rng_from(derive_seed(cfg.seed, "tasks", &[]));
    let (mut known, mut unknown): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&k| correct[k]);
    known.shuffle(&mut rng);
    unknown.shuffle(&mut rng);

    let mut tasks = Vec::with_capacity(mix.len());
    for &(group, fraction) in mix {
        let n_known = ((fraction * cfg.keys_per_task as f64).round() as usize).min(cfg.keys_per_task);
        let n_unknown = cfg.keys_per_task - n_known;
        if known.len() < n_known || unknown.len() < n_unknown {
            return Err(Error::Experiment(format!(
                "not enough facts for a {group:?} task: need {n_known} known and {n_unknown} unknown, have {} and {}",
                known.len(),
                unknown.len()
            )));
        }
        let mut keys: Vec<usize> = known.drain(..n_known).chain(unknown.drain(..n_unknown)).collect();
        keys.sort_unstable();
        tasks.push(Task { id: format!("task-{}", tasks.len()), group, keys });
    }
    Ok(tasks)
}

/// One adapter per task on its facts; tasks below the ceiling are marked
/// not admitted.
pub fn train_tasks(base: &ToyModel, universe: &FactUniverse, tasks: &[Task], cfg: &TaskSuiteConfig) -> Result<Vec<TrainedTask>> {
    let eval = ToyEvaluator::new(base, universe, HashMap::new());
    let base_id = base.fingerprint();
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let items: Vec<(usize, usize)> = task
                .keys
                .iter()
                .flat_map(|&k| std::iter::repeat_n((k, universe.gold[k]), cfg.presentations))
                .collect();
            let material = Material::new(task.keys[0], items)?;
            let seed = derive_seed(cfg.train.seed, "task", &[i as u64]);
            let trained = train_lora(base, &material, &cfg.train, seed)?;
            let adapter = AdapterUpdate::single(task.id.clone(), task.id.clone(), base_id.clone(), UP_PROJ, ParamUpdate::LowRank(trained.update))?;
            let delta = adapter_delta(base, &adapter)?;
            let before = task_accuracy(&task.id, &eval.correctness(&task.keys, None)?)?;
            let after = task_accuracy(&task.id, &eval.correctness(&task.keys, Some(&delta))?)?;
            if !after.passes(cfg.ceiling) {
                log::warn!("{} reaches {:.3} after fine-tuning, below the {:.2} ceiling", task.id, after.accuracy, cfg.ceiling);
            }
            Ok(TrainedTask {
                task: task.clone(),
                base_accuracy: before.accuracy,
                finetuned_accuracy: after.accuracy,
                admitted: after.passes(cfg.ceiling),
                adapter,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub task_id: String,
    pub group: TaskGroup,
    pub base_accuracy: f64,
    pub finetuned_accuracy: f64,
    pub merged_accuracy: f64,
    /// `merged / finetuned`
    pub retention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeComparison {
    pub tau: f64,
    /// Task id → weight under the weighted merge.
    pub weights: BTreeMap<String, f64>,
    pub mean: Vec<RetentionRow>,
    pub weighted: Vec<RetentionRow>,
}

impl MergeComparison {
    pub fn min_low_retention(rows: &[RetentionRow]) -> f64 {
        rows.iter().filter(|r| r.group == TaskGroup::Low).map(|r| r.retention).fold(f64::INFINITY, f64::min)
    }

    /// Largest fine-tuned-minus-merged accuracy drop over high tasks.
    pub fn max_high_degradation(rows: &[RetentionRow]) -> f64 {
        rows.iter()
            .filter(|r| r.group == TaskGroup::High)
            .map(|r| r.finetuned_accuracy - r.merged_accuracy)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Merges all admitted task adapters under mean and inverse-accuracy
/// weighting and measures each task's retained accuracy.
pub fn compare_weighted_vs_mean(base: &ToyModel, universe: &FactUniverse, tasks: &[TrainedTask], tau: f64) -> Result<MergeComparison> {
    if let Some(t) = tasks.iter().find(|t| !t.admitted) {
        return Err(Error::Experiment(format!(
            "task `{}` reached only {:.3} after fine-tuning and is not admitted",
            t.task.id, t.finetuned_accuracy
        )));
    }
    let refs: Vec<&AdapterUpdate> = tasks.iter().map(|t| &t.adapter).collect();
    let accs: BTreeMap<String, f64> = tasks.iter().map(|t| (t.task.id.clone(), t.base_accuracy)).collect();
    let eval = ToyEvaluator::new(base, universe, HashMap::new());
    let rows = |spec: &MergeSpec| -> Result<Vec<RetentionRow>> {
        let merged = merge(&refs, spec)?;
        let delta = adapter_delta(base, &merged)?;
        tasks
            .iter()
            .map(|t| {
                let acc = task_accuracy(&t.task.id, &eval.correctness(&t.task.keys, Some(&delta))?)?.accuracy;
                Ok(RetentionRow {
                    task_id: t.task.id.clone(),
                    group: t.task.group,
                    base_accuracy: t.base_accuracy,
                    finetuned_accuracy: t.finetuned_accuracy,
                    merged_accuracy: acc,
                    retention: acc / t.finetuned_accuracy,
                })
            })
            .collect()
    };
    Ok(MergeComparison {
        tau,
        weights: crate::merge::compute_inverse_accuracy_weights(&accs, tau)?,
        mean: rows(&MergeSpec::mean())?,
        weighted: rows(&MergeSpec::weighted(accs.clone(), tau))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::train::{pretrain_base, PretrainConfig};
    use crate::toy::universe::UniverseConfig;

    fn setup() -> (FactUniverse, ToyModel) {
        let u = FactUniverse::generate(&UniverseConfig { num_keys: 120, num_values: 24, seed: 3, ..Default::default() }).unwrap();
        let cfg = PretrainConfig { embed_dim: 12, hidden_dim: 24, epochs: 2, samples_per_epoch: 400, ..Default::default() };
        (u.clone(), pretrain_base(&u, &cfg).unwrap())
    }

    #[test]
    fn task_mix_matches_fractions() {
        let (u, base) = setup();
        let cfg = TaskSuiteConfig { keys_per_task: 4, low_known_fraction: 0.25, high_known_fraction: 0.75, ..Default::default() };
        let tasks = select_tasks(&base, &u, &cfg).unwrap();
        assert_eq!(tasks.len(), 4);
        let eval = ToyEvaluator::new(&base, &u, HashMap::new());
        for t in &tasks {
            let acc = eval.accuracy(&t.keys, None).unwrap();
            let want = if t.group == TaskGroup::Low { 0.25 } else { 0.75 };
            assert_eq!(acc, want, "{}", t.id);
        }
        let mut all: Vec<usize> = tasks.iter().flat_map(|t| t.keys.clone()).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 16);

        let graded = select_graded_tasks(&base, &u, &cfg, 5).unwrap();
        let accs: Vec<f64> = graded.iter().map(|t| eval.accuracy(&t.keys, None).unwrap()).collect();
        assert_eq!(accs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(graded[1].group, TaskGroup::Low);
        assert_eq!(graded[2].group, TaskGroup::High);

        let huge = TaskSuiteConfig { keys_per_task: 500, ..cfg };
        assert!(select_tasks(&base, &u, &huge).is_err());
    }

    #[test]
    fn comparison_rejects_unadmitted_tasks() {
        let (u, base) = setup();
        let cfg = TaskSuiteConfig { keys_per_task: 4, train: TrainConfig { lr: 0.0, epochs: 1, ..Default::default() }, ..Default::default() };
        let tasks = select_tasks(&base, &u, &cfg).unwrap();
        let trained = train_tasks(&base, &u, &tasks, &cfg).unwrap();
        assert!(trained.iter().any(|t| !t.admitted));
        assert!(compare_weighted_vs_mean(&base, &u, &trained, 1.0).is_err());
    }

    #[test]
    fn equal_accuracies_make_weighted_equal_mean() {
        let (u, base) = setup();
        let cfg = TaskSuiteConfig { keys_per_task: 4, low_known_fraction: 0.5, high_known_fraction: 0.5, ceiling: 0.0, ..Default::default() };
        let tasks = select_tasks(&base, &u, &cfg).unwrap();
        let trained = train_tasks(&base, &u, &tasks, &cfg).unwrap();
        let cmp = compare_weighted_vs_mean(&base, &u, &trained, 1.0).unwrap();
        assert!(cmp.weights.values().all(|&w| (w - 0.25).abs() < 1e-12));
        assert_eq!(cmp.mean, cmp.weighted);
    }
}

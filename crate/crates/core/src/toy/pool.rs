//! Per-example adapter pool: filter known facts, train, keep the fixed ones.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{adapter_delta, option_probs, ToyModel, UP_PROJ};
use super::train::{make_material, perplexity, train_lora, MaterialConfig, TrainConfig};
use super::universe::FactUniverse;
use crate::adapter::{load_adapter, save_adapter, AdapterUpdate, ParamUpdate};
use crate::error::{Error, Result};
use crate::eval::{binary_correctness, predict, score_option, Evaluator, TrialInput};
use crate::linalg::Matrix;
use crate::rng::derive_seed;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub material: MaterialConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: String,
    pub key: usize,
    pub gold_index: usize,
    pub popularity: f64,
    /// Base option probabilities, renormalized over the options.
    pub base_probs: Vec<f64>,
    pub trained_probs: Vec<f64>,
    /// Presentations in the training material.
    pub context_length: usize,
    pub target_presentations: usize,
    pub base_perplexity: f64,
    pub adapter_file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolCounters {
    pub examples: usize,
    pub base_correct: usize,
    pub trained: usize,
    pub retained: usize,
    /// `trained / examples`
    pub trained_fraction: f64,
    /// `retained / trained`
    pub retained_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct Pool {
    pub base_id: String,
    pub records: Vec<PoolRecord>,
    /// Aligned with `records`.
    pub adapters: Vec<AdapterUpdate>,
    pub counters: PoolCounters,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

pub fn example_id(key: usize) -> String {
    format!("ex-{key:04}")
}

/// Option probabilities of `key` under `base + delta`.
pub fn question_probs(model: &ToyModel, universe: &FactUniverse, key: usize, delta: Option<&Matrix>) -> Result<Vec<f64>> {
    let full = model.forward(key, delta)?;
    Ok(option_probs(&full, &universe.questions[key].options))
}

fn answers(probs: &[f64], gold_index: usize) -> bool {
    predict(probs) == Some(gold_index)
}

enum Outcome {
    Known,
    Dropped,
    Kept(Box<(PoolRecord, AdapterUpdate)>),
}

/// For every key: skip if the base already answers it, else train an
/// adapter on its material and keep it only if the trained model answers.
pub fn build_pool(base: &ToyModel, universe: &FactUniverse, cfg: &PoolConfig) -> Result<Pool> {
    cfg.train.validate()?;
    if base.dims().keys != universe.num_keys || base.dims().values != universe.num_values {
        return Err(Error::Pipeline("base model does not match the universe".into()));
    }
    let base_id = base.fingerprint();
    let outcomes = (0..universe.num_keys)
        .into_par_iter()
        .map(|key| -> Result<Outcome> {
            let q = &universe.questions[key];
            let base_probs = question_probs(base, universe, key, None)?;
            if answers(&base_probs, q.gold_index) {
                return Ok(Outcome::Known);
            }
            let seed = derive_seed(cfg.train.seed, "example", &[key as u64]);
            let material = make_material(universe, key, &cfg.material, seed)?;
            let trained = train_lora(base, &material, &cfg.train, seed)?;
            let delta = trained.update.effective_delta();
            let trained_probs = question_probs(base, universe, key, Some(&delta))?;
            if !answers(&trained_probs, q.gold_index) {
                return Ok(Outcome::Dropped);
            }
            let id = example_id(key);
            let adapter = AdapterUpdate::single(id.clone(), id.clone(), base_id.clone(), UP_PROJ, ParamUpdate::LowRank(trained.update))?;
            let record = PoolRecord {
                adapter_file: format!("{id}.mrga"),
                id,
                key,
                gold_index: q.gold_index,
                popularity: universe.popularity[key],
                base_probs,
                trained_probs,
                context_length: material.context_length(),
                target_presentations: material.target_presentations(),
                base_perplexity: perplexity(base, &material.items, None)?,
            };
            Ok(Outcome::Kept(Box::new((record, adapter))))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counters = PoolCounters { examples: universe.num_keys, ..Default::default() };
    let (mut records, mut adapters) = (Vec::new(), Vec::new());
    for o in outcomes {
        match o {
            Outcome::Known => counters.base_correct += 1,
            Outcome::Dropped => counters.trained += 1,
            Outcome::Kept(kept) => {
                counters.trained += 1;
                counters.retained += 1;
                records.push(kept.0);
                adapters.push(kept.1);
            }
        }
    }
    counters.trained_fraction = counters.trained as f64 / counters.examples as f64;
    counters.retained_fraction = if counters.trained == 0 { 0.0 } else { counters.retained as f64 / counters.trained as f64 };
    log::info!(
        "pool: {} examples, {} trained ({:.2}%), {} retained ({:.2}% of trained)",
        counters.examples,
        counters.trained,
        100.0 * counters.trained_fraction,
        counters.retained,
        100.0 * counters.retained_fraction
    );
    if records.is_empty() {
        return Err(Error::Pipeline(format!(
            "empty pool: base answers {} of {} questions and {} trained adapters were retained; enlarge the universe or shorten pretraining",
            counters.base_correct, counters.examples, counters.retained
        )));
    }
    Ok(Pool { base_id, records, adapters, counters })
}

pub const POOL_INDEX: &str = "pool.jsonl";
pub const POOL_SUMMARY: &str = "pool_summary.json";
pub const ADAPTER_DIR: &str = "adapters";

#[derive(Serialize, Deserialize)]
struct PoolSummary {
    base_id: String,
    counters: PoolCounters,
}

/// Writes `adapters/*.mrga`, the JSONL index and a summary.
pub fn save_pool(dir: impl AsRef<Path>, pool: &Pool) -> Result<()> {
    let dir = dir.as_ref();
    let adir = dir.join(ADAPTER_DIR);
    std::fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
    let index = dir.join(POOL_INDEX);
    let file = std::fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (rec, adapter) in pool.records.iter().zip(&pool.adapters) {
        save_adapter(adapter, adir.join(&rec.adapter_file))?;
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&index, e))?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    let summary = dir.join(POOL_SUMMARY);
    let text = serde_json::to_string_pretty(&PoolSummary { base_id: pool.base_id.clone(), counters: pool.counters.clone() })?;
    std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))
}

pub fn load_pool(dir: impl AsRef<Path>) -> Result<Pool> {
    let dir = dir.as_ref();
    let summary_path = dir.join(POOL_SUMMARY);
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: PoolSummary = serde_json::from_str(&text)?;
    let index = dir.join(POOL_INDEX);
    let file = std::fs::File::open(&index).map_err(|e| Error::io(&index, e))?;
    let mut records = Vec::new();
    let mut adapters = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&index, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolRecord = serde_json::from_str(&line)?;
        adapters.push(load_adapter(dir.join(ADAPTER_DIR).join(&rec.adapter_file))?);
        records.push(rec);
    }
    Ok(Pool { base_id: summary.base_id, records, adapters, counters: summary.counters })
}

/// Binary correctness of each target's own question after merging.
pub struct ToyEvaluator<'a> {
    model: &'a ToyModel,
    universe: &'a FactUniverse,
    keys: HashMap<String, Vec<usize>>,
}

impl<'a> ToyEvaluator<'a> {
    /// Targets are identified by their task id and answer for `keys`.
    pub fn new(model: &'a ToyModel, universe: &'a FactUniverse, keys: HashMap<String, Vec<usize>>) -> Self {
        ToyEvaluator { model, universe, keys }
    }

    pub fn for_pool(model: &'a ToyModel, universe: &'a FactUniverse, pool: &Pool) -> Self {
        let keys = pool
            .adapters
            .iter()
            .zip(&pool.records)
            .map(|(a, r)| (a.task_id.clone(), vec![r.key]))
            .collect();
        ToyEvaluator::new(model, universe, keys)
    }

    /// Per-key correctness under `base + delta`.
    pub fn correctness(&self, keys: &[usize], delta: Option<&Matrix>) -> Result<Vec<bool>> {
        keys.iter()
            .map(|&k| {
                let probs = question_probs(self.model, self.universe, k, delta)?;
                let scores = probs.iter().map(|&p| score_option(&[p])).collect::<Result<Vec<_>>>()?;
                let pred = predict(&scores).expect("questions have options");
                Ok(binary_correctness(pred, self.universe.questions[k].gold_index) == 1.0)
            })
            .collect()
    }

    pub fn accuracy(&self, keys: &[usize], delta: Option<&Matrix>) -> Result<f64> {
        let c = self.correctness(keys, delta)?;
        Ok(c.iter().filter(|&&b| b).count() as f64 / c.len().max(1) as f64)
    }

    pub fn keys_of(&self, task_id: &str) -> Result<&[usize]> {
        self.keys
            .get(task_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Experiment(format!("no examples registered for task `{task_id}`")))
    }

    pub fn model(&self) -> &ToyModel {
        self.model
    }
}

impl Evaluator for ToyEvaluator<'_> {
    fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64> {
        let merged = input
            .merged
            .ok_or_else(|| Error::Experiment("toy evaluation requires the merged update".into()))?;
        let delta = adapter_delta(self.model, merged)?;
        self.accuracy(self.keys_of(&input.target.task_id)?, Some(&delta))
    }
}

//! Synthetic fact universe: keys with gold values, long-tailed popularity, and
//! one 8-option multiple-choice question per key.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalExample;
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseConfig {
    pub num_keys: usize,
    pub num_values: usize,
    pub num_distractors: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            num_keys: 400,
            num_values: 64,
            num_distractors: 7,
            zipf_exponent: 1.2,
            seed: 0,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_keys < 2 {
            return Err(Error::param("num_keys", "need at least 2 keys"));
        }
        if self.num_values < self.num_distractors + 1 {
            return Err(Error::param(
                "num_values",
                format!("{} values cannot supply {} distractors", self.num_values, self.num_distractors),
            ));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::param("zipf_exponent", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Multiple-choice question for one key. `options` are value indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub options: Vec<usize>,
    pub gold_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactUniverse {
    pub num_keys: usize,
    pub num_values: usize,
    pub gold: Vec<usize>,
    /// Sampling weight per key, normalized to sum 1.
    pub popularity: Vec<f64>,
    pub questions: Vec<Question>,
}

impl FactUniverse {
    /// Zipf popularity over a random key order, uniform gold values,
    /// distractors drawn without replacement from other keys' gold values.
    pub fn generate(config: &UniverseConfig) -> Result<Self> {
        config.validate()?;
        let k = config.num_keys;
        let mut rng = rng_from(derive_seed(config.seed, "universe", &[]));
        let gold: Vec<usize> = (0..k).map(|_| rng.random_range(0..config.num_values)).collect();

        let mut ranks: Vec<usize> = (0..k).collect();
        ranks.shuffle(&mut rng);
        let raw: Vec<f64> = ranks
            .iter()
            .map(|&r| (r as f64 + 1.0).powf(-config.zipf_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        let popularity = raw.iter().map(|w| w / total).collect();

        let mut questions = Vec::with_capacity(k);
        for key in 0..k {
            let mut pool: Vec<usize> = gold
                .iter()
                .enumerate()
                .filter(|&(j, &v)| j != key && v != gold[key])
                .map(|(_, &v)| v)
                .collect();
            pool.sort_unstable();
            pool.dedup();
            if pool.len() < config.num_distractors {
                return Err(Error::param(
                    "num_distractors",
                    format!("key {key} has only {} distinct distractor values", pool.len()),
                ));
            }
            let mut options: Vec<usize> = pool
                .choose_multiple(&mut rng, config.num_distractors)
                .copied()
                .collect();
            let gold_index = rng.random_range(0..=options.len());
            options.insert(gold_index, gold[key]);
            questions.push(Question { options, gold_index });
        }
        Ok(FactUniverse {
            num_keys: k,
            num_values: config.num_values,
            gold,
            popularity,
            questions,
        })
    }

    /// Explicit universe; every key gets all values as options.
    pub fn from_parts(num_values: usize, gold: Vec<usize>, popularity: Vec<f64>) -> Result<Self> {
        if gold.len() != popularity.len() || gold.is_empty() {
            return Err(Error::param("gold", "gold and popularity must be nonempty and aligned"));
        }
        if gold.iter().any(|&g| g >= num_values) {
            return Err(Error::param("gold", "gold value out of range"));
        }
        if popularity.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::param("popularity", "weights must be positive"));
        }
        let total: f64 = popularity.iter().sum();
        let questions = gold
            .iter()
            .map(|&g| Question {
                options: (0..num_values).collect(),
                gold_index: g,
            })
            .collect();
        Ok(FactUniverse {
            num_keys: gold.len(),
            num_values,
            gold,
            popularity: popularity.iter().map(|p| p / total).collect(),
            questions,
        })
    }

    pub fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.popularity).expect("popularity is positive")
    }

    /// Draws `n` keys proportionally to popularity.
    pub fn sample_keys<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        let dist = self.sampler();
        (0..n).map(|_| dist.sample(rng)).collect()
    }

    pub fn example(&self, key: usize) -> EvalExample {
        let q = &self.questions[key];
        EvalExample {
            prompt_id: format!("key-{key}"),
            options: q.options.iter().map(|&v| vec![v]).collect(),
            gold_index: q.gold_index,
        }
    }
}

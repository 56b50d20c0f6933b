//! Base pretraining, per-example LoRA training, perplexity, gradient checks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Dims, ToyModel, Weights};
use super::universe::FactUniverse;
use crate::adapter::LowRankUpdate;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            embed_dim: 32,
            hidden_dim: 64,
            lr: 0.03,
            epochs: 2,
            samples_per_epoch: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-3,
            epochs: 10,
            lora_rank: 4,
            lora_alpha: 8.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("must be finite and non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.lora_rank == 0 {
            return Err(Error::param("lora_rank", "must be at least 1"));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::param("lora_alpha", "must be positive"));
        }
        Ok(())
    }
}

/// How an example's training material is assembled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialConfig {
    /// Inclusive range for repetitions of the target fact.
    pub min_presentations: usize,
    pub max_presentations: usize,
    /// Inclusive range for popularity-sampled context facts.
    pub min_context: usize,
    pub max_context: usize,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        MaterialConfig {
            min_presentations: 2,
            max_presentations: 8,
            min_context: 0,
            max_context: 16,
        }
    }
}

/// Training sequence for one example: `(key, value)` presentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub target_key: usize,
    pub items: Vec<(usize, usize)>,
}

impl Material {
    pub fn new(target_key: usize, items: Vec<(usize, usize)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::param("material", "empty training sequence"));
        }
        Ok(Material { target_key, items })
    }

    /// Number of presentations in the sequence (the length analog).
    pub fn context_length(&self) -> usize {
        self.items.len()
    }

    pub fn target_presentations(&self) -> usize {
        self.items.iter().filter(|(k, _)| *k == self.target_key).count()
    }
}

pub fn make_material(universe: &FactUniverse, key: usize, cfg: &MaterialConfig, seed: u64) -> Result<Material> {
    if cfg.min_presentations == 0 || cfg.min_presentations > cfg.max_presentations || cfg.min_context > cfg.max_context {
        return Err(Error::param("material", "ranges must be nonempty with at least one presentation"));
    }
    let mut rng = rng_from(derive_seed(seed, "material", &[key as u64]));
    let reps = rng.random_range(cfg.min_presentations..=cfg.max_presentations);
    let ctx = rng.random_range(cfg.min_context..=cfg.max_context);
    let mut items = vec![(key, universe.gold[key]); reps];
    let dist = universe.sampler();
    while items.len() < reps + ctx {
        let k = rand::distr::Distribution::sample(&dist, &mut rng);
        if k != key {
            items.push((k, universe.gold[k]));
        }
    }
    items.shuffle(&mut rng);
    Material::new(key, items)
}

/// SGD on cross-entropy over facts drawn by popularity. Zero epochs returns
/// the initialization.
pub fn pretrain_base(universe: &FactUniverse, cfg: &PretrainConfig) -> Result<ToyModel> {
    if !(cfg.lr > 0.0) || cfg.embed_dim == 0 || cfg.hidden_dim == 0 {
        return Err(Error::param("pretrain", "lr, embed_dim and hidden_dim must be positive"));
    }
    let dims = Dims { keys: universe.num_keys, d: cfg.embed_dim, h: cfg.hidden_dim, values: universe.num_values };
    let init = ToyModel::init(dims, cfg.seed);
    if cfg.epochs == 0 {
        return Ok(init);
    }
    let mut w = Weights::from_model(&init);
    let mut rng = rng_from(derive_seed(cfg.seed, "pretrain", &[]));
    let d = dims.d;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for key in universe.sample_keys(&mut rng, cfg.samples_per_epoch) {
            let up = w.up.clone();
            let pass = w.forward(key, &up);
            let g = w.backward(&pass, universe.gold[key], &up);
            total += g.loss;
            axpy(&mut w.emb[key * d..(key + 1) * d], -cfg.lr, &g.emb_row);
            axpy(&mut w.up, -cfg.lr, &g.up);
            axpy(&mut w.down, -cfg.lr, &g.down);
        }
        let mean = total / cfg.samples_per_epoch.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("pretraining loss became {mean} in epoch {epoch}")));
        }
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
    }
    w.to_model()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Adam moment buffers for one tensor.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - Self::B1.powi(t);
        let c2 = 1.0 - Self::B2.powi(t);
        for i in 0..param.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            param[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub update: T,
    /// Mean per-step loss in each epoch.
    pub epoch_losses: Vec<f64>,
}

/// LoRA factors for the `d×h` matrix `up_proj`.
struct Lora {
    d: usize,
    h: usize,
    r: usize,
    scale: f64,
    /// `r×h`
    a: Vec<f64>,
    /// `d×r`
    b: Vec<f64>,
}

impl Lora {
    fn delta(&self) -> Vec<f64> {
        let (d, h, r) = (self.d, self.h, self.r);
        let mut out = vec![0.0; d * h];
        for i in 0..d {
            for k in 0..r {
                let bik = self.b[i * r + k] * self.scale;
                if bik == 0.0 {
                    continue;
                }
                for (o, a) in out[i * h..(i + 1) * h].iter_mut().zip(&self.a[k * h..(k + 1) * h]) {
                    *o += bik * a;
                }
            }
        }
        out
    }

    /// `(dA, dB)` from the gradient w.r.t. the effective delta.
    fn grads(&self, dw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h, r) = (self.d, self.h, self.r);
        let mut da = vec![0.0; r * h];
        let mut db = vec![0.0; d * r];
        for i in 0..d {
            let row = &dw[i * h..(i + 1) * h];
            for k in 0..r {
                let arow = &self.a[k * h..(k + 1) * h];
                db[i * r + k] = self.scale * row.iter().zip(arow).map(|(g, a)| g * a).sum::<f64>();
                let bik = self.scale * self.b[i * r + k];
                for (dak, g) in da[k * h..(k + 1) * h].iter_mut().zip(row) {
                    *dak += bik * g;
                }
            }
        }
        (da, db)
    }

    fn into_update(self) -> Result<LowRankUpdate> {
        LowRankUpdate::new(
            Matrix::from_f64(self.r, self.h, &self.a)?,
            Matrix::from_f64(self.d, self.r, &self.b)?,
            (self.scale * self.r as f64) as f32,
        )
    }
}

fn init_lora(dims: Dims, cfg: &TrainConfig, seed: u64) -> Lora {
    let mut rng = rng_from(derive_seed(seed, "lora-init", &[]));
    let bound = 1.0 / (dims.h as f64).sqrt();
    Lora {
        d: dims.d,
        h: dims.h,
        r: cfg.lora_rank,
        scale: cfg.lora_alpha / cfg.lora_rank as f64,
        a: (0..cfg.lora_rank * dims.h).map(|_| rng.random_range(-bound..bound)).collect(),
        b: vec![0.0; dims.d * cfg.lora_rank],
    }
}

/// Trains LoRA factors on `up_proj` with the base frozen; one Adam step per
/// presentation, presentations shuffled each epoch.
pub fn train_lora(base: &ToyModel, material: &Material, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome<LowRankUpdate>> {
    cfg.validate()?;
    let w = Weights::from_model(base);
    check_material(&w, material)?;
    let mut lora = init_lora(w.dims, cfg, seed);
    let (mut opt_a, mut opt_b) = (Adam::new(lora.a.len()), Adam::new(lora.b.len()));
    let mut rng = rng_from(derive_seed(seed, "lora-order", &[]));
    let mut order = material.items.clone();
    let mut t = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(key, value) in &order {
            let up = w.effective_up(Some(&lora.delta()))?;
            let pass = w.forward(key, &up);
            let g = w.backward(&pass, value, &up);
            total += g.loss;
            let (da, db) = lora.grads(&g.up);
            t += 1;
            opt_a.step(&mut lora.a, &da, cfg.lr, t);
            opt_b.step(&mut lora.b, &db, cfg.lr, t);
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("adapter loss became {mean} in epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { update: lora.into_update()?, epoch_losses })
}

/// Same optimizer and schedule as [`train_lora`], on an unconstrained dense delta.
pub fn train_dense(base: &ToyModel, material: &Material, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome<Matrix>> {
    cfg.validate()?;
    let w = Weights::from_model(base);
    check_material(&w, material)?;
    let mut delta = vec![0.0; w.up.len()];
    let mut opt = Adam::new(delta.len());
    let mut rng = rng_from(derive_seed(seed, "lora-order", &[]));
    let mut order = material.items.clone();
    let mut t = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(key, value) in &order {
            let up = w.effective_up(Some(&delta))?;
            let pass = w.forward(key, &up);
            let g = w.backward(&pass, value, &up);
            total += g.loss;
            t += 1;
            opt.step(&mut delta, &g.up, cfg.lr, t);
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("dense loss became {mean} in epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    let (d, h) = (w.dims.d, w.dims.h);
    Ok(TrainOutcome { update: Matrix::from_f64(d, h, &delta)?, epoch_losses })
}

fn check_material(w: &Weights, material: &Material) -> Result<()> {
    for &(k, v) in &material.items {
        w.check_key(k)?;
        if v >= w.dims.values {
            return Err(Error::param("material", format!("value {v} out of range")));
        }
    }
    Ok(())
}

/// Mean cross-entropy of the material under `base + delta`.
pub fn material_loss(base: &ToyModel, material: &Material, delta: Option<&Matrix>) -> Result<f64> {
    let w = Weights::from_model(base);
    check_material(&w, material)?;
    let up = w.effective_up(delta.map(Matrix::to_f64).as_deref())?;
    let total: f64 = material
        .items
        .iter()
        .map(|&(k, v)| -w.forward(k, &up).p[v].ln())
        .sum();
    Ok(total / material.items.len() as f64)
}

/// `exp(mean −ln p)` over per-element probabilities; `+inf` if any is zero.
pub fn perplexity_from_probs(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::param("sequence", "perplexity of an empty sequence"));
    }
    if probs.contains(&0.0) {
        return Ok(f64::INFINITY);
    }
    let nll: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / probs.len() as f64;
    Ok(nll.exp())
}

/// Perplexity of a `(key, value)` sequence under the model.
pub fn perplexity(model: &ToyModel, items: &[(usize, usize)], delta: Option<&Matrix>) -> Result<f64> {
    let w = Weights::from_model(model);
    let up = w.effective_up(delta.map(Matrix::to_f64).as_deref())?;
    let probs = items
        .iter()
        .map(|&(k, v)| {
            w.check_key(k)?;
            Ok(w.forward(k, &up).p[v])
        })
        .collect::<Result<Vec<_>>>()?;
    perplexity_from_probs(&probs)
}

/// Relative error `‖analytic − numeric‖ / ‖numeric‖` per trained tensor of
/// the mean cross-entropy over a small random universe. Numeric gradients
/// are central differences in f64.
pub fn gradient_check(dims: Dims, rank: usize, seed: u64) -> Result<BTreeMap<String, f64>> {
    let mut rng = rng_from(derive_seed(seed, "gradcheck", &[]));
    let model = ToyModel::init(dims, seed);
    let w = Weights::from_model(&model);
    let targets: Vec<usize> = (0..dims.keys).map(|_| rng.random_range(0..dims.values)).collect();
    let cfg = TrainConfig { lora_rank: rank, lora_alpha: 2.0 * rank as f64, ..Default::default() };
    let mut lora = init_lora(dims, &cfg, seed);
    lora.b.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));

    let loss = |w: &Weights, lora: &Lora| -> f64 {
        let up = w.effective_up(Some(&lora.delta())).expect("shape");
        targets
            .iter()
            .enumerate()
            .map(|(k, &y)| -w.forward(k, &up).p[y].ln())
            .sum::<f64>()
            / targets.len() as f64
    };

    let n = targets.len() as f64;
    let up = w.effective_up(Some(&lora.delta()))?;
    let (d, h) = (dims.d, dims.h);
    let mut g_emb = vec![0.0; w.emb.len()];
    let mut g_up = vec![0.0; w.up.len()];
    let mut g_down = vec![0.0; w.down.len()];
    for (k, &y) in targets.iter().enumerate() {
        let g = w.backward(&w.forward(k, &up), y, &up);
        axpy(&mut g_emb[k * d..(k + 1) * d], 1.0 / n, &g.emb_row);
        axpy(&mut g_up, 1.0 / n, &g.up);
        axpy(&mut g_down, 1.0 / n, &g.down);
    }
    let (g_a, g_b) = lora.grads(&g_up);
    debug_assert_eq!(g_up.len(), d * h);

    const EPS: f64 = 1e-6;
    let numeric = |which: Tensor| -> Vec<f64> {
        let len = tensor_mut(&mut w.clone(), &mut clone_lora(&lora), which).len();
        (0..len)
            .map(|i| {
                let (mut wp, mut lp) = (w.clone(), clone_lora(&lora));
                tensor_mut(&mut wp, &mut lp, which)[i] += EPS;
                let plus = loss(&wp, &lp);
                let (mut wm, mut lm) = (w.clone(), clone_lora(&lora));
                tensor_mut(&mut wm, &mut lm, which)[i] -= EPS;
                (plus - loss(&wm, &lm)) / (2.0 * EPS)
            })
            .collect()
    };
    let checks = [
        ("embedding", &g_emb, numeric(Tensor::Emb)),
        ("up_proj", &g_up, numeric(Tensor::Up)),
        ("down_proj", &g_down, numeric(Tensor::Down)),
        ("lora_a", &g_a, numeric(Tensor::A)),
        ("lora_b", &g_b, numeric(Tensor::B)),
    ];
    Ok(checks
        .into_iter()
        .map(|(name, analytic, num)| {
            let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
            (name.to_string(), diff / scale)
        })
        .collect())
}

#[derive(Clone, Copy)]
enum Tensor {
    Emb,
    Up,
    Down,
    A,
    B,
}

fn tensor_mut<'a>(w: &'a mut Weights, l: &'a mut Lora, which: Tensor) -> &'a mut Vec<f64> {
    match which {
        Tensor::Emb => &mut w.emb,
        Tensor::Up => &mut w.up,
        Tensor::Down => &mut w.down,
        Tensor::A => &mut l.a,
        Tensor::B => &mut l.b,
    }
}

fn clone_lora(l: &Lora) -> Lora {
    Lora { d: l.d, h: l.h, r: l.r, scale: l.scale, a: l.a.clone(), b: l.b.clone() }
}

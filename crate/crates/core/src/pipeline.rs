//! Config-driven stages behind the CLI. Every stage writes its artifacts
//! under `out_dir` and records them in `manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{load_adapter, save_adapter, AdapterUpdate};
use crate::analysis::{aggregate_bins, analysis_rows, correlation_table, relative_to_first_bin, AnalysisRow, Metric};
use crate::error::{Error, Result};
use crate::linalg::{mean, spearman};
use crate::merge::{merge, MergeAlgorithm, MergeSpec};
use crate::mergeability::{
    estimate_pool, lattice_edges, locality_experiment, read_reports_jsonl, summarize, write_reports_jsonl, EstimatorConfig, LocalityConfig,
    LocalityResult, PoolSummary, ScoreReport,
};
use crate::report;
use crate::toy::tasks::{compare_weighted_vs_mean, select_graded_tasks, select_tasks, train_tasks, MergeComparison, TaskSuiteConfig};
use crate::toy::{build_pool, load_pool, pretrain_base, save_pool, FactUniverse, Pool, PoolConfig, PoolCounters, PretrainConfig, ToyEvaluator, ToyModel, UniverseConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// `N` values; the first is the reference for consistency.
    pub trials: Vec<usize>,
    /// `M` values; the first is the reference for consistency.
    pub partners: Vec<usize>,
    /// LoRA ranks; each rebuilds the pool.
    pub ranks: Vec<usize>,
    /// Fine-tuned accuracy thresholds admitting task-level adapters.
    pub thresholds: Vec<f64>,
    /// Size of the task-level pool used by the threshold sweep.
    pub tasks: usize,
    /// `M` for the task-level pool.
    pub task_partners: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            trials: vec![5, 10],
            partners: vec![50, 25],
            ranks: vec![4, 8],
            thresholds: vec![0.99, 0.75, 0.5, 0.25, 0.0],
            tasks: 24,
            task_partners: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces every sub-config seed.
    pub seed: Option<u64>,
    pub universe: UniverseConfig,
    pub pretrain: PretrainConfig,
    pub pool: PoolConfig,
    pub estimator: EstimatorConfig,
    /// Specs compared by `score`; the first one feeds `analyze`. Empty means
    /// the estimator's spec.
    pub merge_specs: Vec<MergeSpec>,
    /// Score bins for analysis; `None` means one bin per lattice point `k/N`.
    pub bin_edges: Option<Vec<f64>>,
    pub out_dir: PathBuf,
    pub locality: LocalityConfig,
    pub tasks: TaskSuiteConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            universe: UniverseConfig::default(),
            pretrain: PretrainConfig::default(),
            pool: PoolConfig::default(),
            estimator: EstimatorConfig::default(),
            merge_specs: vec![MergeSpec::knots(1.0, 1.0), MergeSpec::ties(1.0, 1.0), MergeSpec::mean()],
            bin_edges: None,
            out_dir: PathBuf::from("out"),
            locality: LocalityConfig::default(),
            tasks: TaskSuiteConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub algorithm: Option<MergeAlgorithm>,
    pub density: Option<f64>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if let Some(algo) = o.algorithm {
            self.estimator.merge_spec = MergeSpec::new(algo);
            self.locality.merge_spec = MergeSpec::new(algo);
            self.merge_specs = vec![MergeSpec::new(algo)];
        }
        if let Some(tau) = o.tau {
            self.tasks.tau = tau;
        }
        let specs = std::iter::once(&mut self.estimator.merge_spec)
            .chain(std::iter::once(&mut self.locality.merge_spec))
            .chain(self.merge_specs.iter_mut());
        for spec in specs {
            if let Some(d) = o.density {
                spec.density = d;
            }
            if let Some(l) = o.lambda {
                spec.lambda = l;
            }
            if let Some(t) = o.tau {
                spec.tau = t;
            }
        }
        if let Some(seed) = self.seed {
            self.universe.seed = seed;
            self.pretrain.seed = seed;
            self.pool.train.seed = seed;
            self.estimator.seed = seed;
            self.locality.seed = seed;
            self.tasks.seed = seed;
            self.tasks.train.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        self.pool.train.validate()?;
        self.tasks.train.validate()?;
        self.estimator.validate()?;
        for spec in self.specs() {
            spec.validate()?;
        }
        self.edges()?;
        Ok(())
    }

    pub fn specs(&self) -> Vec<MergeSpec> {
        if self.merge_specs.is_empty() {
            vec![self.estimator.merge_spec.clone()]
        } else {
            self.merge_specs.clone()
        }
    }

    pub fn edges(&self) -> Result<Vec<f64>> {
        let edges = self.bin_edges.clone().unwrap_or_else(|| lattice_edges(self.estimator.trials));
        crate::mergeability::bin_scores(&[], &edges)?;
        Ok(edges)
    }

    fn estimator_for(&self, spec: &MergeSpec) -> EstimatorConfig {
        EstimatorConfig { merge_spec: spec.clone(), ..self.estimator.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
    pub counters: Option<PoolCounters>,
}

/// Tracks the artifacts one stage writes.
struct Stage<'a> {
    name: &'static str,
    cfg: &'a RunConfig,
    started: Instant,
    record: StageRecord,
}

impl<'a> Stage<'a> {
    fn start(name: &'static str, cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        ensure_writable(&cfg.out_dir)?;
        log::info!("stage {name}");
        Ok(Stage { name, cfg, started: Instant::now(), record: StageRecord::default() })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.cfg.out_dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    /// Returns the absolute path and records `rel` as an artifact.
    fn artifact(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        if !self.record.artifacts.iter().any(|a| a == rel) {
            self.record.artifacts.push(rel.to_string());
        }
        Ok(p)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.artifact(rel)?;
        report::write_text(p, text)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.text(rel, &text)
    }

    fn note(&mut self, note: String) {
        log::warn!("{note}");
        self.record.notes.push(note);
    }

    fn finish(mut self, counters: Option<PoolCounters>) -> Result<()> {
        self.record.seconds = self.started.elapsed().as_secs_f64();
        let path = self.cfg.out_dir.join(MANIFEST);
        let mut manifest = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .unwrap_or_else(|| RunManifest { version: VERSION.into(), config: self.cfg.clone(), stages: BTreeMap::new(), counters: None });
        manifest.version = VERSION.into();
        manifest.config = self.cfg.clone();
        if counters.is_some() {
            manifest.counters = counters;
        }
        manifest.stages.insert(self.name.to_string(), self.record);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Creates `dir` and proves it accepts writes.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

const BASE_FILE: &str = "base.mrga";
const POOL_DIR: &str = "pool";

/// Base model, universe and pool as persisted by `build-pool`.
pub struct Workspace {
    pub universe: FactUniverse,
    pub base: ToyModel,
    pub pool: Pool,
}

impl Workspace {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let universe = FactUniverse::generate(&cfg.universe)?;
        let base = ToyModel::from_adapter(&load_adapter(cfg.out_dir.join(BASE_FILE))?)?;
        let pool = load_pool(cfg.out_dir.join(POOL_DIR))?;
        if pool.base_id != base.fingerprint() {
            return Err(Error::Pipeline(format!(
                "pool was built on `{}` but the stored base is `{}`",
                pool.base_id,
                base.fingerprint()
            )));
        }
        if universe.num_keys != base.dims().keys {
            return Err(Error::Pipeline("universe config does not match the stored base model".into()));
        }
        Ok(Workspace { universe, base, pool })
    }

    pub fn evaluator(&self) -> ToyEvaluator<'_> {
        ToyEvaluator::for_pool(&self.base, &self.universe, &self.pool)
    }
}

/// Pretrains the base model, builds the filtered pool and persists both.
pub fn cmd_build_pool(cfg: &RunConfig) -> Result<Pool> {
    let mut stage = Stage::start("build-pool", cfg)?;
    let universe = FactUniverse::generate(&cfg.universe)?;
    let base = pretrain_base(&universe, &cfg.pretrain)?;
    let pool = build_pool(&base, &universe, &cfg.pool)?;
    save_adapter(&base.to_adapter(), stage.artifact(BASE_FILE)?)?;
    save_pool(stage.path(POOL_DIR)?, &pool)?;
    for rel in ["pool/pool.jsonl", "pool/pool_summary.json"] {
        stage.artifact(rel)?;
    }
    let counters = pool.counters.clone();
    stage.finish(Some(counters))?;
    Ok(pool)
}

fn score_dir(spec: &MergeSpec) -> String {
    format!("score/{}", spec.label())
}

/// Merge specs whose mass at `S = 1` should be non-increasing in this order.
const TOP_BIN_ORDER: [MergeAlgorithm; 3] = [MergeAlgorithm::Mean, MergeAlgorithm::Ties, MergeAlgorithm::Knots];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAnnotations {
    /// Spec label → number of updates at `S = 1`.
    pub top_bin_counts: BTreeMap<String, usize>,
    pub expected_order: String,
    /// `None` unless mean, ties and knots were all scored.
    pub order_holds: Option<bool>,
}

pub struct ScoredSpec {
    pub spec: MergeSpec,
    pub reports: Vec<ScoreReport>,
    pub summary: PoolSummary,
}

/// Estimates `S` for every pool member under each configured spec.
pub fn cmd_score(cfg: &RunConfig) -> Result<Vec<ScoredSpec>> {
    let mut stage = Stage::start("score", cfg)?;
    let ws = Workspace::load(cfg)?;
    let eval = ws.evaluator();
    let mut out = Vec::new();
    for spec in cfg.specs() {
        let est = cfg.estimator_for(&spec);
        let reports = estimate_pool(&ws.pool.adapters, &eval, &est)?;
        let summary = summarize(&reports, &est)?;
        let dir = score_dir(&spec);
        write_reports_jsonl(stage.artifact(&format!("{dir}/reports.jsonl"))?, &reports)?;
        stage.json(&format!("{dir}/summary.json"), &summary)?;
        report::write_histogram_csv(stage.artifact(&format!("{dir}/histogram.csv"))?, &summary)?;
        let title = format!("Mergeability scores ({}, N={}, M={})", spec.label(), summary.trials, summary.partners);
        stage.text(&format!("{dir}/histogram.svg"), &report::histogram_svg(&title, &summary))?;
        if let Some(chi) = &summary.chi_square {
            log::info!("{}: p = {:.3}, chi-square p-value = {:.3e}", spec.label(), summary.success_rate, chi.p_value);
        }
        out.push(ScoredSpec { spec, reports, summary });
    }

    let top_bin_counts: BTreeMap<String, usize> = out
        .iter()
        .map(|s| (s.spec.label(), s.reports.iter().filter(|r| r.score == 1.0).count()))
        .collect();
    let plain: Vec<Option<usize>> = TOP_BIN_ORDER
        .iter()
        .map(|algo| out.iter().find(|s| s.spec.label() == algo.as_str()).map(|s| top_bin_counts[&s.spec.label()]))
        .collect();
    let order_holds = plain
        .iter()
        .copied()
        .collect::<Option<Vec<usize>>>()
        .map(|c| c.windows(2).all(|w| w[0] >= w[1]));
    if order_holds == Some(false) {
        stage.note(format!("S = 1 counts do not follow mean >= ties >= knots: {top_bin_counts:?}"));
    }
    stage.json(
        "score/annotations.json",
        &ScoreAnnotations { top_bin_counts, expected_order: "mean >= ties >= knots".into(), order_holds },
    )?;
    stage.finish(None)?;
    Ok(out)
}

fn primary_reports(cfg: &RunConfig) -> Result<Vec<ScoreReport>> {
    let spec = &cfg.specs()[0];
    let path = cfg.out_dir.join(score_dir(spec)).join("reports.jsonl");
    if !path.exists() {
        return Err(Error::Pipeline(format!("no reports at {}; run `score` first", path.display())));
    }
    read_reports_jsonl(path)
}

/// Reorders reports to follow the pool.
fn align_reports(pool: &Pool, reports: Vec<ScoreReport>) -> Result<Vec<ScoreReport>> {
    let mut by_id: HashMap<String, ScoreReport> = reports.into_iter().map(|r| (r.target_id.clone(), r)).collect();
    pool.adapters
        .iter()
        .map(|a| by_id.remove(&a.id).ok_or_else(|| Error::Pipeline(format!("no report for `{}`", a.id))))
        .collect()
}

pub struct AnalysisOutput {
    pub rows: Vec<AnalysisRow>,
    pub correlations: Vec<crate::analysis::Correlation>,
    pub locality: Option<LocalityResult>,
}

/// Cause metrics, binned summaries, correlations and the locality table.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalysisOutput> {
    let mut stage = Stage::start("analyze", cfg)?;
    let ws = Workspace::load(cfg)?;
    let reports = align_reports(&ws.pool, primary_reports(cfg)?)?;
    let rows = analysis_rows(&ws.pool.records, &ws.pool.adapters, &reports)?;
    report::write_csv(stage.artifact("analysis/rows.csv")?, &rows)?;

    let edges = cfg.edges()?;
    let bins = aggregate_bins(&rows, &edges, &Metric::CAUSES)?;
    report::write_bins_csv(stage.artifact("analysis/bins.csv")?, &bins)?;
    match relative_to_first_bin(&bins) {
        Ok(rel) => {
            for m in &rel.flagged {
                stage.note(format!("{m}: reference bin mean is near zero; relative change not plotted"));
            }
            report::write_bins_csv(stage.artifact("analysis/relative_bins.csv")?, &rel.bins)?;
            stage.text("analysis/relative_change.svg", &report::relative_change_svg(&rel))?;
        }
        Err(e) => stage.note(format!("relative change skipped: {e}")),
    }
    let correlations = correlation_table(&rows, &Metric::CAUSES);
    report::write_csv(stage.artifact("analysis/correlations.csv")?, &correlations)?;

    let locality = if reports.iter().any(|r| r.score == 1.0) {
        match locality_experiment(&ws.pool.adapters, &reports, &ws.evaluator(), &edges, &cfg.locality) {
            Ok(l) => {
                write_locality(&mut stage, &l)?;
                Some(l)
            }
            Err(e) => {
                stage.note(format!("locality experiment skipped: {e}"));
                None
            }
        }
    } else {
        stage.note("locality experiment skipped: no update has S = 1.0".into());
        None
    };
    stage.finish(None)?;
    Ok(AnalysisOutput { rows, correlations, locality })
}

fn write_locality(stage: &mut Stage<'_>, l: &LocalityResult) -> Result<()> {
    report::write_csv(stage.artifact("locality/locality.csv")?, &l.rows)?;
    stage.json("locality/locality.json", l)?;
    stage.text("locality/locality.svg", &report::locality_svg(l))
}

/// Runs only the locality experiment; any deficiency is an error.
pub fn cmd_locality(cfg: &RunConfig) -> Result<LocalityResult> {
    let mut stage = Stage::start("locality", cfg)?;
    let ws = Workspace::load(cfg)?;
    let reports = align_reports(&ws.pool, primary_reports(cfg)?)?;
    let l = locality_experiment(&ws.pool.adapters, &reports, &ws.evaluator(), &cfg.edges()?, &cfg.locality)?;
    write_locality(&mut stage, &l)?;
    stage.finish(None)?;
    Ok(l)
}

/// Merges adapter files into `output`. `accuracies` maps task ids to base
/// accuracy and is required by the weighted spec.
pub fn cmd_merge(cfg: &RunConfig, inputs: &[PathBuf], accuracies: Option<&Path>, output: &Path) -> Result<AdapterUpdate> {
    if inputs.is_empty() {
        return Err(Error::param("inputs", "need at least one adapter file"));
    }
    let updates = inputs.iter().map(load_adapter).collect::<Result<Vec<_>>>()?;
    let mut spec = cfg.estimator.merge_spec.clone();
    if let Some(path) = accuracies {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        spec.base_accuracies = Some(serde_json::from_str(&text)?);
    }
    if spec.algorithm == MergeAlgorithm::Weighted && spec.base_accuracies.is_none() {
        return Err(Error::param("accuracies", "weighted merging needs a task-id to accuracy map"));
    }
    let refs: Vec<&AdapterUpdate> = updates.iter().collect();
    let merged = merge(&refs, &spec)?.into_inner();
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_adapter(&merged, output)?;
    Ok(merged)
}

/// Trains the low/high task suite and compares weighted with mean merging.
pub fn cmd_compare_tasks(cfg: &RunConfig) -> Result<MergeComparison> {
    let mut stage = Stage::start("tasks", cfg)?;
    let ws = Workspace::load(cfg)?;
    let tasks = select_tasks(&ws.base, &ws.universe, &cfg.tasks)?;
    let trained = train_tasks(&ws.base, &ws.universe, &tasks, &cfg.tasks)?;
    for t in &trained {
        save_adapter(&t.adapter, stage.artifact(&format!("tasks/adapters/{}.mrga", t.task.id))?)?;
    }
    let accs: BTreeMap<&str, f64> = trained.iter().map(|t| (t.task.id.as_str(), t.base_accuracy)).collect();
    stage.json("tasks/base_accuracies.json", &accs)?;
    let cmp = compare_weighted_vs_mean(&ws.base, &ws.universe, &trained, cfg.tasks.tau)?;
    report::write_retention_csv(stage.artifact("tasks/retention.csv")?, &cmp)?;
    stage.json("tasks/comparison.json", &cmp)?;
    stage.text("tasks/retention.svg", &report::retention_svg(&cmp))?;
    stage.finish(None)?;
    Ok(cmp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmRow {
    pub trials: usize,
    pub partners: usize,
    pub success_rate: f64,
    pub mean_score: f64,
    pub chi_square_p: Option<f64>,
    /// Spearman against the first `(N, M)` setting.
    pub consistency: Option<f64>,
    pub spearman_delta_base: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub retained: usize,
    pub success_rate: f64,
    pub chi_square_p: Option<f64>,
    pub spearman_delta_base: Option<f64>,
    pub spearman_frobenius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub tasks: usize,
    pub mean_score: Option<f64>,
    /// Spearman of task-level `S` with base task accuracy.
    pub spearman_base_accuracy: Option<f64>,
}

fn spearman_with(reports: &[ScoreReport], rows: &[AnalysisRow], metric: Metric) -> Option<f64> {
    let s: Vec<f64> = reports.iter().map(|r| r.score).collect();
    let m: Vec<f64> = rows.iter().filter_map(|r| metric.value(r)).collect();
    spearman(&s, &m).ok()
}

/// Parameter sweeps over `(N, M)`, LoRA rank and the task admission threshold.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let mut stage = Stage::start("sweep", cfg)?;
    let ws = Workspace::load(cfg)?;
    let eval = ws.evaluator();

    let mut nm = Vec::new();
    let mut reference: Option<Vec<f64>> = None;
    for &n in &cfg.sweep.trials {
        for &m in &cfg.sweep.partners {
            let est = EstimatorConfig { trials: n, partners: m, ..cfg.estimator.clone() };
            let reports = estimate_pool(&ws.pool.adapters, &eval, &est)?;
            let summary = summarize(&reports, &est)?;
            let rows = analysis_rows(&ws.pool.records, &ws.pool.adapters, &reports)?;
            let scores: Vec<f64> = reports.iter().map(|r| r.score).collect();
            let consistency = reference.as_ref().and_then(|r| spearman(r, &scores).ok());
            reference.get_or_insert(scores);
            nm.push(NmRow {
                trials: n,
                partners: summary.partners,
                success_rate: summary.success_rate,
                mean_score: summary.mean_score,
                chi_square_p: summary.chi_square.map(|c| c.p_value),
                consistency,
                spearman_delta_base: spearman_with(&reports, &rows, Metric::DeltaBase),
            });
        }
    }
    report::write_csv(stage.artifact("sweep/trials_partners.csv")?, &nm)?;

    let mut ranks = Vec::new();
    for &rank in &cfg.sweep.ranks {
        let mut pool_cfg = cfg.pool.clone();
        pool_cfg.train.lora_alpha *= rank as f64 / pool_cfg.train.lora_rank as f64;
        pool_cfg.train.lora_rank = rank;
        let pool = match build_pool(&ws.base, &ws.universe, &pool_cfg) {
            Ok(p) => p,
            Err(e) => {
                stage.note(format!("rank {rank}: {e}"));
                continue;
            }
        };
        let eval = ToyEvaluator::for_pool(&ws.base, &ws.universe, &pool);
        let reports = estimate_pool(&pool.adapters, &eval, &cfg.estimator)?;
        let summary = summarize(&reports, &cfg.estimator)?;
        let rows = analysis_rows(&pool.records, &pool.adapters, &reports)?;
        ranks.push(RankRow {
            rank,
            retained: pool.len(),
            success_rate: summary.success_rate,
            chi_square_p: summary.chi_square.map(|c| c.p_value),
            spearman_delta_base: spearman_with(&reports, &rows, Metric::DeltaBase),
            spearman_frobenius: spearman_with(&reports, &rows, Metric::Frobenius),
        });
    }
    report::write_csv(stage.artifact("sweep/rank.csv")?, &ranks)?;

    let suite = TaskSuiteConfig { ceiling: 0.0, ..cfg.tasks.clone() };
    let tasks = select_graded_tasks(&ws.base, &ws.universe, &suite, cfg.sweep.tasks)?;
    let trained = train_tasks(&ws.base, &ws.universe, &tasks, &suite)?;
    let mut thresholds = Vec::new();
    for &threshold in &cfg.sweep.thresholds {
        let admitted: Vec<_> = trained.iter().filter(|t| t.finetuned_accuracy >= threshold).collect();
        if admitted.len() < 3 {
            stage.note(format!("threshold {threshold}: only {} tasks admitted", admitted.len()));
            thresholds.push(ThresholdRow { threshold, tasks: admitted.len(), mean_score: None, spearman_base_accuracy: None });
            continue;
        }
        let adapters: Vec<AdapterUpdate> = admitted.iter().map(|t| t.adapter.clone()).collect();
        let keys = admitted.iter().map(|t| (t.task.id.clone(), t.task.keys.clone())).collect();
        let eval = ToyEvaluator::new(&ws.base, &ws.universe, keys);
        let est = EstimatorConfig { partners: cfg.sweep.task_partners.min(adapters.len() - 1), ..cfg.estimator.clone() };
        let reports = estimate_pool(&adapters, &eval, &est)?;
        let scores: Vec<f64> = reports.iter().map(|r| r.score).collect();
        let accs: Vec<f64> = admitted.iter().map(|t| t.base_accuracy).collect();
        thresholds.push(ThresholdRow {
            threshold,
            tasks: admitted.len(),
            mean_score: Some(mean(&scores)),
            spearman_base_accuracy: spearman(&scores, &accs).ok(),
        });
    }
    report::write_csv(stage.artifact("sweep/threshold.csv")?, &thresholds)?;
    stage.finish(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            universe: UniverseConfig { num_keys: 60, num_values: 16, seed: 5, ..Default::default() },
            pretrain: PretrainConfig { embed_dim: 8, hidden_dim: 16, epochs: 2, samples_per_epoch: 300, ..Default::default() },
            out_dir: out.to_path_buf(),
            merge_specs: vec![MergeSpec::mean(), MergeSpec::ties(1.0, 1.0)],
            ..Default::default()
        };
        cfg.pool.train.lr = 2e-2;
        cfg.pool.train.epochs = 20;
        cfg.estimator.partners = 5;
        cfg.tasks.keys_per_task = 3;
        cfg
    }

    #[test]
    fn config_round_trip_and_overrides() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"estimator": {"trials": 3}}"#).unwrap();
        assert_eq!(partial.estimator.trials, 3);
        assert_eq!(partial.estimator.partners, 50);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trails": 3}"#).is_err());

        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { seed: Some(9), algorithm: Some(MergeAlgorithm::Ties), density: Some(0.5), tau: Some(2.0), ..Default::default() });
        assert_eq!(cfg.universe.seed, 9);
        assert_eq!(cfg.estimator.seed, 9);
        assert_eq!(cfg.specs(), vec![MergeSpec { tau: 2.0, ..MergeSpec::ties(0.5, 1.0) }]);
        assert_eq!(cfg.tasks.tau, 2.0);
    }

    #[test]
    fn unwritable_output_fails_before_training() {
        let cfg = RunConfig { out_dir: PathBuf::from("/proc/no-such-dir/out"), ..Default::default() };
        let err = cmd_build_pool(&cfg).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn stages_chain() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let pool = cmd_build_pool(&cfg).unwrap();
        assert!(!pool.is_empty());
        let index = std::fs::read(dir.path().join("pool/pool.jsonl")).unwrap();

        let scored = cmd_score(&cfg).unwrap();
        assert_eq!(scored.len(), 2);
        let out = cmd_analyze(&cfg).unwrap();
        assert_eq!(out.rows.len(), pool.len());

        let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert!(manifest.counters.is_some());
        for stage in ["build-pool", "score", "analyze"] {
            for a in &manifest.stages[stage].artifacts {
                assert!(dir.path().join(a).exists(), "{a}");
            }
        }
        let reports = std::fs::read(dir.path().join("score/mean/reports.jsonl")).unwrap();

        cmd_build_pool(&cfg).unwrap();
        cmd_score(&cfg).unwrap();
        assert_eq!(std::fs::read(dir.path().join("pool/pool.jsonl")).unwrap(), index);
        assert_eq!(std::fs::read(dir.path().join("score/mean/reports.jsonl")).unwrap(), reports);
    }

    #[test]
    fn analyze_needs_scores() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        cmd_build_pool(&cfg).unwrap();
        assert!(matches!(cmd_analyze(&cfg), Err(Error::Pipeline(_))));
    }

    #[test]
    fn weighted_file_merge_with_equal_accuracies_equals_mean() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        cmd_build_pool(&cfg).unwrap();
        let inputs: Vec<PathBuf> = std::fs::read_dir(dir.path().join("pool/adapters"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .take(3)
            .collect();
        let updates: Vec<AdapterUpdate> = inputs.iter().map(|p| load_adapter(p).unwrap()).collect();
        let accs: BTreeMap<String, f64> = updates.iter().map(|u| (u.task_id.clone(), 0.4)).collect();
        let acc_path = dir.path().join("accs.json");
        std::fs::write(&acc_path, serde_json::to_string(&accs).unwrap()).unwrap();

        let mut mean_cfg = cfg.clone();
        mean_cfg.estimator.merge_spec = MergeSpec::mean();
        let mean = cmd_merge(&mean_cfg, &inputs, None, &dir.path().join("m/mean.mrga")).unwrap();
        let mut w_cfg = cfg.clone();
        w_cfg.estimator.merge_spec = MergeSpec::new(MergeAlgorithm::Weighted);
        assert!(cmd_merge(&w_cfg, &inputs, None, &dir.path().join("w.mrga")).is_err());
        let weighted = cmd_merge(&w_cfg, &inputs, Some(&acc_path), &dir.path().join("w.mrga")).unwrap();
        assert_eq!(mean.entries, weighted.entries);
        let prov = weighted.provenance.as_ref().unwrap();
        assert_eq!(prov.inputs.len(), 3);
        assert!(prov.weights.is_some());
    }
}

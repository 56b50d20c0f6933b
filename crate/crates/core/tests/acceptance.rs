//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (uncaptured) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mergeability::adapter::{decode_adapter, encode_adapter, load_adapter, save_adapter, AdapterUpdate, LowRankUpdate, ParamUpdate};
use mergeability::analysis::Metric;
use mergeability::eval::{Evaluator, TrialInput};
use mergeability::linalg::{spearman, Matrix};
use mergeability::merge::{merge, MergeSpec};
use mergeability::mergeability::{binomial_baseline, estimate_pool, estimate_score, EstimatorConfig, ScoreReport, TrialRecord};
use mergeability::pipeline::{cmd_analyze, cmd_build_pool, cmd_compare_tasks, cmd_score, AnalysisOutput, RunConfig};
use mergeability::toy::tasks::MergeComparison;
use mergeability::toy::{gradient_check, Dims, PoolCounters};
use mergeability::mergeability::PoolSummary;
use mergeability::Result;

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion:>2} {verdict} {name}: {detail}");
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// One dense and one low-rank parameter of the given shapes.
fn random_adapter(rng: &mut ChaCha8Rng, id: &str, task: &str, rows: usize, cols: usize) -> AdapterUpdate {
    let rank = rng.random_range(1..=rows.min(cols).min(4));
    let lr = LowRankUpdate::new(matrix(rng, rank, cols), matrix(rng, rows, rank), rng.random_range(0.5f32..8.0)).unwrap();
    let entries = BTreeMap::from([
        ("dense".to_string(), ParamUpdate::dense(matrix(rng, rows, cols))),
        ("lora".to_string(), ParamUpdate::LowRank(lr)),
    ]);
    AdapterUpdate::new(id, task, "base", entries).unwrap()
}

fn deltas(u: &AdapterUpdate) -> BTreeMap<String, Vec<f64>> {
    u.entries.iter().map(|(k, v)| (k.clone(), v.effective_delta().to_f64())).collect()
}

fn rel_err(x: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = x.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

fn max_abs(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn worst(a: &AdapterUpdate, b: &AdapterUpdate, f: fn(&[f64], &[f64]) -> f64) -> f64 {
    let (da, db) = (deltas(a), deltas(b));
    assert_eq!(da.keys().collect::<Vec<_>>(), db.keys().collect::<Vec<_>>());
    da.iter().map(|(k, v)| f(v, &db[k])).fold(0.0, f64::max)
}

fn uniform_weighted(pool: &[AdapterUpdate]) -> MergeSpec {
    MergeSpec::weighted(pool.iter().map(|u| (u.task_id.clone(), 0.5)).collect(), 1.0)
}

fn merged(pool: &[&AdapterUpdate], spec: &MergeSpec) -> AdapterUpdate {
    merge(pool, spec).unwrap().into_inner()
}

#[test]
fn c01_merging_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut idem, mut perm_exact, mut perm_approx, mut uniform) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..30 {
        let n = rng.random_range(2..=8);
        let (rows, cols) = if case < 3 { (32, 64) } else { (rng.random_range(1..=32), rng.random_range(1..=64)) };
        let pool: Vec<AdapterUpdate> =
            (0..n).map(|i| random_adapter(&mut rng, &format!("u{i}"), &format!("t{i}"), rows, cols)).collect();

        let copies: Vec<AdapterUpdate> = (0..n)
            .map(|i| AdapterUpdate { id: format!("copy{i}"), ..pool[0].clone() })
            .collect();
        let copy_refs: Vec<&AdapterUpdate> = copies.iter().collect();
        for spec in [MergeSpec::mean(), uniform_weighted(&copies), MergeSpec::ties(1.0, 1.0), MergeSpec::knots(1.0, 1.0)] {
            idem = idem.max(worst(&merged(&copy_refs, &spec), &pool[0], rel_err));
        }

        let accs: BTreeMap<String, f64> = pool.iter().map(|u| (u.task_id.clone(), rng.random_range(0.0..=1.0))).collect();
        let forward: Vec<&AdapterUpdate> = pool.iter().collect();
        let mut shuffled = forward.clone();
        shuffled.reverse();
        shuffled.rotate_left(rng.random_range(0..n));
        for spec in [MergeSpec::mean(), MergeSpec::weighted(accs.clone(), 0.7)] {
            perm_exact = perm_exact.max(worst(&merged(&forward, &spec), &merged(&shuffled, &spec), max_abs));
        }
        for spec in [MergeSpec::ties(1.0, 1.0), MergeSpec::ties(0.4, 1.3), MergeSpec::knots(1.0, 1.0), MergeSpec::knots(0.5, 1.0)] {
            perm_approx = perm_approx.max(worst(&merged(&forward, &spec), &merged(&shuffled, &spec), rel_err));
        }
        uniform = uniform.max(worst(&merged(&forward, &uniform_weighted(&pool)), &merged(&forward, &MergeSpec::mean()), max_abs));
    }

    let scalar = |values: &[f32], density: f64| -> Vec<f64> {
        let pool: Vec<AdapterUpdate> = values
            .chunks(values.len() / if density < 1.0 { 1 } else { 3 })
            .enumerate()
            .map(|(i, v)| {
                AdapterUpdate::single(format!("h{i}"), "t", "base", "w", ParamUpdate::dense(Matrix::new(1, v.len(), v.to_vec()).unwrap()))
                    .unwrap()
            })
            .collect();
        let refs: Vec<&AdapterUpdate> = pool.iter().collect();
        deltas(&merged(&refs, &MergeSpec::ties(density, 1.0)))["w"].clone()
    };
    let elect = scalar(&[0.3, -0.1, 0.4], 1.0);
    let trim = scalar(&[0.5, -0.05, 0.2, 0.01], 0.5);
    let hand = (elect[0] - 0.35).abs() < 1e-6 && max_abs(&trim, &[0.5, 0.0, 0.2, 0.0]) < 1e-6;

    let elapsed = start.elapsed();
    let pass = idem <= 1e-4 && perm_exact == 0.0 && perm_approx <= 1e-5 && uniform <= 1e-9 && hand && elapsed < Duration::from_secs(10);
    report(
        1,
        "merging algebra",
        pass,
        &format!(
            "idempotence {idem:.1e}, permutation exact {perm_exact:.1e} / approx {perm_approx:.1e}, weighted-vs-mean {uniform:.1e}, TIES hand cases {hand} ({elect:?}, {trim:?}), {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

/// Stack, SVD, TIES (density 1) in the aligned space, rotate back.
fn aligned_space_oracle(blocks: &[Vec<f64>], rows: usize, cols: usize) -> Vec<f64> {
    let n = blocks.len();
    let stacked = DMatrix::from_row_slice(n * rows, cols, &blocks.concat());
    let svd = stacked.svd(true, true);
    let (u, vt, sigma) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
    let k = sigma.len();
    let mut merged = DMatrix::<f64>::zeros(rows, k);
    for r in 0..rows {
        for j in 0..k {
            let c: Vec<f64> = (0..n).map(|i| u[(i * rows + r, j)] * sigma[j]).collect();
            let total: f64 = c.iter().sum();
            if total == 0.0 {
                continue;
            }
            let agree: Vec<f64> = c.into_iter().filter(|v| *v != 0.0 && v.signum() == total.signum()).collect();
            merged[(r, j)] = agree.iter().sum::<f64>() / agree.len() as f64;
        }
    }
    let out = merged * vt;
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| out[(r, c)]).collect()
}

#[test]
fn c02_knots_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut round_trip = 0.0f64;
    for _ in 0..20 {
        let (rows, cols) = (rng.random_range(1..=32), rng.random_range(1..=64));
        let u = random_adapter(&mut rng, "only", "t", rows, cols);
        round_trip = round_trip.max(worst(&merged(&[&u], &MergeSpec::knots(1.0, 1.0)), &u, rel_err));
    }

    let diag = |id: &str, d: [f32; 2]| AdapterUpdate::single(id, id, "base", "w", ParamUpdate::dense(Matrix::diag(&d).unwrap())).unwrap();
    let (a, b) = (diag("a", [1.0, 0.0]), diag("b", [0.0, 1.0]));
    let got = deltas(&merged(&[&a, &b], &MergeSpec::knots(1.0, 1.0)))["w"].clone();
    let oracle = aligned_space_oracle(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]], 2, 2);
    let identity = max_abs(&got, &oracle).max(max_abs(&got, &[1.0, 0.0, 0.0, 1.0]));

    let mut random_vs_oracle = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(2..=4);
        let (rows, cols) = (rng.random_range(1..=6), rng.random_range(1..=8));
        let pool: Vec<AdapterUpdate> = (0..n)
            .map(|i| AdapterUpdate::single(format!("r{i}"), "t", "base", "w", ParamUpdate::dense(matrix(&mut rng, rows, cols))).unwrap())
            .collect();
        let blocks: Vec<Vec<f64>> = pool.iter().map(|u| deltas(u)["w"].clone()).collect();
        let refs: Vec<&AdapterUpdate> = pool.iter().collect();
        let got = deltas(&merged(&refs, &MergeSpec::knots(1.0, 1.0)))["w"].clone();
        random_vs_oracle = random_vs_oracle.max(max_abs(&got, &aligned_space_oracle(&blocks, rows, cols)));
    }

    let elapsed = start.elapsed();
    let pass = round_trip <= 1e-4 && identity <= 1e-3 && random_vs_oracle <= 1e-3 && elapsed < Duration::from_secs(5);
    report(
        2,
        "KnOTS correctness",
        pass,
        &format!("round trip {round_trip:.1e}, identity case {identity:.1e}, random pools vs oracle {random_vs_oracle:.1e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

/// Target `i` succeeds on its first `i mod (N + 1)` trials.
struct Staircase {
    trials: usize,
}

impl Evaluator for Staircase {
    fn needs_merge(&self) -> bool {
        false
    }

    fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64> {
        let i: usize = input.target.id[1..].parse().unwrap();
        Ok(if input.trial < i % (self.trials + 1) { 1.0 } else { 0.0 })
    }
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

fn stub_pool(n: usize) -> Vec<AdapterUpdate> {
    (0..n)
        .map(|i| AdapterUpdate::single(format!("s{i}"), format!("s{i}"), "base", "w", ParamUpdate::dense(Matrix::zeros(1, 1))).unwrap())
        .collect()
}

#[test]
fn c03_estimator_exactness() {
    let n = 5;
    let pool = stub_pool(24);
    let cfg = EstimatorConfig { trials: n, partners: 7, ..Default::default() };
    let eval = Staircase { trials: n };
    let exact = pool.iter().enumerate().all(|(i, u)| {
        let r = estimate_score(u, &pool, &eval, &cfg).unwrap();
        r.score == (i % (n + 1)) as f64 / n as f64
    });

    let mut pmf_err = 0.0f64;
    for (p, successes) in [(0.2, 2usize), (0.5, 5), (1.0, 10)] {
        // 10 targets × 5 trials; `successes` of every 10 trial slots succeed.
        let reports: Vec<ScoreReport> = (0..10)
            .map(|t| {
                let trials: Vec<TrialRecord> = (0..n)
                    .map(|k| TrialRecord {
                        trial: k,
                        seed: 0,
                        partner_ids: vec![],
                        score: if (t * n + k) % 10 < successes { 1.0 } else { 0.0 },
                    })
                    .collect();
                let score = trials.iter().map(|r| r.score).sum::<f64>() / n as f64;
                ScoreReport { target_id: format!("s{t}"), score, trials }
            })
            .collect();
        let baseline = binomial_baseline(&reports, 0.5).unwrap();
        assert!((baseline.p - p).abs() < 1e-12, "fitted p {} for {p}", baseline.p);
        for k in 0..=n {
            let pmf = choose(n as u64, k as u64) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
            pmf_err = pmf_err.max((baseline.expected[k] / 10.0 - pmf).abs());
        }
    }
    let pass = exact && pmf_err <= 1e-9;
    report(3, "estimator exactness", pass, &format!("exact k/N scores {exact}, binomial pmf max error {pmf_err:.1e}"));
    assert!(pass);
}

#[test]
fn c04_gradient_check() {
    let start = Instant::now();
    let mut worst_err = 0.0f64;
    let mut worst_name = String::new();
    for seed in 0..3 {
        for (name, e) in gradient_check(Dims { keys: 12, d: 8, h: 16, values: 10 }, 4, seed).unwrap() {
            if e >= worst_err {
                worst_err = e;
                worst_name = name;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_err < 1e-4 && elapsed < Duration::from_secs(30);
    report(4, "gradient check", pass, &format!("worst relative error {worst_err:.1e} ({worst_name}) over 3 seeds, {elapsed:.2?}"));
    assert!(pass);
}

/// One toy run on default settings, shared by the experiment criteria.
struct ToyRun {
    counters: PoolCounters,
    summary: PoolSummary,
    reports: Vec<ScoreReport>,
    analysis: AnalysisOutput,
    tasks: MergeComparison,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { out_dir: dir.path().to_path_buf(), merge_specs: vec![MergeSpec::knots(1.0, 1.0)], ..Default::default() };
        let pool = cmd_build_pool(&cfg).unwrap();
        let scored = cmd_score(&cfg).unwrap().remove(0);
        let analysis = cmd_analyze(&cfg).unwrap();
        let tasks = cmd_compare_tasks(&cfg).unwrap();
        ToyRun {
            counters: pool.counters,
            summary: scored.summary,
            reports: scored.reports,
            analysis,
            tasks,
            elapsed: start.elapsed(),
            _dir: dir,
        }
    })
}

#[test]
fn c05_mergeability_existence() {
    let run = toy_run();
    let s = &run.summary;
    let p_value = s.chi_square.as_ref().map(|c| c.p_value);
    let expected_m = 50.min(s.pool_size - 1);
    let pass = run.counters.retained >= 200 && s.trials == 5 && s.partners == expected_m && p_value.is_some_and(|p| p < 0.01);
    report(
        5,
        "mergeability existence",
        pass,
        &format!(
            "{} retained, N={}, M={}, observed {:?} vs expected {:?}, chi-square p {}, toy run {:.1?}",
            run.counters.retained,
            s.trials,
            s.partners,
            s.observed,
            s.expected.iter().map(|e| (e * 10.0).round() / 10.0).collect::<Vec<_>>(),
            p_value.map_or("n/a".into(), |p| format!("{p:.2e}")),
            run.elapsed
        ),
    );
    assert!(pass);
}

fn rho(run: &ToyRun, metric: Metric) -> Option<f64> {
    run.analysis.correlations.iter().find(|c| c.metric == metric).and_then(|c| c.spearman)
}

#[test]
fn c06_base_knowledge() {
    let run = toy_run();
    let (base, frob, sigma) = (rho(run, Metric::DeltaBase), rho(run, Metric::Frobenius), rho(run, Metric::SigmaMax));
    let pass = match (base, frob, sigma) {
        (Some(b), Some(f), Some(s)) => b < 0.0 && b.abs() > f.abs() && b.abs() > s.abs(),
        _ => false,
    };
    report(
        6,
        "base-knowledge correlation",
        pass,
        &format!("spearman(S, delta_base) {base:.3?}, (S, frobenius) {frob:.3?}, (S, sigma_max) {sigma:.3?}"),
    );
    assert!(pass);
}

#[test]
fn c07_locality() {
    let run = toy_run();
    let pass = run.analysis.locality.as_ref().is_some_and(|l| 2.0 * l.fixed_range <= l.partner_range);
    let detail = match &run.analysis.locality {
        Some(l) => {
            let rows: Vec<String> = l
                .rows
                .iter()
                .map(|r| format!("{} fixed {:.2}±{:.2} partner {:.2}±{:.2}", r.bin, r.fixed_accuracy, r.fixed_se, r.partner_accuracy, r.partner_se))
                .collect();
            format!("fixed range {:.3}, partner range {:.3}; {}", l.fixed_range, l.partner_range, rows.join("; "))
        }
        None => "locality experiment did not run".to_string(),
    };
    report(7, "locality", pass, &detail);
    assert!(pass);
}

#[test]
fn c08_weighted_merging() {
    let cmp = &toy_run().tasks;
    let (low_w, low_m) = (MergeComparison::min_low_retention(&cmp.weighted), MergeComparison::min_low_retention(&cmp.mean));
    let (deg_w, deg_m) = (MergeComparison::max_high_degradation(&cmp.weighted), MergeComparison::max_high_degradation(&cmp.mean));
    let pass = low_w > low_m && deg_w - deg_m <= 0.05;
    report(
        8,
        "weighted merging benefit",
        pass,
        &format!("tau {}: min low retention weighted {low_w:.3} vs mean {low_m:.3}; max high degradation weighted {deg_w:.3} vs mean {deg_m:.3}", cmp.tau),
    );
    assert!(pass);
}

/// Each trial succeeds with a fixed per-target probability.
struct Bernoulli {
    rates: BTreeMap<String, f64>,
}

impl Evaluator for Bernoulli {
    fn needs_merge(&self) -> bool {
        false
    }

    fn evaluate(&self, input: &TrialInput<'_>) -> Result<f64> {
        let draw: f64 = ChaCha8Rng::seed_from_u64(input.seed).random();
        Ok(if draw < self.rates[&input.target.id] { 1.0 } else { 0.0 })
    }
}

#[test]
fn c09_consistency() {
    // Per-target rates are the toy pool's measured scores.
    let run = toy_run();
    let pool = stub_pool(100);
    let rates = pool.iter().zip(&run.reports).map(|(u, r)| (u.id.clone(), r.score)).collect();
    let eval = Bernoulli { rates };
    let scores = |trials: usize, seed: u64| -> Vec<f64> {
        let cfg = EstimatorConfig { trials, partners: 10, seed, ..Default::default() };
        estimate_pool(&pool, &eval, &cfg).unwrap().iter().map(|r| r.score).collect()
    };
    let rho = spearman(&scores(5, 11), &scores(20, 12)).unwrap();
    let pass = rho >= 0.9;
    report(9, "consistency N=5 vs N=20", pass, &format!("spearman {rho:.3} over 100 stubbed targets"));
    assert!(pass);
}

#[test]
fn c10_format_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut identical = 0;
    for i in 0..1000 {
        let (rows, cols) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let mut u = random_adapter(&mut rng, &format!("adapter-{i}"), &format!("task {}", i % 7), rows, cols);
        if i % 3 == 0 {
            let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let extra = ParamUpdate::dense(matrix(&mut rng, r, c));
            u.entries.insert(format!("layer.{i}.extra"), extra);
        }
        let first = dir.path().join("first.mrga");
        let second = dir.path().join("second.mrga");
        save_adapter(&u, &first).unwrap();
        let loaded = load_adapter(&first).unwrap();
        save_adapter(&loaded, &second).unwrap();
        let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        if a == b && loaded == u && encode_adapter(&decode_adapter(&a).unwrap()).unwrap() == a {
            identical += 1;
        }
    }
    let pass = identical == 1000;
    report(10, "format round trip", pass, &format!("{identical}/1000 byte-identical"));
    assert!(pass);
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mergeability::merge::MergeAlgorithm;
use mergeability::pipeline::{self, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "mergeability", version, about = "Mergeability scoring and adapter merging")]
struct Cli {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_algo)]
    merge_algo: Option<MergeAlgorithm>,
    #[arg(long, global = true)]
    density: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model and build the filtered adapter pool.
    BuildPool,
    /// Estimate mergeability scores under each configured merge spec.
    Score,
    /// Cause metrics, binned summaries, correlations and charts.
    Analyze,
    /// Merge adapter files, or with no inputs run the weighted-vs-mean task comparison.
    Merge {
        inputs: Vec<PathBuf>,
        /// JSON map of task id to base accuracy (weighted merging).
        #[arg(long)]
        accuracies: Option<PathBuf>,
        /// Output file; defaults to `<out>/merged.mrga`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Fixed-set locality experiment.
    Locality,
    /// Sweeps over N, M, LoRA rank and the task admission threshold.
    Sweep,
    /// Print the effective config as JSON.
    Config,
}

fn parse_algo(s: &str) -> Result<MergeAlgorithm, String> {
    s.parse().map_err(|e: mergeability::Error| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        out_dir: cli.out,
        seed: cli.seed,
        algorithm: cli.merge_algo,
        density: cli.density,
        tau: cli.tau,
        lambda: cli.lambda,
    });
    match cli.command {
        Command::BuildPool => {
            let pool = pipeline::cmd_build_pool(&cfg)?;
            let c = &pool.counters;
            println!(
                "pool: {} retained of {} trained ({:.1}% of {} examples trained, {:.1}% retained)",
                c.retained,
                c.trained,
                100.0 * c.trained_fraction,
                c.examples,
                100.0 * c.retained_fraction
            );
        }
        Command::Score => {
            for s in pipeline::cmd_score(&cfg)? {
                let chi = s.summary.chi_square.as_ref().map_or("n/a".to_string(), |c| format!("{:.3e}", c.p_value));
                println!("{}: p={:.3} observed={:?} chi-square p={chi}", s.spec.label(), s.summary.success_rate, s.summary.observed);
            }
        }
        Command::Analyze => {
            let out = pipeline::cmd_analyze(&cfg)?;
            for c in &out.correlations {
                match c.spearman {
                    Some(r) => println!("spearman(S, {}) = {r:.3}", c.metric),
                    None => println!("spearman(S, {}) undefined", c.metric),
                }
            }
            if let Some(l) = &out.locality {
                println!("locality: fixed range {:.3}, partner range {:.3}", l.fixed_range, l.partner_range);
            }
        }
        Command::Merge { inputs, accuracies, output } if inputs.is_empty() => {
            anyhow::ensure!(accuracies.is_none() && output.is_none(), "--accuracies and --output need input adapters");
            let cmp = pipeline::cmd_compare_tasks(&cfg)?;
            for (name, rows) in [("mean", &cmp.mean), ("weighted", &cmp.weighted)] {
                for r in rows.iter() {
                    println!("{name:>8} {} ({:?}): retention {:.3}", r.task_id, r.group, r.retention);
                }
            }
        }
        Command::Merge { inputs, accuracies, output } => {
            let output = output.unwrap_or_else(|| cfg.out_dir.join("merged.mrga"));
            let merged = pipeline::cmd_merge(&cfg, &inputs, accuracies.as_deref(), &output)?;
            println!("wrote {} ({} inputs)", output.display(), merged.provenance.as_ref().map_or(0, |p| p.inputs.len()));
        }
        Command::Locality => {
            let l = pipeline::cmd_locality(&cfg)?;
            for r in &l.rows {
                println!("{}: fixed {:.3} ± {:.3}, partners {:.3} ± {:.3}", r.bin, r.fixed_accuracy, r.fixed_se, r.partner_accuracy, r.partner_se);
            }
        }
        Command::Sweep => pipeline::cmd_sweep(&cfg)?,
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

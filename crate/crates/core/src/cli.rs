//! `prunekit` command line: `gen`, `stats`, `prune`, `verify`, `bench`.
//!
//! Exit codes: 0 success, 1 failed verification or runtime error, 2 usage
//! error. Every run ends stdout with one JSON object on its own line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::calib_stats::{CalibrationBatch, ColumnStats};
use crate::criteria::{Criterion, Damping};
use crate::harness::{gen_toy_mlp, run_comparison, BenchConfig, NormKind, ToyConfig};
use crate::mask_builder::SparsitySpec;
use crate::oracle::{check_criterion_optimality, InstanceFamily, VerifyConfig};
use crate::pruner::{prune_container, BiasUpdate, PruneOptions, CALIB_SUFFIX};
use crate::tensor_store::{load_container, save_container, TensorContainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "prunekit", version, about = "Post-training pruning with activation-statistics criteria")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Master RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Primary output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Write a detailed JSON report here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,

    /// Worker threads (`auto` = all cores).
    #[arg(long, global = true, env = "PRUNEKIT_THREADS", default_value = "auto", value_parser = parse_threads)]
    threads: Threads,
}

#[derive(Clone, Copy, Debug)]
struct Threads(Option<usize>);

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy MLP and its calibration activations.
    Gen {
        #[arg(long, default_value = "32,64,16", value_parser = parse_dims)]
        dims: Dims,
        #[arg(long, default_value = "layernorm")]
        norm: NormKind,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Calibration container output.
        #[arg(long)]
        calib_out: PathBuf,
    },
    /// Accumulate per-feature statistics for every `<layer>.calib` tensor.
    Stats {
        #[arg(long)]
        calib: PathBuf,
    },
    /// Prune every layer of a model container.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "stade-w")]
        criterion: Criterion,
        #[arg(long, default_value = "auto")]
        damping: Damping,
        #[arg(long, default_value = "0.5")]
        sparsity: SparsitySpec,
        #[arg(long, default_value = "auto")]
        bias_update: BiasUpdate,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long, default_value_t = 0.1)]
        center_threshold: f64,
    },
    /// Check a criterion's argmin against brute force on random instances.
    Verify {
        #[arg(long)]
        criterion: Criterion,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// `auto`, `uncentered`, `centered` or `offset`.
        #[arg(long, default_value = "auto")]
        data: String,
        #[arg(long, default_value = "auto")]
        damping: Damping,
    },
    /// Compare criteria on freshly generated toy models over several seeds.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "magnitude,wanda,stade")]
        criteria: Vec<Criterion>,
        #[arg(long, default_value = "0.5")]
        sparsity: SparsitySpec,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value = "32,64,16", value_parser = parse_dims)]
        dims: Dims,
        #[arg(long, default_value = "none")]
        norm: NormKind,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long, default_value = "auto")]
        bias_update: BiasUpdate,
    },
}

/// `d_in,d_hidden,d_out`.
#[derive(Clone, Copy, Debug)]
struct Dims([usize; 3]);

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad dimension in `{s}`: {e}"))?;
    match parts[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok(Dims([a, b, c])),
        _ => Err(format!("expected three positive integers like `32,64,16`, got `{s}`")),
    }
}

fn parse_threads(s: &str) -> Result<Threads, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Threads(None));
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Threads(Some(n))),
        _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
    }
}

/// A usage problem found after clap parsing; reported with exit code 2.
struct Usage(String);

fn usage_error(msg: &str) -> i32 {
    Cli::command()
        .error(clap::error::ErrorKind::ArgumentConflict, msg)
        .print()
        .ok();
    EXIT_USAGE
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path, Usage> {
    path.as_deref()
        .ok_or_else(|| Usage(format!("`{cmd}` requires --{flag} <PATH>")))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

enum Outcome {
    Ok(serde_json::Value),
    Failed(serde_json::Value),
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Threads(Some(n)) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_FAILED;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(Ok(Outcome::Ok(summary))) => {
            println!("{summary}");
            EXIT_OK
        }
        Ok(Ok(Outcome::Failed(summary))) => {
            println!("{summary}");
            EXIT_FAILED
        }
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            println!("{}", json!({"status": "error", "error": format!("{e:#}")}));
            EXIT_FAILED
        }
        Err(Usage(msg)) => usage_error(&msg),
    }
}

fn dispatch(cli: &Cli) -> Result<anyhow::Result<Outcome>, Usage> {
    match &cli.command {
        Command::Gen {
            dims,
            norm,
            samples,
            calib_out,
        } => {
            let out = require(&cli.out, "out", "gen")?;
            let toy = ToyConfig {
                dims: dims.0,
                norm: *norm,
                samples: *samples,
            };
            Ok(cmd_gen(cli, &toy, out, calib_out))
        }
        Command::Stats { calib } => {
            let out = require(&cli.out, "out", "stats")?;
            Ok(cmd_stats(cli, calib, out))
        }
        Command::Prune {
            model,
            calib,
            criterion,
            damping,
            sparsity,
            bias_update,
            holdout,
            center_threshold,
        } => {
            let out = require(&cli.out, "out", "prune")?;
            if !(0.0..=0.5).contains(holdout) {
                return Err(Usage(format!("--holdout {holdout} must lie in [0, 0.5]")));
            }
            let opts = PruneOptions {
                criterion: with_damping(*criterion, *damping),
                sparsity: *sparsity,
                bias_update: *bias_update,
                holdout_fraction: *holdout,
                center_threshold: *center_threshold,
            };
            Ok(cmd_prune(cli, model, calib, out, &opts))
        }
        Command::Verify {
            criterion,
            trials,
            data,
            damping,
        } => {
            if *trials == 0 {
                return Err(Usage("--trials must be at least 1".into()));
            }
            let family = match data.as_str() {
                "auto" => None,
                other => Some(
                    other
                        .parse::<InstanceFamily>()
                        .map_err(|_| Usage(format!("--data `{other}`: expected auto|uncentered|centered|offset")))?,
                ),
            };
            let config = VerifyConfig {
                criterion: with_damping(*criterion, *damping),
                trials: *trials,
                seed: cli.seed,
                family,
            };
            Ok(cmd_verify(cli, &config))
        }
        Command::Bench {
            criteria,
            sparsity,
            seeds,
            dims,
            norm,
            samples,
            holdout,
            bias_update,
        } => {
            if criteria.len() < 2 {
                return Err(Usage("--criteria needs at least two entries".into()));
            }
            if !(0.0..=0.5).contains(holdout) {
                return Err(Usage(format!("--holdout {holdout} must lie in [0, 0.5]")));
            }
            let config = BenchConfig {
                toy: ToyConfig {
                    dims: dims.0,
                    norm: *norm,
                    samples: *samples,
                },
                criteria: criteria.clone(),
                sparsity: *sparsity,
                bias_update: *bias_update,
                holdout_fraction: *holdout,
                seeds: *seeds,
                base_seed: cli.seed,
            };
            Ok(cmd_bench(cli, &config))
        }
    }
}

fn with_damping(criterion: Criterion, damping: Damping) -> Criterion {
    match criterion {
        Criterion::SparseGptScore { .. } => Criterion::SparseGptScore { damping },
        other => other,
    }
}

fn cmd_gen(cli: &Cli, toy: &ToyConfig, out: &Path, calib_out: &Path) -> anyhow::Result<Outcome> {
    let (model, calib) = gen_toy_mlp(cli.seed, toy)?;
    save_container(&model, out)?;
    save_container(&calib, calib_out)?;
    let summary = json!({
        "status": "ok",
        "command": "gen",
        "seed": cli.seed,
        "dims": toy.dims,
        "norm": toy.norm.to_string(),
        "samples": toy.samples,
        "model": out,
        "calib": calib_out,
        "layers": model.layer_names(),
    });
    if let Some(report) = &cli.report {
        write_json(report, &summary)?;
    }
    Ok(Outcome::Ok(summary))
}

fn cmd_stats(cli: &Cli, calib_path: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let calib = load_container(calib_path)?;
    let mut stats_out = TensorContainer::new();
    let mut layers = Vec::new();
    for entry in calib.entries() {
        let Some(layer) = entry.name.strip_suffix(CALIB_SUFFIX) else {
            continue;
        };
        let rows = CalibrationBatch::from_f32(&calib.matrix(&entry.name)?)?;
        let mut stats = ColumnStats::new(rows.width())?;
        for chunk in rows.chunks(256) {
            stats.update(&chunk)?;
        }
        stats.write_to(&mut stats_out, layer)?;
        eprintln!("{layer}: n={} features={} max|mean|={:.4e}", stats.count(), stats.features(), stats.max_abs_mean());
        layers.push(json!({
            "layer": layer,
            "n": stats.count(),
            "features": stats.features(),
            "max_abs_mean": stats.max_abs_mean(),
        }));
    }
    if layers.is_empty() {
        bail!("{} holds no `<layer>.calib` tensors", calib_path.display());
    }
    save_container(&stats_out, out)?;
    let summary = json!({"status": "ok", "command": "stats", "out": out, "layers": layers.len()});
    if let Some(report) = &cli.report {
        write_json(report, &json!({"layers": layers}))?;
    }
    Ok(Outcome::Ok(summary))
}

fn cmd_prune(cli: &Cli, model: &Path, calib: &Path, out: &Path, opts: &PruneOptions) -> anyhow::Result<Outcome> {
    let model_c = load_container(model)?;
    let calib_c = load_container(calib)?;
    let (pruned, report) = prune_container(&model_c, &calib_c, opts)?;
    save_container(&pruned, out)?;
    for r in &report.layers {
        eprintln!(
            "{}: {} sparsity={:.4} bias_delta={:.4e} mse={:.6e}{}",
            r.layer,
            r.criterion,
            r.achieved_sparsity,
            r.bias_delta_norm,
            r.mse,
            r.warning.as_deref().map(|w| format!(" [warning: {w}]")).unwrap_or_default()
        );
    }
    if let Some(path) = &cli.report {
        write_json(path, &report)?;
    }
    let total_pruned: f64 = report.layers.iter().map(|r| r.achieved_sparsity).sum::<f64>()
        / report.layers.len().max(1) as f64;
    Ok(Outcome::Ok(json!({
        "status": "ok",
        "command": "prune",
        "criterion": opts.criterion.name(),
        "sparsity": opts.sparsity.to_string(),
        "layers": report.layers.len(),
        "mean_achieved_sparsity": total_pruned,
        "out": out,
    })))
}

fn cmd_verify(cli: &Cli, config: &VerifyConfig) -> anyhow::Result<Outcome> {
    let report = check_criterion_optimality(config)?;
    if let Some(path) = &cli.report {
        write_json(path, &report)?;
    }
    let summary = json!({
        "status": if report.all_match() { "ok" } else { "mismatch" },
        "command": "verify",
        "criterion": report.criterion,
        "resolved_criterion": report.resolved_criterion,
        "family": report.family,
        "allow_bias": report.allow_bias,
        "seed": report.seed,
        "trials": report.trials,
        "matches": report.matches,
        "mismatches": report.mismatches,
    });
    if let Some(cx) = &report.first_counterexample {
        eprintln!("counterexample: {}", serde_json::to_string(cx)?);
        return Ok(Outcome::Failed(summary));
    }
    Ok(Outcome::Ok(summary))
}

fn cmd_bench(cli: &Cli, config: &BenchConfig) -> anyhow::Result<Outcome> {
    let table = run_comparison(config)?;
    print!("{}", table.render_text());
    if let Some(path) = &cli.out {
        write_json(path, &table)?;
    }
    if let Some(path) = &cli.report {
        write_json(path, &table.summary)?;
    }
    Ok(Outcome::Ok(json!({
        "status": "ok",
        "command": "bench",
        "seeds": table.seeds.len(),
        "sparsity": table.sparsity.to_string(),
        "summary": table.summary,
    })))
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serval_core::pipeline::{evaluate, EvalInput};
use serval_core::{Error, ErrorClass, MetricSpec, MissingQueryPolicy, Pipeline, PipelineConfig, Role};

const EXIT_USAGE: u8 = 1;
const EXIT_UPSTREAM: u8 = 2;
const EXIT_DATA: u8 = 3;

/// Zero-shot document-image retrieval through generated descriptions.
#[derive(Debug, Parser)]
#[command(name = "serval", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "serval.toml")]
    config: PathBuf,

    /// Override a config value, e.g. `--set vlm.base_url=http://host:8000`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset name from the config; repeatable. Defaults to every configured dataset.
    #[arg(long = "dataset", short = 'd')]
    datasets: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    Query,
    Document,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MissingArg {
    Zero,
    Skip,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate descriptions for document images.
    Describe {
        #[command(flatten)]
        ds: DatasetArgs,
        /// Only the first N documents of each dataset.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Embed descriptions and/or queries into the embedding cache.
    Encode {
        #[command(flatten)]
        ds: DatasetArgs,
        #[arg(long, value_enum, default_value_t = RoleArg::All)]
        role: RoleArg,
    },
    /// Build the dataset index from cached document embeddings.
    Index {
        #[command(flatten)]
        ds: DatasetArgs,
    },
    /// Rank all queries and write a TREC run file.
    Search {
        #[command(flatten)]
        ds: DatasetArgs,
        /// Run file path (single dataset only). Defaults to `<index_dir>/<dataset>/<tag>.run`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score run files against qrels.
    Evaluate {
        #[command(flatten)]
        ds: DatasetArgs,
        /// `NAME=PATH` run file; repeatable. Without it, the configured datasets' default runs are used.
        #[arg(long = "run", value_name = "NAME=PATH")]
        runs: Vec<String>,
        /// `NAME=PATH` qrels file; falls back to the configured qrels for NAME.
        #[arg(long = "qrels", value_name = "NAME=PATH")]
        qrels: Vec<String>,
        /// Comma-separated metric cutoffs, e.g. `1,5,10`.
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metric shown in the printed table.
        #[arg(long, default_value = "ndcg@5")]
        table_metric: String,
        /// Judged queries missing from a run: score 0, or leave out of the mean.
        #[arg(long, value_enum)]
        missing_query: Option<MissingArg>,
    },
    /// Average generated tokens per described image.
    Stats {
        #[command(flatten)]
        ds: DatasetArgs,
    },
    /// Average description latency per image.
    BenchLatency {
        #[command(flatten)]
        ds: DatasetArgs,
        /// Describe uncached images now and report only those.
        #[arg(long)]
        fresh: bool,
    },
    /// Check corpus, queries and qrels for consistency.
    Validate {
        #[command(flatten)]
        ds: DatasetArgs,
    },
}

/// Exit status carried through `anyhow` for non-error outcomes that still fail.
#[derive(Debug)]
struct Failure(u8, String);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Failure(code, _)) = err.downcast_ref::<Failure>() {
        return *code;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::class) {
        Some(ErrorClass::Config) | None => EXIT_USAGE,
        Some(ErrorClass::Upstream) => EXIT_UPSTREAM,
        Some(ErrorClass::Data) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    PipelineConfig::load(&cli.config, &cli.overrides)
        .with_context(|| format!("loading {}", cli.config.display()))
}

fn selected(cfg: &PipelineConfig, args: &DatasetArgs) -> anyhow::Result<Vec<String>> {
    if args.datasets.is_empty() {
        if cfg.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()).into());
        }
        return Ok(cfg.datasets.keys().cloned().collect());
    }
    for d in &args.datasets {
        cfg.dataset(d)?;
    }
    Ok(args.datasets.clone())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Evaluate {
            ds,
            runs,
            qrels,
            cutoffs,
            out,
            table_metric,
            missing_query,
        } => cmd_evaluate(&cli, ds, runs, qrels, cutoffs.as_deref(), out.as_deref(), table_metric, *missing_query),
        _ => {
            let cfg = load_config(&cli)?;
            let pipeline = Pipeline::new(cfg);
            run_stage(&pipeline, &cli.command)
        }
    }
}

fn run_stage(pipeline: &Pipeline, command: &Command) -> anyhow::Result<()> {
    let cfg = pipeline.config();
    match command {
        Command::Describe { ds, limit } => {
            let mut failures = Vec::new();
            for name in selected(cfg, ds)? {
                let summary = pipeline.describe(&name, *limit)?;
                println!("{name}: {summary}");
                for (doc, e) in summary.failed {
                    eprintln!("  {doc}: {e}");
                    failures.push(e);
                }
            }
            if let Some(first) = failures.into_iter().next() {
                let code = match first.class() {
                    ErrorClass::Upstream => EXIT_UPSTREAM,
                    ErrorClass::Config => EXIT_USAGE,
                    ErrorClass::Data => EXIT_DATA,
                };
                return Err(Failure(code, "some documents could not be described".into()).into());
            }
        }
        Command::Encode { ds, role } => {
            let roles: &[Role] = match role {
                RoleArg::Query => &[Role::Query],
                RoleArg::Document => &[Role::Document],
                RoleArg::All => &[Role::Document, Role::Query],
            };
            for name in selected(cfg, ds)? {
                for s in pipeline.encode(&name, roles)? {
                    if s.precomputed {
                        println!("{name}: {} {} vectors precomputed", s.total, s.role);
                    } else {
                        println!("{name}: {} {} texts, {} encoded, {} cached", s.total, s.role, s.encoded, s.total - s.encoded);
                    }
                }
            }
        }
        Command::Index { ds } => {
            for name in selected(cfg, ds)? {
                let s = pipeline.index(&name)?;
                println!("{name}: indexed {} documents -> {}", s.docs, s.path.display());
            }
        }
        Command::Search { ds, output } => {
            let names = selected(cfg, ds)?;
            if output.is_some() && names.len() != 1 {
                return Err(Error::Config("--output needs exactly one --dataset".into()).into());
            }
            for name in names {
                let s = pipeline.search(&name, output.as_deref())?;
                println!("{name}: {} queries ({} encoded) -> {}", s.queries, s.encoded, s.path.display());
            }
        }
        Command::Stats { ds } => {
            for name in selected(cfg, ds)? {
                let s = pipeline.stats(&name)?;
                println!(
                    "{name}: mean tokens/doc {:.2} over {} descriptions (min {}, max {}, {} missing, tokenizer {})",
                    s.stats.mean,
                    s.stats.count,
                    s.stats.min,
                    s.stats.max,
                    s.missing,
                    cfg.vlm.tokenizer.name()
                );
            }
        }
        Command::BenchLatency { ds, fresh } => {
            for name in selected(cfg, ds)? {
                let s = pipeline.bench_latency(&name, *fresh)?;
                println!(
                    "{name}: mean latency {:.3} s/img over {} images (min {:.3}, max {:.3}, {} missing)",
                    s.stats.mean, s.stats.count, s.stats.min, s.stats.max, s.missing
                );
            }
        }
        Command::Validate { ds } => {
            let mut dirty = false;
            for name in selected(cfg, ds)? {
                let report = pipeline.validate(&name)?;
                if report.is_clean() {
                    println!("{name}: ok");
                } else {
                    dirty = true;
                    println!("{name}:\n{report}");
                }
            }
            if dirty {
                return Err(Failure(EXIT_DATA, "validation found problems".into()).into());
            }
        }
        Command::Evaluate { .. } => unreachable!("handled in run"),
    }
    Ok(())
}

fn parse_pairs(flag: &str, values: &[String]) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for v in values {
        let (name, path) = v
            .split_once('=')
            .filter(|(n, p)| !n.is_empty() && !p.is_empty())
            .ok_or_else(|| Failure(EXIT_USAGE, format!("--{flag} expects NAME=PATH, got {v:?}")))?;
        if out.insert(name.to_string(), PathBuf::from(path)).is_some() {
            bail!(Failure(EXIT_USAGE, format!("--{flag} {name} given twice")));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cli: &Cli,
    ds: &DatasetArgs,
    runs: &[String],
    qrels: &[String],
    cutoffs: Option<&[usize]>,
    out: Option<&Path>,
    table_metric: &str,
    missing: Option<MissingArg>,
) -> anyhow::Result<()> {
    let runs = parse_pairs("run", runs)?;
    let qrels = parse_pairs("qrels", qrels)?;
    // explicit run and qrels files need no config
    let needs_config = runs.is_empty() || runs.keys().any(|n| !qrels.contains_key(n));
    let cfg = if needs_config || cli.config.exists() {
        Some(load_config(cli)?)
    } else {
        None
    };

    let inputs: Vec<EvalInput> = if runs.is_empty() {
        let cfg = cfg.as_ref().expect("loaded above");
        let pipeline = Pipeline::new(cfg.clone());
        selected(cfg, ds)?
            .into_iter()
            .map(|name| -> anyhow::Result<EvalInput> {
                let qrels_path = match qrels.get(&name) {
                    Some(p) => p.clone(),
                    None => cfg.dataset(&name)?.qrels_path.clone(),
                };
                Ok(EvalInput {
                    run_path: pipeline.default_run_path(&name),
                    qrels_path,
                    dataset: name,
                })
            })
            .collect::<anyhow::Result<_>>()?
    } else {
        runs.into_iter()
            .map(|(name, run_path)| -> anyhow::Result<EvalInput> {
                let qrels_path = match qrels.get(&name) {
                    Some(p) => p.clone(),
                    None => cfg
                        .as_ref()
                        .expect("loaded above")
                        .dataset(&name)
                        .map_err(|_| Failure(EXIT_USAGE, format!("no --qrels for run {name:?} and no configured dataset of that name")))?
                        .qrels_path
                        .clone(),
                };
                Ok(EvalInput {
                    dataset: name,
                    run_path,
                    qrels_path,
                })
            })
            .collect::<anyhow::Result<_>>()?
    };

    let spec = match (cutoffs, &cfg) {
        (Some(c), _) => MetricSpec::new(c.iter().copied())?,
        (None, Some(cfg)) => cfg.metrics.clone(),
        (None, None) => MetricSpec::default(),
    };
    if !spec.metric_names().iter().any(|m| m == table_metric) {
        return Err(Failure(
            EXIT_USAGE,
            format!("--table-metric {table_metric} is not one of {}", spec.metric_names().join(", ")),
        )
        .into());
    }
    let policy = match (missing, &cfg) {
        (Some(MissingArg::Zero), _) => MissingQueryPolicy::Zero,
        (Some(MissingArg::Skip), _) => MissingQueryPolicy::Skip,
        (None, Some(cfg)) => cfg.missing_query,
        (None, None) => MissingQueryPolicy::default(),
    };

    let result = evaluate(&inputs, &spec, policy)?;
    for (name, e) in &result.datasets {
        info!("{name}: {} queries evaluated, {} skipped", e.per_query.len(), e.skipped_queries);
    }
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(&result.json).map_err(|e| anyhow!(e))?;
        text.push('\n');
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        info!("report written to {}", path.display());
    }
    println!("{table_metric}");
    print!("{}", result.tables[table_metric]);
    Ok(())
}

//! `qrloop` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success (including an `iterate` run that pauses for
//! post-training), 1 when a stage fails, 2 on usage errors. Failures print one
//! JSON line on stderr: `{"error": code, "message": text}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrloop::eval::embed::HashEmbedder;
use qrloop::eval::{evaluate, load_rewrites, BenchmarkI, BenchmarkII, EvalError, EvalInputs, RewriteRow, DEFAULT_KS};
use qrloop::jsonl::{read_jsonl, write_atomic, write_jsonl};
use qrloop::pipeline::{
    report_iterations, write_reports, IterateOutcome, Pipeline, PipelineConfig, PipelineError, Workdir,
};
use qrloop::rules::RuleOracle;
use qrloop::search::ExposureEvent;
use qrloop::signal::{label_signals, SignalLevel};
use qrloop::synth::{generate_world, write_world, SynthConfig};
use qrloop::trainset::TrainingTask;

#[derive(Parser)]
#[command(name = "qrloop", version, about = "Iterative LLM query-rewrite pipeline")]
struct Cli {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, global = true, env = "QRLOOP_CONFIG")]
    config: Option<PathBuf>,

    /// Working directory holding state, vocabulary, logs and training files.
    #[arg(long, global = true, default_value = "qrloop-work")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate rewrites for the configured queries and write them as JSONL.
    Generate {
        /// Iteration whose query file and generators to use.
        #[arg(long, default_value_t = 0)]
        iteration: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay sessions with the given rewrites deployed; writes exposure events.
    Simulate {
        #[arg(long)]
        rewrites: PathBuf,
        #[arg(long, default_value_t = 0)]
        iteration: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label Level-1 / Level-2 signals from exposure events.
    Collect {
        #[arg(long)]
        exposures: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the signalled rewrites per query as a rewrites file.
        #[arg(long)]
        positives_out: Option<PathBuf>,
    },
    /// Rebuild the three training files from the working directory's latest iteration.
    BuildTrain {
        /// Defaults to `<workdir>/train`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Precision, relevance and recall@K for a rewrites file.
    Evaluate(EvaluateArgs),
    /// Run pipeline iterations in the working directory.
    Iterate {
        #[arg(long, default_value_t = 1)]
        rounds: u32,
        /// Overrides the config seed and the completion seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print and write the per-iteration report.
    Report,
    /// Write a synthetic fixture world and a config pointing at it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        queries: usize,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bench_i: Option<PathBuf>,
    #[arg(long)]
    bench_ii: Option<PathBuf>,
    /// JSONL of {"query_id", "rewrites"}.
    #[arg(long)]
    rewrites: PathBuf,
    /// Report JSON path; a .txt table is written next to it.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long, default_value = "rewrites")]
    source: String,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    dim: Option<usize>,
}

enum CliError {
    Usage(String),
    Stage { code: &'static str, message: String },
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Stage {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<qrloop::jsonl::JsonlError> for CliError {
    fn from(e: qrloop::jsonl::JsonlError) -> Self {
        PipelineError::from(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: qrloop --config <FILE> <COMMAND>\nRun `qrloop --help` for details.");
            ExitCode::from(2)
        }
        Err(CliError::Stage { code, message }) => {
            eprintln!("{}", serde_json::json!({"error": code, "message": message}));
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file not found: {}", path.display())));
    }
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.params.seed = Some(seed);
    }
    Ok(cfg)
}

fn pipeline(cli: &Cli, seed: Option<u64>) -> Result<Pipeline, CliError> {
    Ok(Pipeline::new(load_config(cli.config.as_deref(), seed)?)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate { iteration, out } => {
            let p = pipeline(&cli, None)?;
            let queries = p.queries_for(*iteration)?;
            let batch = p.generate(&queries, *iteration)?;
            let mut grouped: BTreeMap<String, Vec<String>> =
                queries.iter().map(|q| (q.id.clone(), Vec::new())).collect();
            for c in &batch.candidates {
                let list = grouped.entry(c.query_id.clone()).or_default();
                if !list.contains(&c.text) {
                    list.push(c.text.clone());
                }
            }
            let rows: Vec<RewriteRow> = queries
                .iter()
                .map(|q| RewriteRow {
                    query_id: q.id.clone(),
                    rewrites: grouped.remove(&q.id).unwrap_or_default(),
                })
                .collect();
            write_jsonl(out, &rows)?;
            println!(
                "{}",
                serde_json::json!({"queries": queries.len(), "candidates": batch.candidates.len(), "parse_failures": batch.parse_failures.len()})
            );
        }
        Command::Simulate {
            rewrites,
            iteration,
            out,
        } => {
            let p = pipeline(&cli, None)?;
            let queries = p.queries_for(*iteration)?;
            let rewrites = load_rewrites(rewrites)?;
            let (events, _) = p.simulate(&queries, &rewrites)?;
            write_jsonl(out, &events)?;
            println!("{}", serde_json::json!({"exposures": events.len()}));
        }
        Command::Collect {
            exposures,
            out,
            positives_out,
        } => {
            let events: Vec<ExposureEvent> = read_jsonl(exposures)?;
            let labels = label_signals(&events);
            write_jsonl(out, &labels)?;
            if let Some(path) = positives_out {
                let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for l in &labels {
                    let list = grouped.entry(l.query_id.clone()).or_default();
                    if !list.contains(&l.rewrite_text) {
                        list.push(l.rewrite_text.clone());
                    }
                }
                let rows: Vec<RewriteRow> = grouped
                    .into_iter()
                    .map(|(query_id, rewrites)| RewriteRow { query_id, rewrites })
                    .collect();
                write_jsonl(path, &rows)?;
            }
            let level1 = labels.iter().filter(|l| l.level == SignalLevel::Level1).count();
            println!(
                "{}",
                serde_json::json!({"labels": labels.len(), "level1": level1, "level2": labels.len() - level1})
            );
        }
        Command::BuildTrain { out_dir } => {
            let p = pipeline(&cli, None)?;
            let wd = Workdir::new(&cli.workdir);
            let _lock = wd.lock()?;
            let state = wd.load_state()?;
            let Some(k) = state.iteration.checked_sub(1) else {
                return Err(CliError::Stage {
                    code: "no_iteration",
                    message: format!("{} has no completed iteration", cli.workdir.display()),
                });
            };
            let vocab = wd.load_vocab(&state)?;
            let queries = p.queries_for(k)?;
            let exposures: Vec<ExposureEvent> = read_jsonl(&wd.exposures_path(k))?;
            let mut items = BTreeMap::new();
            for q in &queries {
                if let Some(i) = p.replay_items(&q.id)? {
                    items.insert(q.id.clone(), i);
                }
            }
            let build = p.build_training(&queries, &vocab, &exposures, &items, k)?;
            let dir = out_dir.clone().unwrap_or_else(|| cli.workdir.join("train"));
            let mut counts = BTreeMap::new();
            for task in [
                TrainingTask::RewriteGeneration,
                TrainingTask::RewriteQuality,
                TrainingTask::Relevance,
            ] {
                let samples = build.samples.get(&task).map(Vec::as_slice).unwrap_or_default();
                write_jsonl(&dir.join(format!("{}.jsonl", task.file_stem())), samples)?;
                counts.insert(task.file_stem(), samples.len());
            }
            println!(
                "{}",
                serde_json::json!({"iteration": k, "samples": counts, "relevance_disagreements": build.dropped.len()})
            );
        }
        Command::Evaluate(args) => evaluate_cmd(&cli, args)?,
        Command::Iterate { rounds, seed } => {
            let p = pipeline(&cli, *seed)?;
            let wd = Workdir::new(&cli.workdir);
            match p.iterate(&wd, *rounds)? {
                IterateOutcome::Completed { rounds } => {
                    println!("{}", serde_json::json!({"status": "completed", "rounds": rounds}));
                }
                IterateOutcome::Paused { rounds, at_iteration } => {
                    println!(
                        "{}",
                        serde_json::json!({"status": "paused", "rounds": rounds, "awaiting_posttrained_iteration": at_iteration})
                    );
                    eprintln!(
                        "paused before iteration {at_iteration}: train on {} and register endpoints.generator_posttrained.{at_iteration}",
                        cli.workdir.join("train").display()
                    );
                }
            }
        }
        Command::Report => {
            let ks = match cli.config.as_deref() {
                Some(_) => load_config(cli.config.as_deref(), None)?.ks,
                None => DEFAULT_KS.to_vec(),
            };
            let wd = Workdir::new(&cli.workdir);
            let state = wd.load_state()?;
            write_reports(&wd, &state.stats, &ks)?;
            print!("{}", report_iterations(&state.stats, &ks));
        }
        Command::Synth { out, seed, queries } => {
            let world = generate_world(&SynthConfig {
                seed: *seed,
                n_queries: *queries,
                ..SynthConfig::default()
            });
            let path = write_world(&world, out, *seed)?;
            println!(
                "{}",
                serde_json::json!({"config": path, "queries": world.queries.len()})
            );
        }
    }
    Ok(())
}

fn evaluate_cmd(cli: &Cli, args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = match cli.config.as_deref() {
        Some(path) => Some(load_config(Some(path), None)?),
        None => None,
    };
    let bench_i_path = args
        .bench_i
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.bench_i.clone()));
    let bench_ii_path = args
        .bench_ii
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.bench_ii.clone()));
    if bench_i_path.is_none() && bench_ii_path.is_none() {
        return Err(CliError::Usage("evaluate needs --bench-i and/or --bench-ii".into()));
    }
    let ks = args
        .ks
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.ks.clone()))
        .unwrap_or_else(|| DEFAULT_KS.to_vec());
    let dim = args.dim.or_else(|| cfg.as_ref().map(|c| c.embed_dim)).unwrap_or(64);
    let embedder = HashEmbedder::new(dim).map_err(|e| CliError::Usage(e.to_string()))?;
    let bench_i = bench_i_path.as_deref().map(BenchmarkI::load).transpose()?;
    let bench_ii = bench_ii_path.as_deref().map(BenchmarkII::load).transpose()?;
    let rewrites = load_rewrites(&args.rewrites)?;
    let report = evaluate(
        &EvalInputs {
            source: &args.source,
            rewrites: &rewrites,
            bench_i: bench_i.as_ref(),
            bench_ii: bench_ii.as_ref(),
            ks: &ks,
        },
        &RuleOracle,
        &embedder,
    )?;
    let mut json = serde_json::to_string_pretty(&report).expect("serializable report");
    json.push('\n');
    write_atomic(&args.out, json.as_bytes())?;
    let table = report.to_table();
    write_atomic(&args.out.with_extension("txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

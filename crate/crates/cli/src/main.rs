//! `sceneret` command line.
//!
//! Machine-readable results go to stdout (JSON, JSON lines or CSV) or to
//! files under `--out`; diagnostics go to stderr. Exit status is 0 on
//! success, 2 on usage errors and 1 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sceneret::harness::{
    export_embeddings, run_experiment, run_training, sweep, ExperimentConfig, ExportStage,
    SweepSpec,
};
use sceneret::index::{Index, MeanOrder, Selector};
use sceneret::store::{synth_generate, write_dataset, AccessMode, Dataset, SplitSpec, SynthParams};

#[derive(Parser)]
#[command(
    name = "sceneret",
    version,
    about = "Scene retrieval from view embeddings"
)]
struct Cli {
    /// Root seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in a config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config file (experiment config, or sweep spec for `sweep`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Validate a dataset and print its summary; with --out, write a canonical copy.
    Ingest(DataArgs),
    /// Build a cosine index and save it to --out.
    Index(IndexArgs),
    /// Rank database entries for one or more query views (JSON lines).
    Query(QueryArgs),
    /// Train a projection head from --config.
    Train,
    /// Run an experiment from --config and print its metrics.
    Eval,
    /// Run a parameter sweep from --config and print the CSV summary.
    Sweep,
    /// Export raw or head-mapped embeddings of the configured split to --out.
    Export(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    views: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Coordinates carrying view noise only [default: dim / 2].
    #[arg(long)]
    nuisance: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (manifest.json + embeddings.bin).
    #[arg(long)]
    data: PathBuf,
    /// Read rows from disk on demand instead of loading the matrix.
    #[arg(long)]
    streamed: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    None,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    NormalizeThenMean,
    MeanThenNormalize,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Index only the database views of this split.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    agg: Agg,
    #[arg(long, value_enum, default_value = "normalize-then-mean")]
    mean_order: Order,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    build: IndexArgs,
    /// Load a saved index instead of building one.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Query view as `scene/view`; repeatable. Defaults to the split's query views.
    #[arg(long = "query-id")]
    query_id: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Map embeddings through this head checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn usage_error(msg: &str) -> ! {
    Cli::command()
        .error(ErrorKind::MissingRequiredArgument, msg)
        .exit()
}

fn require_out(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| usage_error("--out is required for this command"))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .unwrap_or_else(|| usage_error("--config is required for this command"));
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string(v).expect("JSON value serialises")
    );
}

fn open(args: &DataArgs) -> Result<Dataset> {
    let mode = if args.streamed {
        AccessMode::Streamed
    } else {
        AccessMode::Eager
    };
    Dataset::open(&args.data, mode).map_err(|e| anyhow!("data stage failed: {e}"))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = require_out(cli);
    let params = SynthParams {
        n_scenes: a.scenes,
        views_per_scene: a.views,
        dim: a.dim,
        sigma: a.sigma,
        nuisance_dims: a.nuisance.unwrap_or(a.dim / 2),
        seed: cli.seed.unwrap_or(0),
    };
    let recs = synth_generate(&params).map_err(|e| anyhow!("synth stage failed: {e}"))?;
    let m = write_dataset(&recs, &out).map_err(|e| anyhow!("persist stage failed: {e}"))?;
    print_json(
        &json!({"path": out, "dim": m.dim, "record_count": m.record_count, "scenes": m.scenes.len()}),
    );
    Ok(())
}

fn cmd_ingest(cli: &Cli, a: &DataArgs) -> Result<()> {
    let ds = open(a)?;
    let m = ds.manifest();
    let counts: Vec<usize> = m.scenes.iter().map(|s| s.views.len()).collect();
    if let Some(out) = &cli.out {
        ds.write_to(out)
            .map_err(|e| anyhow!("persist stage failed: {e}"))?;
    }
    print_json(&json!({
        "dim": m.dim,
        "dtype": m.dtype,
        "record_count": m.record_count,
        "scenes": counts.len(),
        "min_views": counts.iter().min(),
        "max_views": counts.iter().max(),
    }));
    Ok(())
}

fn build_index(ds: &Dataset, a: &IndexArgs) -> Result<Index> {
    let split = match &a.split {
        Some(p) => {
            let s = SplitSpec::load(p).map_err(|e| anyhow!("split stage failed: {e}"))?;
            s.check_against(ds.manifest())
                .map_err(|e| anyhow!("split stage failed: {e}"))?;
            Some(s)
        }
        None => None,
    };
    let selector = split.as_ref().map_or(Selector::All, Selector::db_views);
    let order = match a.mean_order {
        Order::NormalizeThenMean => MeanOrder::NormalizeThenMean,
        Order::MeanThenNormalize => MeanOrder::MeanThenNormalize,
    };
    match a.agg {
        Agg::None => Index::build(ds, &selector),
        Agg::Mean => Index::build_scene_level(ds, &selector, order),
    }
    .map_err(|e| anyhow!("index stage failed: {e}"))
}

fn cmd_index(cli: &Cli, a: &IndexArgs) -> Result<()> {
    let out = require_out(cli);
    let ds = open(&a.data)?;
    let index = build_index(&ds, a)?;
    index
        .save(&out)
        .map_err(|e| anyhow!("persist stage failed: {e}"))?;
    print_json(
        &json!({"path": out, "entries": index.len(), "dim": index.dim(), "level": index.level()}),
    );
    Ok(())
}

/// Resolves `scene/view`, trying every `/` so either id may contain one.
fn resolve_key<'a>(ds: &'a Dataset, id: &str) -> Result<(&'a str, &'a str)> {
    for (pos, _) in id.match_indices('/') {
        if let Some(i) = ds.index_of(&id[..pos], &id[pos + 1..]) {
            return ds.key(i).map_err(|e| anyhow!("query stage failed: {e}"));
        }
    }
    bail!("query stage failed: unknown query id {id:?} (expected scene/view)")
}

fn cmd_query(a: &QueryArgs) -> Result<()> {
    let ds = open(&a.build.data)?;
    let index = match &a.index {
        Some(dir) => Index::load(dir).map_err(|e| anyhow!("index stage failed: {e}"))?,
        None => build_index(&ds, &a.build)?,
    };
    let mut ids = a.query_id.clone();
    if ids.is_empty() {
        let Some(p) = &a.build.split else {
            bail!("query stage failed: give --query-id or a --split with query views");
        };
        let split = SplitSpec::load(p).map_err(|e| anyhow!("split stage failed: {e}"))?;
        ids = split
            .query_keys()
            .map(|(s, v)| format!("{s}/{v}"))
            .collect();
    }
    if a.k == 0 {
        bail!("query stage failed: --k must be at least 1");
    }
    if a.k > index.len() {
        eprintln!(
            "warning: --k {} exceeds the index size {}; returning the full ranking",
            a.k,
            index.len()
        );
    }
    for id in &ids {
        let (s, v) = resolve_key(&ds, id)?;
        let q = ds
            .vector_by_key(s, v)
            .map_err(|e| anyhow!("query stage failed: {e}"))?;
        let ranked = index
            .query_top_k(&q, a.k)
            .map_err(|e| anyhow!("query stage failed: {e}"))?;
        for (rank, h) in ranked.hits.iter().enumerate() {
            print_json(&json!({
                "query_id": format!("{s}/{v}"),
                "rank": rank + 1,
                "scene_id": h.scene_id,
                "view_id": h.view_id,
                "score": h.score,
            }));
        }
    }
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let (_, outcome) = run_training(&cfg)?;
    print_json(&json!({
        "epochs": outcome.trajectory.len(),
        "initial_loss": outcome.initial_loss(),
        "final_loss": outcome.final_loss(),
        "parameters": outcome.head.param_count(),
        "output_dir": cfg.output_dir,
    }));
    Ok(())
}

fn cmd_eval(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = run_experiment(&cfg)?;
    let r = &out.report;
    print_json(&json!({
        "mrr": r.mrr,
        "recall": r.recall,
        "recall_mode": r.recall_mode,
        "query_count": r.query_count,
        "index_size": r.index_size,
        "output_dir": cfg.output_dir,
    }));
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .unwrap_or_else(|| usage_error("--config is required for this command"));
    let mut spec = SweepSpec::from_file(path)?;
    if let Some(s) = cli.seed {
        spec.base.seed = s;
    }
    let out = cli.out.clone().or_else(|| spec.base.output_dir.clone());
    let result = sweep(&spec)?;
    if let Some(dir) = &out {
        result.write(dir, "sweep")?;
        eprintln!("wrote {}", dir.join("sweep.csv").display());
    }
    print!("{}", result.to_csv());
    Ok(())
}

fn cmd_export(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let out = require_out(cli);
    let mut cfg = load_config(cli)?;
    cfg.output_dir = None;
    let stage = match &a.checkpoint {
        Some(c) => ExportStage::Trained {
            checkpoint: c.clone(),
        },
        None => ExportStage::Raw,
    };
    let summary = export_embeddings(&cfg, &stage, &out)?;
    print_json(&json!({
        "path": out,
        "stage": summary.stage,
        "dim": summary.dim,
        "record_count": summary.record_count,
    }));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Index(a) => cmd_index(cli, a),
        Command::Query(a) => cmd_query(a),
        Command::Train => cmd_train(cli),
        Command::Eval => cmd_eval(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::Export(a) => cmd_export(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli).with_context(|| command_name(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Ingest(_) => "ingest",
        Command::Index(_) => "index",
        Command::Query(_) => "query",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Sweep => "sweep",
        Command::Export(_) => "export",
    }
}

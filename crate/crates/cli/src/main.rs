use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eventrank::cache::write_atomic;
use eventrank::io::{load_corpus, matrices_to_tsv, read_json, read_matrices, read_rankings, write_jsonl, write_matrices, write_rankings};
use eventrank::metrics::{GroupBy, RankStatistic};
use eventrank::model::validate_corpus;
use eventrank::pipeline::{
    evaluate_rankings, fuse_all, run_ablation, write_ablation, write_report, AblationGrid, Pipeline, RunConfig,
    ServiceMode, UpstreamSettings,
};
use eventrank::synthetic::{write_fixture, ScriptedWorld};
use eventrank::{AggregationPolicy, ComponentKind, FusionConfig, FusionMethod};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "eventrank", version, about = "Event-aware text-to-video retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a corpus for consistency problems.
    Validate(RunArgs),
    /// Decompose queries into prequel/current/sequel events.
    Decompose(RunArgs),
    /// Transcribe and translate video audio.
    Transcribe(RunArgs),
    /// Caption sampled frames and summarize videos.
    Describe(RunArgs),
    /// Build per-query score component matrices.
    Score(RunArgs),
    /// Fuse stored score matrices into rankings.
    Fuse(FuseArgs),
    /// Compute retrieval metrics for stored rankings.
    Evaluate(EvaluateArgs),
    /// Run every stage and evaluate.
    Run(RunArgs),
    /// Sweep fusion rules, component drops and upstream settings.
    Ablate(AblateArgs),
    /// Write a small scripted corpus with recorded replay stores.
    Fixture(FixtureArgs),
}

fn serde_value<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus manifest, overriding the config's.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Frames sampled per video.
    #[arg(long)]
    frame_count: Option<usize>,
    /// Use audio transcripts as description context.
    #[arg(long = "use_asr", alias = "use-asr", value_name = "BOOL")]
    use_asr: Option<bool>,
    /// Score events rewritten with place and time context (`false` uses raw events).
    #[arg(long, value_name = "BOOL")]
    refined: Option<bool>,
    /// Aggregation over events and captions, e.g. `max/max` or `top3/mean`.
    #[arg(long)]
    aggregation: Option<AggregationPolicy>,
    /// inv_entropy, mean, max, rrf or neg_exp_entropy.
    #[arg(long)]
    fusion: Option<FusionMethod>,
    #[arg(long)]
    rrf_k: Option<f64>,
    /// replay, record or live.
    #[arg(long, value_parser = serde_value::<ServiceMode>)]
    mode: Option<ServiceMode>,
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    /// language or category.
    #[arg(long, value_parser = serde_value::<GroupBy>)]
    group_by: Option<GroupBy>,
    /// first_relevant or mean_of_relevant.
    #[arg(long, value_parser = serde_value::<RankStatistic>)]
    rank_statistic: Option<RankStatistic>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, &self.corpus) {
            (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(corpus)) => RunConfig::new(corpus),
            (None, None) => bail!("pass --config or --corpus"),
        };
        if let Some(v) = &self.corpus {
            c.corpus = v.clone();
        }
        if let Some(v) = self.frame_count {
            c.frame_count = v;
        }
        if let Some(v) = self.use_asr {
            c.use_asr = v;
        }
        if let Some(v) = self.refined {
            c.use_refined_events = v;
        }
        if let Some(v) = self.aggregation {
            c.aggregation = v;
        }
        if let Some(v) = self.fusion {
            c.fusion.method = v;
        }
        if let Some(v) = self.rrf_k {
            c.fusion.rrf_k = v;
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = &self.replay_dir {
            c.replay_dir = Some(v.clone());
        }
        if let Some(v) = self.group_by {
            c.eval.group_by = Some(v);
        }
        if let Some(v) = self.rank_statistic {
            c.eval.rank_statistic = v;
        }
        if let Some(v) = self.workers {
            c.workers = Some(v);
        }
        if let Some(v) = &self.output {
            c.output_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        let config = self.config()?;
        fs::create_dir_all(&config.output_dir).with_context(|| format!("creating {}", config.output_dir.display()))?;
        Ok(Pipeline::from_config(config)?)
    }
}

#[derive(Args)]
struct FuseArgs {
    /// Directory holding `<stem>.f64` and `<stem>.json`.
    #[arg(long)]
    matrices: PathBuf,
    #[arg(long, default_value = "matrices")]
    stem: String,
    #[arg(long, default_value = "inv_entropy")]
    fusion: FusionMethod,
    #[arg(long, default_value_t = 0.0)]
    rrf_k: f64,
    /// Component groups to leave out (video, query, event, prequel, current, sequel).
    #[arg(long, value_delimiter = ',')]
    drop: Vec<String>,
    /// Output directory for `rankings.jsonl`.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Rankings JSONL, one ranked list per query.
    #[arg(long)]
    rankings: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation grid (JSON).
    #[arg(long)]
    grid: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn write_diagnostics(p: &Pipeline) -> Result<()> {
    let diagnostics = p.diagnostics();
    for d in &diagnostics {
        log::warn!("{} {}: {}", d.stage, d.subject, d.message);
    }
    write_jsonl(&p.config.output_dir.join("diagnostics.jsonl"), &diagnostics)?;
    Ok(())
}

fn finish(p: &Pipeline, wrote: &str) -> Result<()> {
    write_diagnostics(p)?;
    p.services.finish()?;
    println!("{}", p.config.output_dir.join(wrote).display());
    Ok(())
}

fn validate(args: &RunArgs) -> Result<()> {
    let manifest = match (&args.corpus, &args.config) {
        (Some(c), _) => c.clone(),
        (None, Some(_)) => args.config()?.corpus,
        (None, None) => bail!("pass --config or --corpus"),
    };
    let bundle = load_corpus(&manifest)?;
    let violations = validate_corpus(&bundle.corpus);
    for v in &violations {
        println!("{v}");
    }
    let c = &bundle.corpus;
    if !violations.is_empty() {
        bail!("{} problem(s) in {}", violations.len(), manifest.display());
    }
    println!(
        "ok: {} queries, {} videos, dim {}, {} judged queries",
        c.queries.len(),
        c.videos.len(),
        c.dim,
        c.judgments.relevant.len()
    );
    Ok(())
}

fn fuse(args: &FuseArgs) -> Result<()> {
    let mut dropped = Vec::new();
    for name in &args.drop {
        dropped.extend(ComponentKind::parse_group(name)?);
    }
    let matrices: Vec<_> = read_matrices(&args.matrices, &args.stem)?
        .iter()
        .map(|m| m.without(&dropped))
        .collect();
    if let Some(m) = matrices.iter().find(|m| m.components.is_empty()) {
        bail!("query {} has no components left to fuse", m.query_id);
    }
    let config = FusionConfig {
        method: args.fusion,
        rrf_k: args.rrf_k,
    };
    let rankings = fuse_all(&matrices, &config)?;
    fs::create_dir_all(&args.output)?;
    let path = args.output.join("rankings.jsonl");
    write_rankings(&path, &rankings)?;
    println!("{}", path.display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let config = args.run.config()?;
    let bundle = load_corpus(&config.corpus)?;
    let rankings = read_rankings(&args.rankings)?;
    let report = evaluate_rankings(&rankings, &bundle.corpus, &config.eval)?;
    let dir = args.run.output.clone().unwrap_or_else(|| parent_dir(&args.rankings));
    fs::create_dir_all(&dir)?;
    write_report(&dir, &report)?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Validate(args) => validate(args),
        Command::Decompose(args) => {
            let p = args.pipeline()?;
            let out = p.decompose()?;
            write_jsonl(&p.config.output_dir.join("decompositions.jsonl"), &out)?;
            finish(&p, "decompositions.jsonl")
        }
        Command::Transcribe(args) => {
            let p = args.pipeline()?;
            let out = p.transcribe(p.config.asr_stages)?;
            write_jsonl(&p.config.output_dir.join("transcripts.jsonl"), &out)?;
            finish(&p, "transcripts.jsonl")
        }
        Command::Describe(args) => {
            let p = args.pipeline()?;
            let transcripts = if p.config.use_asr {
                Some(p.transcribe(p.config.asr_stages)?)
            } else {
                None
            };
            let out = p.describe(p.config.frame_count, transcripts.as_deref())?;
            write_jsonl(&p.config.output_dir.join("descriptions.jsonl"), &out)?;
            finish(&p, "descriptions.jsonl")
        }
        Command::Score(args) => {
            let p = args.pipeline()?;
            let (_, _, scored) = p.upstream(&UpstreamSettings::from_config(&p.config))?;
            let dir = &p.config.output_dir;
            write_matrices(dir, "matrices", &scored.matrices)?;
            write_atomic(&dir.join("matrices.tsv"), matrices_to_tsv(&scored.matrices).as_bytes())?;
            finish(&p, "matrices.json")
        }
        Command::Fuse(args) => fuse(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Run(args) => {
            let p = args.pipeline()?;
            let out = p.run()?;
            for d in &out.diagnostics {
                log::warn!("{} {}: {}", d.stage, d.subject, d.message);
            }
            print!("{}", out.report.metrics.to_tsv());
            Ok(())
        }
        Command::Ablate(args) => {
            let grid: AblationGrid = read_json(&args.grid)?;
            let p = args.run.pipeline()?;
            let table = run_ablation(&p, &grid)?;
            write_ablation(&p, &table)?;
            write_diagnostics(&p)?;
            p.services.finish()?;
            print!("{}", table.to_tsv());
            Ok(())
        }
        Command::Fixture(args) => {
            let run = write_fixture(ScriptedWorld::tiny(args.seed), &args.output)?;
            println!("{}", run.display());
            Ok(())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use codecorpus::corpus::CorpusCategory;
use codecorpus::pipeline::{
    read_run_manifests, run_all, run_stage, stats_report, PipelineConfig, PipelineError, RunOptions,
    StageName, SCRATCH_ENV,
};

/// Curate a code-model pretraining corpus: filter, dedup, recall, mix, pack.
#[derive(Debug, Parser)]
#[command(name = "codecorpus", version, after_help = format!(
    "Outputs go under <run_root>/<config digest>/<stage>/. Without run_root in the config, \
     ${SCRATCH_ENV} is used, then ./runs."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read the JSONL inputs named in the config.
    Ingest(StageArgs),
    /// Apply the file-level quality rules to GitHub files.
    Filter(StageArgs),
    /// MinHash near-deduplication of GitHub files and web pages.
    Dedup(StageArgs),
    /// Train the tokenizer and run the classifier recall loops.
    Recall(StageArgs),
    /// Interleave code, math and natural language at the configured ratios.
    Mix(StageArgs),
    /// Apply FIM and pack into fixed-length shards.
    Pack(StageArgs),
    /// Print per-stage statistics of a run.
    Stats {
        #[command(flatten)]
        common: StageArgs,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run every stage in order.
    RunAll(StageArgs),
}

#[derive(Debug, Args)]
struct StageArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fail when a stage writes any error record.
    #[arg(long)]
    strict: bool,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Restrict recall to one category.
    #[arg(long, value_enum)]
    category: Option<CategoryArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CategoryArg {
    Code,
    Math,
    Nl,
}

impl From<CategoryArg> for CorpusCategory {
    fn from(c: CategoryArg) -> Self {
        match c {
            CategoryArg::Code => CorpusCategory::Code,
            CategoryArg::Math => CorpusCategory::Math,
            CategoryArg::Nl => CorpusCategory::NaturalLanguage,
        }
    }
}

impl StageArgs {
    fn load(&self) -> Result<(PipelineConfig, RunOptions)> {
        let mut cfg = PipelineConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = jobs;
        }
        let opts = RunOptions {
            strict: self.strict,
            category: self.category.map(Into::into),
        };
        Ok((cfg, opts))
    }
}

fn stage(name: StageName, args: &StageArgs) -> Result<()> {
    let (cfg, opts) = args.load()?;
    let outcome = run_stage(name, &cfg, &opts)?;
    println!("{}", outcome.manifest.to_canonical_json());
    if outcome.error_records > 0 {
        eprintln!(
            "{}: {} error record(s) logged under {}",
            name.as_str(),
            outcome.error_records,
            outcome.dir.display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => stage(StageName::Ingest, a),
        Command::Filter(a) => stage(StageName::Filter, a),
        Command::Dedup(a) => stage(StageName::Dedup, a),
        Command::Recall(a) => stage(StageName::Recall, a),
        Command::Mix(a) => stage(StageName::Mix, a),
        Command::Pack(a) => stage(StageName::Pack, a),
        Command::RunAll(a) => {
            let (cfg, opts) = a.load()?;
            let outcomes = run_all(&cfg, &opts)?;
            let manifests: Vec<_> = outcomes.into_iter().map(|o| o.manifest).collect();
            print!("{}", stats_report(&manifests).to_text());
            println!("run directory: {}", cfg.run_dir()?.display());
            Ok(())
        }
        Command::Stats { common, json } => {
            let (cfg, _) = common.load()?;
            let dir = cfg.run_dir()?;
            let manifests = read_run_manifests(&dir)?;
            if manifests.is_empty() {
                anyhow::bail!("no manifests under {}", dir.display());
            }
            let report = stats_report(&manifests);
            if *json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<PipelineError>() {
                Some(PipelineError::ErrorRecords { .. }) => ExitCode::from(3),
                Some(PipelineError::MissingUpstream { .. } | PipelineError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

//! Stage orchestration: config loading, stage execution, manifests, audit logs
//! and corpus statistics.
//!
//! Every stage reads its inputs from the upstream stage directory of the run
//! and writes `<run>/<stage>/manifest.json` plus its data and audit files. The
//! run directory is named by the digest of the effective configuration, with
//! input paths replaced by the SHA-256 of their contents, so moving the inputs
//! or the output root never changes a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bpe::{train_bpe, BpeError, BpeVocab};
use crate::corpus::{
    config_digest, emit_manifest, ingest_jsonl, read_documents, write_jsonl, CorpusCategory,
    CorpusManifest, CorpusStats, IngestError, Origin, SourceDocument, Stage,
};
use crate::dedup::{dedup_corpus, DedupConfig, DedupError};
use crate::filter::{filter_document, FilterAuditRecord, FilterConfig, FilterConfigError};
use crate::fim::{
    apply_fim, pack_sequences, write_shards, FimConfig, FimDocument, FimError, MixError, MixItem,
};
use crate::recall::{run_recall_loop, RecallConfig, RecallError, RecallIterationReport, UrlPatterns};

/// Environment variable naming the default output root.
pub const SCRATCH_ENV: &str = "CODECORPUS_SCRATCH";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} needs {path}; run the {upstream} stage first")]
    MissingUpstream {
        stage: &'static str,
        upstream: &'static str,
        path: PathBuf,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{count} error record(s) in stage {stage} (strict mode)")]
    ErrorRecords { stage: &'static str, count: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Filter(#[from] FilterConfigError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Recall(#[from] RecallError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Fim(#[from] FimError),
    #[error(transparent)]
    Mix(#[from] MixError),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub github: Option<PathBuf>,
    pub web: Option<PathBuf>,
    pub natural_language: Option<PathBuf>,
    /// Seed pages for web code recall.
    pub code_seed: Option<PathBuf>,
    /// Seed pages for web math recall.
    pub math_seed: Option<PathBuf>,
    /// Seed files for GitHub recall; without it every deduplicated file is kept.
    pub github_seed: Option<PathBuf>,
    /// Annotated URL prefixes, one per line.
    pub url_patterns: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Documents sampled per source for training.
    pub train_docs: usize,
    /// Use a saved vocabulary instead of training one.
    pub vocab_path: Option<PathBuf>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: 1024,
            train_docs: 1000,
            vocab_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecallStageConfig {
    pub web_iterations: usize,
    pub github_iterations: usize,
    /// `iterations` and `seed` here are overridden per loop.
    pub classifier: RecallConfig,
}

impl Default for RecallStageConfig {
    fn default() -> Self {
        RecallStageConfig {
            web_iterations: RecallConfig::for_origin(Origin::Web).iterations,
            github_iterations: RecallConfig::for_origin(Origin::Github).iterations,
            classifier: RecallConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub ratios: BTreeMap<CorpusCategory, f64>,
    /// Stop after this many tokens; unset means as much as every ratio allows.
    pub target_tokens: Option<u64>,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            ratios: BTreeMap::from([
                (CorpusCategory::Code, 0.6),
                (CorpusCategory::Math, 0.1),
                (CorpusCategory::NaturalLanguage, 0.3),
            ]),
            target_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    pub fim_rate: f64,
    pub context_length: usize,
    pub sequences_per_shard: usize,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            fim_rate: 0.5,
            context_length: 4096,
            sequences_per_shard: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide. Never affects outputs.
    pub jobs: usize,
    /// Output root; defaults to `$CODECORPUS_SCRATCH`, then `./runs`.
    pub run_root: Option<PathBuf>,
    pub inputs: InputPaths,
    pub filter: FilterConfig,
    pub dedup: DedupConfig,
    pub tokenizer: TokenizerConfig,
    pub recall: RecallStageConfig,
    pub mix: MixConfig,
    pub pack: PackConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parse a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let i = &mut self.inputs;
        for p in [
            &mut i.github,
            &mut i.web,
            &mut i.natural_language,
            &mut i.code_seed,
            &mut i.math_seed,
            &mut i.github_seed,
            &mut i.url_patterns,
            &mut self.tokenizer.vocab_path,
            &mut self.run_root,
        ] {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.filter.validate()?;
        self.dedup.validate()?;
        self.recall.classifier.validate()?;
        if self.recall.web_iterations == 0 || self.recall.github_iterations == 0 {
            return Err(PipelineError::Config("recall iterations must be >= 1".into()));
        }
        crate::fim::validate_ratios(&self.mix.ratios)?;
        self.fim_config().validate()?;
        if self.tokenizer.vocab_size < BpeVocab::byte_level().len() {
            return Err(PipelineError::Config(format!(
                "tokenizer.vocab_size must be at least {}",
                BpeVocab::byte_level().len()
            )));
        }
        Ok(())
    }

    fn fim_config(&self) -> FimConfig {
        FimConfig {
            fim_rate: self.pack.fim_rate,
            context_length: self.pack.context_length,
            rng_seed: derive_seed(self.seed, "pack"),
        }
    }

    fn output_root(&self) -> PathBuf {
        self.run_root
            .clone()
            .or_else(|| std::env::var_os(SCRATCH_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// The configuration as it enters digests: no output root or worker count,
    /// and every input path replaced by the hash of its contents.
    fn fingerprint(&self) -> Result<serde_json::Value, PipelineError> {
        let mut cfg = self.clone();
        cfg.run_root = None;
        cfg.jobs = 0;
        let hash = |p: &Option<PathBuf>| -> Result<Option<PathBuf>, PipelineError> {
            p.as_ref().map(|p| file_sha256(p).map(PathBuf::from)).transpose()
        };
        let i = &self.inputs;
        cfg.inputs = InputPaths {
            github: hash(&i.github)?,
            web: hash(&i.web)?,
            natural_language: hash(&i.natural_language)?,
            code_seed: hash(&i.code_seed)?,
            math_seed: hash(&i.math_seed)?,
            github_seed: hash(&i.github_seed)?,
            url_patterns: hash(&i.url_patterns)?,
        };
        cfg.tokenizer.vocab_path = hash(&self.tokenizer.vocab_path)?;
        serde_json::to_value(&cfg).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// `<root>/<first 16 hex digits of the config digest>`.
    pub fn run_dir(&self) -> Result<PathBuf, PipelineError> {
        let digest = config_digest(&self.fingerprint()?);
        Ok(self.output_root().join(&digest[..16]))
    }
}

fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(format!("sha256:{}", hex::encode(Sha256::digest(&bytes))))
}

/// Per-stage seed: the first eight bytes of SHA-256(seed_le ++ stage name).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageName {
    Ingest,
    Filter,
    Dedup,
    Recall,
    Mix,
    Pack,
}

impl StageName {
    pub const ALL: [StageName; 6] = [
        StageName::Ingest,
        StageName::Filter,
        StageName::Dedup,
        StageName::Recall,
        StageName::Mix,
        StageName::Pack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Filter => "filter",
            StageName::Dedup => "dedup",
            StageName::Recall => "recall",
            StageName::Mix => "mix",
            StageName::Pack => "pack",
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            StageName::Ingest => Stage::Ingested,
            StageName::Filter => Stage::Filtered,
            StageName::Dedup => Stage::Deduped,
            StageName::Recall => Stage::Recalled,
            StageName::Mix => Stage::Mixed,
            StageName::Pack => Stage::Packed,
        }
    }

    pub fn upstream(self) -> Option<StageName> {
        match self {
            StageName::Ingest => None,
            StageName::Filter => Some(StageName::Ingest),
            StageName::Dedup => Some(StageName::Filter),
            StageName::Recall => Some(StageName::Dedup),
            StageName::Mix => Some(StageName::Recall),
            StageName::Pack => Some(StageName::Mix),
        }
    }
}

impl std::str::FromStr for StageName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub strict: bool,
    /// Restrict the recall stage to one category.
    pub category: Option<CorpusCategory>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: CorpusManifest,
    /// Per-record errors written to the stage's audit log.
    pub error_records: usize,
    pub dir: PathBuf,
}

pub fn manifest_path(run_dir: &Path, stage: StageName) -> PathBuf {
    run_dir.join(stage.as_str()).join("manifest.json")
}

/// Run one stage. With `strict`, any error record fails the stage after its
/// outputs and audit log are written.
pub fn run_stage(
    stage: StageName,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let run_dir = cfg.run_dir()?;
    if let Some(up) = stage.upstream() {
        let path = manifest_path(&run_dir, up);
        if !path.is_file() {
            return Err(PipelineError::MissingUpstream {
                stage: stage.as_str(),
                upstream: up.as_str(),
                path,
            });
        }
    }
    let dir = run_dir.join(stage.as_str());
    fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let ctx = StageContext {
        cfg,
        run_dir: &run_dir,
        dir: &dir,
        opts,
    };
    let run = || match stage {
        StageName::Ingest => ctx.ingest(),
        StageName::Filter => ctx.filter(),
        StageName::Dedup => ctx.dedup(),
        StageName::Recall => ctx.recall(),
        StageName::Mix => ctx.mix(),
        StageName::Pack => ctx.pack(),
    };
    let (manifest, error_records) = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?
            .install(run)?
    } else {
        run()?
    };
    let path = manifest_path(&run_dir, stage);
    manifest
        .write_to(&path)
        .map_err(io_err(format!("writing {}", path.display())))?;
    log::info!(
        "{}: {} -> {} docs, {} tokens",
        stage.as_str(),
        manifest.input_doc_count,
        manifest.doc_count,
        manifest.token_count
    );
    if opts.strict && error_records > 0 {
        return Err(PipelineError::ErrorRecords {
            stage: stage.as_str(),
            count: error_records,
        });
    }
    Ok(StageOutcome {
        manifest,
        error_records,
        dir,
    })
}

/// Run every stage in order, stopping at the first failure.
pub fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<StageOutcome>, PipelineError> {
    StageName::ALL
        .into_iter()
        .map(|s| run_stage(s, cfg, opts))
        .collect()
}

struct StageContext<'a> {
    cfg: &'a PipelineConfig,
    run_dir: &'a Path,
    dir: &'a Path,
    opts: &'a RunOptions,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    source: &'a str,
    #[serde(flatten)]
    error: &'a IngestError,
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    loop_name: &'a str,
    #[serde(flatten)]
    report: &'a RecallIterationReport,
}

/// A mixed document with its category and token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedRecord {
    pub category: CorpusCategory,
    pub tokens: u64,
    pub doc: SourceDocument,
}

const INGEST_SOURCES: [(&str, Origin); 6] = [
    ("github", Origin::Github),
    ("web", Origin::Web),
    ("natural_language", Origin::Web),
    ("code_seed", Origin::Web),
    ("math_seed", Origin::Web),
    ("github_seed", Origin::Github),
];

fn write_docs(path: &Path, docs: &[SourceDocument]) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    write_jsonl(BufWriter::new(file), docs).map_err(io_err(format!("writing {}", path.display())))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| io_err(path.display().to_string())(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path.display().to_string()))?;
    }
    w.flush().map_err(io_err(path.display().to_string()))
}

/// Documents at `path`, or none when the file does not exist.
fn read_optional(path: &Path) -> Result<Vec<SourceDocument>, PipelineError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_documents(path).map_err(io_err(format!("reading {}", path.display())))
}

impl StageContext<'_> {
    fn upstream(&self, stage: StageName, file: &str) -> PathBuf {
        self.run_dir.join(stage.as_str()).join(file)
    }

    fn input_path(&self, name: &str) -> Option<&PathBuf> {
        let i = &self.cfg.inputs;
        match name {
            "github" => i.github.as_ref(),
            "web" => i.web.as_ref(),
            "natural_language" => i.natural_language.as_ref(),
            "code_seed" => i.code_seed.as_ref(),
            "math_seed" => i.math_seed.as_ref(),
            "github_seed" => i.github_seed.as_ref(),
            _ => None,
        }
    }

    fn ingest(&self) -> Result<(CorpusManifest, usize), PipelineError> {
        let mut stats = CorpusStats::default();
        let mut errors = Vec::new();
        for (name, origin) in INGEST_SOURCES {
            let Some(path) = self.input_path(name) else {
                continue;
            };
            let stream = ingest_jsonl(path, origin).map_err(io_err(format!("opening {}", path.display())))?;
            let mut docs = Vec::new();
            for item in stream {
                stats.input_doc_count += 1;
                match item {
                    Ok(doc) => docs.push(doc),
                    Err(e) => errors.push((name, e)),
                }
            }
            stats.doc_count += docs.len() as u64;
            write_docs(&self.dir.join(format!("{name}.jsonl")), &docs)?;
        }
        for (name, e) in &errors {
            log::warn!("{name}: {e}");
        }
        write_lines(
            &self.dir.join("errors.jsonl"),
            errors.iter().map(|(source, error)| ErrorRecord { source, error }),
        )?;
        let digest_input = serde_json::json!({ "inputs": self.cfg.fingerprint()?["inputs"] });
        Ok((emit_manifest(&stats, Stage::Ingested, &digest_input, self.cfg.seed), errors.len()))
    }

    fn filter(&self) -> Result<(CorpusManifest, usize), PipelineError> {
        let docs = read_optional(&self.upstream(StageName::Ingest, "github.jsonl"))?;
        let verdicts: Vec<_> = docs
            .par_iter()
            .map(|d| filter_document(d, &self.cfg.filter))
            .collect();
        let kept: Vec<SourceDocument> = docs
            .iter()
            .zip(&verdicts)
            .filter(|(_, v)| v.keep)
            .map(|(d, _)| d.clone())
            .collect();
        write_docs(&self.dir.join("github.jsonl"), &kept)?;
        write_lines(
            &self.dir.join("audit.jsonl"),
            docs.iter().zip(&verdicts).map(|(d, v)| FilterAuditRecord::new(&d.id, v)),
        )?;
        let stats = CorpusStats {
            doc_count: kept.len() as u64,
            input_doc_count: docs.len() as u64,
            ..Default::default()
        };
        Ok((emit_manifest(&stats, Stage::Filtered, &self.cfg.filter, self.cfg.seed), 0))
    }

    fn dedup_config(&self) -> DedupConfig {
        DedupConfig {
            seed: derive_seed(self.cfg.seed, "dedup"),
            ..self.cfg.dedup.clone()
        }
    }

    fn dedup(&self) -> Result<(CorpusManifest, usize), PipelineError> {
        let dcfg = self.dedup_config();
        let mut stats = CorpusStats::default();
        let mut clusters = Vec::new();
        let mut empty = Vec::new();
        for (name, path) in [
            ("github", self.upstream(StageName::Filter, "github.jsonl")),
            ("web", self.upstream(StageName::Ingest, "web.jsonl")),
        ] {
            let docs = read_optional(&path)?;
            // Blank documents cannot be shingled; drop and audit them.
            let (docs, blank): (Vec<SourceDocument>, Vec<SourceDocument>) =
                docs.into_iter().partition(|d| !d.content.trim().is_empty());
            empty.extend(blank.into_iter().map(|d| (name, d.id)));
            let outcome = dedup_corpus(&docs, &dcfg)?;
            stats.input_doc_count += docs.len() as u64;
            stats.doc_count += outcome.kept.len() as u64;
            let kept: BTreeSet<&str> = outcome.kept.iter().map(String::as_str).collect();
            let out: Vec<SourceDocument> = docs.iter().filter(|d| kept.contains(d.id.as_str())).cloned().collect();
            write_docs(&self.dir.join(format!("{name}.jsonl")), &out)?;
            clusters.extend(outcome.clusters.into_iter().map(|c| (name, c)));
        }
        stats.input_doc_count += empty.len() as u64;
        write_lines(
            &self.dir.join("clusters.jsonl"),
            clusters
                .iter()
                .map(|(source, c)| serde_json::json!({ "source": source, "cluster": c })),
        )?;
        write_lines(
            &self.dir.join("dropped_empty.jsonl"),
            empty.iter().map(|(source, id)| serde_json::json!({ "source": source, "id": id })),
        )?;
        Ok((emit_manifest(&stats, Stage::Deduped, &dcfg, self.cfg.seed), 0))
    }

    fn vocab(&self) -> Result<BpeVocab, PipelineError> {
        if let Some(path) = &self.cfg.tokenizer.vocab_path {
            return Ok(BpeVocab::load(path)?);
        }
        let mut sample = Vec::new();
        for path in [
            self.upstream(StageName::Dedup, "github.jsonl"),
            self.upstream(StageName::Dedup, "web.jsonl"),
            self.upstream(StageName::Ingest, "natural_language.jsonl"),
        ] {
            let docs = read_optional(&path)?;
            sample.extend(docs.into_iter().take(self.cfg.tokenizer.train_docs).map(|d| d.content));
        }
        Ok(train_bpe(sample.iter().map(String::as_str), self.cfg.tokenizer.vocab_size)?)
    }

    fn recall(&self) -> Result<(CorpusManifest, usize), PipelineError> {
        let only = self.opts.category;
        if only == Some(CorpusCategory::NaturalLanguage) {
            return Err(PipelineError::Config(
                "the natural-language corpus is sampled directly and has no recall loop".into(),
            ));
        }
        let vocab = self.vocab()?;
        vocab.save(&self.dir.join("vocab.json"))?;
        let patterns = match &self.cfg.inputs.url_patterns {
            Some(p) => UrlPatterns::parse(
                &fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?,
            ),
            None => UrlPatterns::default(),
        };
        let stage_seed = derive_seed(self.cfg.seed, "recall");
        let loop_cfg = |name: &str, iterations: usize| RecallConfig {
            iterations,
            seed: derive_seed(stage_seed, name),
            ..self.cfg.recall.classifier.clone()
        };

        let web = read_optional(&self.upstream(StageName::Dedup, "web.jsonl"))?;
        let github = read_optional(&self.upstream(StageName::Dedup, "github.jsonl"))?;
        let mut stats = CorpusStats {
            input_doc_count: (web.len() + github.len()) as u64,
            ..Default::default()
        };
        let mut reports = Vec::new();
        let mut taken: BTreeSet<String> = BTreeSet::new();

        for (name, category, seed_file) in [
            ("web_code", CorpusCategory::Code, "code_seed.jsonl"),
            ("web_math", CorpusCategory::Math, "math_seed.jsonl"),
        ] {
            let mut out = Vec::new();
            let seeds = read_optional(&self.upstream(StageName::Ingest, seed_file))?;
            if only.is_none_or(|c| c == category) && !seeds.is_empty() && !web.is_empty() {
                let cfg = loop_cfg(name, self.cfg.recall.web_iterations);
                let outcome = run_recall_loop(&web, &seeds, &patterns, &cfg, &vocab)?;
                let collected: BTreeSet<&str> = outcome.collected.iter().map(String::as_str).collect();
                // A page recalled as code is not counted again as math.
                out = web
                    .iter()
                    .filter(|d| collected.contains(d.id.as_str()) && !taken.contains(&d.id))
                    .cloned()
                    .collect();
                taken.extend(out.iter().map(|d| d.id.clone()));
                stats.seed_sizes.extend(outcome.reports.iter().map(|r| r.seed_size_after as u64));
                reports.extend(outcome.reports.into_iter().map(|r| (name, r)));
            } else {
                log::info!("{name}: no seed or no candidates, nothing recalled");
            }
            stats.doc_count += out.len() as u64;
            write_docs(&self.dir.join(format!("{name}.jsonl")), &out)?;
        }

        if only.is_none_or(|c| c == CorpusCategory::Code) {
            let seeds = read_optional(&self.upstream(StageName::Ingest, "github_seed.jsonl"))?;
            let out = if seeds.is_empty() || github.is_empty() {
                github
            } else {
                let cfg = loop_cfg("github", self.cfg.recall.github_iterations);
                let outcome = run_recall_loop(&github, &seeds, &patterns, &cfg, &vocab)?;
                let collected: BTreeSet<&str> = outcome.collected.iter().map(String::as_str).collect();
                stats.seed_sizes.extend(outcome.reports.iter().map(|r| r.seed_size_after as u64));
                reports.extend(outcome.reports.into_iter().map(|r| ("github", r)));
                github.into_iter().filter(|d| collected.contains(d.id.as_str())).collect()
            };
            stats.doc_count += out.len() as u64;
            write_docs(&self.dir.join("github.jsonl"), &out)?;
        }

        write_lines(
            &self.dir.join("reports.jsonl"),
            reports.iter().map(|(loop_name, report)| ReportRecord { loop_name, report }),
        )?;
        let digest_input = serde_json::json!({
            "recall": self.cfg.recall,
            "tokenizer": self.cfg.fingerprint()?["tokenizer"],
            "patterns": self.cfg.fingerprint()?["inputs"]["url_patterns"],
            "category": only.map(CorpusCategory::as_str),
        });
        Ok((emit_manifest(&stats, Stage::Recalled, &digest_input, self.cfg.seed), 0))
    }

    fn mix(&self) -> Result<(CorpusManifest, usize), PipelineError> {
        let vocab = BpeVocab::load(&self.upstream(StageName::Recall, "vocab.json"))?;
        let recall_dir = |f: &str| self.upstream(StageName::Recall, f);
        let mut sources: BTreeMap<CorpusCategory, Vec<SourceDocument>> = BTreeMap::new();
        let mut code = read_optional(&recall_dir("github.jsonl"))?;
        code.extend(read_optional(&recall_dir("web_code.jsonl"))?);
        sources.insert(CorpusCategory::Code, code);
        sources.insert(CorpusCategory::Math, read_optional(&recall_dir("web_math.jsonl"))?);
        sources.insert(
            CorpusCategory::NaturalLanguage,
            read_optional(&self.upstream(StageName::Ingest, "natural_language.jsonl"))?,
        );
        let available: usize = sources.values().map(Vec::len).sum();

        let streams: BTreeMap<CorpusCategory, Vec<MixItem<SourceDocument>>> = sources
            .into_iter()
            .map(|(cat, docs)| {
                let items = docs
                    .into_par_iter()
                    .map(|doc| MixItem {
                        tokens: vocab.encode_ids(&doc.content).len() as u64,
                        item: doc,
                    })
                    .collect();
                (cat, items)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "mix"));
        let mixed = crate::fim::mix_corpus(streams, &self.cfg.mix.ratios, self.cfg.mix.target_tokens, &mut rng)?;

        let mut stats = CorpusStats {
            doc_count: mixed.len() as u64,
            input_doc_count: available as u64,
            ..Default::default()
        };
        for (cat, item) in &mixed {
            stats.add_tokens(*cat, item.tokens);
        }
        write_lines(
            &self.dir.join("mixed.jsonl"),
            mixed.into_iter().map(|(category, item)| MixedRecord {
                category,
                tokens: item.tokens,
                doc: item.item,
            }),
        )?;
        Ok((emit_manifest(&stats, Stage::Mixed, &self.cfg.mix, self.cfg.seed), 0))
    }

    fn pack(&self) -> Result<(CorpusManifest, usize), PipelineError> {
        let vocab = BpeVocab::load(&self.upstream(StageName::Recall, "vocab.json"))?;
        let path = self.upstream(StageName::Mix, "mixed.jsonl");
        let reader = BufReader::new(File::open(&path).map_err(io_err(format!("opening {}", path.display())))?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(io_err(format!("reading {}", path.display())))?;
            let rec: MixedRecord = serde_json::from_str(&line)
                .map_err(|e| io_err(format!("parsing {}", path.display()))(e.into()))?;
            records.push(rec);
        }
        let fim_cfg = self.cfg.fim_config();
        let transformed: Vec<FimDocument> = records
            .par_iter()
            .filter(|r| !r.doc.content.is_empty())
            .map(|r| apply_fim(&r.doc.id, &r.doc.content, &vocab, &fim_cfg))
            .collect::<Result<_, _>>()?;
        let mut stats = CorpusStats {
            doc_count: transformed.len() as u64,
            input_doc_count: records.len() as u64,
            ..Default::default()
        };
        for (rec, doc) in records.iter().filter(|r| !r.doc.content.is_empty()).zip(&transformed) {
            stats.add_tokens(rec.category, doc.ids.len() as u64);
        }
        let sequences = pack_sequences(&transformed, &fim_cfg, &vocab)?;
        let shard_dir = self.dir.join("shards");
        if shard_dir.exists() {
            fs::remove_dir_all(&shard_dir).map_err(io_err(format!("clearing {}", shard_dir.display())))?;
        }
        write_shards(&shard_dir, &sequences, fim_cfg.context_length, self.cfg.pack.sequences_per_shard)
            .map_err(io_err(format!("writing {}", shard_dir.display())))?;
        let fim_count = transformed.iter().filter(|d| d.was_fim).count();
        log::info!("pack: {} sequences, {fim_count} of {} documents in PSM form", sequences.len(), transformed.len());
        Ok((emit_manifest(&stats, Stage::Packed, &fim_cfg, self.cfg.seed), 0))
    }
}

/// Read the manifests present in a run directory, in stage order.
pub fn read_run_manifests(run_dir: &Path) -> Result<Vec<CorpusManifest>, PipelineError> {
    let mut out = Vec::new();
    for stage in StageName::ALL {
        let path = manifest_path(run_dir, stage);
        if path.is_file() {
            out.push(CorpusManifest::read_from(&path).map_err(io_err(format!("reading {}", path.display())))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub input_doc_count: u64,
    pub doc_count: u64,
    pub token_count: u64,
    pub category_counts: BTreeMap<CorpusCategory, u64>,
    pub category_shares: BTreeMap<CorpusCategory, f64>,
    /// Fraction of input documents dropped, for filter and dedup.
    pub removal_rate: Option<f64>,
    /// Seed size after each recall iteration.
    pub seed_sizes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: Vec<StageRow>,
}

pub fn stats_report(manifests: &[CorpusManifest]) -> StatsReport {
    let rows = manifests
        .iter()
        .map(|m| {
            let category_shares = m
                .category_counts
                .iter()
                .map(|(&c, &n)| (c, if m.token_count == 0 { 0.0 } else { n as f64 / m.token_count as f64 }))
                .collect();
            let removal_rate = match m.stage {
                Stage::Filtered | Stage::Deduped if m.input_doc_count > 0 => {
                    Some(m.input_doc_count.saturating_sub(m.doc_count) as f64 / m.input_doc_count as f64)
                }
                _ => None,
            };
            StageRow {
                stage: m.stage,
                input_doc_count: m.input_doc_count,
                doc_count: m.doc_count,
                token_count: m.token_count,
                category_counts: m.category_counts.clone(),
                category_shares,
                removal_rate,
                seed_sizes: m.seed_sizes.clone(),
            }
        })
        .collect();
    StatsReport { rows }
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One line per stage, then one indented line per category.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let _ = write!(
                out,
                "{:<9} docs {} -> {}  tokens {}",
                row.stage.as_str(),
                row.input_doc_count,
                row.doc_count,
                row.token_count
            );
            if let Some(rate) = row.removal_rate {
                let _ = write!(out, "  removed {:.2}%", rate * 100.0);
            }
            if !row.seed_sizes.is_empty() {
                let sizes: Vec<String> = row.seed_sizes.iter().map(u64::to_string).collect();
                let _ = write!(out, "  seed sizes [{}]", sizes.join(", "));
            }
            out.push('\n');
            for (cat, n) in &row.category_counts {
                let _ = writeln!(
                    out,
                    "  {:<17} {:>12} tokens  {:>7.3}%",
                    cat.as_str(),
                    n,
                    row.category_shares[cat] * 100.0
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_stage() {
        assert_eq!(derive_seed(7, "mix"), derive_seed(7, "mix"));
        assert_ne!(derive_seed(7, "mix"), derive_seed(7, "pack"));
        assert_ne!(derive_seed(7, "mix"), derive_seed(8, "mix"));
    }

    #[test]
    fn config_defaults_and_schema() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[pack]\ncontext_length = 64\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pack.context_length, 64);
        assert_eq!(cfg.mix.ratios[&CorpusCategory::Code], 0.6);
        assert!(cfg.validate().is_ok());
        assert!(PipelineConfig::from_toml("sed = 3").is_err());
        let bad = PipelineConfig::from_toml("[mix.ratios]\ncode = 0.5\n").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in StageName::ALL {
            assert_eq!(s.as_str().parse::<StageName>().unwrap(), s);
        }
        assert!("bogus".parse::<StageName>().is_err());
    }

    fn manifest(stage: Stage, counts: &[(CorpusCategory, u64)]) -> CorpusManifest {
        let mut stats = CorpusStats {
            doc_count: 8,
            input_doc_count: 10,
            ..Default::default()
        };
        for &(c, n) in counts {
            stats.add_tokens(c, n);
        }
        emit_manifest(&stats, stage, &(), 0)
    }

    #[test]
    fn single_manifest_report() {
        let r = stats_report(&[manifest(Stage::Ingested, &[])]);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.to_text().lines().count(), 1);
    }

    #[test]
    fn shares_match_counts() {
        let m = manifest(
            Stage::Mixed,
            &[(CorpusCategory::Code, 60), (CorpusCategory::Math, 10), (CorpusCategory::NaturalLanguage, 30)],
        );
        let r = stats_report(std::slice::from_ref(&m));
        assert_eq!(r.rows[0].category_counts, m.category_counts);
        assert_eq!(r.rows[0].category_shares[&CorpusCategory::Code], 0.6);
        let text = r.to_text();
        assert!(text.contains("code") && text.contains("60 tokens") && text.contains("60.000%"));
        let back: StatsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let d = stats_report(&[manifest(Stage::Deduped, &[])]);
        assert_eq!(d.rows[0].removal_rate, Some(0.2));
    }
}

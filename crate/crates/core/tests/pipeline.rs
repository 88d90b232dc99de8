mod common;

use std::fs;
use std::path::Path;

use codecorpus::corpus::{CorpusCategory, CorpusManifest, Stage};
use codecorpus::pipeline::{
    manifest_path, read_run_manifests, run_all, run_stage, stats_report, PipelineConfig,
    PipelineError, RunOptions, StageName,
};

fn load(dir: &Path, root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&dir.join("pipeline.toml")).unwrap();
    cfg.run_root = Some(root.to_path_buf());
    cfg
}

#[test]
fn filter_drops_the_long_line_file() {
    let dir = tempfile::tempdir().unwrap();
    let lines = [
        serde_json::json!({"id": "a", "content": "def f():\n    return 1\n"}),
        serde_json::json!({"id": "b", "content": format!("{}\n", "x".repeat(150))}),
        serde_json::json!({"id": "c", "content": "print('hello world')\n"}),
    ];
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("gh.jsonl"), body).unwrap();
    fs::write(dir.path().join("p.toml"), "[inputs]\ngithub = \"gh.jsonl\"\n").unwrap();
    let mut cfg = PipelineConfig::load(&dir.path().join("p.toml")).unwrap();
    cfg.run_root = Some(dir.path().join("runs"));
    let opts = RunOptions::default();
    run_stage(StageName::Ingest, &cfg, &opts).unwrap();
    let first = run_stage(StageName::Filter, &cfg, &opts).unwrap();
    assert_eq!(first.manifest.doc_count, 2);
    assert_eq!(first.manifest.input_doc_count, 3);
    let path = manifest_path(&cfg.run_dir().unwrap(), StageName::Filter);
    let bytes = fs::read(&path).unwrap();
    run_stage(StageName::Filter, &cfg, &opts).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
    let audit = fs::read_to_string(first.dir.join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 3);
    assert!(audit.contains("avg_line"));
}

#[test]
fn missing_upstream_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.run_root = Some(dir.path().to_path_buf());
    let err = run_stage(StageName::Dedup, &cfg, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::MissingUpstream { upstream: "filter", .. }));
}

#[test]
fn strict_ingest_fails_on_error_records() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gh.jsonl"), "{\"id\":\"a\",\"content\":\"x\"}\n{\"id\":\n").unwrap();
    fs::write(dir.path().join("p.toml"), "[inputs]\ngithub = \"gh.jsonl\"\n").unwrap();
    let mut cfg = PipelineConfig::load(&dir.path().join("p.toml")).unwrap();
    cfg.run_root = Some(dir.path().join("runs"));
    let lenient = run_stage(StageName::Ingest, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(lenient.error_records, 1);
    assert_eq!(lenient.manifest.doc_count, 1);
    let strict = RunOptions { strict: true, ..Default::default() };
    assert!(matches!(
        run_stage(StageName::Ingest, &cfg, &strict),
        Err(PipelineError::ErrorRecords { count: 1, .. })
    ));
}

#[test]
fn run_all_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    common::write_pipeline_fixture(dir.path(), 400, 5);
    let cfg = load(dir.path(), &dir.path().join("runs"));
    let outcomes = run_all(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(outcomes.len(), 6);
    let manifests: Vec<CorpusManifest> = outcomes.iter().map(|o| o.manifest.clone()).collect();
    assert_eq!(read_run_manifests(&cfg.run_dir().unwrap()).unwrap(), manifests);
    for m in &manifests {
        assert_eq!(m.token_count, m.category_counts.values().sum::<u64>());
    }
    let filtered = &manifests[1];
    assert!(filtered.doc_count < filtered.input_doc_count);
    let deduped = &manifests[2];
    assert!(deduped.doc_count < deduped.input_doc_count);
    let recalled = &manifests[3];
    assert_eq!(recalled.stage, Stage::Recalled);
    assert_eq!(recalled.seed_sizes.len(), 6);
    let mixed = &manifests[4];
    for cat in [CorpusCategory::Code, CorpusCategory::Math, CorpusCategory::NaturalLanguage] {
        assert!(mixed.category_counts.get(&cat).copied().unwrap_or(0) > 0, "{cat:?} missing");
    }
    let report = stats_report(&manifests);
    assert_eq!(report.rows.len(), 6);
    assert!(report.to_text().contains("packed"));

    // Downstream stages alone reproduce their outputs.
    let pack_dir = outcomes[5].dir.clone();
    let shard = pack_dir.join("shards").join("shard-00000.bin");
    let before = fs::read(&shard).unwrap();
    fs::remove_dir_all(&pack_dir).unwrap();
    let again = run_stage(StageName::Pack, &cfg, &RunOptions::default()).unwrap();
    assert_eq!(again.manifest, manifests[5]);
    assert_eq!(fs::read(&shard).unwrap(), before);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    common::write_pipeline_fixture(dir.path(), 200, 8);
    let mut one = load(dir.path(), &dir.path().join("one"));
    one.jobs = 1;
    let mut four = load(dir.path(), &dir.path().join("four"));
    four.jobs = 4;
    let a = run_all(&one, &RunOptions::default()).unwrap();
    let b = run_all(&four, &RunOptions::default()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.manifest, y.manifest);
    }
    let shard = |root: &PipelineConfig| fs::read(root.run_dir().unwrap().join("pack/shards/shard-00000.bin")).unwrap();
    assert_eq!(shard(&one), shard(&four));
}

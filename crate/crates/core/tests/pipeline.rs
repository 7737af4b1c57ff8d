mod common;

use std::fs;
use std::path::Path;

use common::fixture_dir;
use epiwatch::pipeline::{run_pipeline, write_fixture, Manifest, PipelineConfig, Stage};
use epiwatch::SyntheticSpec;
use sha2::{Digest, Sha256};

fn fresh_fixture(dir: &Path) -> PipelineConfig {
    write_fixture(dir, &SyntheticSpec::default()).unwrap();
    PipelineConfig::load(dir.join("config.toml")).unwrap()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p.display().to_string());
            }
        }
    }
    out
}

#[test]
fn bundled_fixture_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let written = write_fixture(tmp.path(), &SyntheticSpec::default()).unwrap();
    assert_eq!(written.len(), 7);
    for path in written {
        let rel = path.strip_prefix(tmp.path()).unwrap();
        let committed = fs::read(fixture_dir().join(rel)).unwrap_or_default();
        assert!(committed == fs::read(&path).unwrap(), "{} is out of date; rerun gen-fixture", rel.display());
    }
}

#[test]
fn detect_stage_needs_no_gazetteers() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fresh_fixture(tmp.path());
    fs::remove_dir_all(tmp.path().join("gazetteers")).unwrap();
    config.out = tmp.path().join("out");
    let manifest = run_pipeline(&config, Stage::Detect).unwrap();
    assert!(manifest.artifacts.iter().all(|a| a.path.starts_with("detect/")));
    assert!(manifest.artifacts.iter().any(|a| a.path == "detect/alarms.csv"));
    assert!(manifest.artifacts.iter().any(|a| a.path == "detect/correlation.csv"));
    assert_eq!(run_pipeline(&config, Stage::Expand).unwrap_err().exit_code(), 2);
}

#[test]
fn missing_inputs_are_config_errors_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fresh_fixture(tmp.path());
    config.out = tmp.path().join("out");
    config.gazetteers.location = tmp.path().join("nope.txt");
    let err = run_pipeline(&config, Stage::All).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("gazetteers.location"), "{err}");
    assert!(files_under(&config.out).is_empty());

    let mut config = fresh_fixture(tmp.path());
    config.corpus.judgments = None;
    assert_eq!(run_pipeline(&config, Stage::Rank).unwrap_err().exit_code(), 2);
}

#[test]
fn failure_rolls_back_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fresh_fixture(tmp.path());
    config.out = tmp.path().join("out");
    fs::write(tmp.path().join("judgments.csv"), "query_id,tweet_id,annotator,label\nehec,x,a1,7\n").unwrap();
    let err = run_pipeline(&config, Stage::All).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(files_under(&config.out).is_empty(), "{:?}", files_under(&config.out));
}

#[test]
fn manifest_checksums_match_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fresh_fixture(tmp.path());
    config.out = tmp.path().join("out");
    config.rank.steps = 2_000;
    config.lda.iterations = 50;
    config.eval.folds = 3;
    let manifest = run_pipeline(&config, Stage::All).unwrap();
    let on_disk: Manifest =
        serde_json::from_str(&fs::read_to_string(config.out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    let mut paths: Vec<&str> = manifest.artifacts.iter().map(|a| a.path.as_str()).collect();
    let sorted = {
        let mut s = paths.clone();
        s.sort();
        s
    };
    assert_eq!(paths, sorted);
    for a in &manifest.artifacts {
        let bytes = fs::read(config.out.join(&a.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), a.sha256, "{}", a.path);
        assert_eq!(bytes.len(), a.bytes);
    }
    for expected in [
        "expand/queries.tsv",
        "expand/cotags.csv",
        "expand/topics.txt",
        "expand/expansion.txt",
        "rank/model_full.txt",
        "rank/model_mc.txt",
        "rank/rankings.csv",
        "eval/metrics.csv",
        "eval/metrics.txt",
    ] {
        assert!(paths.contains(&expected), "missing {expected}");
    }
    paths.retain(|p| p.ends_with(".tmp"));
    assert!(paths.is_empty());
    assert!(!files_under(&config.out).iter().any(|p| p.ends_with(".tmp")));

    let model = fs::read_to_string(config.out.join("rank/model_full.txt")).unwrap();
    let model = epiwatch::RankingModel::from_text(&model).unwrap();
    assert_eq!(model.context_id, "2011-05-23..2011-06-19|ehec|lower_saxony");
}

#[test]
fn seed_changes_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fresh_fixture(tmp.path());
    config.out = tmp.path().join("a");
    let a = run_pipeline(&config, Stage::Detect).unwrap();
    config.seed += 1;
    config.out = tmp.path().join("b");
    let b = run_pipeline(&config, Stage::Detect).unwrap();
    assert_ne!(a.config_sha256, b.config_sha256);
    assert_eq!(a.artifacts, b.artifacts);
}

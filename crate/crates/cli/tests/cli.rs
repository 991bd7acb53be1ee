//! End-to-end CLI tests driving the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anicond_core::datapipe::{serialize_manifest, synthetic_zipf_corpus};
use anicond_core::numerics::SeededRng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anicond"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn core_data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(rel)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn canon_resolves_paper_aliases() {
    let out = run(&["taxonomy", "canon", "CU"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("close-up"));

    let out = run(&["taxonomy", "canon", "vertigo shot"]);
    assert!(stdout(&out).contains("dolly zoom"));
}

#[test]
fn canon_unknown_token_exits_3() {
    let out = run(&["taxonomy", "canon", "not-a-real-tag"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["taxonomy", "frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_shipped_vocabulary_file() {
    let vocab = core_data("default_vocabulary.json");
    let out = run(&["taxonomy", "validate", vocab.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("vocabulary ok"));
}

#[test]
fn caption_validate_extract_render() {
    let fixture = core_data("fixtures/harbor_scene.caption.json");
    let path = fixture.to_str().unwrap();

    let out = run(&["caption", "validate", path, "--strict"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["caption", "extract", path]);
    let text = stdout(&out);
    assert!(text.contains("Shinkai Style"));
    assert!(text.contains("Fog"));

    let out = run(&["caption", "render", path]);
    let text = stdout(&out);
    assert!(text.starts_with("<tag>"));
    assert!(text.contains("<summary>"));
    assert!(text.contains("<description>"));
}

#[test]
fn caption_validate_rejects_malformed_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, "{ not json").unwrap();
    let out = run(&["caption", "validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

fn write_corpus(dir: &Path, n: usize) -> PathBuf {
    let mut rng = SeededRng::new(99);
    let corpus = synthetic_zipf_corpus(n, (6, 8, 6, 10), 1.2, &mut rng);
    let path = dir.join("corpus.ndjson");
    fs::write(&path, serialize_manifest(&corpus)).unwrap();
    path
}

#[test]
fn rebalance_and_curriculum_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 300);
    let out_dir = dir.path().join("out");

    let out = run(&[
        "rebalance",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats = fs::read_to_string(out_dir.join("rebalance.stats.csv")).unwrap();
    assert!(stats.contains("gini_before"));

    let out = run(&[
        "curriculum-plan",
        "--manifest",
        manifest.to_str().unwrap(),
        "--tau",
        "0.4",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let plan = fs::read_to_string(out_dir.join("curriculum.plan.csv")).unwrap();
    assert_eq!(plan.lines().count(), 301, "header plus one row per clip");
}

#[test]
fn dpo_pairs_from_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.ndjson");
    let mut rows = String::new();
    for (i, s) in [5.0, 4.0, 3.0, 2.4].iter().enumerate() {
        rows.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "prompt_id": "p0", "candidate_id": format!("c{i}"),
                "face": s, "limb": s, "line": s, "motion": s
            })
        ));
    }
    fs::write(&scores, rows).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "dpo-pairs",
        "--scores",
        scores.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pairs = fs::read_to_string(out_dir.join("dpo.pairs.ndjson")).unwrap();
    assert_eq!(pairs.lines().count(), 6, "all-survivor prompt yields 6 pairs");
}

#[test]
fn eval_rates_csv() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.ndjson");
    let mut rows = String::new();
    for i in 0..3 {
        rows.push_str(&format!(
            "{}\n",
            serde_json::json!({"clip_id": format!("c{i}"), "dimension": "vfx", "verdict": "Erroneous"})
        ));
    }
    fs::write(&labels, rows).unwrap();
    let out = run(&["eval", "rates", "--in", labels.to_str().unwrap(), "--n", "500"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("vfx,0.6000,0.0000"));
}

#[test]
fn sample_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"["shinkai style", "medium shot", "static", "fog"]"#).unwrap();
    let text = dir.path().join("text.txt");
    fs::write(&text, "a misty harbor at dusk").unwrap();

    let sample_once = |out: &Path| {
        let res = run(&[
            "sample",
            "--spec",
            spec.to_str().unwrap(),
            "--text",
            text.to_str().unwrap(),
            "--w-text",
            "5.0",
            "--w-tag",
            "2.0",
            "--steps",
            "8",
            "--seed",
            "123",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    sample_once(&out_a);
    sample_once(&out_b);
    let latent_a = fs::read(out_a.join("latent.bin")).unwrap();
    let latent_b = fs::read(out_b.join("latent.bin")).unwrap();
    assert_eq!(latent_a, latent_b, "same seed, same bytes");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("run.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["mode"], "hybrid");
    assert_eq!(manifest["anchors"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["experts"][0], "high_noise");
    assert_eq!(manifest["experts"][7], "low_noise");
}

#[test]
fn invalid_spec_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"["totally made up tag"]"#).unwrap();
    let out = run(&["sample", "--spec", spec.to_str().unwrap(), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pipeline_runs_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 200);
    let out_dir = dir.path().join("pipe");

    let out = run(&[
        "pipeline",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in [
        "cascade.tiers.ndjson",
        "cascade.stats.csv",
        "rebalance.weights.ndjson",
        "curriculum.plan.csv",
        "stage_cascade.json",
        "stage_rebalance.json",
        "stage_curriculum.json",
        "pipeline.report.json",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    // Resume cleanly from the rebalance stage.
    let out = run(&[
        "pipeline",
        "--manifest",
        manifest.to_str().unwrap(),
        "--from",
        "rebalance",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Tamper with the cascade output; resuming must fail with the
    // dependency exit code.
    let tiers = out_dir.join("cascade.tiers.ndjson");
    let mut contents = fs::read_to_string(&tiers).unwrap();
    contents.push_str("{\"id\":\"ghost\",\"tier\":\"s\"}\n");
    fs::write(&tiers, contents).unwrap();
    let out = run(&[
        "pipeline",
        "--manifest",
        manifest.to_str().unwrap(),
        "--from",
        "rebalance",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash mismatch"));
}

#[test]
fn empty_corpus_pipeline_is_graceful() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.ndjson");
    fs::write(&manifest, "").unwrap();
    let out_dir = dir.path().join("pipe");
    let out = run(&[
        "pipeline",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("curriculum.plan.csv").exists());
}

#[test]
fn report_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(dir.path(), 150);
    let out_dir = dir.path().join("pipe");
    let out = run(&[
        "pipeline",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let a = run(&["report", "--dir", out_dir.to_str().unwrap()]);
    let b = run(&["report", "--dir", out_dir.to_str().unwrap()]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout, "report output must be byte-stable");
    assert!(stdout(&a).contains("Gini before/after"));
    // Missing optional stage is marked absent rather than failing.
    assert!(stdout(&a).contains("preference pairs: absent"));
}

#[test]
fn toy_train_writes_losses_and_checkpoint_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = run(&[
            "toy-train",
            "--steps",
            "12",
            "--seed",
            "21",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let losses_a = fs::read_to_string(out_a.join("losses.csv")).unwrap();
    let losses_b = fs::read_to_string(out_b.join("losses.csv")).unwrap();
    assert_eq!(losses_a, losses_b, "identical seed, bit-identical loss curve");
    assert!(out_a.join("checkpoint/manifest.json").exists());
}

#[test]
fn env_seed_override_applies() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"["shinkai style"]"#).unwrap();
    let run_with_env = |seed: &str, out: &Path| {
        let res = bin()
            .env("ANICOND_SEED", seed)
            .args([
                "sample",
                "--spec",
                spec.to_str().unwrap(),
                "--steps",
                "1",
                "--no-cfg",
                "--out-dir",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    run_with_env("5", &out_a);
    run_with_env("5", &out_b);
    run_with_env("6", &out_c);
    let a = fs::read(out_a.join("latent.bin")).unwrap();
    let b = fs::read(out_b.join("latent.bin")).unwrap();
    let c = fs::read(out_c.join("latent.bin")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c, "different env seed, different sample");
}

#[test]
fn distill_writes_curves_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("distill");
    let out = run(&[
        "distill",
        "--steps",
        "4",
        "--seed",
        "9",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("routing.trace.json")).unwrap())
            .unwrap();
    assert_eq!(trace["chain"].as_array().unwrap().len(), 8);
    assert_eq!(trace["experts"][0], "high_noise");
    let gen = fs::read_to_string(out_dir.join("generator.curve.csv")).unwrap();
    assert_eq!(gen.lines().count(), 9, "header plus 4 steps per expert");
    assert!(out_dir.join("ema-checkpoint/manifest.json").exists());
}

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use dore_cli::dataset::Dataset;
use dore_cli::extract::{run_extract, ExtractConfig};
use dore_cli::serve::spawn_background;
use dore_core::backend::http::HttpBackend;
use dore_core::backend::mock::MockBackend;
use dore_core::backend::LanguageModel;
use dore_core::decoder::DecoderConfig;
use dore_core::prompt::PromptMode;

fn toy(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/toy")
        .join(name)
}

#[test]
fn http_backend_matches_in_process_mock() {
    let mock = MockBackend::from_file(&toy("script.json")).unwrap();
    let server = spawn_background(Arc::new(MockBackend::from_file(&toy("script.json")).unwrap())).unwrap();
    let http = HttpBackend::new(&server.url()).unwrap();

    assert_eq!(http.capabilities(), mock.capabilities());
    let text = "[hotel, has slot, area]";
    assert_eq!(http.tokenize(text).unwrap(), mock.tokenize(text).unwrap());

    let ds = Dataset::load(&toy("dialogues.jsonl")).unwrap();
    let decoder = DecoderConfig {
        constrained: true,
        ..DecoderConfig::default()
    };
    let cfg = ExtractConfig::new(decoder, PromptMode::PerType);
    let local = run_extract(&ds, &cfg, &mock).unwrap();
    let remote = run_extract(&ds, &cfg, &http).unwrap();
    assert_eq!(local, remote);
    assert!(!local.partial());
}

#[test]
fn http_errors_are_typed() {
    let server = spawn_background(Arc::new(MockBackend::from_file(&toy("script.json")).unwrap())).unwrap();
    let http = HttpBackend::new(&server.url()).unwrap();
    let err = http.tokenize("zzzz unknown").unwrap_err();
    assert!(
        matches!(err, dore_core::backend::BackendError::UnknownCharacters { .. }),
        "{err:?}"
    );
}

#[test]
fn cli_extract_then_eval() {
    let out = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_dore");
    let status = Command::new(bin)
        .args(["extract", "--data"])
        .arg(toy("dialogues.jsonl"))
        .arg("--backend")
        .arg(format!("mock:{}", toy("script.json").display()))
        .arg("--out")
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["predictions.jsonl", "ontology.json", "manifest.json"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    let report = out.path().join("report.json");
    let eval = Command::new(bin)
        .args(["eval", "--gold"])
        .arg(toy("dialogues.jsonl"))
        .arg("--pred")
        .arg(out.path().join("predictions.jsonl"))
        .arg("--json")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(eval.status.code(), Some(0));
    let stdout = String::from_utf8(eval.stdout).unwrap();
    assert!(stdout.contains("F1-Score"), "{stdout}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["global"]["f1"], 1.0);

    let bad = Command::new(bin)
        .args(["extract", "--data", "/nonexistent.jsonl", "--backend", "mock:/nonexistent.json", "--out"])
        .arg(out.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}

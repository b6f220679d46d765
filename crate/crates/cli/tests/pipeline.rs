//! Runs the command-line stages end to end on a tiny configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use clap::Parser;
use conceptdr::cbm::Curve;
use conceptdr_cli::artifacts::Manifest;
use conceptdr_cli::commands::service_state;
use conceptdr_cli::service::{router, InterventionResponse};
use conceptdr_cli::{run, Cli, Context};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

const CONFIG: &str = r#"
seed = 5
out = "run"

[pipeline.dataset]
n_images = 600
image_size = 32

[pipeline.network]
input_height = 32
input_width = 32

[pipeline.grader]
epochs = 1

[pipeline.cbm]
epochs = 1

[pipeline.tcav]
n_negative_sets = 3
per_level = 8
"#;

fn setup(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

fn cmd(config: &Path, args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["conceptdr", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv)?)
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn missing_prerequisites_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let err = cmd(&config, &["train-grader"]).unwrap_err().to_string();
    assert!(err.contains("conceptdr gen-data"), "{err}");
    let err = cmd(&config, &["tcav"]).unwrap_err().to_string();
    assert!(err.contains("conceptdr train-grader"), "{err}");
    let err = cmd(&config, &["curve", "--concepts", "4"]).unwrap_err().to_string();
    assert!(err.contains("conceptdr train-cbm --concepts 4"), "{err}");
}

#[test]
fn config_errors_are_line_precise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\n[pipeline.grader]\nepochs = -3\n").unwrap();
    let err = cmd(&path, &["gen-data"]).unwrap_err().to_string();
    assert!(err.contains("bad.toml") && err.contains("line 3"), "{err}");
}

#[test]
fn seed_must_be_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let err = run(Cli::try_parse_from(["conceptdr", "--out", out.to_str().unwrap(), "gen-data"]).unwrap()).unwrap_err();
    assert!(err.to_string().contains("--seed"), "{err}");
}

#[test]
fn bad_flag_values_are_rejected() {
    assert!(Cli::try_parse_from(["conceptdr", "curve", "--scope", "some"]).is_err());
    assert!(Cli::try_parse_from(["conceptdr", "cav", "--mode", "cropped"]).is_err());
    assert!(Cli::try_parse_from(["conceptdr", "intervene", "--case", "x", "--set", "NV"]).is_err());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let root = dir.path().join("run");

    cmd(&config, &["gen-data"]).unwrap();
    cmd(&config, &["train-grader"]).unwrap();
    cmd(&config, &["tcav"]).unwrap();
    let report = fs::read(root.join("tcav_report.json")).unwrap();
    assert!(root.join("cavs.json").exists());

    // the same config and seed reproduce the report in a fresh directory
    let other = dir.path().join("again");
    let out = other.to_str().unwrap();
    for stage in ["gen-data", "train-grader", "tcav"] {
        cmd(&config, &["--out", out, stage]).unwrap();
    }
    assert_eq!(fs::read(other.join("tcav_report.json")).unwrap(), report);
    let report: Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(report.as_object().unwrap().len(), 4);
    assert_eq!(report["1"].as_object().unwrap().len(), 6);

    cmd(&config, &["tcav", "--mode", "masked"]).unwrap();
    assert!(root.join("tcav_report_masked.json").exists());
    assert!(root.join("tcav_report_masked.csv").exists());

    cmd(&config, &["train-cbm"]).unwrap();
    let sidecar = read_json(root.join("cbm6.json"));
    assert_eq!(sidecar["concepts"].as_array().unwrap().len(), 6);
    cmd(&config, &["rank"]).unwrap();
    cmd(&config, &["curve", "--scope", "misclassified"]).unwrap();
    let curve: Curve = serde_json::from_value(read_json(root.join("tti_curve.json"))).unwrap();
    assert_eq!(curve.steps.len(), 7);
    for (k, step) in curve.steps.iter().enumerate() {
        assert_eq!(step.k, k);
        assert_eq!(step.intervened, curve.ordering[..k]);
    }
    let ranking = read_json(root.join("tti_ranking.json"));
    let ranked: Vec<&str> = ranking.as_array().unwrap().iter().map(|r| r["concept"].as_str().unwrap()).collect();
    let ordering: Vec<String> = curve.ordering.iter().map(|c| c.to_string()).collect();
    assert_eq!(ranked, ordering);

    cmd(&config, &["train-cbm", "--concepts", "4"]).unwrap();
    cmd(&config, &["curve", "--concepts", "4", "--scope", "full"]).unwrap();
    let curve: Curve = serde_json::from_value(read_json(root.join("tti_curve.json"))).unwrap();
    assert_eq!(curve.steps.len(), 5);

    cmd(&config, &["report"]).unwrap();
    let table = fs::read_to_string(root.join("report.csv")).unwrap();
    let labels: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["model", "Grader", "CBM", "CBM + TTI (full)", "CBM", "CBM + TTI (incorrect)"]);

    let manifest: Manifest = serde_json::from_value(read_json(root.join("manifests/train-grader.json"))).unwrap();
    assert_eq!(manifest.command, "train-grader");
    assert_eq!(manifest.seed, 5);
    assert_eq!(manifest.config_hash.len(), 64);
    assert!(manifest.artifacts.contains_key("grader.tnet"));
    let leftovers: Vec<_> = fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    // the CLI and the HTTP endpoint agree on identical requests
    let cli = Cli::try_parse_from(["conceptdr", "--config", config.to_str().unwrap(), "serve"]).unwrap();
    let state = Arc::new(service_state(&Context::from_cli(&cli).unwrap()).unwrap());
    let app = router(state.clone());
    let runtime = tokio::runtime::Builder::new_current_thread().build().unwrap();
    for served in state.cases.iter().take(5) {
        let id = &served.case.id;
        cmd(&config, &["intervene", "--case", id, "--set", "NV=true", "--set", "MA=false"]).unwrap();
        let from_cli: InterventionResponse =
            serde_json::from_value(read_json(root.join("interventions").join(format!("{id}.json")))).unwrap();
        let body = serde_json::json!({"concepts": BTreeMap::from([("NV", true), ("MA", false)])}).to_string();
        let from_api: InterventionResponse = runtime.block_on(async {
            let resp = app
                .clone()
                .oneshot(
                    Request::post(format!("/api/cases/{id}/intervention"))
                        .body(Body::from(body))
                        .unwrap(),
                )
                .await
                .unwrap();
            serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap()
        });
        assert_eq!(from_cli, from_api);
    }
}

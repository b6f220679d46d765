use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use conceptdr::cbm::{train_grade_head, BottleneckModel, EvalCase, HeadConfig, Surrogates};
use conceptdr::synthgen::{grade_of, Concept, ConceptVector};
use conceptdr::tinynet::{Network, NetworkSpec};
use conceptdr_cli::service::{apply_intervention, router, AppState, CaseSummary, CaseView, InterventionResponse, ServedCase};
use http_body_util::BodyExt;
use image::RgbImage;
use serde_json::{json, Value};
use tower::ServiceExt;

const LOW: f64 = 0.02;
const HIGH: f64 = 0.98;

fn pattern(bits: u8) -> ConceptVector {
    ConceptVector(std::array::from_fn(|i| bits >> i & 1 == 1))
}

/// Bottleneck whose head is fit on surrogate encodings of every concept
/// pattern, so it reproduces the grading rule on clean inputs.
fn fixture_model() -> BottleneckModel {
    let spec = NetworkSpec {
        input_channels: 3,
        input_height: 8,
        input_width: 8,
        block_channels: vec![4],
        n_outputs: 6,
    };
    let surrogates = Surrogates {
        concepts: Concept::ALL.to_vec(),
        low: vec![LOW; 6],
        high: vec![HIGH; 6],
    };
    let mut inputs = Vec::new();
    let mut grades = Vec::new();
    for bits in 0..64 {
        let v = pattern(bits);
        inputs.push(surrogates.of_truth(&v.select(&Concept::ALL)));
        grades.push(usize::from(grade_of(&v)));
    }
    let head = train_grade_head(&inputs, &grades, &HeadConfig::default()).unwrap();
    for (x, &g) in inputs.iter().zip(&grades) {
        assert_eq!(head.predict(x), g, "fixture head must follow the grading rule");
    }
    BottleneckModel {
        network: Network::init(spec, 1).unwrap(),
        concepts: Concept::ALL.to_vec(),
        head,
        surrogates,
    }
}

/// Case `nv-missed` has true concepts {MA, HE, IRMA, NV} but NV predicted
/// absent; the rest are noisy but correctly binarized.
fn fixture_cases(n: usize) -> Vec<ServedCase> {
    let mut cases = vec![ServedCase {
        case: EvalCase {
            id: "nv-missed".into(),
            probs: vec![0.9, 0.8, 0.1, 0.1, 0.85, 0.2],
            truth: vec![true, true, false, false, true, true],
            grade: 4,
        },
        image: RgbImage::from_pixel(8, 8, image::Rgb([200, 90, 40])),
    }];
    for i in 1..n {
        let v = pattern((i * 37 % 64) as u8);
        let truth = v.select(&Concept::ALL);
        let probs = truth
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let wobble = ((i * 7 + j * 3) % 10) as f64 / 40.0;
                // every fifth case gets its MA prediction flipped
                let flip = j == 0 && i % 5 == 0;
                if t != flip {
                    0.95 - wobble
                } else {
                    0.05 + wobble
                }
            })
            .collect();
        cases.push(ServedCase {
            case: EvalCase {
                id: format!("case-{i:03}"),
                probs,
                truth,
                grade: usize::from(grade_of(&v)),
            },
            image: RgbImage::from_pixel(8, 8, image::Rgb([i as u8, 0, 0])),
        });
    }
    cases
}

fn app_with(n: usize, tcav: Option<Value>) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(fixture_model(), fixture_cases(n), tcav, "abc123".into()));
    (router(state.clone()), state)
}

fn app(n: usize) -> Router {
    app_with(n, None).0
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    send(
        app,
        Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
    )
    .await
}

#[tokio::test]
async fn lists_every_case() {
    let app = app(50);
    let (status, body) = get(&app, "/api/cases").await;
    assert_eq!(status, StatusCode::OK);
    let cases: Vec<CaseSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(cases.len(), 50);
    let first = &cases[0];
    assert_eq!(first.id, "nv-missed");
    assert_eq!((first.grade_before, first.true_grade, first.correct), (3, 4, false));
    assert!(cases.iter().all(|c| c.correct == (c.grade_before == c.true_grade)));
}

#[tokio::test]
async fn case_view_and_image() {
    let app = app(5);
    let (status, body) = get(&app, "/api/cases/nv-missed").await;
    assert_eq!(status, StatusCode::OK);
    let view: CaseView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view.image, "/api/cases/nv-missed/image");
    assert_eq!(view.true_concepts[&Concept::Nv], true);
    assert_eq!(view.predicted[&Concept::Nv], 0.2);
    assert_eq!((view.grade_before, view.grade_after, view.true_grade), (3, 3, 4));
    assert!(view.predicted.values().all(|&p| p > 0.0 && p < 1.0));

    let (status, png) = get(&app, &view.image).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let decoded = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!(decoded.get_pixel(3, 3).0, [200, 90, 40]);
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let app = app(3);
    for uri in ["/api/cases/nope", "/api/cases/nope/image"] {
        assert_eq!(get(&app, uri).await.0, StatusCode::NOT_FOUND);
    }
    let (status, _) = post(&app, "/api/cases/nope/intervention", r#"{"concepts":{}}"#).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_intervention_is_a_no_op() {
    let app = app(10);
    for id in ["nv-missed", "case-005"] {
        let (status, body) = post(&app, &format!("/api/cases/{id}/intervention"), r#"{"concepts":{}}"#).await;
        assert_eq!(status, StatusCode::OK);
        let r: InterventionResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(r.grade_after, r.grade_before);
    }
}

#[tokio::test]
async fn flipping_the_missed_concept_fixes_the_grade() {
    let app = app(5);
    let (status, body) = post(&app, "/api/cases/nv-missed/intervention", r#"{"concepts":{"NV":true}}"#).await;
    assert_eq!(status, StatusCode::OK);
    let r: InterventionResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.grade_before, r.grade_after), (3, 4));
    assert_eq!(r.corrected, vec![0.9, 0.8, 0.1, 0.1, 0.85, HIGH]);
    assert!((r.head_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let best = (0..5).max_by(|&a, &b| r.head_probabilities[a].total_cmp(&r.head_probabilities[b])).unwrap();
    assert_eq!(best, 4);
}

#[tokio::test]
async fn intervention_is_idempotent_and_stateless() {
    let (app, state) = app_with(5, None);
    let body = r#"{"concepts":{"NV":true,"MA":false}}"#;
    let (_, a) = post(&app, "/api/cases/nv-missed/intervention", body).await;
    let (_, b) = post(&app, "/api/cases/nv-missed/intervention", body).await;
    assert_eq!(a, b);
    let (_, view) = get(&app, "/api/cases/nv-missed").await;
    let view: CaseView = serde_json::from_slice(&view).unwrap();
    assert_eq!(view.predicted[&Concept::Nv], 0.2);
    assert_eq!(state.cases[0].case.probs[5], 0.2);
}

#[tokio::test]
async fn api_matches_the_library_intervention() {
    let (app, state) = app_with(12, None);
    for (i, served) in state.cases.iter().enumerate().take(10) {
        let mut asserted = BTreeMap::new();
        for (j, &c) in Concept::ALL.iter().enumerate() {
            if (i + j) % 3 == 0 {
                asserted.insert(c, served.case.truth[j]);
            }
        }
        let body = json!({ "concepts": asserted.iter().map(|(c, v)| (c.name(), *v)).collect::<BTreeMap<_, _>>() });
        let (status, bytes) = post(&app, &format!("/api/cases/{}/intervention", served.case.id), &body.to_string()).await;
        assert_eq!(status, StatusCode::OK);
        let r: InterventionResponse = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(r, apply_intervention(&state.model, &served.case, &asserted).unwrap());
    }
}

#[tokio::test]
async fn malformed_bodies_name_their_fields() {
    let app = app(3);
    let uri = "/api/cases/nv-missed/intervention";
    let cases = [
        ("not json", vec!["body"]),
        (r#"{"concept": {}}"#, vec!["concept", "concepts"]),
        (r#"{"concepts": {"NV": "yes"}}"#, vec!["concepts.NV"]),
        (r#"{"concepts": {"CWS": true}}"#, vec!["concepts.CWS"]),
        (r#"{"concepts": [true]}"#, vec!["concepts"]),
    ];
    for (body, fields) in cases {
        let (status, bytes) = post(&app, uri, body).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        let got: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
        assert_eq!(got, fields, "{body}");
    }
}

#[tokio::test]
async fn tcav_and_model_endpoints() {
    let app = app(2);
    assert_eq!(get(&app, "/api/tcav").await.0, StatusCode::NOT_FOUND);

    let report = json!({"1": {"MA": {"mean": 0.9, "significant": true}}});
    let (app, _) = app_with(2, Some(report.clone()));
    let (status, body) = get(&app, "/api/tcav").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), report);

    let (status, body) = get(&app, "/api/model").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["concepts"], json!(["MA", "HE", "EX", "SE", "IRMA", "NV"]));
    assert_eq!(v["surrogates"]["NV"], json!([LOW, HIGH]));
    assert_eq!(v["config_hash"], "abc123");
}

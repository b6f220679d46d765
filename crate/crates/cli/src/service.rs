//! Read-only HTTP API over a finished bottleneck run.
//!
//! Model state is loaded once and shared immutably; interventions are
//! computed per request and never stored.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conceptdr::cbm::{intervene, BottleneckModel, EvalCase, THRESHOLD};
use conceptdr::synthgen::Concept;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub struct ServedCase {
    pub case: EvalCase,
    pub image: RgbImage,
}

pub struct AppState {
    pub model: BottleneckModel,
    pub cases: Vec<ServedCase>,
    pub tcav: Option<Value>,
    pub config_hash: String,
    index: HashMap<String, usize>,
}

impl AppState {
    pub fn new(model: BottleneckModel, cases: Vec<ServedCase>, tcav: Option<Value>, config_hash: String) -> Self {
        let index = cases.iter().enumerate().map(|(i, c)| (c.case.id.clone(), i)).collect();
        Self {
            model,
            cases,
            tcav,
            config_hash,
            index,
        }
    }

    pub fn case(&self, id: &str) -> Option<&ServedCase> {
        self.index.get(id).map(|&i| &self.cases[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub id: String,
    pub grade_before: usize,
    pub true_grade: usize,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub id: String,
    pub image: String,
    pub true_concepts: BTreeMap<Concept, bool>,
    pub predicted: BTreeMap<Concept, f64>,
    pub true_grade: usize,
    pub grade_before: usize,
    pub grade_after: usize,
    pub tcav: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResponse {
    pub id: String,
    pub concepts: Vec<Concept>,
    pub corrected: Vec<f64>,
    pub grade_before: usize,
    pub grade_after: usize,
    pub head_probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationError {
    pub error: String,
    pub fields: Vec<FieldError>,
}

impl ValidationError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            error: message.clone(),
            fields: vec![FieldError {
                field: field.to_string(),
                message,
            }],
        }
    }
}

/// Validates an intervention body `{"concepts": {"NV": true, ...}}` against
/// the model's concept list.
pub fn parse_intervention(body: &Value, concepts: &[Concept]) -> Result<BTreeMap<Concept, bool>, ValidationError> {
    let obj = body
        .as_object()
        .ok_or_else(|| ValidationError::single("body", "expected a JSON object"))?;
    let mut fields = Vec::new();
    for key in obj.keys().filter(|k| *k != "concepts") {
        fields.push(FieldError {
            field: key.clone(),
            message: "unknown field".into(),
        });
    }
    let mut out = BTreeMap::new();
    match obj.get("concepts") {
        None => fields.push(FieldError {
            field: "concepts".into(),
            message: "missing field".into(),
        }),
        Some(Value::Object(map)) => {
            for (name, v) in map {
                let field = format!("concepts.{name}");
                let concept = match name.parse::<Concept>() {
                    Ok(c) if concepts.contains(&c) => c,
                    _ => {
                        let names: Vec<&str> = concepts.iter().map(|c| c.name()).collect();
                        fields.push(FieldError {
                            field,
                            message: format!("unknown concept (model predicts {})", names.join(", ")),
                        });
                        continue;
                    }
                };
                match v.as_bool() {
                    Some(b) => {
                        out.insert(concept, b);
                    }
                    None => fields.push(FieldError {
                        field,
                        message: "expected true or false".into(),
                    }),
                }
            }
        }
        Some(_) => fields.push(FieldError {
            field: "concepts".into(),
            message: "expected an object of concept name to boolean".into(),
        }),
    }
    if fields.is_empty() {
        Ok(out)
    } else {
        Err(ValidationError {
            error: "invalid intervention request".into(),
            fields,
        })
    }
}

/// Applies user-asserted concept values to one case.
///
/// Unasserted concepts keep their prediction; asserted ones are corrected
/// only where the binarized prediction disagrees.
pub fn apply_intervention(
    model: &BottleneckModel,
    case: &EvalCase,
    asserted: &BTreeMap<Concept, bool>,
) -> conceptdr::Result<InterventionResponse> {
    let mut truth: Vec<bool> = case.probs.iter().map(|&p| p > THRESHOLD).collect();
    let mut subset = Vec::with_capacity(asserted.len());
    for (c, &v) in asserted {
        let j = model
            .concepts
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| conceptdr::Error::Invalid(format!("model does not predict {c}")))?;
        truth[j] = v;
        subset.push(j);
    }
    let corrected = intervene(&case.probs, &truth, &model.surrogates, &subset)?;
    Ok(InterventionResponse {
        id: case.id.clone(),
        concepts: model.concepts.clone(),
        grade_before: model.grade(&case.probs)?,
        grade_after: model.grade(&corrected)?,
        head_probabilities: model.head.probabilities(&corrected),
        corrected,
    })
}

pub fn case_view(model: &BottleneckModel, case: &EvalCase) -> CaseView {
    let grade = model.head.predict(&case.probs);
    CaseView {
        id: case.id.clone(),
        image: format!("/api/cases/{}/image", case.id),
        true_concepts: model.concepts.iter().copied().zip(case.truth.iter().copied()).collect(),
        predicted: model.concepts.iter().copied().zip(case.probs.iter().copied()).collect(),
        true_grade: case.grade,
        grade_before: grade,
        grade_after: grade,
        tcav: "/api/tcav".into(),
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("no case with id `{id}`"))
}

async fn list_cases(State(state): State<Arc<AppState>>) -> Json<Vec<CaseSummary>> {
    Json(
        state
            .cases
            .iter()
            .map(|c| {
                let grade_before = state.model.head.predict(&c.case.probs);
                CaseSummary {
                    id: c.case.id.clone(),
                    grade_before,
                    true_grade: c.case.grade,
                    correct: grade_before == c.case.grade,
                }
            })
            .collect(),
    )
}

async fn get_case(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.case(&id) {
        Some(c) => Json(case_view(&state.model, &c.case)).into_response(),
        None => not_found(&id),
    }
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let Some(c) = state.case(&id) else {
        return not_found(&id);
    };
    let mut png = Vec::new();
    if let Err(e) = c.image.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    }
    ([(header::CONTENT_TYPE, "image/png")], png).into_response()
}

async fn post_intervention(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(c) = state.case(&id) else {
        return not_found(&id);
    };
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(ValidationError::single("body", format!("malformed JSON: {e}"))),
            )
                .into_response()
        }
    };
    let asserted = match parse_intervention(&value, &state.model.concepts) {
        Ok(a) => a,
        Err(v) => return (StatusCode::UNPROCESSABLE_ENTITY, Json(v)).into_response(),
    };
    match apply_intervention(&state.model, &c.case, &asserted) {
        Ok(r) => Json(r).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_tcav(State(state): State<Arc<AppState>>) -> Response {
    match &state.tcav {
        Some(v) => Json(v.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "no TCAV report in this run; run `conceptdr tcav`"),
    }
}

async fn get_model(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(serde_json::json!({
        "concepts": state.model.concepts,
        "surrogates": state.model.surrogates.as_map(),
        "config_hash": state.config_hash,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/image", get(get_image))
        .route("/api/cases/{id}/intervention", post(post_intervention))
        .route("/api/tcav", get(get_tcav))
        .route("/api/model", get(get_model))
        .with_state(state)
}

//! HTTP/JSON service over intervention sessions.
//!
//! Models and the dataset are loaded once and shared read-only. Each session
//! sits behind its own mutex inside a concurrent map, so requests on
//! different sessions never wait for each other.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dashmap::DashMap;
use pscbm::data::{Dataset, Split};
use pscbm::intervention::{row_seed, InterventionEvent, InterventionSession, StrategyKind};
use pscbm::metrics::row_concept_hits;
use pscbm::model::io;
use pscbm::nn::argmax;
use pscbm::{Error, ModelBundle};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::StrategySpec;

pub struct ServedModel {
    pub bundle: Arc<ModelBundle>,
    pub fingerprint: String,
}

/// Identifies a session; returned by `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub model_id: String,
    pub sample_index: usize,
    /// Seconds since the Unix epoch.
    pub created_at: f64,
    pub seed: u64,
    pub fingerprint: String,
}

struct Entry {
    handle: SessionHandle,
    session: InterventionSession,
}

pub struct ServiceState {
    models: BTreeMap<String, ServedModel>,
    data: Arc<Dataset>,
    samples: usize,
    seed: u64,
    fingerprint: String,
    sessions: DashMap<String, Arc<Mutex<Entry>>>,
    next_id: AtomicU64,
}

impl ServiceState {
    /// Checks that every model fits the dataset.
    pub fn new(models: Vec<(String, ModelBundle)>, data: Dataset, samples: usize, seed: u64) -> anyhow::Result<Self> {
        if models.is_empty() {
            anyhow::bail!("serve needs at least one model");
        }
        if samples == 0 {
            return Err(crate::config::ConfigError::new("samples", "need at least one Monte Carlo sample").into());
        }
        let mut served = BTreeMap::new();
        for (id, bundle) in models {
            if bundle.concepts() != data.num_concepts() || bundle.input_dim() != data.input_dim() {
                anyhow::bail!(Error::ShapeMismatch(format!("model {id:?} does not match the dataset")));
            }
            let fingerprint = io::fingerprint(&bundle);
            if served
                .insert(id.clone(), ServedModel { bundle: Arc::new(bundle), fingerprint })
                .is_some()
            {
                anyhow::bail!(crate::config::ConfigError::new("model", format!("duplicate model id {id:?}")));
            }
        }
        let summary = json!({
            "models": served.iter().map(|(k, m)| (k.clone(), m.fingerprint.clone())).collect::<BTreeMap<_, _>>(),
            "samples": samples,
            "seed": seed,
        });
        let fingerprint = hex::encode(Sha256::digest(summary.to_string().as_bytes()))[..16].to_string();
        Ok(Self {
            models: served,
            data: Arc::new(data),
            samples,
            seed,
            fingerprint,
            sessions: DashMap::new(),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/models/{id}/samples", get(list_samples))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/interventions", post(intervene))
        .route("/sessions/{id}/undo", post(undo))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Error body: `{"error": {"code", "message"}, "fingerprint"}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fingerprint: String,
}

impl ApiError {
    fn new(st: &ServiceState, status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            fingerprint: st.fingerprint.clone(),
        }
    }

    fn engine(st: &ServiceState, e: Error) -> Self {
        let (status, code) = match &e {
            Error::AlreadyIntervened(_) => (StatusCode::CONFLICT, "already_intervened"),
            Error::AllIntervened => (StatusCode::CONFLICT, "all_intervened"),
            Error::NothingToUndo => (StatusCode::CONFLICT, "nothing_to_undo"),
            Error::UnknownConcept(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_concept"),
            Error::IncompatibleStrategy(_) => (StatusCode::UNPROCESSABLE_ENTITY, "incompatible_strategy"),
            Error::MissingPercentileTable => (StatusCode::UNPROCESSABLE_ENTITY, "missing_percentile_table"),
            Error::InvalidConfig { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(st, status, code, e.to_string())
    }

    fn invalid(st: &ServiceState, message: impl Into<String>) -> Self {
        Self::new(st, StatusCode::UNPROCESSABLE_ENTITY, "invalid", message)
    }

    fn not_found(st: &ServiceState, what: &str, id: &str) -> Self {
        Self::new(st, StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": {"code": self.code, "message": self.message},
            "fingerprint": self.fingerprint,
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn model<'a>(st: &'a ServiceState, id: &str) -> ApiResult<&'a ServedModel> {
    st.models.get(id).ok_or_else(|| ApiError::not_found(st, "model", id))
}

fn entry(st: &ServiceState, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
    // clone the Arc so the map shard is released before locking the session
    st.sessions
        .get(id)
        .map(|e| e.value().clone())
        .ok_or_else(|| ApiError::not_found(st, "session", id))
}

fn lock(e: &Mutex<Entry>) -> std::sync::MutexGuard<'_, Entry> {
    e.lock().unwrap_or_else(|p| p.into_inner())
}

async fn list_models(State(st): State<Arc<ServiceState>>) -> Json<Value> {
    let models: Vec<Value> = st
        .models
        .iter()
        .map(|(id, m)| {
            let b = &m.bundle;
            json!({
                "id": id,
                "mode": b.mode().name(),
                "covariance": b.covariance_head().map(|h| h.kind().name()),
                "covariance_enabled": b.covariance_enabled(),
                "concepts": b.concepts(),
                "classes": b.classes(),
                "input_dim": b.input_dim(),
                "fingerprint": m.fingerprint,
            })
        })
        .collect();
    Json(json!({
        "models": models,
        "concept_names": st.data.concept_names(),
        "samples": st.samples,
        "seed": st.seed,
        "fingerprint": st.fingerprint,
    }))
}

#[derive(Debug, Deserialize)]
struct SamplesQuery {
    split: Option<String>,
    #[serde(default)]
    reveal: bool,
}

async fn list_samples(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    query: Result<Query<SamplesQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let m = model(&st, &id)?;
    let Query(q) = query.map_err(|e| ApiError::invalid(&st, e.body_text()))?;
    let split: Split = q
        .split
        .as_deref()
        .unwrap_or("test")
        .parse()
        .map_err(|e: Error| ApiError::invalid(&st, e.to_string()))?;
    let rows: Vec<Value> = st
        .data
        .indices(split)
        .into_iter()
        .map(|i| {
            if q.reveal {
                json!({"index": i, "label": st.data.label(i), "concepts": st.data.concepts(i)})
            } else {
                json!({"index": i})
            }
        })
        .collect();
    Ok(Json(json!({
        "model_id": id,
        "split": split,
        "count": rows.len(),
        "samples": rows,
        "fingerprint": m.fingerprint,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    model_id: String,
    sample_index: usize,
    /// Defaults to the seed `eval` uses for this row.
    seed: Option<u64>,
}

async fn create_session(
    State(st): State<Arc<ServiceState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let Json(req) = body.map_err(|e| ApiError::invalid(&st, e.body_text()))?;
    let m = model(&st, &req.model_id)?;
    if req.sample_index >= st.data.len() {
        return Err(ApiError::invalid(
            &st,
            format!("sample_index {} out of range for {} rows", req.sample_index, st.data.len()),
        ));
    }
    let seed = req.seed.unwrap_or_else(|| row_seed(st.seed, req.sample_index));
    let session = InterventionSession::new(m.bundle.clone(), st.data.features(req.sample_index).to_vec(), st.samples, seed)
        .map_err(|e| ApiError::engine(&st, e))?;
    let n = st.next_id.fetch_add(1, Ordering::Relaxed);
    let handle = SessionHandle {
        session_id: format!("s{n:06}"),
        model_id: req.model_id,
        sample_index: req.sample_index,
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
        seed,
        fingerprint: m.fingerprint.clone(),
    };
    st.sessions.insert(
        handle.session_id.clone(),
        Arc::new(Mutex::new(Entry {
            handle: handle.clone(),
            session,
        })),
    );
    Ok((StatusCode::CREATED, Json(handle)))
}

#[derive(Debug, Default, Deserialize)]
struct ViewQuery {
    #[serde(default)]
    reveal: bool,
}

fn reveal_flag(st: &ServiceState, q: Result<Query<ViewQuery>, QueryRejection>) -> ApiResult<bool> {
    q.map(|Query(v)| v.reveal).map_err(|e| ApiError::invalid(st, e.body_text()))
}

/// The JSON view of a session's current state.
fn view(st: &ServiceState, e: &Entry, reveal: bool) -> Value {
    let state = e.session.state();
    let c = state.concept_probs.len();
    let mut rank: Vec<Option<usize>> = vec![None; c];
    let ranking = state.ranking();
    for (r, &i) in ranking.iter().enumerate() {
        rank[i] = Some(r);
    }
    let mut value: Vec<Option<u8>> = vec![None; c];
    for ev in &state.history {
        value[ev.concept] = Some(ev.value);
    }
    let names = st.data.concept_names();
    let concepts: Vec<Value> = (0..c)
        .map(|i| {
            json!({
                "index": i,
                "name": names[i],
                "probability": state.concept_probs[i],
                "intervened": value[i].is_some(),
                "value": value[i],
                "uncertainty_rank": rank[i],
            })
        })
        .collect();
    let history: Vec<Value> = state.history.iter().map(event_json).collect();
    let mut out = json!({
        "session_id": e.handle.session_id,
        "model_id": e.handle.model_id,
        "sample_index": e.handle.sample_index,
        "seed": e.handle.seed,
        "samples": e.session.samples(),
        "k": state.history.len(),
        "concepts": concepts,
        "class_probs": state.class_probs,
        "predicted_class": argmax(&state.class_probs),
        "suggested_concept": ranking.first(),
        "history": history,
        "fingerprint": e.handle.fingerprint,
    });
    if reveal {
        let row = e.handle.sample_index;
        let truth = st.data.concepts(row);
        let hits = row_concept_hits(&state.concept_probs, truth);
        out["truth"] = json!({
            "concepts": truth,
            "label": st.data.label(row),
            "concept_accuracy": hits as f64 / c as f64,
            "target_correct": argmax(&state.class_probs) == st.data.label(row),
        });
    }
    out
}

fn event_json(ev: &InterventionEvent) -> Value {
    json!({
        "concept": ev.concept,
        "value": ev.value,
        "strategy": ev.strategy.name(),
        "strategy_params": ev.strategy,
    })
}

async fn get_session(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    q: Result<Query<ViewQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let e = entry(&st, &id)?;
    let reveal = reveal_flag(&st, q)?;
    let guard = lock(&e);
    Ok(Json(view(&st, &guard, reveal)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterventionRequest {
    concept: usize,
    value: u8,
    #[serde(default)]
    strategy: Option<StrategySpec>,
}

async fn intervene(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    q: Result<Query<ViewQuery>, QueryRejection>,
    body: Result<Json<InterventionRequest>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let e = entry(&st, &id)?;
    let reveal = reveal_flag(&st, q)?;
    let Json(req) = body.map_err(|e| ApiError::invalid(&st, e.body_text()))?;
    let strategy = match &req.strategy {
        None => StrategyKind::default(),
        Some(s) => s.resolve().map_err(|e| ApiError::invalid(&st, e.to_string()))?,
    };
    let mut guard = lock(&e);
    if guard.session.state().history.len() == guard.session.bundle().concepts() {
        return Err(ApiError::engine(&st, Error::AllIntervened));
    }
    guard
        .session
        .intervene(req.concept, req.value, strategy)
        .map_err(|err| ApiError::engine(&st, err))?;
    Ok(Json(view(&st, &guard, reveal)))
}

async fn undo(
    State(st): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    q: Result<Query<ViewQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let e = entry(&st, &id)?;
    let reveal = reveal_flag(&st, q)?;
    let mut guard = lock(&e);
    guard.session.undo().map_err(|err| ApiError::engine(&st, err))?;
    Ok(Json(view(&st, &guard, reveal)))
}

async fn delete_session(State(st): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let (_, e) = st.sessions.remove(&id).ok_or_else(|| ApiError::not_found(&st, "session", &id))?;
    let guard = lock(&e);
    Ok(Json(json!({
        "deleted": id,
        "fingerprint": guard.handle.fingerprint,
    })))
}

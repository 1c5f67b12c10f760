//! Read-only HTTP service over frozen model artifacts.
//!
//! Handlers take an `Arc` to the current snapshot when a request arrives
//! and use only that snapshot, so a concurrent reload never mixes models
//! within one response.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use adhere_core::artifact::{Model, ModelArtifact};
use adhere_core::config::ModelKind;
use adhere_core::dataset::{MEDICATION_DIM, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM, SYMPTOM_MAX, VISIT_MONTHS};
use adhere_core::slvm::Scenario;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::wire::*;

/// The models answering requests, keyed by kind.
#[derive(Debug)]
pub struct Snapshot {
    models: BTreeMap<ModelKind, ModelArtifact>,
}

impl Snapshot {
    /// One artifact per kind; at least one must be a latent model.
    pub fn new(artifacts: Vec<ModelArtifact>) -> adhere_core::Result<Self> {
        let mut models = BTreeMap::new();
        for a in artifacts {
            let kind = a.model.kind();
            if models.insert(kind, a).is_some() {
                return Err(adhere_core::Error::InvalidArgument(format!(
                    "more than one {kind} artifact; serve one model per kind"
                )));
            }
        }
        if !models.contains_key(&ModelKind::Slvm) {
            return Err(adhere_core::Error::InvalidArgument("the service needs an slvm artifact".into()));
        }
        Ok(Self { models })
    }

    pub fn load(paths: &[PathBuf]) -> adhere_core::Result<Self> {
        let artifacts = paths.iter().map(|p| ModelArtifact::load(p)).collect::<adhere_core::Result<_>>()?;
        Self::new(artifacts)
    }

    fn primary(&self) -> &ModelArtifact {
        &self.models[&ModelKind::Slvm]
    }

    fn select(&self, name: Option<&str>) -> Result<&ModelArtifact, ApiError> {
        let name = name.unwrap_or("slvm");
        let kind: ModelKind = name
            .parse()
            .map_err(|_| ApiError::not_found("model", format!("unknown model kind `{name}`")))?;
        self.models
            .get(&kind)
            .ok_or_else(|| ApiError::not_found("model", format!("no {kind} model is loaded")))
    }
}

fn info(a: &ModelArtifact) -> ModelInfo {
    ModelInfo {
        kind: a.model.kind().to_string(),
        config_hash: a.provenance.config_hash.clone(),
        data_sha256: a.provenance.data_sha256.clone(),
        fold: a.provenance.fold,
        seed: a.provenance.seed,
        threshold: a.model.as_sequence_model().threshold(),
    }
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    /// Artifact files re-read by `/reload`; empty when built in memory.
    sources: Vec<PathBuf>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, sources: Vec<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            sources,
        })
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Replaces the snapshot in one step; the old one lives on until the
    /// requests holding it finish.
    pub fn swap(&self, next: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let mut value = serde_json::to_value(body).expect("response serializes");
    round_json(&mut value);
    let text = serde_json::to_string(&value).expect("json value serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], text).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, &self)
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let msg = e.to_string();
        // serde names the missing or unknown field in backticks.
        let field = msg.split('`').nth(1).unwrap_or("body").to_string();
        ApiError::bad_request(field, msg)
    })
}

fn draw_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| rand::random::<u64>() >> (64 - SEED_BITS))
}

pub fn meta(snapshot: &Snapshot) -> MetaResponse {
    MetaResponse {
        static_dim: STATIC_DIM,
        score_dim: SCORE_DIM,
        step_months: VISIT_MONTHS.to_vec(),
        model_kinds: snapshot.models.keys().map(|k| k.to_string()).collect(),
        config_hash: snapshot.primary().provenance.config_hash.clone(),
        models: snapshot.models.values().map(info).collect(),
    }
}

pub fn features(snapshot: &Snapshot) -> FeaturesResponse {
    let a = snapshot.primary();
    let stats = a.model.as_sequence_model().stats();
    let names = &a.provenance.feature_names;
    let statics = (0..STATIC_DIM)
        .map(|k| FeatureInfo {
            index: k,
            name: names.statics[k].clone(),
            mean: stats.static_mean[k],
            std: stats.static_std[k],
            min: None,
            max: None,
        })
        .collect();
    let scores = (0..SCORE_DIM)
        .map(|d| FeatureInfo {
            index: d,
            name: names.scores[d].clone(),
            mean: stats.score_mean[d],
            std: stats.score_std[d],
            min: Some(0.0),
            max: (d != MEDICATION_DIM).then_some(SYMPTOM_MAX),
        })
        .collect();
    FeaturesResponse { statics, scores }
}

pub fn predict(snapshot: &Snapshot, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let artifact = snapshot.select(req.model.as_deref())?;
    if !(1..=NUM_INTERVALS).contains(&req.step) {
        return Err(ApiError::bad_request("step", format!("step must lie in 1..={NUM_INTERVALS}, got {}", req.step)));
    }
    let samples = check_samples(req.samples)?;
    let model = artifact.model.as_sequence_model();
    let batch = patient_batch(&req.patient, model.stats(), req.step, req.step)?;
    let seed = draw_seed(req.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = model
        .predict_one_step(&batch, req.step, samples, &mut rng)
        .map_err(|e| ApiError::from_model("patient", e))?
        .remove(0);
    let deterministic = matches!(artifact.model, Model::Lstm(_));
    Ok(PredictResponse {
        model: info(artifact),
        seed,
        samples: if deterministic { 1 } else { samples },
        step: req.step,
        visit: req.step + 1,
        month: month(req.step + 1),
        score_mean: pred.score_mean,
        score_std: pred.score_std,
        adherence_prob: pred.adherence_prob,
    })
}

pub fn whatif(snapshot: &Snapshot, req: &WhatIfRequest) -> Result<WhatIfResponse, ApiError> {
    let artifact = snapshot.select(req.model.as_deref())?;
    let Model::Slvm(model) = &artifact.model else {
        return Err(ApiError::unprocessable(
            "model",
            format!("{} models cannot follow fixed action scenarios", artifact.model.kind()),
        ));
    };
    if !(1..=NUM_INTERVALS).contains(&req.start) {
        return Err(ApiError::bad_request("start", format!("start must lie in 1..={NUM_INTERVALS}, got {}", req.start)));
    }
    let samples = check_samples(req.samples)?;
    let batch = patient_batch(&req.patient, &model.stats, req.start, req.start - 1)?;
    check_scenarios(&req.patient.actions, req.start, &req.scenarios)?;
    let scenarios: Vec<Scenario> = req
        .scenarios
        .iter()
        .map(|s| Scenario {
            name: s.name.clone(),
            actions: s.actions.clone(),
        })
        .collect();
    let seed = draw_seed(req.seed);
    let sim = model
        .simulate_interventions(&batch, req.start, &scenarios, samples, seed)
        .map_err(|e| ApiError::from_model("scenarios", e))?;
    let trajectories = sim
        .scenarios
        .into_iter()
        .zip(&req.scenarios)
        .map(|(outcome, input)| {
            let traj = &outcome.trajectories[0];
            ScenarioTrajectory {
                name: outcome.name,
                actions: input.actions.clone(),
                adherence: traj
                    .adherence
                    .iter()
                    .map(|a| AdherencePoint {
                        step: a.interval + 1,
                        prob: a.prob,
                        continued: a.continued,
                    })
                    .collect(),
                scores: traj.scores.iter().map(score_point).collect(),
                final_mean: outcome.final_mean,
            }
        })
        .collect();
    Ok(WhatIfResponse {
        model: info(artifact),
        seed,
        samples: sim.samples,
        start: req.start,
        scenarios: trajectories,
        deltas: sim.deltas,
    })
}

fn score_point(step: &adhere_core::trajectory::ScoreStep) -> ScorePoint {
    let visit = step.visit + 1;
    debug_assert!(visit <= NUM_VISITS);
    let (mut median, mut p10, mut p90) = (Vec::new(), Vec::new(), Vec::new());
    if let Some(samples) = &step.samples {
        for col in samples.columns() {
            let mut v = col.to_vec();
            v.sort_by(f64::total_cmp);
            median.push(quantile(&v, 0.5));
            p10.push(quantile(&v, 0.1));
            p90.push(quantile(&v, 0.9));
        }
    }
    ScorePoint {
        visit,
        month: month(visit),
        mean: step.mean.clone(),
        std: step.std.clone(),
        median,
        p10,
        p90,
    }
}

async fn get_meta(State(state): State<Arc<AppState>>) -> Response {
    json_response(StatusCode::OK, &meta(&state.current()))
}

async fn get_features(State(state): State<Arc<AppState>>) -> Response {
    json_response(StatusCode::OK, &features(&state.current()))
}

/// Parses the body and runs `f` on a blocking thread against the snapshot
/// current at arrival.
async fn compute<Req, Resp>(
    state: Arc<AppState>,
    body: Bytes,
    f: fn(&Snapshot, &Req) -> Result<Resp, ApiError>,
) -> Response
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    let req: Req = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let snapshot = state.current();
    match tokio::task::spawn_blocking(move || f(&snapshot, &req)).await {
        Ok(Ok(resp)) => json_response(StatusCode::OK, &resp),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(format!("worker failed: {e}")).into_response(),
    }
}

async fn post_predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    compute(state, body, predict).await
}

async fn post_whatif(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    compute(state, body, whatif).await
}

async fn post_reload(State(state): State<Arc<AppState>>) -> Response {
    if state.sources.is_empty() {
        return ApiError::unprocessable("sources", "service was not started from artifact files").into_response();
    }
    let sources = state.sources.clone();
    match tokio::task::spawn_blocking(move || Snapshot::load(&sources)).await {
        Ok(Ok(next)) => {
            state.swap(next);
            log::info!("reloaded {} artifacts", state.sources.len());
            json_response(StatusCode::OK, &meta(&state.current()))
        }
        Ok(Err(e)) => ApiError::internal(format!("reload failed, keeping current models: {e}")).into_response(),
        Err(e) => ApiError::internal(format!("reload worker failed: {e}")).into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/meta", get(get_meta))
        .route("/features", get(get_features))
        .route("/predict", post(post_predict))
        .route("/whatif", post(post_whatif))
        .route("/reload", post(post_reload))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

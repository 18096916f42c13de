//! HTTP JSON service over a loaded forest: steering and radio sessions,
//! MIDI export, the card deck, and study data collection.
//!
//! Sessions are persisted as JSON-lines history logs under
//! `DATA_DIR/sessions/` and replayed on start-up; study data goes to
//! `DATA_DIR/study/journal.jsonl`.

pub mod error;
pub mod state;
pub mod views;

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use chunkforest::midi::export_midi;
use chunkforest::steering::{ConstraintSet, SessionMode};
use chunkforest::study::report::{ratings_csv_string, ReportFile};
use chunkforest::study::{Comparison, ComposerReport, Question, RatingSubmission, RawAnswer, Recorded};

pub use error::ApiError;
pub use state::AppState;
use views::{session_view, HistoryView, OptionSetView, SeedValue};

pub const DEFAULT_PORT: u16 = 8080;

/// Start-up settings, normally read from the environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    pub forest_path: PathBuf,
    /// Deck JSON; the built-in deck when absent.
    pub cards_path: Option<PathBuf>,
    /// Persistence root; in-memory only when absent.
    pub data_dir: Option<PathBuf>,
    pub lazy_leaves: bool,
}

impl ServiceConfig {
    /// Reads `PORT`, `FOREST_PATH`, `CARDS_PATH` and `DATA_DIR`.
    pub fn from_env() -> Result<Self, ApiError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ApiError> {
        let port = match get("PORT").filter(|s| !s.is_empty()) {
            Some(p) => p.parse().map_err(|_| {
                ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "INVALID_CONFIG",
                    format!("PORT={p:?} is not a port"),
                )
            })?,
            None => DEFAULT_PORT,
        };
        let forest_path = get("FOREST_PATH")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_CONFIG", "FOREST_PATH is not set"))?;
        let path = |k: &str| get(k).filter(|s| !s.is_empty()).map(PathBuf::from);
        Ok(ServiceConfig {
            port,
            forest_path: PathBuf::from(forest_path),
            cards_path: path("CARDS_PATH"),
            data_dir: path("DATA_DIR"),
            lazy_leaves: true,
        })
    }

    pub fn describe(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        format!(
            "PORT={} FOREST_PATH={} CARDS_PATH={} DATA_DIR={}",
            self.port,
            self.forest_path.display(),
            opt(&self.cards_path),
            opt(&self.data_dir)
        )
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/cards", get(cards))
        .route("/api/questions", get(questions))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/options", post(request_options))
        .route("/api/sessions/{id}/select", post(select))
        .route("/api/sessions/{id}/restart", post(restart))
        .route("/api/sessions/{id}/export.mid", get(export))
        .route(
            "/api/study/comparisons",
            post(register_comparison).get(list_comparisons),
        )
        .route("/api/study/comparisons/{id}/presentation", get(presentation))
        .route("/api/study/composer-report", post(composer_report))
        .route("/api/study/listener-rating", post(listener_rating))
        .route(
            "/api/study/report.csv",
            get(|s: State<AppState>| study_csv(s, ReportFile::Report)),
        )
        .route(
            "/api/study/by_card.csv",
            get(|s: State<AppState>| study_csv(s, ReportFile::ByCard)),
        )
        .route(
            "/api/study/counts.csv",
            get(|s: State<AppState>| study_csv(s, ReportFile::Counts)),
        )
        .route(
            "/api/study/composer_report.csv",
            get(|s: State<AppState>| study_csv(s, ReportFile::Composer)),
        )
        .route("/api/study/ratings.csv", get(ratings_csv))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such route") })
        .with_state(state)
}

/// Loads state from `config` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ApiError> {
    let state = AppState::load(&config)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ApiError::internal(format!("bind {addr}: {e}")))?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

fn body<T: DeserializeOwned>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(v)| v).map_err(|e| ApiError::invalid_body(e.body_text()))
}

fn created_or_ok(recorded: Recorded) -> StatusCode {
    match recorded {
        Recorded::New => StatusCode::CREATED,
        Recorded::Duplicate => StatusCode::OK,
    }
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let forest = s.engine().forest();
    Json(serde_json::json!({
        "status": "ok",
        "forest_digest": forest.digest(),
        "config": forest.config(),
        "indexed": forest.bin_edges().is_some(),
        "sessions": s.session_count(),
    }))
}

async fn cards(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.deck().cards().to_vec())
}

async fn questions() -> Json<serde_json::Value> {
    let qs: Vec<_> = [Question::Evokes, Question::Musical]
        .into_iter()
        .map(|q| serde_json::json!({"id": q.name(), "text": q.text()}))
        .collect();
    let answers: Vec<_> = RawAnswer::ALL.iter().map(|a| a.label()).collect();
    Json(serde_json::json!({"questions": qs, "answers": answers}))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    mode: SessionMode,
    card_id: String,
    #[serde(default)]
    seed: Option<SeedValue>,
}

async fn create_session(
    State(s): State<AppState>,
    req: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Response, ApiError> {
    let req = body(req)?;
    let seed = req.seed.map(SeedValue::value).transpose()?;
    let view = s.create_session(req.mode, &req.card_id, seed)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<HistoryView>, ApiError> {
    s.with_session(&id, |engine, session| {
        Ok(HistoryView {
            session: session_view(engine.forest(), session)?,
            history: session.history().to_vec(),
        })
    })
    .map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionsRequest {
    #[serde(default)]
    constraints: ConstraintSet,
}

async fn request_options(
    State(s): State<AppState>,
    Path(id): Path<String>,
    req: Result<Json<OptionsRequest>, JsonRejection>,
) -> Result<Json<OptionSetView>, ApiError> {
    let req = body(req)?;
    s.mutate_session(&id, |engine, session| {
        let set = engine.request_options(session, &req.constraints)?;
        OptionSetView::new(engine.forest(), session.mode, &set)
    })
    .map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    index: usize,
    #[serde(default)]
    token: Option<SeedValue>,
}

async fn select(
    State(s): State<AppState>,
    Path(id): Path<String>,
    req: Result<Json<SelectRequest>, JsonRejection>,
) -> Result<Json<views::SessionView>, ApiError> {
    let req = body(req)?;
    let token = req.token.map(SeedValue::value).transpose()?;
    s.mutate_session(&id, |engine, session| {
        engine.select_option(session, token, req.index)?;
        session_view(engine.forest(), session)
    })
    .map(Json)
}

async fn restart(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<views::SessionView>, ApiError> {
    s.mutate_session(&id, |engine, session| {
        engine.restart_session(session);
        session_view(engine.forest(), session)
    })
    .map(Json)
}

async fn export(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = s.with_session(&id, |engine, session| {
        Ok(export_midi(&engine.export_composition(session)?))
    })?;
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "audio/midi")
        .header(
            header::CONTENT_DISPOSITION,
            format!("attachment; filename=\"{id}.mid\""),
        )
        .body(Body::from(bytes))
        .expect("static headers are valid"))
}

async fn register_comparison(
    State(s): State<AppState>,
    req: Result<Json<Comparison>, JsonRejection>,
) -> Result<Response, ApiError> {
    let c = body(req)?;
    if s.deck().get(&c.card_id).is_none() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "UNKNOWN_CARD",
            format!("unknown card {:?}", c.card_id),
        ));
    }
    let recorded = s.study(|store| store.register_comparison(c.clone()))?;
    Ok((created_or_ok(recorded), Json(c)).into_response())
}

async fn list_comparisons(State(s): State<AppState>) -> Result<Json<Vec<Comparison>>, ApiError> {
    s.study(|store| Ok(store.comparisons().cloned().collect())).map(Json)
}

#[derive(Deserialize)]
struct PresentationQuery {
    listener_id: String,
}

async fn presentation(
    State(s): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<PresentationQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<views::Presentation>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::invalid_body(e.body_text()))?;
    s.study(|store| {
        let slot = store.present(&q.listener_id, &id)?;
        let c = store.comparison(&id).expect("present checked the id");
        Ok(views::Presentation::new(&q.listener_id, c, slot))
    })
    .map(Json)
}

async fn composer_report(
    State(s): State<AppState>,
    req: Result<Json<ComposerReport>, JsonRejection>,
) -> Result<Response, ApiError> {
    let r = body(req)?;
    let recorded = s.study(|store| store.record_composer_report(r))?;
    Ok((
        created_or_ok(recorded),
        Json(serde_json::json!({ "recorded": recorded })),
    )
        .into_response())
}

async fn listener_rating(
    State(s): State<AppState>,
    req: Result<Json<RatingSubmission>, JsonRejection>,
) -> Result<Response, ApiError> {
    let sub = body(req)?;
    let (rating, recorded) = s.study(|store| store.submit_rating(sub))?;
    Ok((
        created_or_ok(recorded),
        Json(serde_json::json!({ "rating": rating, "recorded": recorded })),
    )
        .into_response())
}

fn csv_response(text: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response()
}

async fn study_csv(State(s): State<AppState>, which: ReportFile) -> Result<Response, ApiError> {
    let report = s.report()?;
    Ok(csv_response(report.to_csv_string(which)))
}

async fn ratings_csv(State(s): State<AppState>) -> Result<Response, ApiError> {
    let rows = s.study(|store| Ok(store.rating_rows()))?;
    Ok(csv_response(ratings_csv_string(&rows)))
}

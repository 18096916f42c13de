use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chunkforest::features::FeatureError;
use chunkforest::forest::ForestError;
use chunkforest::steering::SteeringError;
use chunkforest::study::StudyError;
use serde::{Deserialize, Serialize};

/// Error envelope returned by every route.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "UNKNOWN_SESSION",
            format!("unknown session {id:?}"),
        )
    }

    pub fn invalid_body(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "INVALID_BODY", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Status and code for each forest error.
pub fn forest_code(e: &ForestError) -> (StatusCode, &'static str) {
    match e {
        ForestError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "INVALID_CONFIG"),
        ForestError::OutOfBounds(_) => (StatusCode::NOT_FOUND, "OUT_OF_BOUNDS"),
        ForestError::VersionMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "VERSION_MISMATCH"),
        ForestError::CorruptIndex(_) => (StatusCode::INTERNAL_SERVER_ERROR, "CORRUPT_INDEX"),
        ForestError::GeneratorMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "GENERATOR_MISMATCH"),
        ForestError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
        ForestError::Manifest(_) => (StatusCode::INTERNAL_SERVER_ERROR, "MANIFEST_ERROR"),
        ForestError::Feature(f) => feature_code(f),
    }
}

pub fn feature_code(e: &FeatureError) -> (StatusCode, &'static str) {
    match e {
        FeatureError::DegeneratePopulation { .. } => (StatusCode::SERVICE_UNAVAILABLE, "DEGENERATE_POPULATION"),
        FeatureError::RelativeAtRoot => (StatusCode::BAD_REQUEST, "ILLEGAL_CONSTRAINT"),
        FeatureError::MissingDepth(_) => (StatusCode::SERVICE_UNAVAILABLE, "NOT_INDEXED"),
        FeatureError::Event(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INVALID_EVENTS"),
    }
}

pub fn steering_code(e: &SteeringError) -> (StatusCode, &'static str) {
    match e {
        SteeringError::UnknownCard(_) => (StatusCode::NOT_FOUND, "UNKNOWN_CARD"),
        SteeringError::IllegalConstraint(_) => (StatusCode::BAD_REQUEST, "ILLEGAL_CONSTRAINT"),
        SteeringError::SessionComplete => (StatusCode::CONFLICT, "SESSION_COMPLETE"),
        SteeringError::SessionIncomplete => (StatusCode::CONFLICT, "SESSION_INCOMPLETE"),
        SteeringError::StaleSelection { .. } => (StatusCode::CONFLICT, "STALE_SELECTION"),
        SteeringError::IndexOutOfRange { .. } => (StatusCode::BAD_REQUEST, "INDEX_OUT_OF_RANGE"),
        SteeringError::NotIndexed => (StatusCode::SERVICE_UNAVAILABLE, "NOT_INDEXED"),
        SteeringError::ReplayDivergence { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "REPLAY_DIVERGENCE"),
        SteeringError::MalformedHistory(_) => (StatusCode::BAD_REQUEST, "MALFORMED_HISTORY"),
        SteeringError::Forest(f) => forest_code(f),
    }
}

pub fn study_code(e: &StudyError) -> (StatusCode, &'static str) {
    match e {
        StudyError::KeywordCount { .. } => (StatusCode::BAD_REQUEST, "KEYWORD_COUNT"),
        StudyError::DuplicateCard(_) => (StatusCode::BAD_REQUEST, "DUPLICATE_CARD"),
        StudyError::EmptyDeck => (StatusCode::BAD_REQUEST, "EMPTY_DECK"),
        StudyError::UnknownComparison(_) => (StatusCode::NOT_FOUND, "UNKNOWN_COMPARISON"),
        StudyError::OrderingMismatch(_) => (StatusCode::BAD_REQUEST, "ORDERING_MISMATCH"),
        StudyError::Conflict(_) => (StatusCode::CONFLICT, "CONFLICT"),
        StudyError::RatingOutOfRange { .. } => (StatusCode::BAD_REQUEST, "RATING_OUT_OF_RANGE"),
        StudyError::SystemMismatch { .. } => (StatusCode::BAD_REQUEST, "SYSTEM_MISMATCH"),
        StudyError::DegenerateSample { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "DEGENERATE_SAMPLE"),
        StudyError::Parse(_) => (StatusCode::BAD_REQUEST, "PARSE_ERROR"),
        StudyError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "IO_ERROR"),
    }
}

impl From<SteeringError> for ApiError {
    fn from(e: SteeringError) -> Self {
        let (status, code) = steering_code(&e);
        ApiError::new(status, code, e.to_string())
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let (status, code) = study_code(&e);
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ForestError> for ApiError {
    fn from(e: ForestError) -> Self {
        let (status, code) = forest_code(&e);
        ApiError::new(status, code, e.to_string())
    }
}

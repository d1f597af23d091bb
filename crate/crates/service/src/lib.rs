//! JSON-over-HTTP facade over one [`Engine`].
//!
//! Registration and deletion take the engine's write lock; chat turns and
//! probes share the read lock, so concurrent chats never block each other.
//! No handler ever computes a gradient, and `GET /health` exposes the weight
//! hash so clients can check that.

mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use plvm::evalsuite::{parse_polarity, AnswerPolarity, RECOGNITION_QUESTION};
use plvm::image::Image;
use plvm::prompting::{TemplateBank, TemplateKind, PLACEHOLDER};
use plvm::runtime::Engine;
use plvm::PlvmError;

pub use session::{Session, SessionStore, Turn};

/// Cap on decoded image bytes.
pub const MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;
/// Base64 inflates by 4/3; leave room for the JSON around it.
const MAX_BODY_BYTES: usize = MAX_IMAGE_BYTES / 3 * 4 + 64 * 1024;
const MAX_STORED_IMAGES: usize = 256;

pub struct AppState {
    engine: RwLock<Engine<f32>>,
    sessions: SessionStore,
    images: Mutex<HashMap<String, Image>>,
    registered_at: Mutex<HashMap<String, u64>>,
    started: Instant,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(engine: Engine<f32>) -> SharedState {
        Self::with_sessions(engine, SessionStore::default())
    }

    pub fn with_sessions(engine: Engine<f32>, sessions: SessionStore) -> SharedState {
        Arc::new(Self {
            engine: RwLock::new(engine),
            sessions,
            images: Mutex::new(HashMap::new()),
            registered_at: Mutex::new(HashMap::new()),
            started: Instant::now(),
        })
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub fn weights_hash(&self) -> String {
        read(&self.engine).weights_hash()
    }
}

fn read<T>(l: &RwLock<T>) -> std::sync::RwLockReadGuard<'_, T> {
    l.read().unwrap_or_else(|e| e.into_inner())
}

fn write<T>(l: &RwLock<T>) -> std::sync::RwLockWriteGuard<'_, T> {
    l.write().unwrap_or_else(|e| e.into_inner())
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Error body `{code, message}` with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<PlvmError> for ApiError {
    fn from(e: PlvmError) -> Self {
        use PlvmError as E;
        let (status, code) = match &e {
            E::DuplicateConcept(_) => (StatusCode::CONFLICT, "duplicate_concept"),
            E::InvalidConceptName(_) => (StatusCode::BAD_REQUEST, "invalid_name"),
            E::InvalidImage(_) | E::Image(_) => (StatusCode::BAD_REQUEST, "invalid_image"),
            E::UnknownConcept(_) => (StatusCode::NOT_FOUND, "unknown_concept"),
            E::IndexOutOfRange { .. } => (StatusCode::BAD_REQUEST, "index_out_of_range"),
            E::ContextOverflow { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "context_overflow"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = match r.status() {
            StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        };
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "payload_too_large"
        } else {
            "bad_request"
        };
        Self::new(status, code, r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn decode_image(id: &str, b64: &str) -> ApiResult<Image> {
    // a base64 string longer than this cannot decode under the cap
    if b64.len() > MAX_IMAGE_BYTES / 3 * 4 + 4 {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("images are capped at {MAX_IMAGE_BYTES} bytes"),
        ));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", format!("base64: {e}")))?;
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("images are capped at {MAX_IMAGE_BYTES} bytes"),
        ));
    }
    Ok(Image::decode(id, &bytes)?)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Deserialize)]
pub struct RegisterRequest {
    pub name: String,
    pub image: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ConceptInfo {
    pub name: String,
    pub k: usize,
    pub token_count: usize,
    pub source_image_id: String,
    pub encoder_id: String,
    pub registered_at: u64,
}

async fn register(State(st): State<SharedState>, body: Result<Json<RegisterRequest>, JsonRejection>) -> ApiResult<(StatusCode, Json<ConceptInfo>)> {
    let Json(req) = body?;
    if !plvm::backbone::tokenizer::is_concept_name(&req.name) {
        return Err(PlvmError::InvalidConceptName(req.name).into());
    }
    let image = decode_image(&format!("{}/ref", req.name), &req.image)?;
    let mut engine = write(&st.engine);
    let handle = engine.register(&req.name, &image)?;
    let c = engine.concept(&handle.name)?;
    let now = unix_now();
    lock(&st.registered_at).insert(handle.name.clone(), now);
    log::info!("registered {} ({} context tokens)", handle.name, handle.k);
    Ok((
        StatusCode::CREATED,
        Json(ConceptInfo {
            name: handle.name,
            k: handle.k,
            token_count: c.k(),
            source_image_id: c.source_image_id.clone(),
            encoder_id: c.encoder_id.clone(),
            registered_at: now,
        }),
    ))
}

async fn list_concepts(State(st): State<SharedState>) -> Json<Vec<ConceptInfo>> {
    let engine = read(&st.engine);
    let times = lock(&st.registered_at);
    Json(
        engine
            .concepts()
            .iter()
            .map(|c| ConceptInfo {
                name: c.name.clone(),
                k: c.k(),
                token_count: c.k(),
                source_image_id: c.source_image_id.clone(),
                encoder_id: c.encoder_id.clone(),
                registered_at: times.get(&c.name).copied().unwrap_or(0),
            })
            .collect(),
    )
}

async fn delete_concept(State(st): State<SharedState>, Path(name): Path<String>) -> ApiResult<StatusCode> {
    write(&st.engine).remove(&name)?;
    lock(&st.registered_at).remove(&name);
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ProbeResponse {
    pub name: String,
    pub index: usize,
    pub description: String,
}

async fn probe_token(State(st): State<SharedState>, Path((name, index)): Path<(String, usize)>) -> ApiResult<Json<ProbeResponse>> {
    let description = read(&st.engine).probe(&name, index)?;
    Ok(Json(ProbeResponse { name, index, description }))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Health {
    pub status: String,
    pub backbone: String,
    pub weights_hash: String,
    pub k: usize,
    pub encoder: String,
    pub concepts: usize,
    pub uptime_seconds: f64,
}

async fn health(State(st): State<SharedState>) -> Json<Health> {
    let engine = read(&st.engine);
    Json(Health {
        status: "ok".into(),
        backbone: engine.backbone_name().to_string(),
        weights_hash: engine.weights_hash(),
        k: engine.k(),
        encoder: engine.encoder_id().to_string(),
        concepts: engine.concepts().len(),
        uptime_seconds: st.started.elapsed().as_secs_f64(),
    })
}

#[derive(Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub question: String,
    /// Base64 image bytes.
    #[serde(default)]
    pub query_image: Option<String>,
    /// Id returned by an earlier turn, to avoid re-uploading.
    #[serde(default)]
    pub query_image_id: Option<String>,
    #[serde(default)]
    pub concepts: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Timing {
    pub total_ms: f64,
    pub generation_ms: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub session_id: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub prompt_tokens: usize,
    pub timing: Timing,
}

/// True when `question`, with one of `concepts` put back as the
/// placeholder, is a recognition question from the template banks.
pub fn is_recognition_question(question: &str, concepts: &[String]) -> bool {
    let bank = TemplateBank::standard();
    let forms: Vec<&str> = bank
        .of_kind(TemplateKind::RecognitionPositive)
        .iter()
        .chain(bank.of_kind(TemplateKind::RecognitionNegative))
        .map(|t| t.question.as_str())
        .chain(std::iter::once(RECOGNITION_QUESTION))
        .collect();
    concepts.iter().any(|c| {
        let q = question.trim().replace(c.as_str(), PLACEHOLDER);
        forms.contains(&q.as_str())
    })
}

fn polarity_label(p: AnswerPolarity) -> &'static str {
    match p {
        AnswerPolarity::Positive => "yes",
        AnswerPolarity::Negative => "no",
        AnswerPolarity::Unknown => "unknown",
    }
}

fn image_id_of(image: &Image) -> String {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (image.width(), image.height()).hash(&mut h);
    image.pixels().hash(&mut h);
    format!("img-{:016x}", h.finish())
}

async fn chat(State(st): State<SharedState>, body: Result<Json<ChatRequest>, JsonRejection>) -> ApiResult<Json<ChatResponse>> {
    let t0 = Instant::now();
    let Json(req) = body?;
    let (image, image_id) = match (&req.query_image, &req.query_image_id) {
        (Some(_), Some(_)) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                "send either query_image or query_image_id, not both",
            ))
        }
        (Some(b64), None) => {
            let img = decode_image("query", b64)?;
            let id = image_id_of(&img);
            let mut store = lock(&st.images);
            if store.len() >= MAX_STORED_IMAGES {
                store.clear();
            }
            store.insert(id.clone(), img.clone());
            (Some(img), Some(id))
        }
        (None, Some(id)) => {
            let img = lock(&st.images)
                .get(id)
                .cloned()
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_image", format!("no stored image {id}")))?;
            (Some(img), Some(id.clone()))
        }
        (None, None) => (None, None),
    };
    let session_id = req.session_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let images: Vec<Image> = image.into_iter().collect();
    let t1 = Instant::now();
    let reply = {
        let engine = read(&st.engine);
        engine.chat(&req.concepts, &req.question, &images)?
    };
    let generation_ms = t1.elapsed().as_secs_f64() * 1e3;
    let polarity = is_recognition_question(&req.question, &req.concepts)
        .then(|| polarity_label(parse_polarity(&reply.text)).to_string());
    st.sessions.append(
        &session_id,
        &req.concepts,
        Turn::user(&req.question, image_id.clone()),
        Turn::assistant(&reply.text),
    );
    Ok(Json(ChatResponse {
        session_id,
        answer: reply.text,
        polarity,
        image_id,
        prompt_tokens: reply.prompt_len,
        timing: Timing {
            total_ms: t0.elapsed().as_secs_f64() * 1e3,
            generation_ms,
        },
    }))
}

async fn get_session(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    st.sessions
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}")))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/concepts", post(register).get(list_concepts))
        .route("/concepts/{name}", axum::routing::delete(delete_concept))
        .route("/concepts/{name}/tokens/{i}", get(probe_token))
        .route("/chat", post(chat))
        .route("/sessions/{id}", get(get_session))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: SharedState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recognition_form_detection() {
        let c = vec!["⟨bo⟩".to_string()];
        assert!(is_recognition_question("Is ⟨bo⟩ in this photo?", &c));
        assert!(!is_recognition_question("What is ⟨bo⟩'s hair color?", &c));
        assert!(!is_recognition_question("Is ⟨bo⟩ in this photo?", &[]));
    }

    #[test]
    fn errors_map_to_statuses() {
        let e: ApiError = PlvmError::DuplicateConcept("⟨a⟩".into()).into();
        assert_eq!((e.status, e.code), (StatusCode::CONFLICT, "duplicate_concept"));
        let e: ApiError = PlvmError::ContextOverflow { len: 300, limit: 256 }.into();
        assert_eq!(e.status, StatusCode::UNPROCESSABLE_ENTITY);
        let e: ApiError = PlvmError::UnknownConcept("⟨a⟩".into()).into();
        assert_eq!(e.status, StatusCode::NOT_FOUND);
    }

    #[test]
    fn oversized_base64_is_413_before_decoding() {
        let big = "A".repeat(MAX_IMAGE_BYTES / 3 * 4 + 8);
        assert_eq!(decode_image("x", &big).unwrap_err().status, StatusCode::PAYLOAD_TOO_LARGE);
        assert_eq!(decode_image("x", "!!!").unwrap_err().status, StatusCode::BAD_REQUEST);
    }
}

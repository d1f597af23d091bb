use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use http_body_util::BodyExt;
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use serde_json::{json, Value};
use tower::ServiceExt;

use plvm::aligner::{AlignerConfig, AlignerParams};
use plvm::encoders::{FeatureExtractor, ToyEncoder, ToyEncoderConfig};
use plvm::image::Image;
use plvm::recipe::toy_backbone;
use plvm::runtime::Engine;
use plvm_service::{router, AppState, ChatResponse, ConceptInfo, ErrorBody, Health, SharedState, MAX_IMAGE_BYTES};

const URI_UNSAFE: &AsciiSet = &CONTROLS.add(b' ');

fn state() -> SharedState {
    let enc = ToyEncoder::new(ToyEncoderConfig::small());
    let d = enc.spec().feature_dim;
    let backbone = toy_backbone(d, 3).unwrap();
    let aligner = AlignerParams::new(AlignerConfig::toy(d, backbone.d_lm())).unwrap();
    let mut engine = Engine::new(Arc::new(enc), aligner, backbone).unwrap();
    engine.max_new_tokens = 6;
    AppState::new(engine)
}

fn png_b64(v: u8) -> String {
    let img = Image::filled("x", 40, 40, [v, 255 - v, v / 3]).unwrap();
    base64::engine::general_purpose::STANDARD.encode(img.encode_png().unwrap())
}

async fn call(st: &SharedState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let uri = utf8_percent_encode(uri, URI_UNSAFE).to_string();
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn register(st: &SharedState, name: &str, v: u8) -> (StatusCode, Value) {
    call(st, "POST", "/concepts", Some(json!({"name": name, "image": png_b64(v)}))).await
}

fn error_code(v: &Value) -> String {
    serde_json::from_value::<ErrorBody>(v.clone()).unwrap().code
}

#[tokio::test]
async fn registration_lifecycle() {
    let st = state();
    let before = st.weights_hash();
    let t = Instant::now();
    let (s, v) = register(&st, "⟨bo⟩", 40).await;
    assert!(t.elapsed().as_secs_f64() < 1.0);
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let info: ConceptInfo = serde_json::from_value(v).unwrap();
    assert_eq!((info.name.as_str(), info.k, info.token_count), ("⟨bo⟩", 16, 16));
    assert_eq!(st.weights_hash(), before);

    let (s, v) = register(&st, "⟨bo⟩", 90).await;
    assert_eq!((s, error_code(&v).as_str()), (StatusCode::CONFLICT, "duplicate_concept"));

    let (s, v) = call(&st, "GET", "/concepts", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);

    let (s, v) = call(&st, "GET", "/concepts/⟨bo⟩/tokens/3", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["index"], 3);
    assert!(!v["description"].as_str().unwrap().is_empty());
    let (s, _) = call(&st, "GET", "/concepts/⟨bo⟩/tokens/99", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call(&st, "DELETE", "/concepts/⟨bo⟩", None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, v) = call(&st, "DELETE", "/concepts/⟨bo⟩", None).await;
    assert_eq!((s, error_code(&v).as_str()), (StatusCode::NOT_FOUND, "unknown_concept"));
    assert_eq!(st.weights_hash(), before);
}

#[tokio::test]
async fn registration_rejects_bad_input() {
    let st = state();
    for name in ["bo", "⟨⟩", "⟨a b⟩", ""] {
        let (s, v) = register(&st, name, 1).await;
        assert_eq!((s, error_code(&v).as_str()), (StatusCode::BAD_REQUEST, "invalid_name"), "{name}");
    }
    let (s, v) = call(&st, "POST", "/concepts", Some(json!({"name": "⟨a⟩", "image": "bm90IGFuIGltYWdl"}))).await;
    assert_eq!((s, error_code(&v).as_str()), (StatusCode::BAD_REQUEST, "invalid_image"));
    let (s, _) = call(&st, "POST", "/concepts", Some(json!({"name": "⟨a⟩"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_upload_is_413() {
    let st = state();
    let raw = vec![0u8; MAX_IMAGE_BYTES + 1];
    let b64 = base64::engine::general_purpose::STANDARD.encode(raw);
    let (s, v) = call(&st, "POST", "/concepts", Some(json!({"name": "⟨a⟩", "image": b64}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE, "{v}");
    // far beyond the body limit: rejected by the extractor
    let huge = "A".repeat(MAX_IMAGE_BYTES * 2);
    let (s, _) = call(&st, "POST", "/concepts", Some(json!({"name": "⟨a⟩", "image": huge}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn chat_sessions_polarity_and_errors() {
    let st = state();
    register(&st, "⟨bo⟩", 40).await;
    register(&st, "⟨mo⟩", 200).await;
    let (s, v) = call(
        &st,
        "POST",
        "/chat",
        Some(json!({"question": "Is ⟨bo⟩ in this photo?", "query_image": png_b64(41), "concepts": ["⟨bo⟩"]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: ChatResponse = serde_json::from_value(v).unwrap();
    assert!(r.polarity.is_some());
    assert!(r.timing.total_ms >= r.timing.generation_ms);
    let image_id = r.image_id.clone().unwrap();

    // reuse the session and the stored image; both concepts in the prefix
    let (s, v) = call(
        &st,
        "POST",
        "/chat",
        Some(json!({"session_id": r.session_id, "question": "Can you see ⟨bo⟩ or ⟨mo⟩ here?",
                    "query_image_id": image_id, "concepts": ["⟨bo⟩", "⟨mo⟩"]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r2: ChatResponse = serde_json::from_value(v).unwrap();
    assert_eq!(r2.session_id, r.session_id);
    assert!(r2.polarity.is_none());
    assert!(r2.prompt_tokens > r.prompt_tokens + 16);

    let (s, v) = call(&st, "GET", &format!("/sessions/{}", r.session_id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["history"].as_array().unwrap().len(), 4);
    assert_eq!(v["active_concepts"], json!(["⟨bo⟩", "⟨mo⟩"]));

    let (s, v) = call(&st, "POST", "/chat", Some(json!({"question": "Is ⟨zz⟩ here?", "concepts": ["⟨zz⟩"]}))).await;
    assert_eq!((s, error_code(&v).as_str()), (StatusCode::NOT_FOUND, "unknown_concept"));

    let long = "word ".repeat(400);
    let (s, v) = call(&st, "POST", "/chat", Some(json!({"question": long, "concepts": ["⟨bo⟩"]}))).await;
    assert_eq!((s, error_code(&v).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "context_overflow"));

    let (s, _) = call(&st, "POST", "/chat", Some(json!({"question": "hi", "query_image_id": "img-nope"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn health_reports_a_constant_weight_hash() {
    let st = state();
    let (s, v) = call(&st, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let h: Health = serde_json::from_value(v).unwrap();
    assert_eq!(h.k, 16);
    assert_eq!(h.backbone, "tiny");
    register(&st, "⟨bo⟩", 3).await;
    call(&st, "POST", "/chat", Some(json!({"question": "Hello ⟨bo⟩", "concepts": ["⟨bo⟩"]}))).await;
    call(&st, "DELETE", "/concepts/⟨bo⟩", None).await;
    let (_, v) = call(&st, "GET", "/health", None).await;
    assert_eq!(v["weights_hash"].as_str().unwrap(), h.weights_hash);
    let (s, v) = call(&st, "GET", "/nope", None).await;
    assert_eq!((s, error_code(&v).as_str()), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_chats_agree() {
    let st = state();
    register(&st, "⟨bo⟩", 40).await;
    let body = json!({"question": "Is ⟨bo⟩ in this photo?", "query_image": png_b64(50), "concepts": ["⟨bo⟩"]});
    let mut tasks = Vec::new();
    for i in 0..8u8 {
        let st = st.clone();
        let body = body.clone();
        tasks.push(tokio::spawn(async move {
            if i % 4 == 3 {
                // registrations interleave with chats
                let (s, _) = register(&st, &format!("⟨c{i}⟩"), i).await;
                assert_eq!(s, StatusCode::CREATED);
                None
            } else {
                let (s, v) = call(&st, "POST", "/chat", Some(body)).await;
                assert_eq!(s, StatusCode::OK);
                Some(v["answer"].as_str().unwrap().to_string())
            }
        }));
    }
    let mut answers = std::collections::HashSet::new();
    for t in tasks {
        answers.extend(t.await.unwrap());
    }
    // chats never see each other's state, and registering other concepts
    // does not change the answer about ⟨bo⟩
    assert_eq!(answers.len(), 1);
    let (_, v) = call(&st, "GET", "/concepts", None).await;
    assert_eq!(v.as_array().unwrap().len(), 3);
}

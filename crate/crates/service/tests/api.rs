use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use glyphmlm_core::api::{self, DateRequest, RestoreRequest, SessionView};
use glyphmlm_core::checkpoint::{Checkpoint, StageMeta};
use glyphmlm_core::corpus::{build_vocab_with, Corpus, CorpusKind};
use glyphmlm_core::decode::{DecodeMode, PositionCandidates};
use glyphmlm_core::encoder::{EncoderConfig, EncoderModel, Head, LabelSpaces};
use glyphmlm_core::glyphnet::{build_families, parse_pairs_str, AllographPair};
use glyphmlm_service::{router, AppState};

const PAIRS: &str = "子\t孑\tShang\tsrc-a\n孑\t𡿨\t-\tsrc-b\n";

fn checkpoint() -> (Checkpoint, Vec<AllographPair>) {
    let c = Corpus::new(CorpusKind::Inscriptional, vec![]);
    let v = build_vocab_with(&[&c], "王曰君子孑𡿨孫寶用".chars().map(String::from)).unwrap();
    let cfg = EncoderConfig {
        layers: 1,
        heads: 2,
        dim: 8,
        ff_dim: 16,
        max_seq_len: 8,
        seed: 9,
        ..EncoderConfig::default()
    };
    let model = EncoderModel::init(&cfg, v.len(), LabelSpaces::default()).unwrap();
    let meta = StageMeta {
        finetuned_heads: vec![Head::Dynasty, Head::Period],
        ..StageMeta::default()
    };
    (Checkpoint::new(model, v, meta).unwrap(), parse_pairs_str(PAIRS).unwrap())
}

fn state() -> Arc<AppState> {
    let (ck, pairs) = checkpoint();
    Arc::new(AppState::new(ck, &pairs, None).unwrap())
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn restore_matches_library_and_maps_errors() {
    let st = state();
    let (s, b) = call(&st, "POST", "/restore", Some(json!({"text": "王[MASK]君□", "k": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    let lib = api::restore(
        &st.restorer(),
        &RestoreRequest {
            text: "王[MASK]君□".into(),
            mode: DecodeMode::Parallel,
            k: 1,
            mask_undeciphered: false,
        },
    )
    .unwrap();
    assert_eq!(json_of(&b), serde_json::to_value(&lib).unwrap());
    assert!(lib.positions.iter().all(|p| p.candidates.len() == 1));

    let cases = [
        (json!({"text": "王曰"}), StatusCode::BAD_REQUEST),
        (json!({"text": "王□", "k": 0}), StatusCode::BAD_REQUEST),
        (json!({"text": "王□", "bogus": 1}), StatusCode::BAD_REQUEST),
        (json!({"txt": "王□"}), StatusCode::BAD_REQUEST),
        (json!({"text": "王□曰君子孫寶用"}), StatusCode::PAYLOAD_TOO_LARGE),
        (json!({"text": "鼎□"}), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, want) in cases {
        let (s, b) = call(&st, "POST", "/restore", Some(body.clone())).await;
        assert_eq!(s, want, "{body}");
        let err = json_of(&b);
        assert_eq!(err["status"], want.as_u16());
        assert_eq!(err["schema"], api::API_SCHEMA);
    }
    let req = Request::post("/restore").body(Body::from("{not json")).unwrap();
    assert_eq!(router(st.clone()).oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn greedy_restore_reports_order_and_fill() {
    let st = state();
    let (s, b) = call(&st, "POST", "/restore", Some(json!({"text": "□曰□子", "mode": "greedy", "k": 3}))).await;
    assert_eq!(s, StatusCode::OK);
    let v = json_of(&b);
    assert_eq!(v["order"].as_array().unwrap().len(), 2);
    assert!(!v["restored"].as_str().unwrap().contains("MASK"));
}

fn parse_view(b: &[u8]) -> SessionView {
    serde_json::from_slice(b).unwrap()
}

#[tokio::test]
async fn sessions_accept_undo_and_errors() {
    let st = state();
    let (s, b) = call(&st, "POST", "/sessions", Some(json!({"text": "王□君□", "k": 4}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let created = parse_view(&b);
    assert!(created.accepted.is_empty());
    let uri = format!("/sessions/{}", created.id);
    let (_, fresh) = call(&st, "GET", &uri, None).await;
    assert_eq!(parse_view(&fresh), created);

    let (s, b) = call(&st, "POST", &format!("{uri}/accept"), Some(json!({"position": 1, "token": "孑"}))).await;
    assert_eq!(s, StatusCode::OK);
    let after = parse_view(&b);
    assert_eq!(after.remaining, [3]);
    assert_eq!(after.accepted.len(), 1);

    let (s, _) = call(&st, "POST", &format!("{uri}/accept"), Some(json!({"position": 1, "token": "孑"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&st, "POST", &format!("{uri}/accept"), Some(json!({"position": 0, "token": "孑"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&st, "POST", &format!("{uri}/accept"), Some(json!({"position": 3, "token": "鼎"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, still) = call(&st, "GET", &uri, None).await;
    assert_eq!(parse_view(&still), after, "failed accepts leave the session untouched");

    let (s, undone) = call(&st, "POST", &format!("{uri}/undo"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(undone, fresh, "undo restores the prior payload byte for byte");
    let (s, _) = call(&st, "POST", &format!("{uri}/undo"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    assert_eq!(call(&st, "GET", "/sessions/s999", None).await.0, StatusCode::NOT_FOUND);
    let (s, _) = call(&st, "POST", "/sessions/s999/accept", Some(json!({"position": 1, "token": "孑"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(call(&st, "POST", "/sessions", Some(json!({"text": "王曰"}))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn accepting_top_candidates_in_confidence_order_matches_greedy() {
    let st = state();
    let text = "□曰□子□";
    let (_, b) = call(&st, "POST", "/restore", Some(json!({"text": text, "mode": "greedy", "k": 2}))).await;
    let greedy = json_of(&b);
    let (_, b) = call(&st, "POST", "/sessions", Some(json!({"text": text, "k": 2}))).await;
    let mut v = parse_view(&b);
    let mut order = Vec::new();
    while !v.complete {
        let best = v
            .candidates
            .iter()
            .fold(None::<&PositionCandidates>, |best, p| match best {
                Some(b) if b.candidates[0].log_prob >= p.candidates[0].log_prob => Some(b),
                _ => Some(p),
            })
            .unwrap();
        order.push(best.position);
        let body = json!({"position": best.position, "token": best.candidates[0].surface});
        let (s, b) = call(&st, "POST", &format!("/sessions/{}/accept", v.id), Some(body)).await;
        assert_eq!(s, StatusCode::OK);
        v = parse_view(&b);
    }
    assert_eq!(json!(order), greedy["order"]);
    assert_eq!(json!(v.current), greedy["restored"]);
}

#[tokio::test]
async fn families_and_dating() {
    let st = state();
    let (s, b) = call(&st, "GET", "/families/%F0%A1%BF%A8", None).await;
    assert_eq!(s, StatusCode::OK);
    let f = json_of(&b);
    assert_eq!(f["members"], json!(["子", "孑", "𡿨"]));
    assert_eq!(f["pairs"].as_array().unwrap().len(), 2);
    let vocab = st.restorer().vocab().clone();
    let net = build_families(&parse_pairs_str(PAIRS).unwrap(), &vocab).unwrap();
    let lib = api::family_view(&net, &vocab, "子").unwrap();
    let (_, b) = call(&st, "GET", "/families/%E5%AD%90", None).await;
    assert_eq!(json_of(&b), serde_json::to_value(&lib).unwrap());
    let (_, b) = call(&st, "GET", "/families/%E7%8E%8B", None).await;
    assert_eq!(json_of(&b)["members"], json!(["王"]));
    assert_eq!(call(&st, "GET", "/families/%E9%BC%8E", None).await.0, StatusCode::NOT_FOUND);

    let (s, b) = call(&st, "POST", "/date", Some(json!({"text": "王曰□"}))).await;
    assert_eq!(s, StatusCode::OK);
    let d = json_of(&b);
    let lib = api::date(&st.restorer(), &DateRequest { text: "王曰□".into() }).unwrap();
    assert_eq!(d, serde_json::to_value(&lib).unwrap());
    for head in ["dynasty", "period"] {
        let total: f64 = d[head].as_array().unwrap().iter().map(|x| x["p"].as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    assert_eq!(d["dynasty"].as_array().unwrap().len(), 4);
    assert_eq!(call(&st, "POST", "/date", Some(json!({"text": ""}))).await.0, StatusCode::BAD_REQUEST);

    let (mut ck, pairs) = checkpoint();
    ck.meta.finetuned_heads.clear();
    let untuned = Arc::new(AppState::new(ck, &pairs, None).unwrap());
    let (s, _) = call(&untuned, "POST", "/date", Some(json!({"text": "王曰□"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn cors_and_info() {
    let st = state();
    let req = Request::get("/info").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
    let b = resp.into_body().collect().await.unwrap().to_bytes();
    let info = json_of(&b);
    assert_eq!(info["families"], 1);
    assert_eq!(info["max_cells"], 6);
    assert_eq!(info["persistent_sessions"], false);
}

#[tokio::test]
async fn pure_endpoints_are_stable_under_concurrency() {
    let st = state();
    let body = json!({"text": "□曰□子", "mode": "greedy", "k": 3});
    let first = call(&st, "POST", "/restore", Some(body.clone())).await.1;
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let st = st.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&st, "POST", "/restore", Some(body)).await.1 })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), first);
    }
}

#[tokio::test]
async fn session_log_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.jsonl");
    let (ck, pairs) = checkpoint();
    let st = Arc::new(AppState::new(ck.clone(), &pairs, Some(&log)).unwrap());
    let (_, b) = call(&st, "POST", "/sessions", Some(json!({"text": "王□君□"}))).await;
    let id = parse_view(&b).id;
    call(&st, "POST", &format!("/sessions/{id}/accept"), Some(json!({"position": 1, "token": "子"}))).await;
    call(&st, "POST", &format!("/sessions/{id}/accept"), Some(json!({"position": 3, "token": "寶"}))).await;
    call(&st, "POST", &format!("/sessions/{id}/undo"), None).await;
    let (_, before) = call(&st, "GET", &format!("/sessions/{id}"), None).await;
    drop(st);

    let st = Arc::new(AppState::new(ck.clone(), &pairs, Some(&log)).unwrap());
    let (s, after) = call(&st, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(after, before);
    let (_, b) = call(&st, "POST", "/sessions", Some(json!({"text": "□曰"}))).await;
    assert_ne!(parse_view(&b).id, id, "ids continue after replay");

    let ephemeral = Arc::new(AppState::new(ck, &pairs, None).unwrap());
    assert_eq!(call(&ephemeral, "GET", &format!("/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
}

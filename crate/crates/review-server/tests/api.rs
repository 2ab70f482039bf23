use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use instruct_engine::model::{
    DedupKey, Domain, ImageRecord, ImageState, IndicatorSuffixTable, InstructionRecord,
    QuestionType, ReviewState, SourceChannel,
};
use instruct_engine::review::ReviewService;
use instruct_engine::store::{Admission, Store};
use review_server::{router, AppState};

const PNG: &[u8] = b"\x89PNG\r\n\x1a\nnot-really-an-image";

struct Fixture {
    app: axum::Router,
    store: Arc<Store>,
    image: String,
    records: Vec<String>,
}

fn fixture(n: usize) -> Fixture {
    let store = Arc::new(Store::ephemeral());
    let mut img = ImageRecord::collected(
        PNG,
        "fixtures/a.png",
        SourceChannel::OpenSource,
        Domain::Ocr,
        vec!["sign".into()],
    );
    img.blob = Some(
        store
            .put_blob(&DedupKey::of_bytes(PNG), Some("png"), PNG)
            .unwrap(),
    );
    let Admission::Inserted { id, .. } = store.admit_image(img).unwrap() else {
        panic!("fresh store rejected the image")
    };
    let img = store.image(&id).unwrap();
    let suffixes = IndicatorSuffixTable::default();
    let mut records = Vec::new();
    for i in 0..n {
        let q = suffixes.append(
            &format!("What is written on line {i}?"),
            QuestionType::ShortVqa,
        );
        let rec = InstructionRecord::single_turn(
            img.id.clone(),
            Domain::Ocr,
            QuestionType::ShortVqa,
            q,
            format!("line {i}"),
        );
        records.push(rec.id.to_string());
        store.insert_instruction(rec).unwrap();
    }
    records.sort();
    let app = router(AppState::new(ReviewService::new(store.clone())));
    Fixture {
        app,
        store,
        image: img.id.to_string(),
        records,
    }
}

async fn call(
    app: &axum::Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn open(f: &Fixture) -> String {
    let (s, b) = call(
        &f.app,
        Method::POST,
        "/batches",
        Some(json!({"domain": "ocr"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{b}");
    b["id"].as_str().unwrap().to_owned()
}

/// Serves and approves every task of the current round; returns the served task ids.
async fn approve_round(f: &Fixture, batch: &str) -> Vec<String> {
    let mut served = Vec::new();
    loop {
        let (s, t) = call(
            &f.app,
            Method::GET,
            &format!("/batches/{batch}/next-task?reviewer=ann"),
            None,
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{t}");
        if t["status"] == "round_complete" {
            return served;
        }
        let id = t["id"].as_str().unwrap().to_owned();
        let (s, v) = call(
            &f.app,
            Method::POST,
            &format!("/tasks/{id}/verdict"),
            Some(json!({"reviewer": "ann", "verdict": "approve"})),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        served.push(id);
    }
}

#[tokio::test]
async fn three_clean_rounds_accept_the_batch() {
    let f = fixture(3);
    let batch = open(&f).await;
    let (_, list) = call(&f.app, Method::GET, "/batches", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);

    let mut orders = Vec::new();
    for round in 1..=3 {
        let served = approve_round(&f, &batch).await;
        assert_eq!(served.len(), 3);
        let mut uniq = served.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 3, "task served twice in round {round}");
        orders.push(served);
        let (s, b) = call(
            &f.app,
            Method::POST,
            &format!("/batches/{batch}/advance"),
            None,
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{b}");
        assert_eq!(b["rounds_completed"], round);
        let expected = if round < 3 { "in_round" } else { "accepted" };
        assert_eq!(b["state"], expected);
    }
    assert_ne!(orders[0], orders[1]);
    assert_ne!(orders[1], orders[2]);
    for r in &f.records {
        let (s, rec) = call(&f.app, Method::GET, &format!("/records/{r}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(rec["review_state"], "accepted");
    }
}

#[tokio::test]
async fn correction_round_trip_and_invalid_correction() {
    let f = fixture(2);
    let batch = open(&f).await;
    let (_, t) = call(
        &f.app,
        Method::GET,
        &format!("/batches/{batch}/next-task?reviewer=ann"),
        None,
    )
    .await;
    let task = t["id"].as_str().unwrap().to_owned();
    let old = t["record"]["id"].as_str().unwrap().to_owned();
    assert_eq!(t["image"]["image_id"], f.image.as_str());
    assert!(t["checklist"].as_array().unwrap().len() > 5);

    // options on a short-answer record fail validation
    let (s, e) = call(
        &f.app,
        Method::POST,
        &format!("/tasks/{task}/verdict"),
        Some(json!({"reviewer": "ann", "verdict": "correct", "correction": {"options": ["a", "b", "c"]}})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"], "invalid_correction");
    assert!(e["details"]["violations"]
        .as_array()
        .is_some_and(|v| !v.is_empty()));

    let (s, e) = call(
        &f.app,
        Method::POST,
        &format!("/tasks/{task}/verdict"),
        Some(json!({"reviewer": "bob", "verdict": "approve"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["error"], "stale_lease");

    let (s, out) = call(
        &f.app,
        Method::POST,
        &format!("/tasks/{task}/verdict"),
        Some(json!({"reviewer": "ann", "verdict": "correct", "correction": {"answer": "fixed"}})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{out}");
    assert_eq!(out["superseded"], old.as_str());
    assert_eq!(out["record"]["answer"], "fixed");
    assert_eq!(out["record"]["provenance"], "corrected");
    let new = out["record"]["id"].as_str().unwrap();
    let (_, rec) = call(&f.app, Method::GET, &format!("/records/{new}"), None).await;
    assert_eq!(rec["ancestor_id"], old.as_str());

    // the round is incomplete until the second task is served
    let (s, e) = call(
        &f.app,
        Method::POST,
        &format!("/batches/{batch}/advance"),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["error"], "round_incomplete");
    approve_round(&f, &batch).await;
    let (_, b) = call(
        &f.app,
        Method::POST,
        &format!("/batches/{batch}/advance"),
        Some(json!({"by": "lead"})),
    )
    .await;
    assert_eq!(b["rounds_completed"], 1);
    assert_eq!(b["history"][0]["corrections"], 1);
    assert!(f
        .store
        .audit_log()
        .iter()
        .any(|a| a.reviewer.as_deref() == Some("lead")));
}

#[tokio::test]
async fn error_statuses() {
    let f = fixture(1);
    let (s, e) = call(&f.app, Method::GET, "/batches/nope", None).await;
    assert_eq!(
        (s, e["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("batch_not_found"))
    );
    let (s, _) = call(
        &f.app,
        Method::POST,
        "/tasks/nope/verdict",
        Some(json!({"reviewer": "a", "verdict": "approve"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, e) = call(
        &f.app,
        Method::POST,
        "/batches",
        Some(json!({"domain": "ocr", "min_rounds": 2})),
    )
    .await;
    assert_eq!(
        (s, e["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("min_rounds_too_low"))
    );
    let (s, e) = call(
        &f.app,
        Method::POST,
        "/batches",
        Some(json!({"domain": "landmark"})),
    )
    .await;
    assert_eq!(
        (s, e["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("empty_selection"))
    );
    let (s, _) = call(
        &f.app,
        Method::POST,
        "/batches",
        Some(json!({"domain": "nowhere"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(
        &f.app,
        Method::POST,
        "/batches",
        Some(json!({"no_domain": 1})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    open(&f).await;
    let (s, e) = call(
        &f.app,
        Method::POST,
        "/batches",
        Some(json!({"domain": "ocr", "record_ids": [f.records[0]]})),
    )
    .await;
    assert_eq!(
        (s, e["error"].as_str()),
        (StatusCode::CONFLICT, Some("already_in_review"))
    );
    let (_, rec) = call(
        &f.app,
        Method::GET,
        &format!("/records/{}", f.records[0]),
        None,
    )
    .await;
    assert_eq!(
        rec["review_state"],
        serde_json::to_value(ReviewState::InReview).unwrap()
    );
}

#[tokio::test]
async fn blobs_and_criteria() {
    let f = fixture(1);
    let resp = f
        .app
        .clone()
        .oneshot(
            Request::get(format!("/images/{}", f.image))
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(
        &resp.into_body().collect().await.unwrap().to_bytes()[..],
        PNG
    );

    let (s, _) = call(&f.app, Method::GET, "/blobs/..%2F..%2Fetc%2Fpasswd", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&f.app, Method::GET, "/blobs/missing.png", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, Method::GET, "/images/missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, c) = call(&f.app, Method::GET, "/criteria/ocr", None).await;
    assert_eq!(s, StatusCode::OK);
    let items = c["checklist"].as_array().unwrap();
    assert!(items
        .iter()
        .any(|i| i.as_str().unwrap().contains("order of the text output")));
}

#[tokio::test]
async fn screening_queue() {
    let f = fixture(0);
    let (s, imgs) = call(&f.app, Method::GET, "/screening?reviewer=ann&limit=5", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(imgs.as_array().unwrap().len(), 1);
    let (s, _) = call(&f.app, Method::GET, "/screening?reviewer=bob", None).await;
    assert_eq!(
        s,
        StatusCode::NOT_FOUND,
        "leased image must not be served twice"
    );
    let (s, e) = call(
        &f.app,
        Method::POST,
        &format!("/screening/{}", f.image),
        Some(json!({"reviewer": "bob", "verdict": "reject"})),
    )
    .await;
    assert_eq!(
        (s, e["error"].as_str()),
        (StatusCode::CONFLICT, Some("stale_lease"))
    );
    let (s, rec) = call(
        &f.app,
        Method::POST,
        &format!("/screening/{}", f.image),
        Some(json!({"reviewer": "ann", "verdict": "approve", "category": "street"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{rec}");
    assert_eq!(rec["category"], "street");
    let img = f
        .store
        .image(&instruct_engine::model::ImageId(f.image.clone()))
        .unwrap();
    assert_eq!(img.state, ImageState::Screened);
}

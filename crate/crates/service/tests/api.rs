use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dante_core::concepts::Severity;
use dante_core::ingest::FlowRecord;
use dante_core::pipeline::{training_corpus, Pipeline, PipelineConfig};
use dante_core::port2vec::{train, TrainConfig};
use dante_core::simgen::{catalog, generate};
use dante_service::{router, ApiState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    pipeline: Pipeline,
    records: Vec<FlowRecord>,
    app: Router,
    _dir: tempfile::TempDir,
}

fn fixture(scenario: &str) -> Fixture {
    let (records, _) = generate(&catalog::scenario(scenario).unwrap()).unwrap();
    let table = Arc::new(train(&training_corpus(records.clone(), &PipelineConfig::default()), &TrainConfig::default()).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        state_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    let pipeline = Pipeline::with_table(config, table.clone()).unwrap();
    let app = router(
        ApiState {
            shared: pipeline.shared(),
            table: Some(table),
        },
        None,
    );
    Fixture {
        pipeline,
        records,
        app,
        _dir: dir,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, None).await
}

#[tokio::test]
async fn empty_state_answers_with_versioned_errors() {
    let f = fixture("telnet");
    let (s, v) = get(&f.app, "/api/windows/latest").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["v"], 1);
    assert!(v["error"].is_string());
    let (s, v) = get(&f.app, "/api/concepts").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({ "v": 1, "concepts": [] }));
    let (s, v) = get(&f.app, "/api/timeline").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["windows"], json!([]));
    let (s, _) = get(&f.app, "/api/windows/abc").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = get(&f.app, "/api/nope").await;
    assert_eq!((s, v["v"].clone()), (StatusCode::NOT_FOUND, json!(1)));
}

#[tokio::test]
async fn read_endpoints_after_a_run() {
    let mut f = fixture("telnet");
    f.pipeline.run(f.records.iter().copied().map(Ok), None).unwrap();

    let (s, latest) = get(&f.app, "/api/windows/latest").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(latest["v"], 1);
    let last = latest["window"].as_u64().unwrap();
    let (_, same) = get(&f.app, &format!("/api/windows/{last}")).await;
    assert_eq!(same, latest);
    let (s, _) = get(&f.app, &format!("/api/windows/{}", last + 100)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, concepts) = get(&f.app, "/api/concepts").await;
    let list = concepts["concepts"].as_array().unwrap();
    assert_eq!(list.len(), 1);
    let id = list[0]["id"].as_str().unwrap().to_string();
    assert_eq!(list[0]["category"], "ComplexAttack");
    let first_seen = list[0]["first_seen"].as_u64().unwrap();

    let (_, none) = get(&f.app, &format!("/api/concepts?novel_since={first_seen}")).await;
    assert!(none["concepts"].as_array().unwrap().is_empty());
    if first_seen > 0 {
        let (_, some) = get(&f.app, &format!("/api/concepts?novel_since={}", first_seen - 1)).await;
        assert_eq!(some["concepts"].as_array().unwrap().len(), 1);
    }
    let (s, _) = get(&f.app, "/api/concepts?novel_since=x").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, detail) = get(&f.app, &format!("/api/concepts/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(detail["v"], 1);
    assert!(!detail["sizes"].as_array().unwrap().is_empty());
    assert_eq!(detail["nearest_ports"]["23"][0]["port"], 2323);
    let (s, _) = get(&f.app, "/api/concepts/c999999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, tl) = get(&f.app, &format!("/api/timeline?from=0&to={last}")).await;
    let windows = tl["windows"].as_array().unwrap().len();
    assert_eq!(windows as u64, last + 1);
    for series in tl["series"].as_object().unwrap().values() {
        assert_eq!(series.as_array().unwrap().len(), windows);
    }
    assert_eq!(tl["noise"].as_array().unwrap().len(), windows);

    let (_, alerts) = get(&f.app, "/api/alerts?since=0").await;
    assert_eq!(alerts["v"], 1);
    let all = alerts["alerts"].as_array().unwrap().len();
    let (_, later) = get(&f.app, &format!("/api/alerts?since={}", last + 1)).await;
    assert!(later["alerts"].as_array().unwrap().is_empty());
    assert!(all >= 1, "telnet campaign should raise a NovelCluster alert");

    let (_, near) = get(&f.app, "/api/ports/23/nearest?k=1").await;
    assert_eq!(near["nearest"][0]["port"], 2323);
    let (s, _) = get(&f.app, "/api/ports/1/nearest").await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (_, status) = get(&f.app, "/api/status").await;
    assert_eq!(status["running"], false);
    assert_eq!(status["concepts"], 1);
}

#[tokio::test]
async fn label_validation_and_idempotency() {
    let mut f = fixture("telnet");
    f.pipeline.run(f.records.iter().copied().map(Ok), None).unwrap();
    let (_, concepts) = get(&f.app, "/api/concepts").await;
    let id = concepts["concepts"][0]["id"].as_str().unwrap().to_string();
    let uri = format!("/api/concepts/{id}/label");

    let (s, v) = call(&f.app, "POST", "/api/concepts/c999999/label", Some(json!({ "severity": "malicious", "note": "x" }))).await;
    assert_eq!((s, v["v"].clone()), (StatusCode::NOT_FOUND, json!(1)));
    let (s, _) = call(&f.app, "POST", &uri, Some(json!({ "severity": "evil" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let body = json!({ "severity": "malicious", "note": "mirai", "idempotency_key": "k1" });
    let (s, v) = call(&f.app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(v["status"], "queued");
    let (s, v) = call(&f.app, "POST", &uri, Some(body.clone())).await;
    assert_eq!((s, v["status"].clone()), (StatusCode::OK, json!("duplicate")));

    assert_eq!(f.pipeline.apply_pending_labels().unwrap(), 1);
    let (_, detail) = get(&f.app, &format!("/api/concepts/{id}")).await;
    assert_eq!(detail["annotation"]["severity"], "malicious");
    assert_eq!(detail["history"].as_array().unwrap().len(), 1);
    // a replay after the label was applied is still a duplicate
    let (_, v) = call(&f.app, "POST", &uri, Some(body)).await;
    assert_eq!(v["status"], "duplicate");
    assert_eq!(f.pipeline.state().registry.models()[0].severity(), Severity::Malicious);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn label_through_the_api_alerts_on_recurrence() {
    let f = fixture("pause-resume");
    let Fixture {
        mut pipeline,
        records,
        app,
        _dir,
    } = f;
    let rt = tokio::runtime::Handle::current();
    let mut labelled: Option<(u64, String)> = None;
    tokio::task::block_in_place(|| {
        pipeline
            .run_with(records.iter().copied().map(Ok), None, |report, _| {
                if labelled.is_some() {
                    return;
                }
                if let Some(c) = report.clusters.iter().find(|c| c.ports.contains(&7547)) {
                    let uri = format!("/api/concepts/{}/label", c.concept);
                    let (s, _) = rt.block_on(call(&app, "POST", &uri, Some(json!({ "severity": "malicious", "note": "router" }))));
                    assert_eq!(s, StatusCode::ACCEPTED);
                    labelled = Some((report.window, c.concept.to_string()));
                }
            })
            .unwrap();
    });
    let (at, concept) = labelled.expect("router campaign clustered");
    let (_, alerts) = get(&app, "/api/alerts").await;
    let recurrences: Vec<u64> = alerts["alerts"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["kind"] == "MaliciousRecurrence" && a["concept"] == concept.as_str())
        .map(|a| a["window"].as_u64().unwrap())
        .collect();
    assert!(!recurrences.is_empty());
    assert!(recurrences.iter().all(|w| *w > at));
    assert!(recurrences.contains(&21));
    let mut dedup = recurrences.clone();
    dedup.dedup();
    assert_eq!(dedup, recurrences);
}

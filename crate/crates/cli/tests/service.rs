mod common;

use std::io::{Read, Write};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use http_body_util::BodyExt;
use pscbm::data::{load_external, Split};
use pscbm::intervention::{run_intervention_curve, CurveConfig, PolicyKind, StrategyKind};
use pscbm::model::io;
use pscbm_cli::service::router;
use pscbm_cli::{service_state, ServeArgs};
use serde_json::{json, Value};
use tower::ServiceExt;

const SAMPLES: usize = 50;

fn serve_args() -> ServeArgs {
    let f = fixture();
    ServeArgs {
        models: vec![format!("pscbm={}", s(&f.pscbm)), format!("cbm={}", s(&f.cbm))],
        data: f.data.clone(),
        host: "127.0.0.1".into(),
        port: 0,
        samples: SAMPLES,
        seed: 0,
    }
}

fn app() -> Router {
    router(Arc::new(service_state(&serve_args()).unwrap()))
}

/// Sends one request; every response must be JSON carrying a fingerprint.
async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
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
    let v: Value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("{method} {uri}: not json: {bytes:?}"));
    assert!(v["fingerprint"].is_string(), "{method} {uri} lacks a fingerprint: {v}");
    (status, v)
}

async fn create(app: &Router, model: &str, sample: usize) -> String {
    let (st, v) = call(app, "POST", "/sessions", Some(json!({"model_id": model, "sample_index": sample}))).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn intervene(app: &Router, id: &str, concept: usize, value: u8, strategy: Value) -> (StatusCode, Value) {
    let body = json!({"concept": concept, "value": value, "strategy": strategy});
    call(app, "POST", &format!("/sessions/{id}/interventions?reveal=true"), Some(body)).await
}

fn probs(view: &Value) -> Vec<f64> {
    view["concepts"].as_array().unwrap().iter().map(|c| c["probability"].as_f64().unwrap()).collect()
}

#[tokio::test]
async fn models_and_samples_are_listed() {
    let f = fixture();
    let app = app();
    let (st, v) = call(&app, "GET", "/models", None).await;
    assert_eq!(st, StatusCode::OK);
    let models = v["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    let by_id = |id: &str| models.iter().find(|m| m["id"] == id).unwrap().clone();
    assert_eq!(by_id("pscbm")["fingerprint"], io::fingerprint(&io::load(&f.pscbm).unwrap()));
    assert_eq!(by_id("cbm")["mode"], "cbm");
    assert_eq!(by_id("pscbm")["covariance"], "global");
    assert_eq!(v["concept_names"].as_array().unwrap().len(), 16);

    let (st, v) = call(&app, "GET", "/models/pscbm/samples?split=test", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["count"], 100);
    assert_eq!(v["samples"][0], json!({"index": 500}));
    let (_, v) = call(&app, "GET", "/models/pscbm/samples?split=val&reveal=true", None).await;
    assert_eq!(v["count"], 100);
    assert!(v["samples"][0]["label"].is_u64() && v["samples"][0]["concepts"].is_array());
    let (_, v) = call(&app, "GET", "/models/pscbm/samples", None).await;
    assert_eq!(v["split"], "test");

    assert_eq!(call(&app, "GET", "/models/nope/samples", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/models/pscbm/samples?split=dev", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn session_creation_validates_its_request() {
    let app = app();
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({"model_id": "pscbm", "sample_index": 510}))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["model_id"], "pscbm");
    assert_eq!(v["sample_index"], 510);
    assert!(v["created_at"].as_f64().unwrap() > 1.0e9);
    let (_, w) = call(&app, "POST", "/sessions", Some(json!({"model_id": "pscbm", "sample_index": 510}))).await;
    assert_ne!(v["session_id"], w["session_id"], "ids are unique");

    let bad = [
        (json!({"model_id": "nope", "sample_index": 0}), StatusCode::NOT_FOUND),
        (json!({"model_id": "pscbm", "sample_index": 600}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"model_id": "pscbm"}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"model_id": "pscbm", "sample_index": -1}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"model_id": "pscbm", "sample_index": 1, "extra": true}), StatusCode::UNPROCESSABLE_ENTITY),
    ];
    for (body, code) in bad {
        assert_eq!(call(&app, "POST", "/sessions", Some(body.clone())).await.0, code, "{body}");
    }
    // malformed JSON and a missing content type are validation errors too
    let req = Request::post("/sessions").header("content-type", "application/json").body(Body::from("{")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);
    let req = Request::post("/sessions").body(Body::from("{}")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);

    assert_eq!(call(&app, "GET", "/sessions/zzz", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/sessions/zzz/undo", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "DELETE", "/sessions/zzz", None).await.0, StatusCode::NOT_FOUND);
    let (st, _) = call(&app, "POST", "/sessions/zzz/interventions", Some(json!({"concept": 0, "value": 1}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn fresh_views_match_the_eval_curve_at_k0() {
    let f = fixture();
    let app = app();
    let data = load_external(&f.data).unwrap();
    for model in ["pscbm", "cbm"] {
        let path = if model == "pscbm" { &f.pscbm } else { &f.cbm };
        let bundle = Arc::new(io::load(path).unwrap());
        let cfg = CurveConfig::new(PolicyKind::ConceptUncertainty, StrategyKind::default(), SAMPLES, 0);
        let curve = run_intervention_curve(&bundle, &data, &cfg).unwrap();
        let rows = data.indices(Split::Test);
        let mut concept = 0.0;
        let mut target = 0.0;
        for &r in &rows {
            let id = create(&app, model, r).await;
            let (_, v) = call(&app, "GET", &format!("/sessions/{id}?reveal=true"), None).await;
            assert_eq!(v["k"], 0);
            assert!(v["history"].as_array().unwrap().is_empty());
            concept += v["truth"]["concept_accuracy"].as_f64().unwrap() * 16.0;
            target += f64::from(u8::from(v["truth"]["target_correct"].as_bool().unwrap()));
        }
        let n = rows.len() as f64;
        assert_eq!(concept / (n * 16.0), curve.points[0].concept_acc, "{model}");
        assert_eq!(target / n, curve.points[0].target_acc, "{model}");
    }
}

#[tokio::test]
async fn truth_is_hidden_unless_revealed() {
    let app = app();
    let id = create(&app, "pscbm", 3).await;
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert!(v.get("truth").is_none());
    let (_, v) = call(&app, "POST", &format!("/sessions/{id}/interventions"), Some(json!({"concept": 1, "value": 0}))).await;
    assert!(v.get("truth").is_none());
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}?reveal=true"), None).await;
    assert!(v["truth"]["concepts"].is_array());
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}?reveal=maybe"), None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn full_intervention_reaches_concept_accuracy_one() {
    let app = app();
    for model in ["pscbm", "cbm"] {
        let id = create(&app, model, 520).await;
        let (_, v) = call(&app, "GET", &format!("/sessions/{id}?reveal=true"), None).await;
        let truth: Vec<u8> = serde_json::from_value(v["truth"]["concepts"].clone()).unwrap();
        let mut view = v;
        // follow the service's own suggestion each step
        for step in 0..16 {
            let next = view["suggested_concept"].as_u64().unwrap() as usize;
            let ranked_first = view["concepts"]
                .as_array()
                .unwrap()
                .iter()
                .find(|c| c["uncertainty_rank"] == 0)
                .unwrap()["index"]
                .as_u64()
                .unwrap() as usize;
            assert_eq!(next, ranked_first);
            let (st, v) = intervene(&app, &id, next, truth[next], json!("hard")).await;
            assert_eq!(st, StatusCode::OK, "{v}");
            assert_eq!(v["k"], step + 1);
            let c = &v["concepts"][next];
            assert_eq!((c["intervened"].as_bool(), c["value"].as_u64()), (Some(true), Some(u64::from(truth[next]))));
            assert!(c["uncertainty_rank"].is_null());
            view = v;
        }
        assert_eq!(view["truth"]["concept_accuracy"], 1.0, "{model}");
        assert!(view["suggested_concept"].is_null());
        let (st, v) = intervene(&app, &id, 0, truth[0], json!("hard")).await;
        assert_eq!((st, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("all_intervened")));
    }
}

#[tokio::test]
async fn intervention_errors_map_to_status_codes() {
    let app = app();
    let id = create(&app, "pscbm", 7).await;
    assert_eq!(intervene(&app, &id, 2, 1, json!("hard")).await.0, StatusCode::OK);
    let (st, v) = intervene(&app, &id, 2, 0, json!("hard")).await;
    assert_eq!((st, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("already_intervened")));
    let cases = [
        (json!({"concept": 16, "value": 1}), "unknown_concept"),
        (json!({"concept": 3, "value": 2}), "invalid"),
        (json!({"concept": 3, "value": 1, "strategy": "bogus"}), "invalid"),
        (json!({"concept": 3, "value": 1, "strategy": {"kind": "hard", "epsilon": 0.9}}), "invalid"),
        (json!({"concept": 3}), "invalid"),
    ];
    for (body, code) in cases {
        let (st, v) = call(&app, "POST", &format!("/sessions/{id}/interventions"), Some(body.clone())).await;
        assert_eq!((st, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some(code)), "{body}");
    }
    // failed requests leave the session untouched
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["k"], 1);

    let (st, v) = intervene(&app, &id, 3, 1, json!({"kind": "confidence_region", "alpha": 0.1})).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["history"][1]["strategy"], "confidence_region");
    assert_eq!(v["history"][1]["strategy_params"]["alpha"], 0.1);
    assert_eq!(v["history"][0]["strategy"], "hard");

    let cbm = create(&app, "cbm", 7).await;
    let (st, v) = intervene(&app, &cbm, 0, 1, json!("confidence_region")).await;
    assert_eq!((st, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("incompatible_strategy")));
    let (st, _) = intervene(&app, &cbm, 0, 1, json!("empirical")).await;
    assert_eq!(st, StatusCode::OK, "CBMs carry training percentiles");
}

#[tokio::test]
async fn undo_restores_the_previous_view_exactly() {
    let app = app();
    let id = create(&app, "pscbm", 530).await;
    let (st, v) = call(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    assert_eq!((st, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("nothing_to_undo")));
    let (_, fresh) = call(&app, "GET", &format!("/sessions/{id}?reveal=true"), None).await;
    intervene(&app, &id, 4, 1, json!("hard")).await;
    let (_, two) = intervene(&app, &id, 9, 0, json!("simple_percentile")).await;
    let (_, three) = intervene(&app, &id, 0, 1, json!("confidence_region")).await;
    assert_ne!(three, two);
    let (st, back) = call(&app, "POST", &format!("/sessions/{id}/undo?reveal=true"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(back, two, "field-for-field equal to the two-intervention view");
    call(&app, "POST", &format!("/sessions/{id}/undo"), None).await;
    let (_, zero) = call(&app, "POST", &format!("/sessions/{id}/undo?reveal=true"), None).await;
    assert_eq!(zero, fresh);
}

#[tokio::test]
async fn conditioning_moves_unrevealed_concepts() {
    let app = app();
    let id = create(&app, "pscbm", 540).await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let (_, after) = intervene(&app, &id, 0, 1, json!("hard")).await;
    let moved = probs(&before)
        .iter()
        .zip(probs(&after))
        .skip(1)
        .filter(|(a, b)| (*a - b).abs() > 1e-9)
        .count();
    assert!(moved > 0, "a stochastic model updates the other concepts");
    assert_eq!(after["concepts"][0]["probability"], 1.0);
}

#[tokio::test]
async fn delete_removes_the_session() {
    let app = app();
    let id = create(&app, "cbm", 1).await;
    let (st, v) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!((st, v["deleted"].as_str()), (StatusCode::OK, Some(id.as_str())));
    assert_eq!(call(&app, "GET", &format!("/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "DELETE", &format!("/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn explicit_seeds_are_honoured() {
    let app = app();
    let body = json!({"model_id": "pscbm", "sample_index": 12, "seed": 99});
    let (_, a) = call(&app, "POST", "/sessions", Some(body.clone())).await;
    let (_, b) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(a["seed"], 99);
    let get = |v: &Value| format!("/sessions/{}", v["session_id"].as_str().unwrap());
    let (_, va) = call(&app, "GET", &get(&a), None).await;
    let (_, vb) = call(&app, "GET", &get(&b), None).await;
    assert_eq!(va["concepts"], vb["concepts"]);
    assert_eq!(va["class_probs"], vb["class_probs"]);
}

/// The view after `steps` applied in order to a fresh session.
async fn reference(app: &Router, sample: usize, steps: &[(usize, u8)]) -> Value {
    let id = create(app, "pscbm", sample).await;
    let mut last = Value::Null;
    for &(c, v) in steps {
        last = intervene(app, &id, c, v, json!("hard")).await.1;
    }
    last
}

fn strip_ids(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("session_id");
    v
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_sessions_do_not_interfere() {
    let app = app();
    let steps_a = [(0, 1), (5, 0), (7, 1), (2, 0)];
    let steps_b = [(5, 1), (0, 0), (11, 1), (3, 1)];
    let a = create(&app, "pscbm", 550).await;
    let b = create(&app, "pscbm", 550).await;
    let mut tasks = Vec::new();
    for (id, steps) in [(a.clone(), steps_a), (b.clone(), steps_b)] {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            for (c, v) in steps {
                let (st, _) = intervene(&app, &id, c, v, json!("hard")).await;
                assert_eq!(st, StatusCode::OK);
                tokio::task::yield_now().await;
            }
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    for (id, steps) in [(a, steps_a), (b, steps_b)] {
        let (_, got) = call(&app, "GET", &format!("/sessions/{id}?reveal=true"), None).await;
        let want = reference(&app, 550, &steps).await;
        assert_eq!(strip_ids(got), strip_ids(want));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_mutations_of_one_session_are_serialized() {
    let app = app();
    let id = create(&app, "pscbm", 560).await;
    let tasks: Vec<_> = (0..16)
        .map(|c| {
            let app = app.clone();
            let id = id.clone();
            tokio::spawn(async move { intervene(&app, &id, c, 1, json!("hard")).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["k"], 16);
    let mut seen: Vec<u64> = v["history"].as_array().unwrap().iter().map(|h| h["concept"].as_u64().unwrap()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..16).collect::<Vec<_>>());
}

#[test]
fn serve_speaks_plain_http() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let args = serve_args();
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_pscbm"));
    cmd.args(["serve", "--data", s(&args.data), "--port", &port.to_string(), "--samples", "10"]);
    for m in &args.models {
        cmd.args(["--model", m]);
    }
    let mut child = cmd.stdout(std::process::Stdio::null()).spawn().unwrap();
    let mut response = String::new();
    for _ in 0..100 {
        if let Ok(mut stream) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            stream
                .write_all(b"GET /models HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
                .unwrap();
            stream.read_to_string(&mut response).unwrap();
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200 OK"), "{response}");
    assert!(response.contains("application/json"));
    assert!(response.contains("\"fingerprint\""));
}

#[test]
fn serve_rejects_bad_model_specs() {
    let args = serve_args();
    let r = pscbm(&["serve", "--data", s(&args.data), "--model", s(&fixture().pscbm), "--port", "1"]);
    assert_eq!(r.status.code(), Some(2), "a model needs an id");
    let r = pscbm(&["serve", "--data", s(&args.data), "--model", "x=/does/not/exist.json", "--port", "1"]);
    assert_eq!(r.status.code(), Some(1));
}

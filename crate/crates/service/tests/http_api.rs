use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vsalient_service::{router, Service, ServiceConfig};

fn app() -> Router {
    router(Service::new(ServiceConfig { tick: Duration::from_millis(2), channel_capacity: 64 }))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

/// Reads server-sent events until `stop` returns true or the deadline passes.
async fn read_events(
    app: &Router,
    uri: &str,
    last_event_id: Option<u64>,
    mut stop: impl FnMut(&Value) -> bool,
) -> Vec<(u64, Value)> {
    let mut req = Request::builder().uri(uri);
    if let Some(id) = last_event_id {
        req = req.header("last-event-id", id.to_string());
    }
    let resp = app.clone().oneshot(req.body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let mut body = resp.into_body();
    let mut buf = String::new();
    let mut out = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        let frame = match tokio::time::timeout(Duration::from_secs(10), body.frame()).await {
            Ok(Some(Ok(f))) => f,
            _ => break,
        };
        let Ok(data) = frame.into_data() else { continue };
        buf.push_str(std::str::from_utf8(&data).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let mut id = None;
            let mut payload = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    id = Some(v.trim().parse::<u64>().unwrap());
                } else if let Some(v) = line.strip_prefix("data:") {
                    payload = Some(serde_json::from_str::<Value>(v.trim()).unwrap());
                }
            }
            if let (Some(id), Some(p)) = (id, payload) {
                let done = stop(&p);
                out.push((id, p));
                if done {
                    return out;
                }
            }
        }
    }
    out
}

fn is_terminal_update(m: &Value) -> bool {
    m["type"] == "state_update" && m["status"] != "in_progress"
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_annotate_start_and_stream_to_convergence() {
    let app = app();
    let (status, scenarios) = call(&app, "GET", "/scenarios", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(scenarios.as_array().unwrap().len(), 8);

    let (status, info) = call(&app, "POST", "/sessions", Some(json!({ "scenario": "reach_can_topdown" }))).await;
    assert_eq!(status, StatusCode::OK, "{info}");
    let id = info["id"].as_str().unwrap().to_owned();
    assert_eq!(info["lifecycle"], "idle");

    let (status, frame) = call(&app, "GET", &format!("/sessions/{id}/frame"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(frame["image_png_base64"].as_str().unwrap().len() > 100);

    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/commands"), Some(json!({ "command": "start" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"], "illegal_command");

    // A click near the can, which sits below the image center.
    let annotation = json!({ "kind": "p2p", "points": [[320.0, 384.0], [300.0, 360.0]] });
    let (status, accepted) = call(&app, "POST", &format!("/sessions/{id}/annotations"), Some(annotation)).await;
    assert_eq!(status, StatusCode::OK, "{accepted}");
    let e = accepted["error"].as_array().unwrap();
    assert!((e[0].as_f64().unwrap() + 20.0).abs() < 1e-6 && (e[1].as_f64().unwrap() + 24.0).abs() < 1e-6);

    let (status, resp) = call(&app, "POST", &format!("/sessions/{id}/commands"), Some(json!({ "command": "start" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp["lifecycle"], "running");

    let started = Instant::now();
    let events = read_events(&app, &format!("/sessions/{id}/events"), None, is_terminal_update).await;
    let elapsed = started.elapsed();
    let seqs: Vec<u64> = events.iter().map(|(s, _)| *s).collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "gapless seq: {seqs:?}");
    assert_eq!(seqs[0], 0, "history replayed from the start");
    let updates: Vec<&Value> = events.iter().map(|(_, m)| m).filter(|m| m["type"] == "state_update").collect();
    let steps: Vec<u64> = updates.iter().map(|m| m["step"].as_u64().unwrap()).collect();
    assert!(steps.iter().enumerate().all(|(i, &s)| s == i as u64));
    let last = updates.last().unwrap();
    assert_eq!(last["status"], "converged");
    assert!(last["error_norm"].as_f64().unwrap() < 2.0);
    let rate = updates.len() as f64 / elapsed.as_secs_f64();
    assert!(rate >= 10.0, "{rate} updates/s");

    // Reconnect in the middle: the stream resumes right after the given id.
    let resume_after = seqs[seqs.len() / 2];
    let replay = read_events(&app, &format!("/sessions/{id}/events"), Some(resume_after), is_terminal_update).await;
    assert_eq!(replay.first().unwrap().0, resume_after + 1);
    assert_eq!(replay.last().unwrap().0, *seqs.last().unwrap());

    let (_, info) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(info["lifecycle"], "finished");
    assert_eq!(info["outcome"], "converged");
}

#[tokio::test]
async fn structured_errors() {
    let app = app();
    let (status, err) = call(&app, "POST", "/sessions", Some(json!({ "scenario": "juggle_knives" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_scenario");

    let (status, err) = call(&app, "GET", "/sessions/nope/frame", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_session");

    let (_, info) = call(&app, "POST", "/sessions", Some(json!({ "scenario": "reach_can_frontal" }))).await;
    let id = info["id"].as_str().unwrap();
    let bad = json!({ "kind": "par", "points": [[1.0, 1.0], [2.0, 2.0]] });
    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/annotations"), Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"], "bad_request");

    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn protocol_document_lists_every_route() {
    let app = app();
    let (status, doc) = call(&app, "GET", "/protocol", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, info) = call(&app, "POST", "/sessions", Some(json!({ "scenario": "reach_can_frontal", "source": "plan" }))).await;
    let id = info["id"].as_str().unwrap();
    for ep in doc["endpoints"].as_array().unwrap() {
        let method = ep["method"].as_str().unwrap();
        if method != "GET" || ep["path"] == "/sessions/{id}/events" {
            continue;
        }
        let path = ep["path"].as_str().unwrap().replace("{id}", id);
        let (status, _) = call(&app, method, &path, None).await;
        assert_eq!(status, StatusCode::OK, "{method} {path}");
    }
    for ty in ["SessionMessage", "Annotation", "CreateSession", "FrameView"] {
        assert!(doc["types"].get(ty).is_some(), "{ty} described");
    }
}

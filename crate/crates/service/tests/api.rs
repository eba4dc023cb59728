use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use futures_util::StreamExt;
use holmes_core::embedding::Architecture;
use holmes_core::imgep::{Event, ExplorationConfig, ExplorationSink, Explorer, GoalSpace, GuidanceMode, NoFeedback};
use holmes_core::store::RunWriter;
use holmes_core::tree::SplitPolicy;
use holmes_service::{attach_live, router, Publisher, ServiceState, EVENT_BUFFER};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn tiny(max_splits: usize) -> ExplorationConfig {
    ExplorationConfig {
        n_total: 20,
        n_init: 8,
        train_every: 4,
        train_epochs: 2,
        grid_size: 32,
        steps: 4,
        seed: 11,
        goal_space: GoalSpace::Holmes,
        architecture: Architecture { input_size: 16, latent_dim: 3, channels: 2, hidden: 6 },
        split_policy: SplitPolicy {
            plateau_eps: 1e9,
            plateau_window: 1,
            min_population: 3,
            min_epochs: 1,
            min_explored: 1,
            max_splits,
        },
        ..ExplorationConfig::default()
    }
}

fn completed_run(dir: &Path, config: ExplorationConfig) {
    let mut ex = Explorer::new(config, None).unwrap();
    let mut w = RunWriter::create(dir, ex.config(), None).unwrap();
    ex.run(&mut w, &mut NoFeedback).unwrap();
}

async fn call(state: &Arc<ServiceState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(state: &Arc<ServiceState>, uri: &str) -> Value {
    let (status, body) = call(state, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn fresh_run_reports_nothing_done() {
    let dir = tempfile::tempdir().unwrap();
    RunWriter::create(dir.path(), &tiny(2), None).unwrap();
    let state = ServiceState::open(dir.path()).unwrap();
    let status = get_json(&state, "/status").await;
    assert_eq!(status["runs_done"], 0);
    assert_eq!(status["paused"], false);
    assert_eq!(status["pending_feedback"], Value::Null);
}

#[tokio::test]
async fn single_leaf_tree_holds_every_run() {
    let dir = tempfile::tempdir().unwrap();
    completed_run(dir.path(), tiny(0));
    let state = ServiceState::open(dir.path()).unwrap();
    let tree = get_json(&state, "/tree").await;
    let nodes = tree["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 1);
    assert_eq!(nodes[0]["population"], tree["runs_done"]);
    assert_eq!(tree["runs_done"], 20);
}

#[tokio::test]
async fn tree_representatives_and_images() {
    let dir = tempfile::tempdir().unwrap();
    completed_run(dir.path(), tiny(2));
    let state = ServiceState::open(dir.path()).unwrap();

    let tree = get_json(&state, "/tree").await;
    let nodes = tree["nodes"].as_array().unwrap();
    assert!(nodes.len() >= 3, "expected a split: {tree}");
    let root = nodes.iter().find(|n| n["id"] == "0").unwrap();
    assert_eq!(root["population"], 20);
    assert_eq!(root["leaf"], false);
    let leaves: Vec<&Value> = nodes.iter().filter(|n| n["leaf"] == true).collect();
    assert_eq!(leaves.iter().map(|n| n["population"].as_u64().unwrap()).sum::<u64>(), 20);

    for leaf in &leaves {
        let id = leaf["id"].as_str().unwrap();
        let pop = leaf["population"].as_u64().unwrap() as usize;
        for n in [1usize, 6, 50] {
            let a = get_json(&state, &format!("/leaves/{id}/representatives?n={n}")).await;
            let b = get_json(&state, &format!("/leaves/{id}/representatives?n={n}")).await;
            assert_eq!(a["representatives"].as_array().unwrap().len(), n.min(pop));
            assert_eq!(a, b, "representatives must be stable");
        }
    }
    let id = leaves[0]["id"].as_str().unwrap();
    let summary = get_json(&state, &format!("/leaves/{id}/representatives")).await;
    let image = summary["representatives"][0]["image"].as_str().unwrap().to_string();
    let (status, png) = call(&state, "GET", &image, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");

    assert_eq!(call(&state, "GET", "/leaves/0/representatives", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "GET", "/leaves/0111/representatives", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "GET", "/patterns/20.png", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "GET", "/patterns/nope", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn score_validation_on_a_completed_run() {
    let dir = tempfile::tempdir().unwrap();
    completed_run(dir.path(), tiny(2));
    let state = ServiceState::open(dir.path()).unwrap();
    let leaf = state.snapshot().leaves()[0].clone();
    let uri = format!("/leaves/{leaf}/score");
    assert_eq!(call(&state, "POST", &uri, Some(json!({"score": -1.0}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&state, "POST", "/leaves/0/score", Some(json!({"score": 1.0}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "POST", "/leaves/0110/score", Some(json!({"score": 1.0}))).await.0, StatusCode::NOT_FOUND);
    // No engine to hand the score to.
    assert_eq!(call(&state, "POST", &uri, Some(json!({"score": 1.0}))).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&state, "POST", "/control/resume", None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn diversity_and_similarity_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    completed_run(dir.path(), tiny(2));
    let state = ServiceState::open(dir.path()).unwrap();
    let curve = get_json(&state, "/diversity?bc=leaf:0&bins=5").await;
    let bins: Vec<u64> = curve.as_array().unwrap().iter().map(|p| p["bins"].as_u64().unwrap()).collect();
    assert_eq!(bins.len(), 20);
    assert!(bins.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(bins[0], 1);
    assert_eq!(call(&state, "GET", "/diversity?bc=moments", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&state, "GET", "/diversity?bc=leaf:0111", None).await.0, StatusCode::NOT_FOUND);

    let rsa = get_json(&state, "/rsa").await;
    let n = rsa["leaves"].as_array().unwrap().len();
    let m = rsa["cka"].as_array().unwrap();
    assert_eq!(m.len(), n);
    for (i, row) in m.iter().enumerate() {
        assert!((row[i].as_f64().unwrap() - 1.0).abs() < 1e-12);
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            assert_eq!(v, &m[j][i]);
        }
    }
}

#[tokio::test]
async fn cors_headers_present() {
    let dir = tempfile::tempdir().unwrap();
    RunWriter::create(dir.path(), &tiny(2), None).unwrap();
    let state = ServiceState::open(dir.path()).unwrap();
    let req = Request::get("/status").header(header::ORIGIN, "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

fn guided(max_splits: usize) -> ExplorationConfig {
    ExplorationConfig { guidance: GuidanceMode::Guided, feedback_timeout_ms: None, ..tiny(max_splits) }
}

async fn wait_for(state: &Arc<ServiceState>, what: &str, pred: impl Fn(&Value) -> bool) -> Value {
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let s = get_json(state, "/status").await;
        if pred(&s) {
            return s;
        }
        assert!(Instant::now() < deadline, "timed out waiting for {what}: {s}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn live_feedback_pause_score_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    RunWriter::create(dir.path(), &guided(2), None).unwrap();
    let (state, engine) = attach_live(dir.path()).unwrap();
    let engine = engine.spawn();

    let paused = wait_for(&state, "first pause", |s| s["paused"] == true).await;
    let pending: Vec<String> = serde_json::from_value(paused["pending_feedback"].clone()).unwrap();
    assert_eq!(pending, vec!["00".to_string(), "01".to_string()]);
    assert!(paused["runs_done"].as_u64().unwrap() >= 8);
    assert_eq!(state.snapshot().leaves(), pending);

    assert_eq!(call(&state, "POST", "/leaves/00/score", Some(json!({"score": 5.0}))).await.0, StatusCode::ACCEPTED);
    assert_eq!(call(&state, "POST", "/leaves/0/score", Some(json!({"score": 5.0}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "POST", "/control/resume", None).await.0, StatusCode::ACCEPTED);
    let after = wait_for(&state, "resume", |s| s["paused"] == false).await;
    assert_eq!(after["scores"]["00"], 5.0);

    // Later pauses are resumed without scores; earlier scores stay.
    let mut pauses = 1;
    loop {
        let s = wait_for(&state, "pause or finish", |s| s["paused"] == true || s["finished"] == true).await;
        if s["finished"] == true {
            break;
        }
        pauses += 1;
        assert_eq!(call(&state, "POST", "/control/resume", None).await.0, StatusCode::ACCEPTED);
        wait_for(&state, "resume", |s| s["paused"] == false).await;
    }
    engine.join().unwrap().unwrap();
    let end = get_json(&state, "/status").await;
    assert_eq!(end["runs_done"], 20);
    assert_eq!(end["scores"]["00"], 5.0);
    assert_eq!(pauses, state.snapshot().leaves().len() - 1, "one pause per split");
    assert_eq!(call(&state, "POST", "/control/resume", None).await.0, StatusCode::CONFLICT);
}

async fn spawn_server(state: Arc<ServiceState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("ws://{addr}/events")
}

fn text(msg: Message) -> Value {
    match msg {
        Message::Text(t) => serde_json::from_str(&t).unwrap(),
        other => panic!("unexpected frame {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn event_stream_orders_events_and_greets_with_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    RunWriter::create(dir.path(), &guided(1), None).unwrap();
    let (state, engine) = attach_live(dir.path()).unwrap();
    let url = spawn_server(state.clone()).await;

    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let hello = text(ws.next().await.unwrap().unwrap());
    assert_eq!(hello["type"], "snapshot");
    assert_eq!(hello["status"]["runs_done"], 0);
    assert!(hello["tree"]["nodes"].is_array());
    let engine = engine.spawn();

    let mut last_run: Option<u64> = None;
    let mut split = None;
    loop {
        let ev = text(ws.next().await.unwrap().unwrap());
        match ev["type"].as_str().unwrap() {
            "run_completed" => {
                let run = ev["run"].as_u64().unwrap();
                assert!(last_run.map_or(true, |l| run > l), "runs out of order");
                last_run = Some(run);
            }
            "split_occurred" => split = Some(ev.clone()),
            "feedback_requested" => {
                let s = split.as_ref().expect("split announced before the pause");
                assert_eq!(s["parent"], "0");
                assert_eq!(s["left"], "00");
                assert_eq!(s["right"], "01");
                break;
            }
            _ => {}
        }
    }

    // A second client connecting mid-run sees the snapshot first.
    let (mut again, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let hello = text(again.next().await.unwrap().unwrap());
    assert_eq!(hello["type"], "snapshot");
    assert_eq!(hello["status"]["paused"], true);

    assert!(state.send(holmes_core::imgep::FeedbackCommand::Resume));
    loop {
        let ev = text(ws.next().await.unwrap().unwrap());
        if ev["type"] == "feedback_resolved" {
            break;
        }
    }
    tokio::task::spawn_blocking(move || engine.join().unwrap().unwrap()).await.unwrap();
}

#[tokio::test]
async fn slow_subscribers_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    RunWriter::create(dir.path(), &tiny(2), None).unwrap();
    let state = ServiceState::open(dir.path()).unwrap();
    let url = spawn_server(state.clone()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    assert_eq!(text(ws.next().await.unwrap().unwrap())["type"], "snapshot");

    // On this single-threaded runtime the server cannot drain while we publish.
    let mut publisher = Publisher(state.clone());
    let total = 3 * EVENT_BUFFER;
    for run in 0..total {
        publisher.on_event(&Event::RunCompleted { run, leaf: "0".into(), fault: None }).unwrap();
    }
    let mut received = 0;
    while let Some(Ok(msg)) = ws.next().await {
        match msg {
            Message::Text(_) => received += 1,
            Message::Close(_) => break,
            _ => {}
        }
    }
    assert!(received < total, "lagging subscriber must be disconnected");
}

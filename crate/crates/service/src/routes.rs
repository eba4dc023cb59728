//! HTTP and WebSocket handlers.

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use holmes_core::evaluate::{evaluate_diversity, leaf_similarity, BcSelector, ClassFilter};
use holmes_core::imgep::FeedbackCommand;
use holmes_core::metrics::representative_set;
use holmes_core::store::load_pattern;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::CorsLayer;

use crate::error::ServiceError;
use crate::snapshot::NodeSummary;
use crate::state::{ServiceState, Status};

type Shared = State<Arc<ServiceState>>;
type ApiResult<T> = Result<T, ServiceError>;

/// Subsets drawn when choosing the most diverse representatives.
const REPRESENTATIVE_CANDIDATES: usize = 200;

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/tree", get(tree))
        .route("/leaves/:id/representatives", get(representatives))
        .route("/leaves/:id/score", post(score))
        .route("/control/resume", post(resume))
        .route("/patterns/:file", get(pattern_png))
        .route("/diversity", get(diversity))
        .route("/rsa", get(rsa))
        .route("/events", get(events))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn status(State(state): Shared) -> Json<Status> {
    Json(state.status())
}

#[derive(Serialize)]
struct TreeView {
    stage: usize,
    runs_done: usize,
    nodes: Vec<NodeSummary>,
}

fn tree_view(state: &ServiceState) -> TreeView {
    let snap = state.snapshot();
    TreeView { stage: snap.stage, runs_done: snap.runs_done, nodes: snap.nodes.clone() }
}

async fn tree(State(state): Shared) -> Json<TreeView> {
    Json(tree_view(&state))
}

#[derive(Deserialize)]
struct RepresentativeQuery {
    n: Option<usize>,
}

#[derive(Serialize)]
struct Representative {
    run: usize,
    image: String,
}

#[derive(Serialize)]
struct LeafSummary {
    leaf: NodeSummary,
    stage: usize,
    representatives: Vec<Representative>,
}

async fn representatives(State(state): Shared, Path(id): Path<String>, Query(q): Query<RepresentativeQuery>) -> ApiResult<Json<LeafSummary>> {
    let snap = state.snapshot();
    let leaf = snap.node(&id).filter(|n| n.leaf).ok_or_else(|| ServiceError::NotFound(format!("no leaf {id}")))?.clone();
    let members = snap.members(&id);
    let points: Vec<Vec<f64>> = members.iter().map(|(_, e)| e.clone()).collect();
    // Seeded by run and stage so a snapshot always shows the same set.
    let mut rng = ChaCha8Rng::seed_from_u64(state.config().seed ^ (snap.stage as u64) << 32);
    let chosen = representative_set(&points, q.n.unwrap_or(6), REPRESENTATIVE_CANDIDATES, &mut rng);
    let representatives =
        chosen.into_iter().map(|i| members[i].0).map(|run| Representative { run, image: format!("/patterns/{run}.png") }).collect();
    Ok(Json(LeafSummary { leaf, stage: snap.stage, representatives }))
}

#[derive(Deserialize)]
struct ScoreBody {
    score: f64,
}

async fn score(State(state): Shared, Path(id): Path<String>, Json(body): Json<ScoreBody>) -> ApiResult<impl IntoResponse> {
    if !(body.score.is_finite() && body.score >= 0.0) {
        return Err(ServiceError::BadRequest(format!("score must be a non-negative number, got {}", body.score)));
    }
    let leaves = state.status().pending_feedback.unwrap_or_else(|| state.snapshot().leaves());
    if !leaves.contains(&id) {
        return Err(ServiceError::NotFound(format!("no leaf {id}")));
    }
    if !state.send(FeedbackCommand::Score { leaf: id.clone(), score: body.score }) {
        return Err(ServiceError::Conflict("no exploration is attached to this run".into()));
    }
    Ok((StatusCode::ACCEPTED, Json(json!({ "leaf": id, "score": body.score }))))
}

async fn resume(State(state): Shared) -> ApiResult<impl IntoResponse> {
    if !state.status().paused {
        return Err(ServiceError::Conflict("exploration is not waiting for feedback".into()));
    }
    if !state.send(FeedbackCommand::Resume) {
        return Err(ServiceError::Conflict("no exploration is attached to this run".into()));
    }
    Ok((StatusCode::ACCEPTED, Json(json!({ "resumed": true }))))
}

async fn pattern_png(State(state): Shared, Path(file): Path<String>) -> ApiResult<Response> {
    let run: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ServiceError::NotFound(format!("no pattern {file}")))?;
    if run >= state.status().runs_done {
        return Err(ServiceError::NotFound(format!("no pattern {run}")));
    }
    let bytes = blocking(move || load_pattern(state.dir(), state.config().grid_size, run)?.png_bytes()).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct DiversityQuery {
    bc: String,
    bins: Option<usize>,
    class: Option<String>,
}

#[derive(Serialize)]
struct CurvePoint {
    run: usize,
    bins: usize,
}

async fn diversity(State(state): Shared, Query(q): Query<DiversityQuery>) -> ApiResult<Json<Vec<CurvePoint>>> {
    let selector: BcSelector = q.bc.parse()?;
    let filter: ClassFilter = q.class.as_deref().unwrap_or("all").parse()?;
    let bins = q.bins.unwrap_or(20);
    let curve = blocking(move || evaluate_diversity(state.dir(), &selector, bins, filter)).await?;
    Ok(Json(curve.into_iter().map(|(run, bins)| CurvePoint { run, bins }).collect()))
}

async fn rsa(State(state): Shared) -> ApiResult<Json<serde_json::Value>> {
    let m = blocking(move || leaf_similarity(state.dir())).await?;
    Ok(Json(json!({ "leaves": m.leaves, "cka": m.values })))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> holmes_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Task(e.to_string()))?.map_err(ServiceError::from)
}

async fn events(State(state): Shared, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_events(socket, state))
}

/// Sends the current snapshot, then engine events in order. A subscriber
/// that falls behind the fan-out buffer is disconnected.
async fn stream_events(mut socket: WebSocket, state: Arc<ServiceState>) {
    let mut rx = state.subscribe();
    let hello = json!({ "type": "snapshot", "status": state.status(), "tree": tree_view(&state) });
    if socket.send(Message::Text(hello.to_string())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            event = rx.recv() => match event {
                Ok(line) => {
                    if socket.send(Message::Text(line.to_string())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
                Err(RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

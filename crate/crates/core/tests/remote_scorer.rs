use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use divkit_core::curation::rerank_sample;
use divkit_core::scorer::{score_batch, RemoteScorer, RetryPolicy, ScoreError, ScoreRequest, Scorer};
use divkit_core::PreferenceSample;

#[derive(Clone, Default)]
struct Stub {
    hits: Arc<AtomicUsize>,
}

/// Scores by prompt: `"fail-<k>"` answers 500 for the first k hits, `"busy"`
/// answers 429 once, `"gone"` is a 404, `"junk"` returns a body without a
/// score. Anything else scores as the response length divided by 100.
async fn score(State(stub): State<Stub>, Json(body): Json<Value>) -> Response {
    let hit = stub.hits.fetch_add(1, Ordering::SeqCst);
    let prompt = body["prompt"].as_str().unwrap_or_default();
    let response = body["response"].as_str().unwrap_or_default();
    if let Some(k) = prompt.strip_prefix("fail-") {
        if hit < k.parse::<usize>().unwrap() {
            return StatusCode::INTERNAL_SERVER_ERROR.into_response();
        }
    }
    match prompt {
        "busy" if hit == 0 => StatusCode::TOO_MANY_REQUESTS.into_response(),
        "gone" => StatusCode::NOT_FOUND.into_response(),
        "junk" => Json(json!({"value": 1})).into_response(),
        _ => Json(json!({"score": response.len() as f64 / 100.0})).into_response(),
    }
}

async fn serve() -> (String, Stub) {
    let stub = Stub::default();
    let app = Router::new().route("/score", post(score)).with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), stub)
}

fn fast_policy() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        initial_backoff: Duration::from_millis(5),
        multiplier: 2,
    }
}

fn scorer(url: &str) -> RemoteScorer {
    RemoteScorer::with_policy(url, fast_policy(), Duration::from_secs(5)).unwrap()
}

#[tokio::test]
async fn passes_score_through() {
    let (url, stub) = serve().await;
    let out = scorer(&url)
        .score(&ScoreRequest::new("hello", "x".repeat(70)).unwrap())
        .await
        .unwrap();
    assert_eq!(out.score, 0.7);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn retries_server_errors_then_succeeds() {
    let (url, stub) = serve().await;
    let out = scorer(&url)
        .score(&ScoreRequest::new("fail-2", "abc").unwrap())
        .await
        .unwrap();
    assert_eq!(out.score, 0.03);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn gives_up_after_max_attempts() {
    let (url, stub) = serve().await;
    let err = scorer(&url)
        .score(&ScoreRequest::new("fail-10", "abc").unwrap())
        .await
        .unwrap_err();
    assert_eq!(err.attempts(), Some(3));
    assert!(matches!(err, ScoreError::Transport { status: Some(500), retryable: true, .. }));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn retries_rate_limiting() {
    let (url, stub) = serve().await;
    let out = scorer(&url).score(&ScoreRequest::new("busy", "ab").unwrap()).await.unwrap();
    assert_eq!(out.score, 0.02);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn client_errors_and_bad_bodies_are_not_retried() {
    let (url, stub) = serve().await;
    let s = scorer(&url);
    let gone = s.score(&ScoreRequest::new("gone", "a").unwrap()).await.unwrap_err();
    assert!(matches!(gone, ScoreError::Transport { attempts: 1, status: Some(404), .. }));
    let junk = s.score(&ScoreRequest::new("junk", "a").unwrap()).await.unwrap_err();
    assert!(matches!(junk, ScoreError::Transport { attempts: 1, retryable: false, .. }));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn connection_refused_is_reported() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = scorer(&url).score(&ScoreRequest::new("p", "r").unwrap()).await.unwrap_err();
    assert_eq!(err.attempts(), Some(3));
}

#[tokio::test]
async fn batch_reports_failing_index() {
    let (url, _) = serve().await;
    let requests = vec![
        ScoreRequest::new("a", "r").unwrap(),
        ScoreRequest::new("gone", "r").unwrap(),
        ScoreRequest::new("b", "r").unwrap(),
    ];
    let err = score_batch(&scorer(&url), &requests, 2).await.unwrap_err();
    assert!(matches!(err, ScoreError::Batch { index: 1, .. }));
}

#[tokio::test]
async fn rerank_orders_by_remote_score() {
    let (url, _) = serve().await;
    let sample = PreferenceSample::new(
        "s1",
        "prompt",
        vec!["mid response".into(), "x".into(), "the longest response here".into()],
    )
    .unwrap();
    let ranked = rerank_sample(&sample, &scorer(&url), 2).await.unwrap();
    assert_eq!(
        ranked.responses,
        ["the longest response here", "mid response", "x"]
    );
    assert_eq!(ranked.rewards.unwrap(), [0.25, 0.12, 0.01]);
}

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use retina_nav::CameraModel;
use retina_nav_server::{router, AppState, RunStatus, ServerConfig, ServerState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> (AppState, Router) {
    let config = ServerConfig {
        frame_interval: Duration::ZERO,
        ..ServerConfig::default()
    };
    let state = AppState::spawn(config).unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
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
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn state(app: &Router) -> ServerState {
    let (status, body) = call(app, "GET", "/state", None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn wait_until(app: &Router, timeout: Duration, pred: impl Fn(&ServerState) -> bool) -> ServerState {
    let t0 = Instant::now();
    loop {
        let s = state(app).await;
        if pred(&s) || t0.elapsed() > timeout {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test]
async fn initial_state_is_idle_with_centered_goal() {
    let (_, app) = app();
    let s = state(&app).await;
    assert_eq!(s.status, RunStatus::Idle);
    let c = CameraModel::default().center_px();
    assert_eq!(s.goal_px, [c[0], c[1]]);
}

#[tokio::test]
async fn goal_is_visible_after_post() {
    let (_, app) = app();
    let (status, _) = call(&app, "POST", "/goal", Some(json!({"x_px": 300.0, "y_px": 250.0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state(&app).await.goal_px, [300.0, 250.0]);
}

#[tokio::test]
async fn goal_off_retina_is_rejected() {
    let (_, app) = app();
    let (status, body) = call(&app, "POST", "/goal", Some(json!({"x_px": -40.0, "y_px": 10.0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["error"], "goal off retina");
}

#[tokio::test]
async fn drift_out_of_range_is_rejected() {
    let (_, app) = app();
    let (status, _) = call(&app, "POST", "/drift", Some(json!({"dx_mm": 0.8, "dy_mm": 0.0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn idle_drift_reregisters_goal() {
    let (_, app) = app();
    let before = state(&app).await.goal_px;
    let (status, _) = call(&app, "POST", "/drift", Some(json!({"dx_mm": 0.22, "dy_mm": 0.0}))).await;
    assert_eq!(status, StatusCode::OK);
    let after = state(&app).await.goal_px;
    let mm_per_px = CameraModel::default().mm_per_px;
    assert!((after[0] - before[0] - 0.22 / mm_per_px).abs() < 0.2, "{before:?} -> {after:?}");
    assert!((after[1] - before[1]).abs() < 0.2);
}

#[tokio::test]
async fn frame_is_deterministic_png() {
    let (_, app) = app();
    let (s1, a) = call(&app, "GET", "/frame", None).await;
    let (s2, b) = call(&app, "GET", "/frame", None).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(&a[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(a, b);
}

#[tokio::test]
async fn second_run_conflicts_and_stop_ends_run() {
    let (_, app) = app();
    let body = json!({"mode": "mpc", "preset": "100um"});
    let (first, _) = call(&app, "POST", "/run", Some(body.clone())).await;
    assert_eq!(first, StatusCode::OK);
    let (second, _) = call(&app, "POST", "/run", Some(body)).await;
    assert_eq!(second, StatusCode::CONFLICT);
    let (stop, body) = call(&app, "POST", "/stop", None).await;
    assert_eq!(stop, StatusCode::OK);
    let s: ServerState = serde_json::from_slice(&body).unwrap();
    assert!(matches!(s.status, RunStatus::Stopped | RunStatus::Reached));
    let (again, _) = call(&app, "POST", "/stop", None).await;
    assert_eq!(again, StatusCode::CONFLICT);
}

#[tokio::test]
async fn run_reaches_goal_and_reports_feedback() {
    let (_, app) = app();
    let (status, _) = call(&app, "POST", "/run", Some(json!({"mode": "mpc", "preset": "300um"}))).await;
    assert_eq!(status, StatusCode::OK);
    let s = wait_until(&app, Duration::from_secs(60), |s| s.status != RunStatus::Running).await;
    assert_eq!(s.status, RunStatus::Reached, "{s:?}");
    assert!(!s.hit_retina);
    assert!(s.cycle > 0);
    assert!(s.predicted_distance_mm.unwrap() < 0.3);
    assert!(s.margin_g.is_some());
}

#[tokio::test]
async fn drift_during_run_moves_goal_pixel() {
    let (_, app) = app();
    let goal0 = state(&app).await.goal_px;
    let (status, _) = call(&app, "POST", "/run", Some(json!({"mode": "mpc", "preset": "100um"}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, "POST", "/drift", Some(json!({"dx_mm": -0.2, "dy_mm": 0.1}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let s = wait_until(&app, Duration::from_secs(60), |s| s.goal_px != goal0 || s.status != RunStatus::Running).await;
    let mm_per_px = CameraModel::default().mm_per_px;
    let expected = [goal0[0] - 0.2 / mm_per_px, goal0[1] + 0.1 / mm_per_px];
    assert!((s.goal_px[0] - expected[0]).abs() < 0.5 && (s.goal_px[1] - expected[1]).abs() < 0.5, "{s:?}");
    let done = wait_until(&app, Duration::from_secs(60), |s| s.status != RunStatus::Running).await;
    assert_eq!(done.status, RunStatus::Reached);
}

#[tokio::test]
async fn events_stream_publishes_state() {
    let (app_state, app) = app();
    let mut rx = app_state.subscribe();
    let (status, _) = call(&app, "POST", "/goal", Some(json!({"x_px": 310.0, "y_px": 230.0}))).await;
    assert_eq!(status, StatusCode::OK);
    let event = tokio::time::timeout(Duration::from_secs(5), rx.recv()).await.unwrap().unwrap();
    assert_eq!(event.goal_px, [310.0, 230.0]);

    let resp = app
        .clone()
        .oneshot(Request::get("/events").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    call(&app, "POST", "/goal", Some(json!({"x_px": 320.0, "y_px": 240.0}))).await;
    let frame = tokio::time::timeout(Duration::from_secs(5), body.frame()).await.unwrap().unwrap().unwrap();
    let text = String::from_utf8(frame.into_data().unwrap().to_vec()).unwrap();
    assert!(text.starts_with("event: state"), "{text}");
    let data = text.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
    let s: ServerState = serde_json::from_str(data).unwrap();
    assert_eq!(s.goal_px, [320.0, 240.0]);
}

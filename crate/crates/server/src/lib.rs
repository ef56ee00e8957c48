//! HTTP state service for the live simulation.
//!
//! A single simulation-owner thread holds the world and the active
//! navigator. HTTP handlers send it commands over a channel and read the
//! latest published [`ServerState`] from a `watch` channel, so reads never
//! block on the simulation. Every published state is also broadcast as a
//! server-sent event on `/events`.
//!
//! | method | path      | body                                  |
//! |--------|-----------|---------------------------------------|
//! | GET    | `/frame`  | current top-down image as PNG         |
//! | GET    | `/state`  | [`ServerState`] as JSON               |
//! | POST   | `/goal`   | `{"x_px": .., "y_px": ..}`            |
//! | POST   | `/drift`  | `{"dx_mm": .., "dy_mm": ..}`          |
//! | POST   | `/run`    | `{"mode": "mpc", "preset": "100um"}`  |
//! | POST   | `/stop`   | none                                  |
//! | GET    | `/events` | SSE stream of [`ServerState`]         |

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot, watch};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::StreamExt;

use retina_nav::flow;
use retina_nav::harness::{ExperimentMode, StopPreset};
use retina_nav::image::GrayImage;
use retina_nav::mpc::{NavConfig, NavError, Navigator, StepStatus, World};
use retina_nav::phantom::render_topdown;
use retina_nav::{PhantomConfig, SimError, ToolState};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation thread has stopped")]
    Disconnected,
}

/// Service configuration.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub phantom: PhantomConfig,
    /// Base navigation parameters; the stop rule comes from the run preset.
    pub nav: NavConfig,
    /// Wall-clock pause between simulated frames. Zero runs as fast as
    /// possible.
    pub frame_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let nav = NavConfig::default();
        Self {
            phantom: PhantomConfig::default(),
            frame_interval: Duration::from_secs_f64(nav.dt),
            nav,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Running,
    Reached,
    Stopped,
    Aborted,
}

/// Published simulation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Increments with every published state.
    pub seq: u64,
    pub run_id: u64,
    pub status: RunStatus,
    pub mode: Option<ExperimentMode>,
    pub preset: Option<StopPreset>,
    pub cycle: usize,
    pub frame: usize,
    pub t_virtual: f64,
    pub tip_mm: [f64; 3],
    pub tip_px: [f64; 2],
    pub goal_px: [f64; 2],
    pub prediction_mm: Option<[f64; 3]>,
    pub predicted_distance_mm: Option<f64>,
    pub margin_g: Option<f64>,
    pub force_mn: f64,
    pub hit_retina: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct GoalRequest {
    pub x_px: f64,
    pub y_px: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct DriftRequest {
    pub dx_mm: f64,
    pub dy_mm: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct RunRequest {
    #[serde(default)]
    pub mode: ExperimentMode,
    #[serde(default)]
    pub preset: StopPreset,
}

/// Rejected command, mapped to an HTTP status.
#[derive(Debug, Clone, PartialEq, Serialize, Error)]
#[error("{error} (HTTP {status})")]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
}

impl ApiError {
    fn unprocessable(reason: impl ToString) -> Self {
        Self {
            status: 422,
            error: reason.to_string(),
        }
    }

    fn conflict(reason: impl ToString) -> Self {
        Self {
            status: 409,
            error: reason.to_string(),
        }
    }

    fn internal(reason: impl ToString) -> Self {
        Self {
            status: 500,
            error: reason.to_string(),
        }
    }

    fn from_nav(e: NavError) -> Self {
        match e {
            NavError::Sim(s @ (SimError::GoalOffRetina | SimError::DriftOutOfRange { .. })) => Self::unprocessable(s),
            NavError::Finished => Self::conflict(e),
            NavError::Config(_) => Self::conflict(e),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type Reply = oneshot::Sender<Result<ServerState, ApiError>>;

enum Command {
    Goal(Vector2<f64>, Reply),
    Drift(Vector2<f64>, Reply),
    Run(RunRequest, Reply),
    Stop(Reply),
}

/// What the HTTP layer sees: the latest state and its PNG frame.
#[derive(Debug, Clone)]
struct Published {
    state: ServerState,
    png: Arc<Vec<u8>>,
}

/// Handle to a running simulation owner. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    commands: std_mpsc::Sender<Command>,
    latest: watch::Receiver<Published>,
    events: broadcast::Sender<ServerState>,
}

impl AppState {
    /// Spawns the simulation-owner thread.
    pub fn spawn(config: ServerConfig) -> Result<Self, ServerError> {
        config.nav.validate()?;
        let owner = Owner::new(config)?;
        let initial = owner.publishable();
        let (tx, rx) = std_mpsc::channel();
        let (latest_tx, latest_rx) = watch::channel(initial);
        let (events, _) = broadcast::channel(256);
        let events_tx = events.clone();
        thread::Builder::new()
            .name("simulation".into())
            .spawn(move || owner.run(rx, latest_tx, events_tx))?;
        Ok(Self {
            commands: tx,
            latest: latest_rx,
            events,
        })
    }

    pub fn state(&self) -> ServerState {
        self.latest.borrow().state.clone()
    }

    pub fn frame_png(&self) -> Arc<Vec<u8>> {
        self.latest.borrow().png.clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServerState> {
        self.events.subscribe()
    }

    async fn send(&self, make: impl FnOnce(Reply) -> Command) -> Result<ServerState, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .send(make(tx))
            .map_err(|_| ApiError::internal(ServerError::Disconnected))?;
        rx.await.map_err(|_| ApiError::internal(ServerError::Disconnected))?
    }

    pub async fn set_goal(&self, x_px: f64, y_px: f64) -> Result<ServerState, ApiError> {
        self.send(|r| Command::Goal(Vector2::new(x_px, y_px), r)).await
    }

    pub async fn drift(&self, dx_mm: f64, dy_mm: f64) -> Result<ServerState, ApiError> {
        self.send(|r| Command::Drift(Vector2::new(dx_mm, dy_mm), r)).await
    }

    pub async fn start_run(&self, req: RunRequest) -> Result<ServerState, ApiError> {
        self.send(|r| Command::Run(req, r)).await
    }

    pub async fn stop(&self) -> Result<ServerState, ApiError> {
        self.send(Command::Stop).await
    }
}

struct ActiveRun {
    nav: Navigator,
    mode: ExperimentMode,
    preset: StopPreset,
}

struct Owner {
    config: ServerConfig,
    world: World,
    tool: ToolState,
    goal_px: Vector2<f64>,
    active: Option<ActiveRun>,
    last: Option<(ServerState, Option<ExperimentMode>, Option<StopPreset>)>,
    run_id: u64,
    seq: u64,
}

impl Owner {
    fn new(config: ServerConfig) -> Result<Self, ServerError> {
        let world = World::from_config(&config.phantom, 0)?;
        let tool = world.start_pose(config.nav.start_height_mm)?;
        let goal_px = world.camera.center_px();
        world.phantom.goal_point(&goal_px, &world.camera)?;
        Ok(Self {
            config,
            world,
            tool,
            goal_px,
            active: None,
            last: None,
            run_id: 0,
            seq: 0,
        })
    }

    fn run(
        mut self,
        commands: std_mpsc::Receiver<Command>,
        latest: watch::Sender<Published>,
        events: broadcast::Sender<ServerState>,
    ) {
        let mut next_frame = Instant::now();
        loop {
            let cmd = if self.active.is_some() {
                let wait = next_frame.saturating_duration_since(Instant::now());
                match commands.recv_timeout(wait) {
                    Ok(c) => Some(c),
                    Err(std_mpsc::RecvTimeoutError::Timeout) => None,
                    Err(std_mpsc::RecvTimeoutError::Disconnected) => return,
                }
            } else {
                match commands.recv() {
                    Ok(c) => {
                        next_frame = Instant::now();
                        Some(c)
                    }
                    Err(_) => return,
                }
            };

            match cmd {
                Some(cmd) => {
                    let (reply, outcome) = self.handle(cmd);
                    if outcome.is_ok() {
                        self.publish(&latest, &events);
                    }
                    let _ = reply.send(outcome.map(|()| self.current_state()));
                }
                None => {
                    self.step_active();
                    self.publish(&latest, &events);
                    next_frame += self.config.frame_interval;
                }
            }
        }
    }

    fn handle(&mut self, cmd: Command) -> (Reply, Result<(), ApiError>) {
        match cmd {
            Command::Goal(px, r) => (r, self.set_goal(px)),
            Command::Drift(d, r) => (r, self.drift(d)),
            Command::Run(req, r) => (r, self.start_run(req)),
            Command::Stop(r) => (r, self.stop()),
        }
    }

    fn set_goal(&mut self, px: Vector2<f64>) -> Result<(), ApiError> {
        if !(px[0].is_finite() && px[1].is_finite()) {
            return Err(ApiError::unprocessable(SimError::GoalOffRetina));
        }
        match &mut self.active {
            Some(run) => run.nav.set_goal(px).map_err(ApiError::from_nav)?,
            None => {
                self.world
                    .phantom
                    .goal_point(&px, &self.world.camera)
                    .map_err(ApiError::unprocessable)?;
            }
        }
        self.goal_px = px;
        Ok(())
    }

    /// Drift during a run is handled by the navigator. When idle the eye is
    /// moved at once and the goal is re-registered from the image motion.
    fn drift(&mut self, delta: Vector2<f64>) -> Result<(), ApiError> {
        if let Some(run) = &mut self.active {
            return run.nav.inject_drift(delta).map_err(ApiError::from_nav);
        }
        let before = self.render().image;
        let mut shifted = self.world.phantom.clone();
        shifted.apply_drift(delta).map_err(ApiError::unprocessable)?;
        let after = render_topdown(&shifted, &self.tool, &self.world.camera, 0.0).image;
        let nav = &self.config.nav;
        let shift = if delta.norm() == 0.0 {
            Vector2::zeros()
        } else {
            flow::track_frames(&before, &after, &nav.crop, &nav.corners, &nav.lk)
                .map_err(ApiError::unprocessable)?
                .global_shift
        };
        let goal = self.goal_px + shift;
        shifted.goal_point(&goal, &self.world.camera).map_err(ApiError::unprocessable)?;
        self.world.phantom = shifted;
        self.goal_px = goal;
        Ok(())
    }

    fn start_run(&mut self, req: RunRequest) -> Result<(), ApiError> {
        if self.active.is_some() {
            return Err(ApiError::conflict("a navigation run is already active"));
        }
        let preset = req.preset.nav_config();
        let cfg = NavConfig {
            stop_mode: preset.stop_mode,
            stop_norm_mm: preset.stop_norm_mm,
            stop_px: preset.stop_px,
            ..self.config.nav.clone()
        };
        let start = self
            .world
            .start_pose(cfg.start_height_mm)
            .map_err(ApiError::unprocessable)?;
        let world = self.world.clone();
        let nav = match req.mode {
            ExperimentMode::Baseline => Navigator::new_direct(world, cfg, self.goal_px, start),
            _ => Navigator::new(world, cfg, self.goal_px, start),
        }
        .map_err(ApiError::from_nav)?;
        self.run_id += 1;
        self.tool = start;
        self.active = Some(ActiveRun {
            nav,
            mode: req.mode,
            preset: req.preset,
        });
        Ok(())
    }

    fn stop(&mut self) -> Result<(), ApiError> {
        match self.active.as_mut() {
            Some(run) => {
                run.nav.stop();
                self.finish_active();
                Ok(())
            }
            None => Err(ApiError::conflict("no navigation run is active")),
        }
    }

    fn step_active(&mut self) {
        let Some(run) = self.active.as_mut() else { return };
        match run.nav.step() {
            Ok(StepStatus::Running) => {}
            Ok(StepStatus::Done) => self.finish_active(),
            Err(e) => {
                run.nav.stop();
                self.finish_active();
                if let Some((last, _, _)) = self.last.as_mut() {
                    last.status = RunStatus::Aborted;
                    last.reason = Some(e.to_string());
                }
            }
        }
    }

    fn finish_active(&mut self) {
        let Some(run) = self.active.take() else { return };
        let state = self.state_of(&run);
        self.world = run.nav.world().clone();
        self.tool = *run.nav.tool();
        self.goal_px = run.nav.goal_px();
        self.last = Some((state, Some(run.mode), Some(run.preset)));
    }

    fn render(&self) -> retina_nav::phantom::SceneFrame {
        match &self.active {
            Some(run) => run.nav.render(),
            None => render_topdown(&self.world.phantom, &self.tool, &self.world.camera, 0.0),
        }
    }

    fn state_of(&self, run: &ActiveRun) -> ServerState {
        let snap = run.nav.snapshot();
        let status = if !snap.done {
            RunStatus::Running
        } else if snap.reached {
            RunStatus::Reached
        } else if snap.aborted.as_deref() == Some("stopped by operator") {
            RunStatus::Stopped
        } else {
            RunStatus::Aborted
        };
        let p = snap.tool.p;
        let tip_px = self.world.camera.world_to_px(&p);
        ServerState {
            seq: self.seq,
            run_id: self.run_id,
            status,
            mode: Some(run.mode),
            preset: Some(run.preset),
            cycle: snap.cycles,
            frame: snap.frame,
            t_virtual: snap.t_virtual,
            tip_mm: [p[0], p[1], p[2]],
            tip_px: [tip_px[0], tip_px[1]],
            goal_px: snap.goal_px,
            prediction_mm: snap.last_prediction.map(|d| [d[0], d[1], d[2]]),
            predicted_distance_mm: snap.last_prediction.map(|d| d.norm()),
            margin_g: snap.margin_g,
            force_mn: snap.force_mn,
            hit_retina: snap.hit_retina,
            reason: if status == RunStatus::Reached { None } else { snap.aborted },
        }
    }

    fn current_state(&self) -> ServerState {
        if let Some(run) = &self.active {
            return self.state_of(run);
        }
        let p: Vector3<f64> = self.tool.p;
        let tip_px = self.world.camera.world_to_px(&p);
        let mut state = match &self.last {
            Some((last, _, _)) => last.clone(),
            None => ServerState {
                seq: 0,
                run_id: 0,
                status: RunStatus::Idle,
                mode: None,
                preset: None,
                cycle: 0,
                frame: 0,
                t_virtual: 0.0,
                tip_mm: [0.0; 3],
                tip_px: [0.0; 2],
                goal_px: [0.0; 2],
                prediction_mm: None,
                predicted_distance_mm: None,
                margin_g: None,
                force_mn: 0.0,
                hit_retina: false,
                reason: None,
            },
        };
        state.tip_mm = [p[0], p[1], p[2]];
        state.tip_px = [tip_px[0], tip_px[1]];
        state.goal_px = [self.goal_px[0], self.goal_px[1]];
        state.seq = self.seq;
        state.run_id = self.run_id;
        state
    }

    fn publishable(&self) -> Published {
        Published {
            state: self.current_state(),
            png: Arc::new(encode_png(&self.render().image)),
        }
    }

    fn publish(&mut self, latest: &watch::Sender<Published>, events: &broadcast::Sender<ServerState>) {
        self.seq += 1;
        let published = self.publishable();
        let _ = events.send(published.state.clone());
        latest.send_replace(published);
    }
}

/// Encodes an 8-bit grayscale image as PNG.
pub fn encode_png(image: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(image.as_raw()).expect("in-memory PNG data");
    }
    out
}

async fn get_frame(State(app): State<AppState>) -> Response {
    let png = app.frame_png();
    ([(header::CONTENT_TYPE, "image/png")], Body::from(png.as_ref().clone())).into_response()
}

async fn get_state(State(app): State<AppState>) -> Json<ServerState> {
    Json(app.state())
}

async fn post_goal(State(app): State<AppState>, Json(req): Json<GoalRequest>) -> Result<Json<ServerState>, ApiError> {
    app.set_goal(req.x_px, req.y_px).await.map(Json)
}

async fn post_drift(State(app): State<AppState>, Json(req): Json<DriftRequest>) -> Result<Json<ServerState>, ApiError> {
    app.drift(req.dx_mm, req.dy_mm).await.map(Json)
}

async fn post_run(State(app): State<AppState>, Json(req): Json<RunRequest>) -> Result<Json<ServerState>, ApiError> {
    app.start_run(req).await.map(Json)
}

async fn post_stop(State(app): State<AppState>) -> Result<Json<ServerState>, ApiError> {
    app.stop().await.map(Json)
}

async fn get_events(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = BroadcastStream::new(app.subscribe()).filter_map(|msg| {
        msg.ok()
            .and_then(|state| Event::default().event("state").json_data(state).ok())
            .map(Ok)
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/frame", get(get_frame))
        .route("/state", get(get_state))
        .route("/goal", post(post_goal))
        .route("/drift", post(post_drift))
        .route("/run", post(post_run))
        .route("/stop", post(post_stop))
        .route("/events", get(get_events))
        .with_state(app)
}

/// Runs the service until the process is interrupted.
pub async fn serve(bind: SocketAddr, config: ServerConfig) -> Result<(), ServerError> {
    let app = AppState::spawn(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(app)).await?;
    Ok(())
}

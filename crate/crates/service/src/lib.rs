//! HTTP session server for live preference elicitation.
//!
//! A participant memorizes a 2-D objective from a heat map until a deadline,
//! then answers pairwise "which value is larger" questions chosen by PBALD.
//! Afterwards the server reports the participant's accuracy, shows the
//! learned utility and can launch optimization runs seeded with the answers.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/sessions` | create a session, returns the memorize grid |
//! | GET | `/sessions/{id}` | status |
//! | GET | `/sessions/{id}/grid` | objective grid, memorize phase only |
//! | GET | `/sessions/{id}/question` | outstanding question or a done signal |
//! | POST | `/sessions/{id}/answer` | answer the outstanding question |
//! | GET | `/sessions/{id}/result` | accuracy and learned-model grid |
//! | POST | `/sessions/{id}/bo` | start optimization runs |
//! | GET | `/bo/{handle}` | poll an optimization run |
//!
//! Every state change is appended to `<data>/sessions/<id>.jsonl`, and
//! [`AppState::open`] replays those journals on startup.

pub mod error;
pub mod session;

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use prefbo_core::bench::Benchmark;
use prefbo_core::boloop::{run_from_preferences, BoConfig};
use prefbo_core::derive_seed;
use serde::{Deserialize, Serialize};

pub use error::{Result, ServiceError};
use session::{Accuracy, Choice, Grid, Journal, Phase, Question, Session, SessionParams};

pub const SCHEMA_VERSION: u32 = 1;

const STREAM_BO: u64 = 0xB000;

/// Milliseconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        Self(AtomicU64::new(ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Journals live under `<data_dir>/sessions`; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub memorize: Duration,
    pub grid_size: usize,
    pub default_budget: usize,
    /// Posterior samples behind the learned-model grid.
    pub model_samples: usize,
    pub default_bo_runs: usize,
    pub default_bo_iterations: usize,
    pub bo: BoConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            memorize: Duration::from_secs(120),
            grid_size: 64,
            default_budget: 25,
            model_samples: 100,
            default_bo_runs: 10,
            default_bo_iterations: 50,
            bo: BoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Done,
    Failed,
}

/// Progress of a batch of optimization runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoStatus {
    pub schema: u32,
    pub handle: String,
    pub session: String,
    pub state: RunState,
    pub runs: usize,
    pub iterations: usize,
    /// `y_best` after each acquisition, one row per finished run.
    pub curves: Vec<Vec<f64>>,
    /// Mean over the finished runs.
    pub mean: Vec<f64>,
    pub error: Option<String>,
}

pub struct AppState {
    pub config: ServiceConfig,
    clock: Arc<dyn Clock>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    runs: RwLock<HashMap<String, Arc<Mutex<BoStatus>>>>,
}

fn poisoned() -> ServiceError {
    ServiceError::Internal("a worker panicked while holding a lock".into())
}

impl AppState {
    /// Opens the data directory and replays every journal in it.
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(dir) = config.sessions_dir() {
            fs::create_dir_all(&dir).map_err(|source| ServiceError::Io {
                path: dir.clone(),
                source,
            })?;
            let entries = fs::read_dir(&dir).map_err(|source| ServiceError::Io {
                path: dir.clone(),
                source,
            })?;
            for entry in entries {
                let path = entry
                    .map_err(|source| ServiceError::Io {
                        path: dir.clone(),
                        source,
                    })?
                    .path();
                if path.extension().is_some_and(|e| e == "jsonl") {
                    let events = Journal::read(&path)?;
                    let session = Session::replay(&events, &config.bo, Some(Journal::reopen(path)?))?;
                    log::info!("restored session {} ({} answers)", session.params.id, session.answered());
                    sessions.insert(session.params.id.clone(), Arc::new(Mutex::new(session)));
                }
            }
        }
        Ok(Self {
            config,
            clock,
            sessions: RwLock::new(sessions),
            runs: RwLock::new(HashMap::new()),
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .map_err(|_| poisoned())?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    fn run(&self, handle: &str) -> Result<Arc<Mutex<BoStatus>>> {
        self.runs
            .read()
            .map_err(|_| poisoned())?
            .get(handle)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownRun(handle.into()))
    }
}

impl ServiceConfig {
    fn sessions_dir(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("sessions"))
    }
}

type Shared = Arc<AppState>;

/// Runs `f` on the locked session off the async executor.
async fn with_session<T, F>(state: &Shared, id: &str, f: F) -> Result<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &AppState) -> Result<T> + Send + 'static,
{
    let session = state.session(id)?;
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().map_err(|_| poisoned())?;
        f(&mut s, &state)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub benchmark: String,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub schema: u32,
    pub id: String,
    pub benchmark: String,
    pub phase: Phase,
    pub budget: usize,
    pub seed: u64,
    pub deadline_ms: u64,
    pub remaining_ms: u64,
    pub bounds: Vec<(f64, f64)>,
    pub grid: Grid,
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateRequest>,
) -> Result<(StatusCode, Json<CreateResponse>)> {
    let benchmark = Benchmark::by_name(&req.benchmark)?;
    if benchmark.dim() != 2 {
        return Err(ServiceError::UnsupportedBenchmark {
            dim: benchmark.dim(),
            name: benchmark.name,
        });
    }
    let now = state.now_ms();
    let params = SessionParams {
        id: uuid::Uuid::new_v4().to_string(),
        benchmark,
        budget: req.budget.unwrap_or(state.config.default_budget),
        seed: req.seed.unwrap_or_else(rand::random),
        created_ms: now,
        deadline_ms: now + state.config.memorize.as_millis() as u64,
    };
    let st = state.clone();
    let (session, grid) = tokio::task::spawn_blocking(move || -> Result<_> {
        let journal = match st.config.sessions_dir() {
            Some(dir) => Some(Journal::create(dir.join(format!("{}.jsonl", params.id)))?),
            None => None,
        };
        let mut s = Session::create(params, &st.config.bo, journal)?;
        let grid = s.grid(now, st.config.grid_size)?;
        Ok((s, grid))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let p = &session.params;
    let body = CreateResponse {
        schema: SCHEMA_VERSION,
        id: p.id.clone(),
        benchmark: p.benchmark.name.clone(),
        phase: session.phase(),
        budget: p.budget,
        seed: p.seed,
        deadline_ms: p.deadline_ms,
        remaining_ms: session.remaining_ms(now),
        bounds: p.benchmark.bounds.clone(),
        grid,
    };
    state
        .sessions
        .write()
        .map_err(|_| poisoned())?
        .insert(body.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusResponse {
    pub schema: u32,
    pub id: String,
    pub benchmark: String,
    pub phase: Phase,
    pub budget: usize,
    pub answered: usize,
    pub deadline_ms: u64,
    pub remaining_ms: u64,
    pub bo_runs: Vec<String>,
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<StatusResponse>> {
    with_session(&state, &id, |s, st| {
        let now = st.now_ms();
        let phase = s.sync(now)?;
        Ok(Json(StatusResponse {
            schema: SCHEMA_VERSION,
            id: s.params.id.clone(),
            benchmark: s.params.benchmark.name.clone(),
            phase,
            budget: s.params.budget,
            answered: s.answered(),
            deadline_ms: s.params.deadline_ms,
            remaining_ms: s.remaining_ms(now),
            bo_runs: s.bo_runs().to_vec(),
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GridResponse {
    pub schema: u32,
    pub remaining_ms: u64,
    pub grid: Grid,
}

async fn get_grid(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<GridResponse>> {
    with_session(&state, &id, |s, st| {
        let now = st.now_ms();
        let grid = s.grid(now, st.config.grid_size)?;
        Ok(Json(GridResponse {
            schema: SCHEMA_VERSION,
            remaining_ms: s.remaining_ms(now),
            grid,
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum QuestionResponse {
    Question {
        schema: u32,
        budget: usize,
        #[serde(flatten)]
        question: Question,
    },
    Done {
        schema: u32,
        #[serde(flatten)]
        accuracy: Accuracy,
    },
}

async fn get_question(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<QuestionResponse>> {
    with_session(&state, &id, |s, st| {
        Ok(Json(match s.next_question(st.now_ms())? {
            Some(question) => QuestionResponse::Question {
                schema: SCHEMA_VERSION,
                budget: s.params.budget,
                question,
            },
            None => QuestionResponse::Done {
                schema: SCHEMA_VERSION,
                accuracy: s.accuracy()?,
            },
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub pair_id: usize,
    pub choice: Choice,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub schema: u32,
    pub answered: usize,
    pub budget: usize,
    pub phase: Phase,
}

async fn post_answer(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<AnswerRequest>,
) -> Result<Json<AnswerResponse>> {
    with_session(&state, &id, move |s, st| {
        let phase = s.submit(st.now_ms(), req.pair_id, req.choice)?;
        Ok(Json(AnswerResponse {
            schema: SCHEMA_VERSION,
            answered: s.answered(),
            budget: s.params.budget,
            phase,
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultResponse {
    pub schema: u32,
    #[serde(flatten)]
    pub accuracy: Accuracy,
    pub model_grid: Grid,
    pub bo_runs: Vec<String>,
}

async fn get_result(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<ResultResponse>> {
    with_session(&state, &id, |s, st| {
        s.sync(st.now_ms())?;
        let model_grid = s.model_grid(st.config.grid_size, st.config.model_samples)?;
        Ok(Json(ResultResponse {
            schema: SCHEMA_VERSION,
            accuracy: s.accuracy()?,
            model_grid,
            bo_runs: s.bo_runs().to_vec(),
        }))
    })
    .await
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct BoRequest {
    pub runs: Option<usize>,
    pub iterations: Option<usize>,
}

async fn post_bo(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<BoRequest>,
) -> Result<(StatusCode, Json<BoStatus>)> {
    let runs = req.runs.unwrap_or(state.config.default_bo_runs);
    let iterations = req.iterations.unwrap_or(state.config.default_bo_iterations);
    if runs == 0 || iterations == 0 {
        return Err(ServiceError::BadRequest("runs and iterations must be positive".into()));
    }
    let handle = uuid::Uuid::new_v4().to_string();
    let h = handle.clone();
    let (answers, benchmark, seed) = with_session(&state, &id, move |s, st| {
        s.sync(st.now_ms())?;
        let answers = s.start_bo(&h, runs, iterations)?;
        Ok((answers, s.params.benchmark.clone(), s.params.seed))
    })
    .await?;
    let status = Arc::new(Mutex::new(BoStatus {
        schema: SCHEMA_VERSION,
        handle: handle.clone(),
        session: id,
        state: RunState::Running,
        runs,
        iterations,
        curves: Vec::new(),
        mean: Vec::new(),
        error: None,
    }));
    state
        .runs
        .write()
        .map_err(|_| poisoned())?
        .insert(handle, status.clone());
    let config = state.config.bo.clone();
    let progress = status.clone();
    tokio::task::spawn_blocking(move || {
        for r in 0..runs {
            let run_seed = derive_seed(seed, STREAM_BO + r as u64);
            let outcome = run_from_preferences(&benchmark, answers.clone(), iterations, &config, run_seed);
            let Ok(mut p) = progress.lock() else { return };
            match outcome {
                Ok(run) => {
                    p.curves.push(run.history.iterations.iter().map(|it| it.y_best).collect());
                    p.mean = (0..iterations)
                        .map(|j| p.curves.iter().map(|c| c[j]).sum::<f64>() / p.curves.len() as f64)
                        .collect();
                }
                Err(failure) => {
                    p.state = RunState::Failed;
                    p.error = Some(failure.to_string());
                    return;
                }
            }
        }
        if let Ok(mut p) = progress.lock() {
            p.state = RunState::Done;
        }
    });
    let snapshot = status.lock().map_err(|_| poisoned())?.clone();
    Ok((StatusCode::ACCEPTED, Json(snapshot)))
}

async fn get_bo(State(state): State<Shared>, Path(handle): Path<String>) -> Result<Json<BoStatus>> {
    let status = state.run(&handle)?;
    let snapshot = status.lock().map_err(|_| poisoned())?.clone();
    Ok(Json(snapshot))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/grid", get(get_grid))
        .route("/sessions/{id}/question", get(get_question))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/result", get(get_result))
        .route("/sessions/{id}/bo", post(post_bo))
        .route("/bo/{handle}", get(get_bo))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

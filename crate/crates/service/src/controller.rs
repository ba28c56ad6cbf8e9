//! The run controller.
//!
//! A single worker thread owns the backend, every open session and every
//! source instance. Callers talk to it through a command channel, so all
//! mutations are serialized. While a run is active the worker handles
//! pending commands between positions and otherwise executes the run one
//! position at a time: move θ, move φ, settle, acquire, append (checkpoint).
//! Pause and abort therefore land on a position boundary.
//!
//! Status reads bypass the channel and copy from a shared snapshot table.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::Utc;
use positioner_core::backend::{Axis, Backend, BackendPose};
use positioner_core::kinematics::{plan_move, plan_rail_move};
use positioner_core::scan::ScanConfig;
use positioner_core::session::{
    MeasurementRecord, SessionConfig, SessionHandle, SessionMetadata, SessionStore,
};
use positioner_core::sources::{Source, SourceConfig, SourceDescriptor, SourceRegistry};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    Running,
    Paused,
    Completed,
    Aborted,
    Failed,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Completed | Phase::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub phase: Phase,
    pub completed_positions: usize,
    pub total_positions: usize,
    pub current_pose: BackendPose,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JogRequest {
    pub axis: Axis,
    /// Degrees for the rotation axes, millimetres for the rail.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRunRequest {
    #[serde(default)]
    pub run_id: Option<String>,
    pub scan: ScanConfig,
    pub source_name: String,
    #[serde(default)]
    pub source_config: SourceConfig,
    #[serde(default)]
    pub metadata: SessionMetadata,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStatus {
    /// `idle` or `running`.
    pub state: String,
    pub active_run: Option<String>,
    pub pose: BackendPose,
}

/// Phase information persisted next to the sessions so a restarted service
/// knows how each run ended.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunRecord {
    phase: Phase,
    last_error: Option<String>,
}

type Reply<T> = Sender<Result<T, ServiceError>>;

enum Command {
    Jog(JogRequest, Reply<BackendPose>),
    Home(Reply<BackendPose>),
    Create(Box<CreateRunRequest>, Reply<RunState>),
    Start(String, Reply<RunState>),
    Pause(String, Reply<RunState>),
    Abort(String, Reply<RunState>),
    Archive(String, Reply<PathBuf>),
    Shutdown,
}

struct Shared {
    runs: RwLock<BTreeMap<String, RunState>>,
    backend: Arc<dyn Backend>,
    store: SessionStore,
    registry: Arc<SourceRegistry>,
}

impl Shared {
    fn publish(&self, state: &RunState) {
        self.runs
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(state.run_id.clone(), state.clone());
    }
}

#[derive(Debug, Clone)]
pub struct ControllerOptions {
    pub settle: Duration,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        Self {
            settle: Duration::ZERO,
        }
    }
}

/// Handle to the run controller. Cheap to clone.
#[derive(Clone)]
pub struct Controller {
    tx: Sender<Command>,
    shared: Arc<Shared>,
    worker: Arc<std::sync::Mutex<Option<JoinHandle<()>>>>,
}

impl Controller {
    /// Starts the worker. Sessions already on disk are restored; runs that
    /// were executing when the previous process died come back as paused.
    pub fn start(
        backend: Arc<dyn Backend>,
        store: SessionStore,
        registry: Arc<SourceRegistry>,
        options: ControllerOptions,
    ) -> Result<Self, ServiceError> {
        let shared = Arc::new(Shared {
            runs: RwLock::new(BTreeMap::new()),
            backend,
            store,
            registry,
        });
        let mut worker = Worker {
            shared: Arc::clone(&shared),
            options,
            runs: HashMap::new(),
            active: None,
        };
        worker.restore()?;

        let (tx, rx) = mpsc::channel();
        let handle = std::thread::Builder::new()
            .name("run-controller".into())
            .spawn(move || worker.run(rx))
            .map_err(|e| ServiceError::Storage(e.to_string()))?;
        Ok(Self {
            tx,
            shared,
            worker: Arc::new(std::sync::Mutex::new(Some(handle))),
        })
    }

    fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, ServiceError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx
            .send(make(reply_tx))
            .map_err(|_| ServiceError::Unavailable)?;
        reply_rx.recv().map_err(|_| ServiceError::Unavailable)?
    }

    pub fn jog(&self, req: JogRequest) -> Result<BackendPose, ServiceError> {
        self.call(|r| Command::Jog(req, r))
    }

    pub fn home(&self) -> Result<BackendPose, ServiceError> {
        self.call(Command::Home)
    }

    pub fn create_run(&self, req: CreateRunRequest) -> Result<RunState, ServiceError> {
        self.call(|r| Command::Create(Box::new(req), r))
    }

    pub fn start_run(&self, run_id: &str) -> Result<RunState, ServiceError> {
        self.call(|r| Command::Start(run_id.to_string(), r))
    }

    pub fn pause(&self, run_id: &str) -> Result<RunState, ServiceError> {
        self.call(|r| Command::Pause(run_id.to_string(), r))
    }

    pub fn abort(&self, run_id: &str) -> Result<RunState, ServiceError> {
        self.call(|r| Command::Abort(run_id.to_string(), r))
    }

    /// Path of the run's ZIP archive, writing it first if needed.
    pub fn archive(&self, run_id: &str) -> Result<PathBuf, ServiceError> {
        self.call(|r| Command::Archive(run_id.to_string(), r))
    }

    pub fn run_progress(&self, run_id: &str) -> Result<RunState, ServiceError> {
        let runs = self.shared.runs.read().unwrap_or_else(|e| e.into_inner());
        runs.get(run_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("run '{run_id}'")))
    }

    pub fn runs(&self) -> Vec<RunState> {
        let runs = self.shared.runs.read().unwrap_or_else(|e| e.into_inner());
        runs.values().cloned().collect()
    }

    pub fn status(&self) -> ServiceStatus {
        let runs = self.shared.runs.read().unwrap_or_else(|e| e.into_inner());
        let active = runs.values().find(|r| r.phase == Phase::Running);
        ServiceStatus {
            state: if active.is_some() { "running" } else { "idle" }.into(),
            active_run: active.map(|r| r.run_id.clone()),
            pose: self.shared.backend.pose(),
        }
    }

    pub fn sources(&self) -> Vec<SourceDescriptor> {
        self.shared.registry.list().into_iter().cloned().collect()
    }

    pub fn store(&self) -> &SessionStore {
        &self.shared.store
    }

    /// Blocks until `run_id` leaves the running phase.
    pub fn wait_until_settled(
        &self,
        run_id: &str,
        poll: Duration,
    ) -> Result<RunState, ServiceError> {
        loop {
            let state = self.run_progress(run_id)?;
            if state.phase != Phase::Running {
                return Ok(state);
            }
            std::thread::sleep(poll);
        }
    }

    /// Stops the worker after the position in progress.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Command::Shutdown);
        let handle = self.worker.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }
}

struct RunCtx {
    state: RunState,
    handle: Option<SessionHandle>,
    source: Option<Box<dyn Source>>,
}

struct Worker {
    shared: Arc<Shared>,
    options: ControllerOptions,
    runs: HashMap<String, RunCtx>,
    active: Option<String>,
}

impl Worker {
    fn runs_dir(&self) -> PathBuf {
        self.shared.store.root().join("runs")
    }

    fn persist_phase(&self, state: &RunState) {
        let record = RunRecord {
            phase: state.phase,
            last_error: state.last_error.clone(),
        };
        let dir = self.runs_dir();
        let result = fs::create_dir_all(&dir).and_then(|_| {
            let tmp = dir.join(format!("{}.json.tmp", state.run_id));
            fs::write(
                &tmp,
                serde_json::to_vec_pretty(&record).expect("serializable"),
            )?;
            fs::rename(tmp, dir.join(format!("{}.json", state.run_id)))
        });
        if let Err(e) = result {
            warn!(run = %state.run_id, "could not persist run phase: {e}");
        }
    }

    fn restore(&mut self) -> Result<(), ServiceError> {
        let pose = self.shared.backend.pose();
        for run_id in self.shared.store.list_sessions()? {
            let completed = self.shared.store.detect_resumable(&run_id)?;
            let (config, _) = self.shared.store.load_session(&run_id)?;
            let total = config.scan.grid()?.len();
            let record: Option<RunRecord> =
                fs::read(self.runs_dir().join(format!("{run_id}.json")))
                    .ok()
                    .and_then(|b| serde_json::from_slice(&b).ok());
            let (mut phase, last_error) = match record {
                Some(r) => (r.phase, r.last_error),
                None => (Phase::Created, None),
            };
            if phase == Phase::Running {
                info!(run = %run_id, completed, "resuming interrupted run as paused");
                phase = Phase::Paused;
            }
            if completed == total && phase != Phase::Aborted {
                phase = Phase::Completed;
            }
            let state = RunState {
                run_id: run_id.clone(),
                phase,
                completed_positions: completed,
                total_positions: total,
                current_pose: pose,
                last_error,
            };
            self.shared.publish(&state);
            self.persist_phase(&state);
            self.runs.insert(
                run_id,
                RunCtx {
                    state,
                    handle: None,
                    source: None,
                },
            );
        }
        Ok(())
    }

    fn run(mut self, rx: Receiver<Command>) {
        loop {
            let cmd = if self.active.is_some() {
                match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(TryRecvError::Empty) => None,
                    Err(TryRecvError::Disconnected) => return,
                }
            } else {
                match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => return,
                }
            };
            match cmd {
                Some(Command::Shutdown) => {
                    if let Some(id) = self.active.take() {
                        // Leave it as Running on disk so a restart resumes it.
                        info!(run = %id, "shutting down mid-run");
                    }
                    return;
                }
                Some(c) => self.handle(c),
                None => self.step_active(),
            }
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Jog(req, reply) => {
                let _ = reply.send(self.jog(req));
            }
            Command::Home(reply) => {
                let _ = reply.send(self.home());
            }
            Command::Create(req, reply) => {
                let _ = reply.send(self.create(*req));
            }
            Command::Start(id, reply) => {
                let _ = reply.send(self.start(&id));
            }
            Command::Pause(id, reply) => {
                let _ = reply.send(self.pause(&id));
            }
            Command::Abort(id, reply) => {
                let _ = reply.send(self.abort(&id));
            }
            Command::Archive(id, reply) => {
                let _ = reply.send(self.archive(&id));
            }
            Command::Shutdown => unreachable!("handled by the loop"),
        }
    }

    fn ensure_idle(&self) -> Result<(), ServiceError> {
        match &self.active {
            Some(id) => Err(ServiceError::Busy(format!("run '{id}' is in progress"))),
            None => Ok(()),
        }
    }

    fn jog(&mut self, req: JogRequest) -> Result<BackendPose, ServiceError> {
        self.ensure_idle()?;
        if !req.delta.is_finite() {
            return Err(ServiceError::Range("delta must be finite".into()));
        }
        let backend = &self.shared.backend;
        let axes = *backend.axes();
        let pose = backend.pose();
        let plan = match req.axis {
            Axis::Theta => plan_move(pose.theta, pose.theta + req.delta, &axes.theta)?,
            Axis::Phi => plan_move(pose.phi, pose.phi + req.delta, &axes.phi)?,
            Axis::Rail => plan_rail_move(pose.rail_mm, pose.rail_mm + req.delta, &axes.rail)?,
        };
        Ok(backend.execute(&plan, req.axis)?)
    }

    fn home(&mut self) -> Result<BackendPose, ServiceError> {
        self.ensure_idle()?;
        Ok(self.shared.backend.home())
    }

    fn ctx(&mut self, run_id: &str) -> Result<&mut RunCtx, ServiceError> {
        self.runs
            .get_mut(run_id)
            .ok_or_else(|| ServiceError::NotFound(format!("run '{run_id}'")))
    }

    fn create(&mut self, req: CreateRunRequest) -> Result<RunState, ServiceError> {
        let registry = &self.shared.registry;
        let descriptor = registry
            .descriptor(&req.source_name)
            .ok_or_else(|| ServiceError::Config(format!("unknown source '{}'", req.source_name)))?;
        let grid = req.scan.grid()?;

        let now = Utc::now();
        let seed = req
            .seed
            .unwrap_or_else(|| now.timestamp_nanos_opt().unwrap_or_default() as u64);
        let mut source_config = req.source_config.clone();
        let has_seed_field = descriptor.config_schema.iter().any(|f| f.name == "seed");
        if has_seed_field && !source_config.contains_key("seed") {
            source_config.insert("seed".into(), Value::from(seed));
        }
        let source_config = descriptor.validate(&source_config)?;
        let source = registry.create(&req.source_name, &source_config)?;

        let run_id = match req.run_id {
            Some(id) => id,
            None => format!("run-{}", now.format("%Y%m%d-%H%M%S-%3f")),
        };
        let config = SessionConfig {
            run_id: run_id.clone(),
            scan: req.scan,
            source_name: req.source_name,
            source_config,
            metadata: req.metadata,
            created_at: now,
            seed,
        };
        let handle = self.shared.store.open_session(config)?;
        let state = RunState {
            run_id: run_id.clone(),
            phase: Phase::Created,
            completed_positions: 0,
            total_positions: grid.len(),
            current_pose: self.shared.backend.pose(),
            last_error: None,
        };
        self.shared.publish(&state);
        self.persist_phase(&state);
        info!(run = %run_id, positions = grid.len(), "run created");
        self.runs.insert(
            run_id,
            RunCtx {
                state: state.clone(),
                handle: Some(handle),
                source: Some(source),
            },
        );
        Ok(state)
    }

    fn set_phase(&mut self, run_id: &str, phase: Phase, error: Option<String>) -> RunState {
        let pose = self.shared.backend.pose();
        let ctx = self.runs.get_mut(run_id).expect("known run");
        ctx.state.phase = phase;
        ctx.state.current_pose = pose;
        if error.is_some() || phase == Phase::Running {
            ctx.state.last_error = error;
        }
        let state = ctx.state.clone();
        self.shared.publish(&state);
        self.persist_phase(&state);
        state
    }

    fn start(&mut self, run_id: &str) -> Result<RunState, ServiceError> {
        let phase = self.ctx(run_id)?.state.phase;
        match phase {
            Phase::Created | Phase::Paused | Phase::Failed => {}
            Phase::Running => {
                return Err(ServiceError::State(format!(
                    "run '{run_id}' is already running"
                )))
            }
            other => {
                return Err(ServiceError::State(format!(
                    "cannot start run '{run_id}' in phase {other:?}"
                )))
            }
        }
        self.ensure_idle()?;

        let store = self.shared.store.clone();
        let registry = Arc::clone(&self.shared.registry);
        let ctx = self.ctx(run_id)?;
        if ctx.handle.is_none() {
            ctx.handle = Some(store.reopen(run_id)?);
        }
        if ctx.source.is_none() {
            let cfg = ctx.handle.as_ref().expect("just opened").config();
            ctx.source = Some(registry.create(&cfg.source_name, &cfg.source_config)?);
        }
        self.active = Some(run_id.to_string());
        info!(run = %run_id, "run started");
        Ok(self.set_phase(run_id, Phase::Running, None))
    }

    fn pause(&mut self, run_id: &str) -> Result<RunState, ServiceError> {
        let phase = self.ctx(run_id)?.state.phase;
        if phase != Phase::Running {
            return Err(ServiceError::State(format!(
                "cannot pause run '{run_id}' in phase {phase:?}"
            )));
        }
        self.active = None;
        info!(run = %run_id, "run paused");
        Ok(self.set_phase(run_id, Phase::Paused, None))
    }

    fn abort(&mut self, run_id: &str) -> Result<RunState, ServiceError> {
        let phase = self.ctx(run_id)?.state.phase;
        if !matches!(phase, Phase::Running | Phase::Paused | Phase::Created) {
            return Err(ServiceError::State(format!(
                "cannot abort run '{run_id}' in phase {phase:?}"
            )));
        }
        if self.active.as_deref() == Some(run_id) {
            self.active = None;
        }
        let state = self.set_phase(run_id, Phase::Aborted, None);
        self.finalize(run_id)?;
        info!(run = %run_id, completed = state.completed_positions, "run aborted");
        Ok(state)
    }

    fn finalize(&mut self, run_id: &str) -> Result<PathBuf, ServiceError> {
        let store = self.shared.store.clone();
        let ctx = self.ctx(run_id)?;
        if ctx.handle.is_none() {
            ctx.handle = Some(store.reopen(run_id)?);
        }
        let handle = ctx.handle.as_mut().expect("opened above");
        Ok(store.finalize(handle)?)
    }

    fn archive(&mut self, run_id: &str) -> Result<PathBuf, ServiceError> {
        let phase = self.ctx(run_id)?.state.phase;
        match phase {
            Phase::Running => Err(ServiceError::Busy(format!(
                "run '{run_id}' is still running"
            ))),
            Phase::Created | Phase::Paused => Err(ServiceError::State(format!(
                "run '{run_id}' has not finished (phase {phase:?})"
            ))),
            Phase::Completed | Phase::Aborted | Phase::Failed => {
                let path = self.shared.store.archive_path(run_id);
                if path.exists() {
                    Ok(path)
                } else {
                    self.finalize(run_id)
                }
            }
        }
    }

    fn fail(&mut self, run_id: &str, message: String) {
        warn!(run = %run_id, "run failed: {message}");
        self.active = None;
        self.set_phase(run_id, Phase::Failed, Some(message));
    }

    /// Executes the next position of the active run.
    fn step_active(&mut self) {
        let Some(run_id) = self.active.clone() else {
            return;
        };
        let backend = Arc::clone(&self.shared.backend);
        let settle = self.options.settle;
        let ctx = self.runs.get_mut(&run_id).expect("active run exists");
        let handle = ctx.handle.as_mut().expect("active run has a session");

        let Some(position) = handle.next_position() else {
            self.active = None;
            self.set_phase(&run_id, Phase::Completed, None);
            match self.finalize(&run_id) {
                Ok(path) => info!(run = %run_id, archive = %path.display(), "run completed"),
                Err(e) => self.fail(&run_id, format!("finalize failed: {e}")),
            }
            return;
        };

        let result = (|| -> Result<usize, ServiceError> {
            let axes = *backend.axes();
            let pose = backend.pose();
            let theta_plan = plan_move(pose.theta, position.theta, &axes.theta)?;
            if !theta_plan.is_empty() {
                backend.execute(&theta_plan, Axis::Theta)?;
            }
            let phi_plan = plan_move(pose.phi, position.phi, &axes.phi)?;
            if !phi_plan.is_empty() {
                backend.execute(&phi_plan, Axis::Phi)?;
            }
            if !settle.is_zero() {
                std::thread::sleep(settle);
            }
            let n = handle.config().scan.samples_per_position as usize;
            let source = ctx.source.as_mut().expect("active run has a source");
            let samples = source
                .acquire(n, &position)
                .map_err(|e| ServiceError::Hardware(format!("acquisition failed: {e}")))?;
            Ok(handle.append_record(&MeasurementRecord { position, samples })?)
        })();

        match result {
            Ok(completed) => {
                ctx.state.completed_positions = completed;
                ctx.state.current_pose = backend.pose();
                let state = ctx.state.clone();
                self.shared.publish(&state);
            }
            Err(e) => {
                let completed = handle.completed();
                ctx.state.completed_positions = completed;
                self.fail(&run_id, e.to_string());
            }
        }
    }
}

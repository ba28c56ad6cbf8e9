#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use positioner_core::backend::{Backend, SimBackend};
use positioner_core::session::SessionStore;
use positioner_core::sources::SourceRegistry;
use positioner_service::{api, Controller, ControllerOptions};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Minimal JSON client that hands back status codes instead of erroring.
#[derive(Clone)]
pub struct Client {
    pub base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            base: base.into(),
            agent,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let mut resp = self.agent.get(&self.url(path)).call().expect("request");
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    pub fn get_bytes(&self, path: &str) -> (u16, String, Vec<u8>) {
        let mut resp = self.agent.get(&self.url(path)).call().expect("request");
        let status = resp.status().as_u16();
        let ctype = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_string();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .expect("body");
        (status, ctype, bytes)
    }

    pub fn post<T: Serialize>(&self, path: &str, body: &T) -> (u16, Value) {
        let mut resp = self
            .agent
            .post(&self.url(path))
            .send_json(body)
            .expect("request");
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    pub fn post_empty(&self, path: &str) -> (u16, Value) {
        let mut resp = self
            .agent
            .post(&self.url(path))
            .send_empty()
            .expect("request");
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_json().unwrap_or(Value::Null))
    }

    pub fn typed<T: DeserializeOwned>(&self, path: &str) -> T {
        let (status, v) = self.get(path);
        assert_eq!(status, 200, "GET {path}: {v}");
        serde_json::from_value(v).expect("typed body")
    }

    /// Polls a run until its phase is no longer `running`.
    pub fn wait_settled(&self, run_id: &str, timeout: Duration) -> Value {
        let deadline = Instant::now() + timeout;
        loop {
            let (status, v) = self.get(&format!("/runs/{run_id}"));
            assert_eq!(status, 200, "{v}");
            if v["phase"] != "running" {
                return v;
            }
            assert!(
                Instant::now() < deadline,
                "run {run_id} did not settle: {v}"
            );
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// Polls until at least `n` positions are checkpointed.
    pub fn wait_completed(&self, run_id: &str, n: usize, timeout: Duration) -> Value {
        let deadline = Instant::now() + timeout;
        loop {
            let (_, v) = self.get(&format!("/runs/{run_id}"));
            if v["completed_positions"].as_u64().unwrap_or(0) as usize >= n
                || v["phase"] != "running"
            {
                return v;
            }
            assert!(Instant::now() < deadline, "run {run_id} stalled: {v}");
            std::thread::sleep(Duration::from_millis(1));
        }
    }
}

/// The service binary running as a child process.
pub struct ServiceProcess {
    child: Child,
    pub client: Client,
}

impl ServiceProcess {
    pub fn spawn(data_dir: &Path, settle_ms: u64) -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_positioner-service"))
            .env("POSITIONER_BIND", "127.0.0.1:0")
            .env("POSITIONER_DATA_DIR", data_dir)
            .env("POSITIONER_BACKEND", "instant")
            .env("POSITIONER_SETTLE_MS", settle_ms.to_string())
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn service");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .expect("read banner");
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner: {line:?}"))
            .to_string();
        Self {
            child,
            client: Client::new(base),
        }
    }

    /// SIGKILL: no shutdown hooks, no flushing.
    pub fn kill(mut self) {
        self.child.kill().expect("kill");
        self.child.wait().expect("reap");
    }
}

impl Drop for ServiceProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// An in-process server around a caller-supplied backend.
pub struct InProcess {
    pub client: Client,
    pub controller: Controller,
    pub backend: Arc<SimBackend>,
    _rt: tokio::runtime::Runtime,
}

impl InProcess {
    pub fn start(data_dir: &Path, backend: SimBackend, settle: Duration) -> Self {
        let backend = Arc::new(backend);
        let dyn_backend: Arc<dyn Backend> = backend.clone();
        let controller = Controller::start(
            dyn_backend,
            SessionStore::new(data_dir),
            Arc::new(SourceRegistry::with_builtins()),
            ControllerOptions { settle },
        )
        .expect("controller");
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("runtime");
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .expect("bind");
        let addr = listener.local_addr().unwrap();
        let app = api::router(controller.clone(), None);
        rt.spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self {
            client: Client::new(format!("http://{addr}")),
            controller,
            backend,
            _rt: rt,
        }
    }
}

pub fn run_request(
    run_id: &str,
    theta: f64,
    phi: f64,
    n: u32,
    source: &str,
    cfg: Value,
    seed: u64,
) -> Value {
    serde_json::json!({
        "run_id": run_id,
        "scan": { "theta_step": theta, "phi_step": phi, "samples_per_position": n },
        "source_name": source,
        "source_config": cfg,
        "seed": seed,
    })
}

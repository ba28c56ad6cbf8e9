//! Checkpointed session storage and ZIP archives.
//!
//! On-disk layout of a session under the store root:
//!
//! ```text
//! sessions/<run_id>/config.json
//! sessions/<run_id>/manifest.json
//! sessions/<run_id>/measurements/t<θ cd:06>_p<φ cd:05>.csv
//! sessions/<run_id>/extras/...
//! archives/<run_id>.zip
//! ```
//!
//! Each record is written to a temporary file, synced and renamed into
//! place, and only then counted in the manifest (itself replaced
//! atomically). The manifest is therefore the checkpoint: a measurement file
//! it does not list is an interrupted write and is discarded on resume.
//!
//! The archive holds `config.json`, `manifest.json`, one CSV per completed
//! position in plan order, and anything under `extras/`. Every CSV starts
//! with `timestamp_us,distance_cm`, followed by one column per source extra
//! key in sorted order.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::scan::{PlanCursor, PlanError, PlanStep, ScanConfig, ScanGrid, ScanPosition};
use crate::sources::{Sample, SourceConfig};

pub const CONFIG_ENTRY: &str = "config.json";
pub const MANIFEST_ENTRY: &str = "manifest.json";
pub const EXTRAS_DIR: &str = "extras";
const MEASUREMENTS_DIR: &str = "measurements";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run '{0}' already exists")]
    Conflict(String),
    #[error("out-of-order record: {0}")]
    Order(String),
    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("no session '{0}'")]
    NotFound(String),
    #[error("invalid session: {0}")]
    Invalid(String),
}

impl From<zip::result::ZipError> for StoreError {
    fn from(e: zip::result::ZipError) -> Self {
        match e {
            zip::result::ZipError::Io(io) => StoreError::Storage(io),
            other => StoreError::Format(other.to_string()),
        }
    }
}

impl From<PlanError> for StoreError {
    fn from(e: PlanError) -> Self {
        StoreError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMetadata {
    #[serde(default)]
    pub location: String,
    #[serde(default)]
    pub dut_name: String,
    #[serde(default)]
    pub remote_device: String,
    #[serde(default)]
    pub nominal_distance_cm: Option<f64>,
    #[serde(default)]
    pub operator_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub run_id: String,
    pub scan: ScanConfig,
    pub source_name: String,
    #[serde(default)]
    pub source_config: SourceConfig,
    #[serde(default)]
    pub metadata: SessionMetadata,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub seed: u64,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<ScanGrid, StoreError> {
        validate_run_id(&self.run_id)?;
        Ok(self.scan.grid()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub position: ScanPosition,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub run_id: String,
    pub completed: usize,
    pub total: usize,
    /// Set once an archive of the complete plan has been written.
    pub finalized: bool,
    /// Measurement file names in plan order.
    pub entries: Vec<String>,
}

pub fn validate_run_id(run_id: &str) -> Result<(), StoreError> {
    let ok = !run_id.is_empty()
        && run_id.len() <= 128
        && !run_id.starts_with('.')
        && run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::Invalid(format!(
            "run_id '{run_id}' must be 1-128 characters of [A-Za-z0-9._-] not starting with '.'"
        )))
    }
}

/// Archive file name for a position, e.g. `t001000_p18000.csv` for
/// θ = 10°, φ = 180°.
pub fn measurement_file_name(position: &ScanPosition) -> String {
    format!(
        "t{:06}_p{:05}.csv",
        position.theta_centi(),
        position.phi_centi()
    )
}

/// Inverse of [`measurement_file_name`]: (θ, φ) in centidegrees.
pub fn parse_measurement_file_name(name: &str) -> Option<(i64, i64)> {
    let rest = name.strip_prefix('t')?.strip_suffix(".csv")?;
    let (t, p) = rest.split_once("_p")?;
    if t.len() != 6 || p.len() != 5 || !t.bytes().chain(p.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((t.parse().ok()?, p.parse().ok()?))
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    // Directory fsync makes renames durable on POSIX; not supported elsewhere.
    #[cfg(unix)]
    File::open(dir)?.sync_all()?;
    #[cfg(not(unix))]
    let _ = dir;
    Ok(())
}

fn write_durable(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(parent) = path.parent() {
        sync_dir(parent)?;
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

pub fn encode_csv(samples: &[Sample]) -> Vec<u8> {
    let extra_keys: BTreeSet<&str> = samples
        .iter()
        .flat_map(|s| s.extras.keys().map(String::as_str))
        .collect();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["timestamp_us", "distance_cm"];
    header.extend(extra_keys.iter().copied());
    w.write_record(&header).expect("in-memory write");
    for s in samples {
        let mut row = vec![s.timestamp_us.to_string(), s.value.to_string()];
        row.extend(
            extra_keys
                .iter()
                .map(|k| s.extras.get(*k).cloned().unwrap_or_default()),
        );
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn decode_csv(bytes: &[u8]) -> Result<Vec<Sample>, StoreError> {
    let bad = |m: String| StoreError::Format(m);
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "timestamp_us" || &header[1] != "distance_cm" {
        return Err(bad(format!("unexpected CSV header {header:?}")));
    }
    let extra_keys: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut samples = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let timestamp_us = row[0]
            .parse()
            .map_err(|_| bad(format!("bad timestamp '{}'", &row[0])))?;
        let value: f64 = row[1]
            .parse()
            .map_err(|_| bad(format!("bad distance '{}'", &row[1])))?;
        if !value.is_finite() {
            return Err(bad(format!("non-finite distance '{}'", &row[1])));
        }
        let extras = extra_keys
            .iter()
            .zip(row.iter().skip(2))
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect();
        samples.push(Sample {
            timestamp_us,
            value,
            extras,
        });
    }
    Ok(samples)
}

/// Root directory holding all sessions and archives.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("sessions").join(run_id)
    }

    pub fn archive_path(&self, run_id: &str) -> PathBuf {
        self.root.join("archives").join(format!("{run_id}.zip"))
    }

    /// Run ids of every session on disk, sorted.
    pub fn list_sessions(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("sessions");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    if entry.path().join(CONFIG_ENTRY).exists() {
                        ids.push(name.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn open_session(&self, cfg: SessionConfig) -> Result<SessionHandle, StoreError> {
        let grid = cfg.validate()?;
        let sessions = self.root.join("sessions");
        fs::create_dir_all(&sessions)?;
        let dir = self.session_dir(&cfg.run_id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::Conflict(cfg.run_id))
            }
            Err(e) => return Err(e.into()),
        }
        fs::create_dir(dir.join(MEASUREMENTS_DIR))?;
        fs::create_dir(dir.join(EXTRAS_DIR))?;
        write_durable(&dir.join(CONFIG_ENTRY), &to_json(&cfg))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            run_id: cfg.run_id.clone(),
            completed: 0,
            total: grid.len(),
            finalized: false,
            entries: Vec::new(),
        };
        write_durable(&dir.join(MANIFEST_ENTRY), &to_json(&manifest))?;
        sync_dir(&sessions)?;
        Ok(SessionHandle {
            dir,
            config: cfg,
            grid,
            manifest,
            cursor: PlanCursor::initial(),
        })
    }

    fn read_session_files(&self, run_id: &str) -> Result<(SessionConfig, Manifest), StoreError> {
        validate_run_id(run_id)?;
        let dir = self.session_dir(run_id);
        let config_bytes = match fs::read(dir.join(CONFIG_ENTRY)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(run_id.into()))
            }
            Err(e) => return Err(e.into()),
        };
        let config: SessionConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| StoreError::Format(format!("config.json: {e}")))?;
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_ENTRY))?)
            .map_err(|e| StoreError::Format(format!("manifest.json: {e}")))?;
        if manifest.entries.len() != manifest.completed {
            return Err(StoreError::Format(format!(
                "manifest lists {} entries but claims {} completed",
                manifest.entries.len(),
                manifest.completed
            )));
        }
        Ok((config, manifest))
    }

    /// Number of durably completed records for `run_id`. Measurement files
    /// the manifest does not list (interrupted writes) are removed.
    pub fn detect_resumable(&self, run_id: &str) -> Result<usize, StoreError> {
        let (_, manifest) = self.read_session_files(run_id)?;
        let dir = self.session_dir(run_id);
        let listed: BTreeSet<&str> = manifest.entries.iter().map(String::as_str).collect();
        let mdir = dir.join(MEASUREMENTS_DIR);
        let mut removed = false;
        for entry in fs::read_dir(&mdir)? {
            let entry = entry?;
            let name = entry.file_name();
            let keep = name.to_str().is_some_and(|n| listed.contains(n));
            if !keep {
                fs::remove_file(entry.path())?;
                removed = true;
            }
        }
        if removed {
            sync_dir(&mdir)?;
        }
        let stale_manifest = dir.join(format!("{MANIFEST_ENTRY}.tmp"));
        if stale_manifest.exists() {
            fs::remove_file(stale_manifest)?;
        }
        for name in &manifest.entries {
            if !mdir.join(name).exists() {
                return Err(StoreError::Format(format!(
                    "checkpointed file {name} is missing"
                )));
            }
        }
        Ok(manifest.completed)
    }

    /// Reopens an existing session for appending after its last checkpoint.
    pub fn reopen(&self, run_id: &str) -> Result<SessionHandle, StoreError> {
        let completed = self.detect_resumable(run_id)?;
        let (config, manifest) = self.read_session_files(run_id)?;
        let grid = config.scan.grid()?;
        let cursor = grid.resume_at(completed)?;
        Ok(SessionHandle {
            dir: self.session_dir(run_id),
            config,
            grid,
            manifest,
            cursor,
        })
    }

    /// Config and checkpointed records of a session, read from its working
    /// directory.
    pub fn load_session(
        &self,
        run_id: &str,
    ) -> Result<(SessionConfig, Vec<MeasurementRecord>), StoreError> {
        let (config, manifest) = self.read_session_files(run_id)?;
        let mdir = self.session_dir(run_id).join(MEASUREMENTS_DIR);
        let records = records_from_entries(&config, &manifest, |name| {
            fs::read(mdir.join(name)).map_err(StoreError::from)
        })?;
        Ok((config, records))
    }

    /// Packages the session as `archives/<run_id>.zip` and returns its path.
    pub fn finalize(&self, handle: &mut SessionHandle) -> Result<PathBuf, StoreError> {
        let complete = handle.manifest.completed == handle.manifest.total;
        if complete != handle.manifest.finalized {
            handle.manifest.finalized = complete;
            write_durable(&handle.dir.join(MANIFEST_ENTRY), &to_json(&handle.manifest))?;
        }

        let archives = self.root.join("archives");
        fs::create_dir_all(&archives)?;
        let path = self.archive_path(&handle.config.run_id);
        let tmp = path.with_extension("zip.tmp");
        {
            let file = File::create(&tmp)?;
            let mut zip = ZipWriter::new(file);
            let opts = SimpleFileOptions::default()
                .compression_method(CompressionMethod::Deflated)
                .last_modified_time(zip::DateTime::DEFAULT)
                .unix_permissions(0o644);

            zip.start_file(CONFIG_ENTRY, opts)?;
            zip.write_all(&fs::read(handle.dir.join(CONFIG_ENTRY))?)?;
            zip.start_file(MANIFEST_ENTRY, opts)?;
            zip.write_all(&to_json(&handle.manifest))?;

            let mdir = handle.dir.join(MEASUREMENTS_DIR);
            for name in &handle.manifest.entries {
                zip.start_file(name.as_str(), opts)?;
                zip.write_all(&fs::read(mdir.join(name))?)?;
            }

            let extras_root = handle.dir.join(EXTRAS_DIR);
            for rel in list_files(&extras_root)? {
                let name = format!("{EXTRAS_DIR}/{rel}");
                zip.start_file(name, opts)?;
                zip.write_all(&fs::read(extras_root.join(&rel))?)?;
            }
            let file = zip.finish()?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        sync_dir(&archives)?;
        Ok(path)
    }
}

/// Relative paths of all files below `root`, `/`-separated and sorted.
fn list_files(root: &Path) -> io::Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(base, &path, out)?;
            } else if let Ok(rel) = path.strip_prefix(base) {
                let parts: Vec<_> = rel.iter().map(|p| p.to_string_lossy()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out)?;
    }
    out.sort();
    Ok(out)
}

fn records_from_entries(
    config: &SessionConfig,
    manifest: &Manifest,
    mut read: impl FnMut(&str) -> Result<Vec<u8>, StoreError>,
) -> Result<Vec<MeasurementRecord>, StoreError> {
    let grid = config
        .scan
        .grid()
        .map_err(|e| StoreError::Format(format!("config.json: {e}")))?;
    if manifest.completed > grid.len() {
        return Err(StoreError::Format(format!(
            "manifest claims {} completed of a {}-position plan",
            manifest.completed,
            grid.len()
        )));
    }
    grid.iter()
        .zip(&manifest.entries)
        .map(|(position, name)| {
            let expected = measurement_file_name(&position);
            if *name != expected {
                return Err(StoreError::Format(format!(
                    "entry {} is {name}, expected {expected}",
                    position.index
                )));
            }
            let samples = decode_csv(&read(name)?)?;
            Ok(MeasurementRecord { position, samples })
        })
        .collect()
}

/// Reads a finalized (or partial) archive. Records come back in plan order.
pub fn load_archive(path: &Path) -> Result<(SessionConfig, Vec<MeasurementRecord>), StoreError> {
    let file = File::open(path)?;
    load_archive_from(file)
}

pub fn load_archive_from<R: io::Read + io::Seek>(
    reader: R,
) -> Result<(SessionConfig, Vec<MeasurementRecord>), StoreError> {
    let mut zip = ZipArchive::new(reader).map_err(|e| StoreError::Format(e.to_string()))?;
    let mut read_entry = |name: &str| -> Result<Vec<u8>, StoreError> {
        let mut entry = zip
            .by_name(name)
            .map_err(|_| StoreError::Format(format!("missing entry {name}")))?;
        let mut buf = Vec::new();
        entry
            .read_to_end(&mut buf)
            .map_err(|e| StoreError::Format(format!("{name}: {e}")))?;
        Ok(buf)
    };
    let manifest: Manifest = serde_json::from_slice(&read_entry(MANIFEST_ENTRY)?)
        .map_err(|e| StoreError::Format(format!("manifest.json: {e}")))?;
    let config: SessionConfig = serde_json::from_slice(&read_entry(CONFIG_ENTRY)?)
        .map_err(|e| StoreError::Format(format!("config.json: {e}")))?;
    if manifest.entries.len() != manifest.completed {
        return Err(StoreError::Format(format!(
            "manifest lists {} entries but claims {} completed",
            manifest.entries.len(),
            manifest.completed
        )));
    }
    let records = records_from_entries(&config, &manifest, &mut read_entry)?;

    let csv_count = zip
        .file_names()
        .filter(|n| {
            n.as_ref()
                .is_ok_and(|n| parse_measurement_file_name(n).is_some())
        })
        .count();
    if csv_count != manifest.completed {
        return Err(StoreError::Format(format!(
            "archive has {csv_count} measurement files, manifest says {}",
            manifest.completed
        )));
    }
    Ok((config, records))
}

/// Reads only the manifest of an archive.
pub fn read_archive_manifest(path: &Path) -> Result<Manifest, StoreError> {
    let mut zip =
        ZipArchive::new(File::open(path)?).map_err(|e| StoreError::Format(e.to_string()))?;
    let mut entry = zip
        .by_name(MANIFEST_ENTRY)
        .map_err(|_| StoreError::Format("missing manifest.json".into()))?;
    let mut buf = Vec::new();
    entry.read_to_end(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| StoreError::Format(format!("manifest.json: {e}")))
}

/// Writer for one session. Only one handle per session may exist at a time.
#[derive(Debug)]
pub struct SessionHandle {
    dir: PathBuf,
    config: SessionConfig,
    grid: ScanGrid,
    manifest: Manifest,
    cursor: PlanCursor,
}

impl SessionHandle {
    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn completed(&self) -> usize {
        self.manifest.completed
    }

    pub fn total(&self) -> usize {
        self.manifest.total
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// The next position this session expects, or `None` once the plan is
    /// complete.
    pub fn next_position(&self) -> Option<ScanPosition> {
        match self.grid.next_position(&self.cursor).0 {
            PlanStep::Position(p) => Some(p),
            PlanStep::Done => None,
        }
    }

    /// Durably appends the next record and returns the new completed count.
    pub fn append_record(&mut self, record: &MeasurementRecord) -> Result<usize, StoreError> {
        let (step, next_cursor) = self.grid.next_position(&self.cursor);
        let expected = match step {
            PlanStep::Position(p) => p,
            PlanStep::Done => {
                return Err(StoreError::Order(format!(
                    "plan already complete, got index {}",
                    record.position.index
                )))
            }
        };
        if record.position.index != expected.index {
            return Err(StoreError::Order(format!(
                "expected index {}, got {}",
                expected.index, record.position.index
            )));
        }
        if record.position.theta_centi() != expected.theta_centi()
            || record.position.phi_centi() != expected.phi_centi()
        {
            return Err(StoreError::Order(format!(
                "index {} is planned at ({}, {}), got ({}, {})",
                expected.index,
                expected.theta,
                expected.phi,
                record.position.theta,
                record.position.phi
            )));
        }
        if record.samples.iter().any(|s| !s.value.is_finite()) {
            return Err(StoreError::Invalid("sample values must be finite".into()));
        }

        let name = measurement_file_name(&expected);
        let mdir = self.dir.join(MEASUREMENTS_DIR);
        write_durable(&mdir.join(&name), &encode_csv(&record.samples))?;

        let mut manifest = self.manifest.clone();
        manifest.entries.push(name);
        manifest.completed += 1;
        write_durable(&self.dir.join(MANIFEST_ENTRY), &to_json(&manifest))?;

        self.manifest = manifest;
        self.cursor = next_cursor;
        Ok(self.manifest.completed)
    }

    /// Stores an auxiliary file (e.g. a device log) that is copied verbatim
    /// into the archive under `extras/`.
    pub fn add_extra_file(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let valid = !name.is_empty()
            && name
                .split('/')
                .all(|p| !p.is_empty() && p != "." && p != ".." && !p.contains('\\'));
        if !valid {
            return Err(StoreError::Invalid(format!("bad extra file name '{name}'")));
        }
        let path = self.dir.join(EXTRAS_DIR).join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_durable(&path, bytes)?;
        Ok(())
    }
}

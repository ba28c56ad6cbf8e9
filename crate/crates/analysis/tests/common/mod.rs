#![allow(dead_code)]

use std::path::PathBuf;

use chrono::DateTime;
use positioner_core::scan::{generate_plan, ScanConfig};
use positioner_core::session::{MeasurementRecord, SessionConfig, SessionMetadata, SessionStore};
use positioner_core::sources::{acquire, ConstantSource, Source, UwbSourceConfig};

pub fn session(run_id: &str, scan: ScanConfig, source_name: &str, seed: u64) -> SessionConfig {
    SessionConfig {
        run_id: run_id.into(),
        scan,
        source_name: source_name.into(),
        source_config: Default::default(),
        metadata: SessionMetadata::default(),
        created_at: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
        seed,
    }
}

/// Writes a sim-uwb archive covering the first `upto` plan positions.
pub fn uwb_archive(
    store: &SessionStore,
    run_id: &str,
    scan: ScanConfig,
    src: &UwbSourceConfig,
    upto: Option<usize>,
) -> PathBuf {
    let mut cfg = session(run_id, scan, "sim-uwb", src.seed);
    cfg.source_config = src.to_config();
    let mut h = store.open_session(cfg).unwrap();
    let plan = generate_plan(&scan).unwrap();
    for p in plan.iter().take(upto.unwrap_or(plan.len())) {
        let samples = acquire(scan.samples_per_position as usize, p, src);
        h.append_record(&MeasurementRecord {
            position: *p,
            samples,
        })
        .unwrap();
    }
    store.finalize(&mut h).unwrap()
}

pub fn constant_archive(
    store: &SessionStore,
    run_id: &str,
    scan: ScanConfig,
    value_cm: f64,
) -> PathBuf {
    let mut h = store
        .open_session(session(run_id, scan, "constant", 0))
        .unwrap();
    let mut src = ConstantSource {
        value_cm,
        sample_interval_us: 1000,
    };
    for p in generate_plan(&scan).unwrap() {
        let samples = src.acquire(scan.samples_per_position as usize, &p).unwrap();
        h.append_record(&MeasurementRecord {
            position: p,
            samples,
        })
        .unwrap();
    }
    store.finalize(&mut h).unwrap()
}

use std::fs::File;
use std::io::{Read, Write};

use chrono::DateTime;
use positioner_core::scan::{generate_plan, ScanConfig};
use positioner_core::session::{
    load_archive, read_archive_manifest, MeasurementRecord, SessionConfig, SessionMetadata,
    SessionStore, StoreError,
};
use positioner_core::sources::{acquire, UwbSourceConfig};
use proptest::prelude::*;
use zip::ZipArchive;

fn session(run_id: &str, scan: ScanConfig, source: &UwbSourceConfig) -> SessionConfig {
    SessionConfig {
        run_id: run_id.into(),
        scan,
        source_name: "sim-uwb".into(),
        source_config: source.to_config(),
        metadata: SessionMetadata {
            location: "lab".into(),
            dut_name: "dut".into(),
            remote_device: "anchor".into(),
            nominal_distance_cm: Some(50.0),
            operator_note: String::new(),
        },
        created_at: DateTime::from_timestamp(1_700_000_000, 0).unwrap(),
        seed: source.seed,
    }
}

fn fill(
    store: &SessionStore,
    run_id: &str,
    scan: ScanConfig,
    upto: Option<usize>,
) -> Vec<MeasurementRecord> {
    let src = UwbSourceConfig::tower_interference(11);
    let mut h = store.open_session(session(run_id, scan, &src)).unwrap();
    let plan = generate_plan(&scan).unwrap();
    let n = scan.samples_per_position as usize;
    let mut records = Vec::new();
    for p in plan.iter().take(upto.unwrap_or(plan.len())) {
        let r = MeasurementRecord {
            position: *p,
            samples: acquire(n, p, &src),
        };
        h.append_record(&r).unwrap();
        records.push(r);
    }
    store.finalize(&mut h).unwrap();
    records
}

fn entry_bytes(path: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut zip = ZipArchive::new(File::open(path).unwrap()).unwrap();
    (0..zip.len())
        .map(|i| {
            let mut f = zip.by_index(i).unwrap();
            let mut buf = Vec::new();
            f.read_to_end(&mut buf).unwrap();
            (f.name().unwrap().to_string(), buf)
        })
        .collect()
}

#[test]
fn full_run_archive_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let store = SessionStore::new(tmp.path());
    let scan = ScanConfig::new(10.0, 10.0, 10);
    let records = fill(&store, "full", scan, None);
    let path = store.archive_path("full");

    let entries = entry_bytes(&path);
    assert_eq!(entries.len(), 686);
    assert!(entries.iter().any(|(n, _)| n == "t001000_p18000.csv"));
    let (_, csv) = entries
        .iter()
        .find(|(n, _)| n == "t001000_p18000.csv")
        .unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert!(text.starts_with("timestamp_us,distance_cm"));
    assert_eq!(text.lines().count(), 11);

    let manifest = read_archive_manifest(&path).unwrap();
    assert!(manifest.finalized);
    assert_eq!(manifest.completed, 684);

    let (cfg, loaded) = load_archive(&path).unwrap();
    assert_eq!(cfg.run_id, "full");
    assert_eq!(loaded, records);
}

#[test]
fn double_finalize_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let store = SessionStore::new(tmp.path());
    fill(&store, "twice", ScanConfig::new(45.0, 45.0, 5), None);
    let first = entry_bytes(&store.archive_path("twice"));
    let mut h = store.reopen("twice").unwrap();
    store.finalize(&mut h).unwrap();
    let second = entry_bytes(&store.archive_path("twice"));
    assert_eq!(first, second);
}

#[test]
fn partial_archive_is_not_finalized() {
    let tmp = tempfile::tempdir().unwrap();
    let store = SessionStore::new(tmp.path());
    let records = fill(&store, "part", ScanConfig::new(10.0, 10.0, 2), Some(19));
    let path = store.archive_path("part");
    let manifest = read_archive_manifest(&path).unwrap();
    assert!(!manifest.finalized);
    assert_eq!(manifest.completed, 19);
    assert_eq!(load_archive(&path).unwrap().1, records);
}

#[test]
fn truncated_archive_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let store = SessionStore::new(tmp.path());
    fill(&store, "t", ScanConfig::new(90.0, 90.0, 3), None);
    let bytes = std::fs::read(store.archive_path("t")).unwrap();
    let cut = tmp.path().join("cut.zip");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_archive(&cut), Err(StoreError::Format(_))));
}

#[test]
fn count_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let store = SessionStore::new(tmp.path());
    fill(&store, "m", ScanConfig::new(90.0, 90.0, 3), None);

    // Rebuild the archive with one extra measurement file.
    let entries = entry_bytes(&store.archive_path("m"));
    let forged = tmp.path().join("forged.zip");
    let mut w = zip::ZipWriter::new(File::create(&forged).unwrap());
    let opts = zip::write::SimpleFileOptions::default();
    for (name, bytes) in &entries {
        w.start_file(name.as_str(), opts).unwrap();
        w.write_all(bytes).unwrap();
    }
    w.start_file("t012300_p00000.csv", opts).unwrap();
    w.write_all(b"timestamp_us,distance_cm\n").unwrap();
    w.finish().unwrap();
    assert!(matches!(load_archive(&forged), Err(StoreError::Format(_))));

    // And one without a manifest.
    let bare = tmp.path().join("bare.zip");
    let mut w = zip::ZipWriter::new(File::create(&bare).unwrap());
    for (name, bytes) in entries.iter().filter(|(n, _)| n != "manifest.json") {
        w.start_file(name.as_str(), opts).unwrap();
        w.write_all(bytes).unwrap();
    }
    w.finish().unwrap();
    assert!(matches!(load_archive(&bare), Err(StoreError::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_is_lossless(k in 0usize..=12, n in 1u32..6, seed in any::<u64>()) {
        let tmp = tempfile::tempdir().unwrap();
        let store = SessionStore::new(tmp.path());
        let scan = ScanConfig::new(90.0, 90.0, n);
        let src = UwbSourceConfig::tower_interference(seed);
        let mut h = store.open_session(session("p", scan, &src)).unwrap();
        let mut records = Vec::new();
        for p in generate_plan(&scan).unwrap().iter().take(k) {
            let r = MeasurementRecord { position: *p, samples: acquire(n as usize, p, &src) };
            h.append_record(&r).unwrap();
            records.push(r);
        }
        let path = store.finalize(&mut h).unwrap();
        let (cfg, loaded) = load_archive(&path).unwrap();
        prop_assert_eq!(cfg.seed, seed);
        prop_assert_eq!(loaded, records);
    }
}

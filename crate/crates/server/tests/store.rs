use std::collections::BTreeMap;
use std::io::Read;

use proptest::prelude::*;
use tracelab_core::record::{
    content_digest, ActivityCategory, ActivityRecord, ContentMode, FocusKind, FocusRecord, SnapshotRecord,
    TrackedRecord,
};
use tracelab_core::scenario::Consent;
use tracelab_core::wire::{BatchBody, RegisterRequest};
use tracelab_server::http::export_archive;
use tracelab_server::{Repository, ServerError, SqliteStore};

fn register(store: &SqliteStore, research: &str, nonce: &str) -> String {
    store
        .register(
            &RegisterRequest {
                research_id: research.into(),
                consent: Consent::Granted { at: 1 },
                client_nonce: nonce.into(),
            },
            0,
        )
        .unwrap()
        .session_token
}

fn snapshot(seq: u64, content: &str) -> TrackedRecord {
    SnapshotRecord {
        seq,
        timestamp: seq as i64,
        file: "src/A.kt".into(),
        mode: ContentMode::Full,
        content_digest: content_digest(content.as_bytes()),
        content: content.into(),
    }
    .into()
}

fn activity(seq: u64, category: ActivityCategory, id: &str) -> TrackedRecord {
    ActivityRecord { seq, timestamp: seq as i64, category, event_id: id.into(), detail: BTreeMap::new() }.into()
}

fn focus(seq: u64) -> TrackedRecord {
    FocusRecord { seq, timestamp: seq as i64, file: "src/A.kt".into(), kind: FocusKind::Focus }.into()
}

fn body(batch_id: &str, records: Vec<TrackedRecord>) -> Vec<u8> {
    serde_json::to_vec(&BatchBody { batch_id: batch_id.into(), records, attachments: vec![] }).unwrap()
}

#[test]
fn mixed_batch_fills_each_table_once_and_keeps_raw_bytes() {
    let store = SqliteStore::open_in_memory().unwrap();
    let token = register(&store, "r", "n1");
    let raw = body("b1", vec![snapshot(1, "x"), activity(2, ActivityCategory::Run, "Run"), focus(3)]);
    let ack = store.ingest(&token, &raw, 10).unwrap();
    assert_eq!((ack.acked_upto_seq, ack.duplicate), (3, false));
    let counts = store.table_counts().unwrap();
    for t in ["snapshots", "activity", "focus", "batches"] {
        assert_eq!(counts[t], 1, "{t}");
    }
    assert_eq!(counts["toolwindow"] + counts["survey"] + counts["quarantine"], 0);
    let exported = store.export_raw(&token).unwrap();
    assert_eq!(content_digest(&exported[0].bytes), content_digest(&raw));
}

#[test]
fn duplicate_batch_changes_nothing() {
    let store = SqliteStore::open_in_memory().unwrap();
    let token = register(&store, "r", "n1");
    let raw = body("b1", vec![snapshot(1, "x"), focus(2)]);
    store.ingest(&token, &raw, 1).unwrap();
    let before = store.dump_category_tables().unwrap();
    let ack = store.ingest(&token, &raw, 2).unwrap();
    assert!(ack.duplicate);
    assert_eq!(ack.acked_upto_seq, 2);
    assert_eq!(store.dump_category_tables().unwrap(), before);
    assert_eq!(store.table_counts().unwrap()["batches"], 1);
}

#[test]
fn resent_records_under_new_batch_id_are_not_doubled() {
    let store = SqliteStore::open_in_memory().unwrap();
    let token = register(&store, "r", "n1");
    store.ingest(&token, &body("b1", vec![focus(1), focus(2)]), 1).unwrap();
    let ack = store.ingest(&token, &body("b2", vec![focus(2), focus(3)]), 2).unwrap();
    assert!(!ack.duplicate);
    assert_eq!(store.table_counts().unwrap()["focus"], 3);
}

#[test]
fn malformed_record_is_quarantined_and_ack_advances() {
    let store = SqliteStore::open_in_memory().unwrap();
    let token = register(&store, "r", "n1");
    let raw = br#"{"batch_id":"b1","records":[
        {"type":"focus","seq":1,"timestamp":1,"file":"a.kt","kind":"focus"},
        {"type":"snapshot","seq":2,"timestamp":2,"file":"a.kt","mode":"full","content-digest":"bogus","content":"x"},
        {"type":"focus","seq":3,"timestamp":3,"file":"a.kt","kind":"close"}]}"#;
    let ack = store.ingest(&token, raw, 1).unwrap();
    assert_eq!((ack.acked_upto_seq, ack.quarantined), (3, 1));
    let counts = store.table_counts().unwrap();
    assert_eq!((counts["focus"], counts["snapshots"], counts["quarantine"]), (2, 0, 1));
}

#[test]
fn registration_is_idempotent_and_needs_consent() {
    let store = SqliteStore::open_in_memory().unwrap();
    assert_eq!(register(&store, "r", "n"), register(&store, "r", "n"));
    assert_ne!(register(&store, "r", "n"), register(&store, "r", "m"));
    let err = store
        .register(&RegisterRequest { research_id: "r".into(), consent: Consent::Pending, client_nonce: "x".into() }, 0)
        .unwrap_err();
    assert!(matches!(err, ServerError::ConsentMissing));
    assert!(matches!(store.ingest("nope", &body("b", vec![]), 0), Err(ServerError::AuthFailure)));
}

#[test]
fn export_archive_lists_payloads_in_receipt_order() {
    let store = SqliteStore::open_in_memory().unwrap();
    let token = register(&store, "r", "n");
    let empty = export_archive(&store.export_raw(&token).unwrap());
    assert_eq!(tar::Archive::new(empty.as_slice()).entries().unwrap().count(), 0);
    let bodies: Vec<Vec<u8>> = (1..=3).map(|i| body(&format!("b{i}"), vec![focus(i)])).collect();
    for b in &bodies {
        store.ingest(&token, b, 5).unwrap();
    }
    let archive = export_archive(&store.export_raw(&token).unwrap());
    let mut ar = tar::Archive::new(archive.as_slice());
    let mut got = Vec::new();
    for e in ar.entries().unwrap() {
        let mut e = e.unwrap();
        let name = e.path().unwrap().to_string_lossy().into_owned();
        let mut buf = Vec::new();
        e.read_to_end(&mut buf).unwrap();
        got.push((name, buf));
    }
    assert_eq!(got.iter().map(|g| g.0.as_str()).collect::<Vec<_>>(), ["000001-b1.json", "000002-b2.json", "000003-b3.json"]);
    assert!(got.iter().zip(&bodies).all(|(g, b)| &g.1 == b));
}

#[test]
fn summary_of_empty_and_unknown_studies() {
    let store = SqliteStore::open_in_memory().unwrap();
    assert!(matches!(store.summary("none"), Err(ServerError::UnknownResearch(_))));
    register(&store, "r", "n");
    let s = store.summary("r").unwrap();
    assert_eq!(s.participants, 0);
    assert_eq!(s.counts, Default::default());
}

#[test]
fn summary_matches_recount() {
    let store = SqliteStore::open_in_memory().unwrap();
    let a = register(&store, "r", "a");
    let b = register(&store, "r", "b");
    store
        .ingest(&a, &body("1", vec![snapshot(1, "x"), activity(2, ActivityCategory::Hotkey, "Undo"), activity(3, ActivityCategory::Hotkey, "Undo")]), 0)
        .unwrap();
    store
        .ingest(&b, &body("1", vec![activity(1, ActivityCategory::Debug, "D"), activity(2, ActivityCategory::Hotkey, "Copy")]), 0)
        .unwrap();
    let s = store.summary("r").unwrap();
    assert_eq!(s.participants, 2);
    assert_eq!((s.counts.activities, s.counts.hotkeys, s.counts.run_debug, s.snapshots), (4, 3, 1, 1));
    assert_eq!(s.top_hotkeys[0].event_id, "Undo");
    assert_eq!(s.top_hotkeys[0].count, 2);
}

#[test]
fn backup_restores_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let store = SqliteStore::open_data_dir(&dir.path().join("data")).unwrap();
    let empty = store.backup(&dir.path().join("b0"), 0).unwrap();
    assert!(empty.tables.values().all(|&n| n == 0));

    let token = register(&store, "r", "n");
    store.ingest(&token, &body("b1", vec![snapshot(1, "x"), focus(2)]), 1).unwrap();
    let m = store.backup(&dir.path().join("b1"), 2).unwrap();
    assert_eq!(m.tables["snapshots"], 1);
    assert_eq!(m.tables["sessions"], 1);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("b1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tables"]["focus"], 1);
    let restored = SqliteStore::open(&dir.path().join("b1/tracelab.sqlite")).unwrap();
    assert_eq!(restored.dump_category_tables().unwrap(), store.dump_category_tables().unwrap());
    assert_eq!(restored.table_counts().unwrap(), store.table_counts().unwrap());
    assert!(matches!(store.backup(&dir.path().join("b1"), 3), Err(ServerError::BackupExists(_))));
}

#[test]
fn backup_during_ingest_has_no_half_applied_batch() {
    let dir = tempfile::tempdir().unwrap();
    let store = std::sync::Arc::new(SqliteStore::open_data_dir(&dir.path().join("data")).unwrap());
    let token = register(&store, "r", "n");
    let writer = {
        let store = store.clone();
        std::thread::spawn(move || {
            for i in 0..200u64 {
                let recs = (0..5).map(|k| focus(i * 5 + k + 1)).collect();
                store.ingest(&token, &body(&format!("b{i}"), recs), 0).unwrap();
            }
        })
    };
    let mut backups = Vec::new();
    for k in 0..5 {
        let dest = dir.path().join(format!("bk{k}"));
        store.backup(&dest, 0).unwrap();
        backups.push(dest);
    }
    writer.join().unwrap();
    for b in backups {
        let copy = SqliteStore::open(&b.join("tracelab.sqlite")).unwrap();
        let c = copy.table_counts().unwrap();
        assert_eq!(c["focus"], c["batches"] * 5);
    }
}

#[test]
fn rebuild_from_raw_reproduces_tables() {
    let store = SqliteStore::open_in_memory().unwrap();
    let token = register(&store, "r", "n");
    store.ingest(&token, &body("b1", vec![snapshot(1, "x"), focus(2)]), 1).unwrap();
    store.ingest(&token, &body("b2", vec![focus(2), activity(3, ActivityCategory::Ui, "u")]), 1).unwrap();
    store
        .ingest(&token, br#"{"batch_id":"b3","records":[{"type":"focus","seq":4}]}"#, 1)
        .unwrap();
    let before = store.dump_category_tables().unwrap();
    assert_eq!(store.rebuild_from_raw().unwrap(), 3);
    assert_eq!(store.dump_category_tables().unwrap(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ingestion_is_idempotent(picks in prop::collection::vec(0usize..6, 1..25)) {
        let batches: Vec<Vec<u8>> = (0..6u64)
            .map(|i| body(&format!("b{i}"), vec![focus(2 * i + 1), activity(2 * i + 2, ActivityCategory::Action, "a")]))
            .collect();
        let with_dups = SqliteStore::open_in_memory().unwrap();
        let deduped = SqliteStore::open_in_memory().unwrap();
        let t1 = register(&with_dups, "r", "n");
        let t2 = register(&deduped, "r", "n");
        let mut seen = std::collections::BTreeSet::new();
        for &p in &picks {
            with_dups.ingest(&t1, &batches[p], 0).unwrap();
            if seen.insert(p) {
                deduped.ingest(&t2, &batches[p], 0).unwrap();
            }
        }
        prop_assert_eq!(with_dups.dump_category_tables().unwrap(), deduped.dump_category_tables().unwrap());
    }
}

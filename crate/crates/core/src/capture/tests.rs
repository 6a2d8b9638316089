use std::collections::{BTreeMap, BTreeSet};

use super::*;
use crate::config::{ActivityPolicy, SnapshotTrigger, TrackingPolicy};
use crate::record::{content_digest, ActivityCategory, ActivityRecord, ContentMode, FocusKind, FocusRecord, TrackedRecord};

fn every_change(d: u64) -> TrackingPolicy {
    TrackingPolicy {
        trigger: SnapshotTrigger::EveryChange { debounce_ms: d },
        content_mode: ContentMode::Full,
    }
}

#[test]
fn burst_within_debounce_yields_one_snapshot_of_latest() {
    let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut t = SnapshotTracker::new(every_change(200), ["a.kt"]);
    assert!(t.start(&fs, 0).is_empty()); // file absent at start

    fs.insert("a.kt".into(), b"one".to_vec());
    assert!(t.on_change("a.kt", &fs, 1000).is_empty());
    fs.insert("a.kt".into(), b"two".to_vec());
    assert!(t.on_change("a.kt", &fs, 1050).is_empty());
    assert!(t.poll(&fs, 1200).is_empty());
    let snaps = t.poll(&fs, 1250);
    assert_eq!(snaps.len(), 1);
    assert_eq!(snaps[0].content, "two");
    assert_eq!(snaps[0].timestamp, 1250);
    assert!(t.poll(&fs, 5000).is_empty());
}

#[test]
fn unchanged_digest_records_nothing() {
    let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    fs.insert("a.kt".into(), b"same".to_vec());
    for policy in [every_change(0), TrackingPolicy { trigger: SnapshotTrigger::OnSave, content_mode: ContentMode::Full }] {
        let mut t = SnapshotTracker::new(policy, ["a.kt"]);
        assert_eq!(t.start(&fs, 0).len(), 1);
        let mut out = t.on_change("a.kt", &fs, 10);
        out.extend(t.poll(&fs, 10));
        out.extend(t.finish(&fs, 20));
        assert!(out.is_empty());
    }
}

#[test]
fn untracked_sibling_is_ignored() {
    let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    fs.insert("notes/private.txt".into(), b"secret".to_vec());
    let mut t = SnapshotTracker::new(every_change(0), ["src/a.kt"]);
    let mut out = t.start(&fs, 0);
    out.extend(t.on_change("notes/private.txt", &fs, 5));
    out.extend(t.poll(&fs, 100));
    out.extend(t.finish(&fs, 200));
    assert!(out.is_empty());
}

#[test]
fn on_save_snapshots_immediately() {
    let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let policy = TrackingPolicy { trigger: SnapshotTrigger::OnSave, content_mode: ContentMode::Full };
    let mut t = SnapshotTracker::new(policy, ["a.py"]);
    fs.insert("a.py".into(), b"x = 1".to_vec());
    let out = t.on_change("a.py", &fs, 7);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].timestamp, 7);
}

#[test]
fn interval_samples_dirty_files_on_ticks() {
    let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    fs.insert("a.kt".into(), b"v0".to_vec());
    let policy = TrackingPolicy { trigger: SnapshotTrigger::Interval { seconds: 2 }, content_mode: ContentMode::Full };
    let mut t = SnapshotTracker::new(policy, ["a.kt"]);
    assert_eq!(t.start(&fs, 0).len(), 1);
    fs.insert("a.kt".into(), b"v1".to_vec());
    t.on_change("a.kt", &fs, 500);
    fs.insert("a.kt".into(), b"v2".to_vec());
    t.on_change("a.kt", &fs, 900);
    assert!(t.poll(&fs, 1999).is_empty());
    let out = t.poll(&fs, 2000);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].content, "v2");
    assert_eq!(t.next_deadline(), Some(4000));
}

#[test]
fn signatures_mode_keeps_full_digest() {
    let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let src = b"fun main() {\n    println(1)\n}\nfun helper(x: Int) {}\n".to_vec();
    fs.insert("Main.kt".into(), src.clone());
    let policy = TrackingPolicy { trigger: SnapshotTrigger::OnSave, content_mode: ContentMode::SignaturesOnly };
    let mut t = SnapshotTracker::new(policy, ["Main.kt"]);
    let out = t.start(&fs, 0);
    assert_eq!(out[0].content, "fun main()\nfun helper(x: Int)");
    assert_eq!(out[0].content_digest, content_digest(&src));
    assert_eq!(out[0].mode, ContentMode::SignaturesOnly);
}

fn activity(id: &str, category: ActivityCategory, ts: i64) -> ActivityRecord {
    ActivityRecord { seq: 0, timestamp: ts, category, event_id: id.into(), detail: BTreeMap::new() }
}

fn recorder(policy: ActivityPolicy) -> Recorder<MemorySink> {
    let mut r = Recorder::new(MemorySink::default(), policy, BTreeSet::from(["a.kt".to_string()]));
    r.grant_consent();
    r
}

#[test]
fn excluded_event_is_filtered() {
    let policy = ActivityPolicy { excluded: BTreeSet::from(["EditorCopy".to_string()]), ..Default::default() };
    let mut r = recorder(policy);
    assert_eq!(
        r.record_activity(activity("EditorCopy", ActivityCategory::Action, 0)).unwrap(),
        Outcome::Filtered(FilterReason::Excluded)
    );
}

#[test]
fn throttle_within_min_interval() {
    let policy = ActivityPolicy {
        min_interval_ms: [(ActivityCategory::Hotkey, 1000)].into(),
        ..Default::default()
    };
    let mut r = recorder(policy);
    assert_eq!(r.record_activity(activity("Undo", ActivityCategory::Hotkey, 100)).unwrap(), Outcome::Accepted(1));
    assert_eq!(
        r.record_activity(activity("Undo", ActivityCategory::Hotkey, 500)).unwrap(),
        Outcome::Filtered(FilterReason::Throttled)
    );
    // different id or category is not throttled
    assert_eq!(r.record_activity(activity("Redo", ActivityCategory::Hotkey, 500)).unwrap(), Outcome::Accepted(2));
    assert_eq!(r.record_activity(activity("Undo", ActivityCategory::Action, 500)).unwrap(), Outcome::Accepted(3));
    // window measured from the last accepted one
    assert_eq!(r.record_activity(activity("Undo", ActivityCategory::Hotkey, 1100)).unwrap(), Outcome::Accepted(4));
}

#[test]
fn simultaneous_distinct_events_get_serial_seq() {
    let mut r = recorder(ActivityPolicy::default());
    let mut oracle = 0u64;
    for id in ["Run", "Copy", "Paste"] {
        oracle += 1;
        assert_eq!(r.record_activity(activity(id, ActivityCategory::Action, 42)).unwrap(), Outcome::Accepted(oracle));
    }
}

#[test]
fn nothing_recorded_before_consent() {
    let mut r = Recorder::new(MemorySink::default(), ActivityPolicy::default(), BTreeSet::new());
    assert_eq!(
        r.record_activity(activity("Run", ActivityCategory::Run, 0)).unwrap(),
        Outcome::Filtered(FilterReason::NoConsent)
    );
    assert!(r.sink().records.is_empty());
}

#[test]
fn focus_on_untracked_file_is_filtered() {
    let mut r = recorder(ActivityPolicy::default());
    let rec = TrackedRecord::Focus(FocusRecord { seq: 0, timestamp: 0, file: "secret.txt".into(), kind: FocusKind::Focus });
    assert_eq!(r.record(rec).unwrap(), Outcome::Filtered(FilterReason::Untracked));
}

#[test]
fn adapter_event_category_validation() {
    let ev: AdapterEvent = serde_json::from_str(r#"{"type":"activity","category":"mouse","event-id":"click"}"#).unwrap();
    assert!(matches!(ev.into_record(0), Err(AdapterError::UnknownCategory(_))));
    let ev: AdapterEvent = serde_json::from_str(r#"{"type":"focus","file":"./src/a.kt","kind":"focus"}"#).unwrap();
    let r = ev.into_record(9).unwrap();
    assert_eq!(r.file(), Some("src/a.kt"));
    assert_eq!(r.timestamp(), 9);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone)]
    enum Step {
        Write { file: usize, text: String, gap: i64 },
        Idle(i64),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            4 => (0usize..3, "[a-c]{0,6}", 0i64..400).prop_map(|(file, text, gap)| Step::Write { file, text, gap }),
            1 => (0i64..2000).prop_map(Step::Idle),
        ]
    }

    proptest! {
        #[test]
        fn replay_matches_disk_and_spacing_holds(steps in proptest::collection::vec(step(), 0..40), d in 0u64..500) {
            let files = ["a.kt", "b.kt", "c.kt"];
            let mut fs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
            let mut t = SnapshotTracker::new(every_change(d), files);
            let mut now = 0i64;
            let mut out = t.start(&fs, now);
            for s in steps {
                match s {
                    Step::Write { file, text, gap } => {
                        now += gap;
                        out.extend(t.poll(&fs, now));
                        fs.insert(files[file].into(), text.into_bytes());
                        out.extend(t.on_change(files[file], &fs, now));
                    }
                    Step::Idle(gap) => {
                        now += gap;
                        out.extend(t.poll(&fs, now));
                    }
                }
            }
            now += d as i64 * super::tracker::MAX_WAIT_FACTOR + 1;
            out.extend(t.poll(&fs, now));
            out.extend(t.finish(&fs, now));

            let mut last: BTreeMap<&str, (i64, String)> = BTreeMap::new();
            for snap in &out {
                if let Some((prev, _)) = last.get(snap.file.as_str()) {
                    prop_assert!(snap.timestamp - prev >= d as i64);
                }
                last.insert(snap.file.as_str(), (snap.timestamp, snap.content.clone()));
            }
            for f in files {
                let disk = fs.get(f).map(|b| content_digest(b));
                let replayed = last.get(f).map(|(_, c)| content_digest(c.as_bytes()));
                prop_assert_eq!(disk, replayed);
            }
        }
    }
}

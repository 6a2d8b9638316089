//! Acceptance suite: one PASS/FAIL line per criterion, with its time limit.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracelab_cli::simulate::{simulate, tree_digest, Profile};
use tracelab_cli::{find_workspaces, study_from_journals, summary_of};
use tracelab_client::daemon::{self, state_dir, Daemon, DaemonOptions, JOURNAL_DIR};
use tracelab_client::sync::{Backoff, FaultPlan, FaultyTransport, HttpTransport};
use tracelab_core::capture::{DirSource, SnapshotTracker};
use tracelab_core::config::{
    parse_documents, parse_study_config, ScenarioStep, SnapshotTrigger, StudyConfig, StudyDocuments,
    TrackingPolicy,
};
use tracelab_core::journal::{encode_fields, read_journal, Journal};
use tracelab_core::progsnap2::{convert, validate_bundle, write_bundle, Bundle};
use tracelab_core::record::{
    content_digest, ActivityCategory, ContentMode, ActivityRecord, AnswerValue, FocusKind, FocusRecord, SnapshotRecord,
    SurveyResponseRecord, ToolWindowKind, ToolWindowRecord, TrackedRecord,
};
use tracelab_core::scenario::{analytic_path_count, minimal_answers, ScenarioState, StepAction};
use tracelab_core::stats::{focus_intervals, summary_counts, top_n, FocusAnomalies, FocusInterval};
use tracelab_server::store::table_name;
use tracelab_server::{AppState, Repository, SqliteStore};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn course_dir() -> PathBuf {
    root().join("fixtures/studies/refactoring-course")
}

fn course() -> StudyConfig {
    parse_study_config(&course_dir()).expect("fixture study parses")
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn config_suite() -> Outcome {
    let dir = root().join("fixtures/configs");
    let mut cases: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("expected.txt").is_file())
        .collect();
    cases.sort();
    ensure!(cases.len() >= 20, "only {} fixture configs", cases.len());
    let (mut valid, mut invalid) = (0, 0);
    for case in &cases {
        let expected = std::fs::read_to_string(case.join("expected.txt")).map_err(|e| e.to_string())?;
        let out = Command::new(env!("CARGO_BIN_EXE_tracelab"))
            .arg("validate")
            .arg("--config")
            .arg(case)
            .output()
            .map_err(|e| e.to_string())?;
        let actual = format!("exit: {}\n{}", out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout));
        ensure!(
            actual.trim_end() == expected.trim_end(),
            "{}: expected\n{expected}\ngot\n{actual}",
            case.display()
        );
        if out.status.success() {
            valid += 1;
        } else {
            invalid += 1;
        }
    }
    let usage = Command::new(env!("CARGO_BIN_EXE_tracelab"))
        .arg("validate")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(usage.status.code() == Some(2), "usage error exited {:?}", usage.status.code());

    let steps = &course().scenario.steps;
    let t = |s: &str| s.to_owned();
    ensure!(
        *steps
            == vec![
                ScenarioStep::Task(t("isEvenNumberProblem")),
                ScenarioStep::Group(vec![t("sumOfDigitsProblem"), t("reverseWordsProblem")]),
                ScenarioStep::Choice(vec![t("fizzBuzzProblem"), t("palindromeProblem")]),
                ScenarioStep::Survey(t("finalSurvey")),
            ],
        "course scenario parsed to {steps:?}"
    );
    let plan = tracelab_cli::plan(&course());
    ensure!(plan.len() == 5, "plan has {} entries", plan.len());
    Ok(format!("{} fixtures ({valid} valid, {invalid} invalid), 5-entry plan", cases.len()))
}

fn scenario_docs(steps: &[ScenarioStep]) -> Option<StudyConfig> {
    let mut scenario = String::from("steps:\n");
    let mut tasks = String::from("tasks:\n");
    let mut surveys = String::from("surveys:\n");
    let mut n_surveys = 0;
    for s in steps {
        match s {
            ScenarioStep::Task(id) => scenario.push_str(&format!("  - task: {id}\n")),
            ScenarioStep::Group(ids) => scenario.push_str(&format!("  - group: [{}]\n", ids.join(", "))),
            ScenarioStep::Choice(ids) => scenario.push_str(&format!("  - choice: [{}]\n", ids.join(", "))),
            ScenarioStep::Survey(id) => {
                scenario.push_str(&format!("  - survey: {id}\n"));
                n_surveys += 1;
                surveys.push_str(&format!(
                    "  - id: {id}\n    questions:\n      - id: q\n        kind: single-choice\n        text: Q\n        required: true\n        options: [a, b]\n"
                ));
            }
            ScenarioStep::Info(text) => scenario.push_str(&format!("  - info: {text}\n")),
        }
        for id in s.task_ids() {
            tasks.push_str(&format!("  - id: {id}\n    files:\n      - relative-path: {id}.kt\n"));
        }
    }
    let docs = StudyDocuments {
        scenario: Some(scenario.into_bytes()),
        tasks: Some(tasks.into_bytes()),
        surveys: (n_surveys > 0).then(|| surveys.into_bytes()),
        tracking: Some(b"trigger: on-save\n".to_vec()),
        research: Some(b"title: Oracle\nconsent-url: https://example.org\nserver-url: http://127.0.0.1:1\n".to_vec()),
        ..StudyDocuments::default()
    };
    parse_documents(&docs).ok()
}

fn dfs_paths(state: &ScenarioState, config: &StudyConfig) -> u128 {
    if state.finished {
        return 1;
    }
    let mut n = 0;
    for action in state.available_actions(config) {
        let action = match action {
            StepAction::Pause | StepAction::Submit => continue,
            StepAction::AnswerSurvey { .. } => {
                let Some(ScenarioStep::Survey(id)) = state.current_step(config) else {
                    unreachable!()
                };
                StepAction::AnswerSurvey {
                    answers: minimal_answers(&config.surveys[id]),
                }
            }
            other => other,
        };
        let next = state.advance(&action, config, 0).expect("offered action is legal");
        n += dfs_paths(&next, config);
    }
    n
}

fn count_from_start(config: &StudyConfig) -> u128 {
    let s = ScenarioState::init(config)
        .advance(&StepAction::GrantConsent, config, 0)
        .expect("consent is legal first");
    dfs_paths(&s, config)
}

fn scenario_oracle() -> Outcome {
    let paths = count_from_start(&course());
    ensure!(paths == 4, "course scenario has {paths} paths");

    let mut rng = ChaCha8Rng::seed_from_u64(0x5ce);
    let mut checked = 0;
    let mut max_paths = 0;
    for case in 0..400 {
        let mut next_id = 0;
        let mut fresh = || {
            next_id += 1;
            format!("t{next_id}")
        };
        let steps: Vec<ScenarioStep> = (0..rng.random_range(1..=4))
            .map(|i| match rng.random_range(0..5) {
                0 => ScenarioStep::Task(fresh()),
                1 => ScenarioStep::Group((0..rng.random_range(1..=3)).map(|_| fresh()).collect()),
                2 => ScenarioStep::Choice((0..rng.random_range(2..=3)).map(|_| fresh()).collect()),
                3 => ScenarioStep::Survey(format!("s{case}x{i}")),
                _ => ScenarioStep::Info(format!("page {i}")),
            })
            .collect();
        let config = scenario_docs(&steps).ok_or_else(|| format!("generated scenario {steps:?} failed to parse"))?;
        let dfs = count_from_start(&config);
        let analytic = analytic_path_count(&config.scenario.steps);
        ensure!(dfs == analytic, "{steps:?}: dfs {dfs} != analytic {analytic}");
        max_paths = max_paths.max(dfs);
        checked += 1;
    }
    Ok(format!("course = 4 paths; {checked} generated scenarios agree (up to {max_paths} paths)"))
}

fn capture_replay() -> Outcome {
    let policies = [
        ("every-change 200ms", SnapshotTrigger::EveryChange { debounce_ms: 200 }, ContentMode::Full),
        ("every-change 0ms", SnapshotTrigger::EveryChange { debounce_ms: 0 }, ContentMode::Full),
        ("every-change 50ms signatures", SnapshotTrigger::EveryChange { debounce_ms: 50 }, ContentMode::SignaturesOnly),
        ("on-save", SnapshotTrigger::OnSave, ContentMode::Full),
        ("interval 1s", SnapshotTrigger::Interval { seconds: 1 }, ContentMode::Full),
    ];
    let tracked = ["a.kt", "src/b.kt", "src/deep/c.kt"];
    let untracked = ["notes.txt", "src/d.kt"];
    let all: Vec<&str> = tracked.iter().chain(untracked.iter()).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xca97);
    let mut snapshots = 0usize;
    for (name, trigger, mode) in policies {
        let spacing = match trigger {
            SnapshotTrigger::EveryChange { debounce_ms } => debounce_ms as i64,
            SnapshotTrigger::Interval { seconds } => seconds as i64 * 1000,
            SnapshotTrigger::OnSave => 0,
        };
        for script in 0..1000 {
            let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
            std::fs::create_dir_all(ws.path().join("src/deep")).map_err(|e| e.to_string())?;
            let source = DirSource {
                root: ws.path().to_path_buf(),
            };
            let policy = TrackingPolicy {
                trigger,
                content_mode: mode,
            };
            let mut tracker = SnapshotTracker::new(policy, tracked);
            let mut now = 1_000i64;
            let mut out: Vec<SnapshotRecord> = tracker.start(&source, now);
            for _ in 0..rng.random_range(0..30) {
                now += rng.random_range(0..600);
                out.extend(tracker.poll(&source, now));
                if rng.random_bool(0.8) {
                    let file = *all.choose(&mut rng).expect("non-empty");
                    let body = match rng.random_range(0..4) {
                        0 => String::new(),
                        1 => format!("fun f{}(x: Int) = x\n", rng.random_range(0..5)),
                        2 => format!("fun g() {{}}\n// {}\n", rng.random_range(0..3)),
                        _ => "class A {\n  fun m(a: Int, b: String) {}\n}\n".to_owned(),
                    };
                    std::fs::write(ws.path().join(file), body).map_err(|e| e.to_string())?;
                    out.extend(tracker.on_change(file, &source, now));
                }
            }
            now += spacing * 10 + 1_001;
            out.extend(tracker.poll(&source, now));
            out.extend(tracker.finish(&source, now));

            let mut last: BTreeMap<&str, (i64, &str)> = BTreeMap::new();
            for s in &out {
                ensure!(
                    tracked.contains(&s.file.as_str()),
                    "{name} script {script}: snapshot of untracked {}",
                    s.file
                );
                if let Some((prev, _)) = last.get(s.file.as_str()) {
                    ensure!(
                        s.timestamp - prev >= spacing,
                        "{name} script {script}: {} snapshots {} ms apart",
                        s.file,
                        s.timestamp - prev
                    );
                }
                last.insert(&s.file, (s.timestamp, &s.content_digest));
            }
            for f in tracked {
                let disk = std::fs::read(ws.path().join(f)).ok().map(|b| content_digest(&b));
                let replay = last.get(f).map(|(_, d)| d.to_string());
                ensure!(disk == replay, "{name} script {script}: {f} replay {replay:?} != disk {disk:?}");
            }
            snapshots += out.len();
        }
    }
    Ok(format!("5 policies x 1000 scripts, {snapshots} snapshots checked"))
}

fn random_record(rng: &mut ChaCha8Rng, i: u64) -> TrackedRecord {
    let texts = ["plain", "a,b", "quote \"x\"", "line\nbreak", "crlf\r\nend", "ünï中", "", "trailing,"];
    let text = texts.choose(rng).expect("non-empty").to_string();
    match rng.random_range(0..5) {
        0 => TrackedRecord::Snapshot(tracelab_core::capture::make_snapshot(
            "src/Main.kt",
            format!("{text}{i}").as_bytes(),
            ContentMode::Full,
            i as i64,
        )),
        1 => TrackedRecord::Activity(ActivityRecord {
            seq: 0,
            timestamp: i as i64,
            category: *ActivityCategory::ALL.choose(rng).expect("non-empty"),
            event_id: format!("ev{}", rng.random_range(0..4)),
            detail: BTreeMap::from([("k".to_owned(), text)]),
        }),
        2 => TrackedRecord::Focus(FocusRecord {
            seq: 0,
            timestamp: i as i64,
            file: "src/Main.kt".into(),
            kind: FocusKind::Focus,
        }),
        3 => TrackedRecord::ToolWindow(ToolWindowRecord {
            seq: 0,
            timestamp: i as i64,
            window_id: "Run".into(),
            kind: ToolWindowKind::Opened,
        }),
        _ => TrackedRecord::Survey(SurveyResponseRecord {
            seq: 0,
            timestamp: i as i64,
            survey_id: "s".into(),
            answers: BTreeMap::from([("q".to_owned(), AnswerValue::Text(text))]),
        }),
    }
}

fn crash_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4a5);
    let kill_points = 240;
    let mut kinds = [0usize; 3];
    for point in 0..kill_points {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut acked: Vec<TrackedRecord> = Vec::new();
        let mut flushed = 0u64;
        let reopen_every = rng.random_range(5..40);
        let ops = rng.random_range(1..60);
        let mut j = Journal::open(dir.path()).map_err(|e| e.to_string())?;
        for op in 0..ops {
            if op % reopen_every == reopen_every - 1 {
                drop(j);
                j = Journal::open(dir.path()).map_err(|e| e.to_string())?;
            }
            if rng.random_bool(0.2) && j.last_seq() > flushed {
                let upto = rng.random_range(flushed + 1..=j.last_seq());
                j.mark_flushed(upto).map_err(|e| e.to_string())?;
                flushed = upto;
            } else {
                let mut r = random_record(&mut rng, op as u64);
                let seq = j.append(r.clone()).map_err(|e| e.to_string())?;
                r.set_seq(seq);
                acked.push(r);
            }
        }
        // the kill
        let kind = point % 3;
        kinds[kind] += 1;
        match kind {
            0 => drop(j),
            1 => {
                // torn append: the victim never returned, so it is not acked
                let victim = random_record(&mut rng, 9_999);
                let path = dir.path().join(tracelab_core::journal::file_name(victim.kind()));
                let before = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
                j.append(victim).map_err(|e| e.to_string())?;
                drop(j);
                let after = std::fs::metadata(&path).map_err(|e| e.to_string())?.len();
                let cut = before + rng.random_range(0..after - before);
                std::fs::OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .and_then(|f| f.set_len(cut))
                    .map_err(|e| e.to_string())?;
            }
            _ => {
                // interrupted mark: the temporary watermark is half written
                drop(j);
                std::fs::write(dir.path().join("watermark.tmp"), b"12").map_err(|e| e.to_string())?;
            }
        }

        let mut j = Journal::open(dir.path()).map_err(|e| e.to_string())?;
        let all = j.read_all().map_err(|e| e.to_string())?;
        ensure!(all.corrupt.is_empty(), "kill point {point}: corrupt rows {:?}", all.corrupt);
        ensure!(all.records == acked, "kill point {point}: acked records lost or altered");
        let pending = j.read_pending().map_err(|e| e.to_string())?.records;
        ensure!(
            pending.iter().all(|r| r.seq() > flushed),
            "kill point {point}: flushed record resurrected"
        );
        let expect: Vec<_> = acked.iter().filter(|r| r.seq() > flushed).cloned().collect();
        ensure!(pending == expect, "kill point {point}: pending set differs");
        let max_seq = acked.iter().map(TrackedRecord::seq).max().unwrap_or(0).max(flushed);
        let next = j.append(random_record(&mut rng, 0)).map_err(|e| e.to_string())?;
        ensure!(next > max_seq, "kill point {point}: seq {next} reused");
    }
    Ok(format!(
        "{kill_points} kill points ({} clean, {} torn appends, {} interrupted marks)",
        kinds[0], kinds[1], kinds[2]
    ))
}

type SessionRows = BTreeMap<String, Vec<Vec<String>>>;

fn journal_rows(ws: &Path) -> Result<SessionRows, String> {
    let out = read_journal(&state_dir(ws).join(JOURNAL_DIR)).map_err(|e| e.to_string())?;
    let mut rows: SessionRows = BTreeMap::new();
    for r in &out.records {
        rows.entry(table_name(r.kind()).to_owned()).or_default().push(encode_fields(r));
    }
    rows.values_mut().for_each(|v| v.sort());
    Ok(rows)
}

fn server_rows(store: &SqliteStore) -> Result<Vec<SessionRows>, String> {
    let dump = store.dump_category_tables().map_err(|e| e.to_string())?;
    let mut by_session: BTreeMap<String, SessionRows> = BTreeMap::new();
    for (table, rows) in dump {
        if table == "quarantine" || table == "attachments" {
            continue;
        }
        for row in rows {
            by_session
                .entry(row[0].clone())
                .or_default()
                .entry(table.clone())
                .or_default()
                .push(row[2..].to_vec());
        }
    }
    let mut out: Vec<SessionRows> = by_session.into_values().collect();
    for s in &mut out {
        s.values_mut().for_each(|v| v.sort());
    }
    out.sort();
    Ok(out)
}

async fn flush_until_acked(client: &reqwest::Client, base: &str) -> Result<u32, String> {
    for attempt in 1..=60 {
        let resp = client
            .post(format!("{base}/v1/flush"))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            return Ok(attempt);
        }
    }
    Err(format!("{base}: flush never completed"))
}

async fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = course();
    let sessions = simulate(&config, &Profile::balanced(), &tmp.path().join("sim"), 10, 7).map_err(|e| e.to_string())?;

    let store = Arc::new(SqliteStore::open_data_dir(&tmp.path().join("data")).map_err(|e| e.to_string())?);
    let state = AppState {
        repo: store.clone(),
        admin_token: None,
        backup_root: tmp.path().join("backups"),
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let server = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
    tokio::spawn(tracelab_server::serve(listener, state, std::future::pending()));

    let plan = FaultPlan {
        drop_request: 0.2,
        lose_ack: 0.25,
        duplicate: 0.25,
        max_delay: Duration::from_millis(15),
    };
    let client = reqwest::Client::new();
    let mut faults = 0;
    let mut flush_calls = 0;
    let mut expected = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let transport = Arc::new(FaultyTransport::new(HttpTransport::new(&server), plan, 7 + i as u64));
        let mut opts = DaemonOptions::new(&s.workspace, config.clone());
        opts.force_polling = true;
        opts.sync.backoff = Backoff {
            base: Duration::from_millis(1),
            factor: 2,
            cap: Duration::from_millis(8),
            max_attempts: 4,
        };
        opts.sync.jitter_seed = Some(i as u64);
        opts.sync.max_batch_records = 40;
        let d = Daemon::start(opts, transport.clone()).map_err(|e| e.to_string())?;
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        let (stop, rx) = tokio::sync::oneshot::channel::<()>();
        let task = tokio::spawn(daemon::serve(listener, d.clone(), async {
            let _ = rx.await;
        }));
        flush_calls += flush_until_acked(&client, &base).await?;
        let _ = stop.send(());
        task.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
        faults += transport.injected().len();
        let j = Journal::open(&state_dir(&s.workspace).join(JOURNAL_DIR)).map_err(|e| e.to_string())?;
        ensure!(
            j.watermark() == j.last_seq(),
            "{}: watermark {} behind last seq {}",
            s.name,
            j.watermark(),
            j.last_seq()
        );
        expected.push(journal_rows(&s.workspace)?);
    }
    expected.sort();
    let actual = server_rows(&store)?;
    ensure!(faults > 0, "no faults were injected");
    ensure!(actual.len() == 10, "server holds {} sessions", actual.len());
    ensure!(actual == expected, "server tables differ from the journals");
    let records: usize = expected.iter().flat_map(|s| s.values()).map(Vec::len).sum();

    // the ingested study converts to a valid bundle
    let study = store.study_input(config.research_id()).map_err(|e| e.to_string())?;
    let (bundle, _) = convert(&study);
    let violations = validate_bundle(&bundle);
    ensure!(violations.is_empty(), "bundle from the server: {violations:?}");
    Ok(format!(
        "10 sessions, {records} records exactly once; {faults} injected faults over {flush_calls} flush calls"
    ))
}

fn bundle_digest(bundle: &Bundle, dir: &Path) -> Result<String, String> {
    write_bundle(bundle, dir).map_err(|e| e.to_string())?;
    tree_digest(dir).map_err(|e| e.to_string())
}

fn progsnap2_conformance() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = course();
    simulate(&config, &Profile::balanced(), &tmp.path().join("sim"), 6, 11).map_err(|e| e.to_string())?;
    let ws = find_workspaces(&tmp.path().join("sim")).map_err(|e| e.to_string())?;
    let study = study_from_journals(config.research_id(), &ws).map_err(|e| e.to_string())?;
    let (bundle, report) = convert(&study);
    let v = validate_bundle(&bundle);
    ensure!(v.is_empty(), "violations: {v:?}");

    let (again, _) = convert(&study_from_journals(config.research_id(), &ws).map_err(|e| e.to_string())?);
    let a = bundle_digest(&bundle, &tmp.path().join("a"))?;
    let b = bundle_digest(&again, &tmp.path().join("b"))?;
    ensure!(a == b, "re-conversion differs");

    // File.Edit rows replayed against the journals
    let col = |n: &str| bundle.main.column(n).expect("column present");
    let (id_c, ty_c, cs_c, sess_c) = (col("EventID"), col("EventType"), col("CodeStateID"), col("SessionID"));
    let mut by_event: HashMap<String, &TrackedRecord> = HashMap::new();
    for s in &study.sessions {
        for r in &s.records {
            by_event.insert(format!("{}-{}", s.session_id, r.seq()), r);
        }
    }
    let mut trees: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut edits = 0;
    for row in &bundle.main.rows {
        if row[ty_c] != "File.Edit" {
            continue;
        }
        let Some(TrackedRecord::Snapshot(s)) = by_event.get(&row[id_c]) else {
            return Err(format!("File.Edit row {} has no snapshot", row[id_c]));
        };
        let tree = trees.entry(row[sess_c].clone()).or_default();
        tree.insert(s.file.clone(), s.content.clone());
        ensure!(
            bundle.code_states.get(&row[cs_c]) == Some(tree),
            "code state {} differs from journal replay",
            row[cs_c]
        );
        edits += 1;
    }
    for w in &ws {
        let name = w.file_name().expect("named").to_string_lossy().into_owned();
        for (file, content) in &trees[&name] {
            let disk = std::fs::read_to_string(w.join(file)).map_err(|e| e.to_string())?;
            ensure!(&disk == content, "{name}: final {file} differs from replay");
        }
    }

    type Fault = fn(&mut Bundle);
    let faults: [(&str, Fault); 7] = [
        ("swapped order", |b| {
            let c = b.main.column("Order").unwrap();
            let (x, y) = (b.main.rows[1][c].clone(), b.main.rows[2][c].clone());
            b.main.rows[1][c] = y;
            b.main.rows[2][c] = x;
        }),
        ("dangling code state", |b| {
            let c = b.main.column("CodeStateID").unwrap();
            b.main.rows[3][c] = "no-such-state".into();
        }),
        ("missing metadata", |b| b.metadata.rows.retain(|r| r[0] != "CodeStateRepresentation")),
        ("duplicate event id", |b| {
            let c = b.main.column("EventID").unwrap();
            b.main.rows[5][c] = b.main.rows[4][c].clone();
        }),
        ("bad timestamp", |b| {
            let c = b.main.column("ClientTimestamp").unwrap();
            b.main.rows[6][c] = "yesterday".into();
        }),
        ("blank subject", |b| {
            let c = b.main.column("SubjectID").unwrap();
            b.main.rows[7][c].clear();
        }),
        ("dropped column", |b| {
            let c = b.main.column("ToolInstances").unwrap();
            b.main.header.remove(c);
            b.main.rows.iter_mut().for_each(|r| {
                r.remove(c);
            });
        }),
    ];
    for (name, fault) in faults {
        let mut broken = bundle.clone();
        fault(&mut broken);
        let v = validate_bundle(&broken);
        ensure!(v.len() == 1, "{name}: {} violations {v:?}", v.len());
    }
    Ok(format!(
        "{} events, {} code states, {edits} edits replayed, 7 single faults caught once each",
        report.rows, report.code_states
    ))
}

fn synthetic_stream(rng: &mut ChaCha8Rng, n: usize) -> Vec<(String, TrackedRecord)> {
    (0..n)
        .map(|i| {
            let who = format!("p{}", rng.random_range(0..7));
            let r = match rng.random_range(0..10) {
                0..=5 => TrackedRecord::Activity(ActivityRecord {
                    seq: i as u64 + 1,
                    timestamp: i as i64,
                    category: *ActivityCategory::ALL.choose(rng).expect("non-empty"),
                    event_id: format!("e{}", rng.random_range(0..40)),
                    detail: BTreeMap::new(),
                }),
                6 | 7 => TrackedRecord::Snapshot(tracelab_core::capture::make_snapshot(
                    "a.kt",
                    b"x",
                    ContentMode::Full,
                    i as i64,
                )),
                8 => TrackedRecord::Focus(FocusRecord {
                    seq: i as u64 + 1,
                    timestamp: i as i64,
                    file: "a.kt".into(),
                    kind: FocusKind::Focus,
                }),
                _ => TrackedRecord::ToolWindow(ToolWindowRecord {
                    seq: i as u64 + 1,
                    timestamp: i as i64,
                    window_id: "Run".into(),
                    kind: ToolWindowKind::Opened,
                }),
            };
            (who, r)
        })
        .collect()
}

fn brute_top(records: &[(String, TrackedRecord)], category: ActivityCategory, n: usize) -> Vec<(String, u64)> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for (_, r) in records {
        if let TrackedRecord::Activity(a) = r {
            if a.category == category {
                *counts.entry(&a.event_id).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(String, u64)> = counts.into_iter().map(|(k, c)| (k.to_owned(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(n);
    v
}

fn focus(ts: i64, file: &str, kind: FocusKind) -> FocusRecord {
    FocusRecord {
        seq: 0,
        timestamp: ts,
        file: file.into(),
        kind,
    }
}

fn interval(file: &str, start: i64, end: i64) -> FocusInterval {
    FocusInterval {
        file: file.into(),
        start,
        end,
    }
}

fn stats_oracles() -> Outcome {
    use FocusKind::*;
    let mut rng = ChaCha8Rng::seed_from_u64(0x57a75);
    let datasets = 20;
    for d in 0..datasets {
        let stream = synthetic_stream(&mut rng, 10_000);
        for category in ActivityCategory::ALL {
            for n in [1, 5, 15, 1000] {
                let got: Vec<(String, u64)> = top_n(stream.iter().map(|(_, r)| r), category, n)
                    .into_iter()
                    .map(|e| (e.event_id, e.count))
                    .collect();
                ensure!(got == brute_top(&stream, category, n), "dataset {d} top-{n} {category} differs");
            }
        }
        let c = summary_counts(stream.iter().map(|(p, r)| (p.as_str(), r)));
        let mut participants: Vec<&str> = stream.iter().map(|(p, _)| p.as_str()).collect();
        participants.sort();
        participants.dedup();
        let count = |f: &dyn Fn(&TrackedRecord) -> bool| stream.iter().filter(|(_, r)| f(r)).count() as u64;
        let cat = |cs: &'static [ActivityCategory]| {
            move |r: &TrackedRecord| matches!(r, TrackedRecord::Activity(a) if cs.contains(&a.category))
        };
        ensure!(c.participants == participants.len() as u64, "dataset {d}: participants");
        ensure!(c.snapshots == count(&|r| matches!(r, TrackedRecord::Snapshot(_))), "dataset {d}: snapshots");
        ensure!(c.activities == count(&|r| matches!(r, TrackedRecord::Activity(_))), "dataset {d}: activities");
        ensure!(c.actions == count(&cat(&[ActivityCategory::Action])), "dataset {d}: actions");
        ensure!(c.hotkeys == count(&cat(&[ActivityCategory::Hotkey])), "dataset {d}: hotkeys");
        ensure!(c.ui == count(&cat(&[ActivityCategory::Ui])), "dataset {d}: ui");
        ensure!(
            c.run_debug == count(&cat(&[ActivityCategory::Run, ActivityCategory::Debug])),
            "dataset {d}: run/debug"
        );
        ensure!(
            c.actions + c.run_debug + c.hotkeys + c.ui == c.activities,
            "dataset {d}: partition identity"
        );
    }

    let anomalies = |implicit_switches, unmatched_ends, open_at_end| FocusAnomalies {
        implicit_switches,
        unmatched_ends,
        open_at_end,
    };
    let fixtures: Vec<(Vec<FocusRecord>, Vec<FocusInterval>, FocusAnomalies)> = vec![
        (
            vec![focus(0, "a", Open), focus(0, "a", Focus), focus(10, "a", Unfocus)],
            vec![interval("a", 0, 10)],
            anomalies(0, 0, 0),
        ),
        (
            vec![focus(0, "a", Focus), focus(5, "b", Focus), focus(9, "b", Close)],
            vec![interval("a", 0, 5), interval("b", 5, 9)],
            anomalies(1, 0, 0),
        ),
        (
            vec![focus(3, "x", Unfocus), focus(4, "a", Focus), focus(6, "a", Close), focus(7, "a", Close)],
            vec![interval("a", 4, 6)],
            anomalies(0, 2, 0),
        ),
        (
            vec![focus(0, "a", Focus), focus(3, "a", Focus), focus(4, "b", Open), focus(8, "c", Unfocus)],
            vec![interval("a", 0, 8)],
            anomalies(0, 1, 1),
        ),
        (
            vec![focus(1, "a", Focus), focus(2, "b", Focus), focus(4, "a", Unfocus), focus(6, "c", Focus)],
            vec![interval("a", 1, 2), interval("b", 2, 6), interval("c", 6, 6)],
            anomalies(2, 1, 1),
        ),
    ];
    for (i, (records, intervals, expect)) in fixtures.iter().enumerate() {
        let report = focus_intervals(records.iter());
        ensure!(&report.intervals == intervals, "focus fixture {i}: intervals {:?}", report.intervals);
        ensure!(&report.anomalies == expect, "focus fixture {i}: anomalies {:?}", report.anomalies);
    }
    Ok(format!(
        "{datasets} streams of 10k records, top-n and counts match recounts, {} focus fixtures",
        fixtures.len()
    ))
}

fn scale_shape() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = course();
    simulate(&config, &Profile::course(), &tmp.path().join("sim"), 28, 2024).map_err(|e| e.to_string())?;
    let ws = find_workspaces(&tmp.path().join("sim")).map_err(|e| e.to_string())?;
    let study = study_from_journals(config.research_id(), &ws).map_err(|e| e.to_string())?;
    let c = summary_of(&study).counts;
    let line = format!(
        "{} participants: activities {} > snapshots {} > hotkeys {} > run/debug {}",
        c.participants, c.activities, c.snapshots, c.hotkeys, c.run_debug
    );
    ensure!(c.participants == 28, "{line}");
    ensure!(
        c.activities > c.snapshots && c.snapshots > c.hotkeys && c.hotkeys > c.run_debug && c.run_debug > 0,
        "ordering broken: {line}"
    );
    Ok(line)
}

fn report(name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (false, format!("over time limit; {d}")),
        Err(e) => (false, e),
    };
    let mut err = std::io::stdout().lock();
    let _ = writeln!(
        err,
        "{} {name} ({:.2}s, limit {}s): {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn main() {
    let secs = Duration::from_secs;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("runtime");
    let results = [
        report("config suite", secs(5), config_suite),
        report("scenario oracle", secs(10), scenario_oracle),
        report("capture replay", secs(60), capture_replay),
        report("crash safety", secs(60), crash_safety),
        report("end-to-end exactly-once", secs(120), || runtime.block_on(end_to_end())),
        report("progsnap2 conformance", secs(30), progsnap2_conformance),
        report("stats oracles", secs(10), stats_oracles),
        report("scale shape", secs(60), scale_shape),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    let _ = writeln!(std::io::stdout(), "acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

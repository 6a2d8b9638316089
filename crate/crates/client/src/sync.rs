//! Upload of journaled records to the ingestion server.
//!
//! Delivery is at least once: a batch is marked flushed in the journal only
//! after the server acknowledged every record in it, and retries reuse the
//! batch id so the server can discard repeats.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use tracelab_core::capture::Recorder;
use tracelab_core::config::resolve_within;
use tracelab_core::journal::{Journal, JournalError};
use tracelab_core::record::{content_digest, TrackedRecord};
use tracelab_core::scenario::Consent;
use tracelab_core::wire::{
    batches_path, Attachment, BatchAck, BatchBody, ErrorBody, RegisterRequest, RegisterResponse, SESSIONS_PATH,
};

pub const MAX_BATCH_RECORDS: usize = 5_000;
pub const MAX_BATCH_BYTES: usize = 5 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("server replied {status}: {}", body.message)]
    Rejected { status: u16, body: ErrorBody },
}

impl TransportError {
    /// Whether repeating the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Unreachable(_) => true,
            TransportError::Rejected { status, .. } => *status >= 500 || *status == 408 || *status == 429,
        }
    }
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn register(&self, req: &RegisterRequest) -> Result<RegisterResponse, TransportError>;

    /// Post a gzip-compressed batch body.
    async fn send_batch(&self, token: &str, gzip_body: Vec<u8>) -> Result<BatchAck, TransportError>;
}

/// [`Transport`] over plain HTTP.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    base: String,
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new(base_url: &str) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("static client configuration");
        HttpTransport {
            base: base_url.trim_end_matches('/').to_owned(),
            client,
        }
    }

    async fn read<T: for<'de> Deserialize<'de>>(resp: reqwest::Response) -> Result<T, TransportError> {
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        if status.is_success() {
            serde_json::from_slice(&bytes).map_err(|e| TransportError::Rejected {
                status: status.as_u16(),
                body: ErrorBody {
                    error: "bad-response".into(),
                    message: e.to_string(),
                },
            })
        } else {
            let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
                error: "http".into(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
            });
            Err(TransportError::Rejected {
                status: status.as_u16(),
                body,
            })
        }
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn register(&self, req: &RegisterRequest) -> Result<RegisterResponse, TransportError> {
        let resp = self
            .client
            .post(format!("{}{SESSIONS_PATH}", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(serde_json::to_vec(req).expect("request serializes"))
            .send()
            .await
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        Self::read(resp).await
    }

    async fn send_batch(&self, token: &str, gzip_body: Vec<u8>) -> Result<BatchAck, TransportError> {
        let resp = self
            .client
            .post(format!("{}{}", self.base, batches_path(token)))
            .bearer_auth(token)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .header(reqwest::header::CONTENT_ENCODING, "gzip")
            .body(gzip_body)
            .send()
            .await
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        Self::read(resp).await
    }
}

/// Probabilities of injected network faults.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultPlan {
    /// The request never reaches the server.
    pub drop_request: f64,
    /// The server applies the request but the reply is lost.
    pub lose_ack: f64,
    /// The request is delivered twice; the second reply is returned.
    pub duplicate: f64,
    /// Upper bound of a random delay before each request.
    pub max_delay: Duration,
}

/// Wraps a transport and injects faults from a seeded generator.
pub struct FaultyTransport<T> {
    inner: T,
    plan: FaultPlan,
    rng: Mutex<StdRng>,
    log: Mutex<Vec<&'static str>>,
}

impl<T: Transport> FaultyTransport<T> {
    pub fn new(inner: T, plan: FaultPlan, seed: u64) -> Self {
        FaultyTransport {
            inner,
            plan,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Faults injected so far, in order.
    pub fn injected(&self) -> Vec<&'static str> {
        self.log.lock().unwrap().clone()
    }

    fn roll(&self, p: f64) -> bool {
        p > 0.0 && self.rng.lock().unwrap().random_bool(p.min(1.0))
    }

    async fn delay(&self) {
        if self.plan.max_delay.is_zero() {
            return;
        }
        let ms = self.plan.max_delay.as_millis() as u64;
        let d = self.rng.lock().unwrap().random_range(0..=ms);
        tokio::time::sleep(Duration::from_millis(d)).await;
    }

    fn note(&self, what: &'static str) {
        self.log.lock().unwrap().push(what);
    }
}

#[async_trait]
impl<T: Transport> Transport for FaultyTransport<T> {
    async fn register(&self, req: &RegisterRequest) -> Result<RegisterResponse, TransportError> {
        self.delay().await;
        if self.roll(self.plan.drop_request) {
            self.note("drop");
            return Err(TransportError::Unreachable("injected drop".into()));
        }
        self.inner.register(req).await
    }

    async fn send_batch(&self, token: &str, gzip_body: Vec<u8>) -> Result<BatchAck, TransportError> {
        self.delay().await;
        if self.roll(self.plan.drop_request) {
            self.note("drop");
            return Err(TransportError::Unreachable("injected drop".into()));
        }
        let mut ack = self.inner.send_batch(token, gzip_body.clone()).await;
        if self.roll(self.plan.duplicate) {
            self.note("duplicate");
            ack = self.inner.send_batch(token, gzip_body).await;
        }
        if self.roll(self.plan.lose_ack) {
            self.note("lost-ack");
            return Err(TransportError::Unreachable("injected lost ack".into()));
        }
        ack
    }
}

/// Exponential backoff with jitter.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    pub cap: Duration,
    /// Attempts per batch within one flush, the first included.
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_secs(1),
            factor: 2,
            cap: Duration::from_secs(60),
            max_attempts: 6,
        }
    }
}

impl Backoff {
    /// Upper bound of the wait after failed attempt `attempt` (0-based).
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let mult = self.factor.saturating_pow(attempt);
        self.base.saturating_mul(mult).min(self.cap)
    }

    /// Wait drawn uniformly from `[ceiling / 2, ceiling]`.
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let c = self.ceiling(attempt).as_millis() as u64;
        Duration::from_millis(rng.random_range(c / 2..=c))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushReport {
    /// Records in batches that reached the server and got a reply.
    pub sent: u64,
    /// Records covered by acknowledgements and marked flushed.
    pub acked: u64,
    /// Batches the server had already applied.
    pub duplicates: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("consent has not been granted")]
    ConsentMissing,
    #[error("server unreachable; records stay pending ({report:?})")]
    ServerUnreachable { report: FlushReport },
    #[error("batch {batch_id} rejected: {reason}")]
    Rejected {
        batch_id: String,
        reason: String,
        report: FlushReport,
    },
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("session file {path}: {message}")]
    SessionFile { path: PathBuf, message: String },
}

/// Registration state kept next to the journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFile {
    pub client_nonce: String,
    #[serde(default)]
    pub session_token: Option<String>,
}

impl SessionFile {
    fn fresh() -> Self {
        SessionFile {
            client_nonce: hex::encode(rand::random::<[u8; 16]>()),
            session_token: None,
        }
    }

    /// Load `path`, creating it with a new nonce when absent.
    pub fn load_or_create(path: &Path) -> Result<Self, SyncError> {
        let err = |message: String| SyncError::SessionFile {
            path: path.to_path_buf(),
            message,
        };
        match std::fs::read(path) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| err(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let s = Self::fresh();
                s.save(path)?;
                Ok(s)
            }
            Err(e) => Err(err(e.to_string())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), SyncError> {
        let err = |message: String| SyncError::SessionFile {
            path: path.to_path_buf(),
            message,
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self).expect("serializes")).map_err(|e| err(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }
}

/// A batch ready to upload: its body is fixed so retries are identical.
#[derive(Debug, Clone)]
pub struct PreparedUpload {
    pub batch_id: String,
    pub last_seq: u64,
    pub records: usize,
    /// Uncompressed JSON body.
    pub json: Vec<u8>,
}

impl PreparedUpload {
    pub fn new(records: Vec<TrackedRecord>, attachments: Vec<Attachment>) -> Self {
        let body = BatchBody {
            batch_id: hex::encode(rand::random::<[u8; 16]>()),
            records,
            attachments,
        };
        PreparedUpload {
            last_seq: body.last_seq(),
            records: body.records.len(),
            json: serde_json::to_vec(&body).expect("batch serializes"),
            batch_id: body.batch_id,
        }
    }

    /// Digest of the uncompressed body, as the server stores it.
    pub fn digest(&self) -> String {
        content_digest(&self.json)
    }

    pub fn gzip(&self) -> Vec<u8> {
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&self.json).expect("writing to a Vec");
        enc.finish().expect("writing to a Vec")
    }
}

/// Split records into batches of at most `max_records` records and, unless a
/// single record is larger, `max_bytes` of serialized JSON.
pub fn split_batches(records: Vec<TrackedRecord>, max_records: usize, max_bytes: usize) -> Vec<Vec<TrackedRecord>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut bytes = 0;
    for r in records {
        let size = serde_json::to_vec(&r).map(|v| v.len() + 1).unwrap_or(0);
        if !current.is_empty() && (current.len() >= max_records || bytes + size > max_bytes) {
            out.push(std::mem::take(&mut current));
            bytes = 0;
        }
        bytes += size;
        current.push(r);
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Read third-party files from the workspace. Missing files are skipped.
pub fn collect_attachments(workspace: &Path, paths: &[String]) -> Vec<Attachment> {
    let mut out = Vec::new();
    for p in paths {
        let Ok(full) = resolve_within(workspace, p) else {
            tracing::warn!("third-party file `{p}` escapes the workspace");
            continue;
        };
        match std::fs::read(&full) {
            Ok(bytes) => out.push(Attachment {
                path: p.clone(),
                content_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
            }),
            Err(_) => tracing::info!("third-party file `{p}` not present; skipped"),
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyncConfig {
    pub research_id: String,
    pub backoff: Backoff,
    pub max_batch_records: usize,
    pub max_batch_bytes: usize,
    /// Seed for backoff jitter; `None` draws from the OS.
    pub jitter_seed: Option<u64>,
}

impl SyncConfig {
    pub fn new(research_id: &str) -> Self {
        SyncConfig {
            research_id: research_id.to_owned(),
            backoff: Backoff::default(),
            max_batch_records: MAX_BATCH_RECORDS,
            max_batch_bytes: MAX_BATCH_BYTES,
            jitter_seed: None,
        }
    }
}

enum Sent {
    Acked(BatchAck),
    Unreachable,
    Rejected(String),
}

/// Shared access to the journal being uploaded.
pub trait JournalAccess: Send + Sync {
    fn with_journal<T>(&self, f: impl FnOnce(&mut Journal) -> T) -> T;
}

impl JournalAccess for Mutex<Journal> {
    fn with_journal<T>(&self, f: impl FnOnce(&mut Journal) -> T) -> T {
        f(&mut self.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

impl JournalAccess for Mutex<Recorder<Journal>> {
    fn with_journal<T>(&self, f: impl FnOnce(&mut Journal) -> T) -> T {
        f(self.lock().unwrap_or_else(|p| p.into_inner()).sink_mut())
    }
}

/// Client side of one session's sync.
pub struct Syncer {
    transport: Arc<dyn Transport>,
    config: SyncConfig,
    session: SessionFile,
    session_path: Option<PathBuf>,
    rng: StdRng,
    /// Digests of every uncompressed body acknowledged by the server.
    pub sent_digests: Vec<String>,
}

impl Syncer {
    /// `session_path` persists the nonce and token; `None` keeps them in memory.
    pub fn new(transport: Arc<dyn Transport>, config: SyncConfig, session_path: Option<PathBuf>) -> Result<Self, SyncError> {
        let session = match &session_path {
            Some(p) => SessionFile::load_or_create(p)?,
            None => SessionFile::fresh(),
        };
        let rng = match config.jitter_seed {
            Some(s) => StdRng::seed_from_u64(s),
            None => StdRng::from_os_rng(),
        };
        Ok(Syncer {
            transport,
            config,
            session,
            session_path,
            rng,
            sent_digests: Vec::new(),
        })
    }

    pub fn token(&self) -> Option<&str> {
        self.session.session_token.as_deref()
    }

    pub fn session(&self) -> &SessionFile {
        &self.session
    }

    async fn pause(&mut self, attempt: u32) {
        let d = self.config.backoff.delay(attempt, &mut self.rng);
        if !d.is_zero() {
            tokio::time::sleep(d).await;
        }
    }

    /// Register once; later calls return the stored token.
    pub async fn ensure_registered(&mut self, consent: &Consent) -> Result<String, SyncError> {
        if !consent.is_granted() {
            return Err(SyncError::ConsentMissing);
        }
        if let Some(t) = &self.session.session_token {
            return Ok(t.clone());
        }
        let req = RegisterRequest {
            research_id: self.config.research_id.clone(),
            consent: consent.clone(),
            client_nonce: self.session.client_nonce.clone(),
        };
        for attempt in 0..self.config.backoff.max_attempts {
            match self.transport.register(&req).await {
                Ok(resp) => {
                    self.session.session_token = Some(resp.session_token.clone());
                    if let Some(p) = &self.session_path {
                        self.session.save(p)?;
                    }
                    return Ok(resp.session_token);
                }
                Err(e) if e.is_transient() => {
                    tracing::debug!("registration attempt {attempt} failed: {e}");
                    if attempt + 1 < self.config.backoff.max_attempts {
                        self.pause(attempt).await;
                    }
                }
                Err(TransportError::Rejected { body, .. }) if body.error == "consent-missing" => {
                    return Err(SyncError::ConsentMissing)
                }
                Err(e) => {
                    return Err(SyncError::Rejected {
                        batch_id: String::new(),
                        reason: e.to_string(),
                        report: FlushReport::default(),
                    })
                }
            }
        }
        Err(SyncError::ServerUnreachable {
            report: FlushReport::default(),
        })
    }

    async fn send(&mut self, token: &str, upload: &PreparedUpload, report: &mut FlushReport) -> Sent {
        let body = upload.gzip();
        let mut reached = false;
        for attempt in 0..self.config.backoff.max_attempts {
            match self.transport.send_batch(token, body.clone()).await {
                Ok(ack) => {
                    if !reached {
                        report.sent += upload.records as u64;
                    }
                    return Sent::Acked(ack);
                }
                Err(e) if e.is_transient() => {
                    if matches!(e, TransportError::Rejected { .. }) && !reached {
                        reached = true;
                        report.sent += upload.records as u64;
                    }
                    tracing::debug!("batch {} attempt {attempt} failed: {e}", upload.batch_id);
                    if attempt + 1 < self.config.backoff.max_attempts {
                        self.pause(attempt).await;
                    }
                }
                Err(e) => {
                    if !reached {
                        report.sent += upload.records as u64;
                    }
                    return Sent::Rejected(e.to_string());
                }
            }
        }
        Sent::Unreachable
    }

    /// Upload every pending record, then `attachments` in a batch of their own.
    pub async fn flush(
        &mut self,
        journal: &impl JournalAccess,
        consent: &Consent,
        attachments: Vec<Attachment>,
    ) -> Result<FlushReport, SyncError> {
        let mut report = FlushReport::default();
        let token = match self.ensure_registered(consent).await {
            Ok(t) => t,
            Err(SyncError::ServerUnreachable { .. }) => return Err(SyncError::ServerUnreachable { report }),
            Err(e) => return Err(e),
        };
        let pending = journal.with_journal(|j| j.read_pending())?;
        for c in &pending.corrupt {
            tracing::warn!("journal row {}:{} skipped: {}", c.file, c.line, c.reason);
        }
        let pending = pending.records;
        let mut uploads: Vec<PreparedUpload> =
            split_batches(pending, self.config.max_batch_records, self.config.max_batch_bytes)
                .into_iter()
                .map(|b| PreparedUpload::new(b, Vec::new()))
                .collect();
        if !attachments.is_empty() {
            uploads.push(PreparedUpload::new(Vec::new(), attachments));
        }
        for upload in uploads {
            match self.send(&token, &upload, &mut report).await {
                Sent::Acked(ack) => {
                    if ack.duplicate {
                        report.duplicates += 1;
                    }
                    if ack.acked_upto_seq >= upload.last_seq {
                        if upload.last_seq > 0 {
                            journal.with_journal(|j| j.mark_flushed(upload.last_seq))?;
                        }
                        report.acked += upload.records as u64;
                        self.sent_digests.push(upload.digest());
                    } else {
                        return Err(SyncError::Rejected {
                            batch_id: upload.batch_id,
                            reason: format!("ack {} short of seq {}", ack.acked_upto_seq, upload.last_seq),
                            report,
                        });
                    }
                }
                Sent::Unreachable => return Err(SyncError::ServerUnreachable { report }),
                Sent::Rejected(reason) => {
                    return Err(SyncError::Rejected {
                        batch_id: upload.batch_id,
                        reason,
                        report,
                    })
                }
            }
        }
        Ok(report)
    }
}

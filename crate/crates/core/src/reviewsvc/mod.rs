//! Local HTTP review service over a flag report.
//!
//! Decisions are only accepted for flagged ids and are appended to the log
//! (and synced) before the request is answered.

pub mod log;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::docgen::{self, Clouds, DocError, DocInputs};
use crate::embedstore::{AnnotationSet, CaptionSet};
use crate::scanner::FlagReport;

pub use log::{Decision, DecisionLog, DecisionWriter, LogError, ReviewSummary, Verdict};

const INDEX_HTML: &str = include_str!("../../assets/index.html");
const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "gif", "webp", "bmp"];
pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 1000;
pub const MAX_CAPTIONS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("corrupt decision log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("unknown or unflagged image id {0:?}")]
    UnknownId(String),
    #[error("invalid verdict: {0}")]
    VerdictInvalid(String),
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Log(LogError),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error("server error: {0}")]
    Server(std::io::Error),
}

impl From<LogError> for ReviewError {
    fn from(e: LogError) -> Self {
        match e {
            LogError::Corrupt { line, reason } => ReviewError::CorruptLog { line, reason },
            other => ReviewError::Log(other),
        }
    }
}

impl ReviewError {
    pub fn kind(&self) -> &'static str {
        match self {
            ReviewError::CorruptLog { .. } => "CorruptLog",
            ReviewError::UnknownId(_) => "UnknownId",
            ReviewError::VerdictInvalid(_) => "VerdictInvalid",
            ReviewError::BindFailure { .. } => "BindFailure",
            ReviewError::Log(_) => "IoFailure",
            ReviewError::Doc(_) => "DocError",
            ReviewError::Server(_) => "ServerError",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ReviewError::UnknownId(_) => StatusCode::NOT_FOUND,
            ReviewError::VerdictInvalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.kind(), "message": self.to_string() }));
        (self.status(), body).into_response()
    }
}

/// Inputs for a review session.
#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub report: FlagReport,
    pub annotations: AnnotationSet,
    pub captions: CaptionSet,
    pub log_path: PathBuf,
    pub images_dir: Option<PathBuf>,
    pub stopwords: docgen::Stopwords,
    pub chi2: docgen::Chi2Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryView {
    pub total: usize,
    pub flagged: usize,
    pub confirmed: usize,
    pub rejected: usize,
    pub unsure: usize,
    pub pending: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Filter {
    Pending,
    Confirmed,
    Rejected,
    Unsure,
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryView {
    pub id: String,
    pub p: f64,
    pub flagged: bool,
    /// `"pending"` or the verdict for flagged entries, null otherwise.
    pub verdict: Option<String>,
    pub labels: Vec<String>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPage {
    pub offset: usize,
    pub limit: usize,
    pub filter: Filter,
    pub matching: usize,
    pub entries: Vec<EntryView>,
}

struct LogState {
    log: DecisionLog,
    writer: DecisionWriter,
    summary: ReviewSummary,
}

struct Inner {
    report: FlagReport,
    flagged: HashMap<String, usize>,
    annotations: AnnotationSet,
    captions: CaptionSet,
    images_dir: Option<PathBuf>,
    clouds: Clouds,
    state: Mutex<LogState>,
}

/// Shared handle to a running review session. Cheap to clone.
#[derive(Clone)]
pub struct ReviewService {
    inner: Arc<Inner>,
}

fn bump(s: &mut ReviewSummary, v: Option<Verdict>, up: bool) {
    let slot = match v {
        None => &mut s.pending,
        Some(Verdict::ConfirmInappropriate) => &mut s.confirmed,
        Some(Verdict::RejectFlag) => &mut s.rejected,
        Some(Verdict::Unsure) => &mut s.unsure,
    };
    if up {
        *slot += 1;
    } else {
        *slot -= 1;
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl ReviewService {
    /// Replays the log at `log_path` (creating it if absent) and builds the
    /// clouds. Records for ids outside the flagged set make the log corrupt.
    pub fn open(config: ReviewConfig) -> Result<Self, ReviewError> {
        let flagged: HashMap<String, usize> = config
            .report
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.flagged)
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        let log = match std::fs::File::open(&config.log_path) {
            Ok(f) => DecisionLog::from_reader_checked(std::io::BufReader::new(f), |d| {
                if flagged.contains_key(&d.image_id) {
                    Ok(())
                } else {
                    Err(format!("image id {:?} is not flagged in the report", d.image_id))
                }
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => DecisionLog::new(),
            Err(source) => {
                return Err(LogError::Io {
                    path: config.log_path.clone(),
                    source,
                }
                .into())
            }
        };
        let writer = DecisionWriter::open(&config.log_path)?;
        let summary = log.summary(config.report.flagged().map(|e| e.id.as_str()));
        let clouds = docgen::build_clouds(
            &config.report,
            &DocInputs {
                annotations: Some(&config.annotations),
                captions: Some(&config.captions),
                decisions: None,
                stopwords: config.stopwords.clone(),
                params: config.chi2,
            },
        )?;
        Ok(Self {
            inner: Arc::new(Inner {
                report: config.report,
                flagged,
                annotations: config.annotations,
                captions: config.captions,
                images_dir: config.images_dir,
                clouds,
                state: Mutex::new(LogState { log, writer, summary }),
            }),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LogState> {
        self.inner.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn report(&self) -> &FlagReport {
        &self.inner.report
    }

    pub fn clouds(&self) -> &Clouds {
        &self.inner.clouds
    }

    pub fn review_summary(&self) -> ReviewSummary {
        self.lock().summary
    }

    pub fn summary(&self) -> SummaryView {
        let s = self.review_summary();
        SummaryView {
            total: self.inner.report.total_count(),
            flagged: s.flagged,
            confirmed: s.confirmed,
            rejected: s.rejected,
            unsure: s.unsure,
            pending: s.pending,
            ratio: s.confirmed_ratio(),
        }
    }

    pub fn log_snapshot(&self) -> DecisionLog {
        self.lock().log.clone()
    }

    pub fn verdict(&self, id: &str) -> Option<Verdict> {
        self.lock().log.verdict(id)
    }

    /// Durably appends `decision`, then applies it. Blocks on the fsync.
    pub fn record(&self, decision: Decision) -> Result<SummaryView, ReviewError> {
        if !self.inner.flagged.contains_key(&decision.image_id) {
            return Err(ReviewError::UnknownId(decision.image_id));
        }
        {
            let mut st = self.lock();
            st.writer.append(&decision)?;
            let old = st.log.verdict(&decision.image_id);
            bump(&mut st.summary, old, false);
            bump(&mut st.summary, Some(decision.verdict), true);
            st.log.push(decision);
        }
        Ok(self.summary())
    }

    fn matches(filter: Filter, v: Option<Verdict>) -> bool {
        match filter {
            Filter::All => true,
            Filter::Pending => v.is_none(),
            Filter::Confirmed => v == Some(Verdict::ConfirmInappropriate),
            Filter::Rejected => v == Some(Verdict::RejectFlag),
            Filter::Unsure => v == Some(Verdict::Unsure),
        }
    }

    /// One page of report entries in report order. Non-`All` filters only
    /// match flagged entries.
    pub fn page(&self, offset: usize, limit: usize, filter: Filter) -> ReportPage {
        let limit = limit.min(MAX_PAGE_LIMIT);
        let st = self.lock();
        let s = st.summary;
        let matching = match filter {
            Filter::All => self.inner.report.entries.len(),
            Filter::Pending => s.pending,
            Filter::Confirmed => s.confirmed,
            Filter::Rejected => s.rejected,
            Filter::Unsure => s.unsure,
        };
        let entries = self
            .inner
            .report
            .entries
            .iter()
            .map(|e| (e, if e.flagged { Some(st.log.verdict(&e.id)) } else { None }))
            .filter(|(_, v)| match v {
                Some(v) => Self::matches(filter, *v),
                None => filter == Filter::All,
            })
            .skip(offset)
            .take(limit)
            .map(|(e, v)| EntryView {
                id: e.id.clone(),
                p: e.p,
                flagged: e.flagged,
                verdict: v.map(|v| v.map_or("pending", Verdict::as_str).to_string()),
                labels: self
                    .inner
                    .annotations
                    .get(&e.id)
                    .map(<[String]>::to_vec)
                    .unwrap_or_default(),
                captions: self
                    .inner
                    .captions
                    .get(&e.id)
                    .map(|c| c.iter().take(MAX_CAPTIONS).cloned().collect())
                    .unwrap_or_default(),
            })
            .collect();
        ReportPage {
            offset,
            limit,
            filter,
            matching,
            entries,
        }
    }

    /// Finds `<images_dir>/<id>.<ext>` for a known id. Ids that could escape
    /// the directory are rejected.
    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        let dir = self.inner.images_dir.as_deref()?;
        if !is_safe_id(id) || !self.inner.report.entries.iter().any(|e| e.id == id) {
            return None;
        }
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .chain(std::iter::once(dir.join(id)))
            .find(|p| p.is_file())
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/", get(index))
            .route("/api/report", get(report_page))
            .route("/api/image/{id}", get(image))
            .route("/api/decision", post(decision))
            .route("/api/summary", get(summary))
            .route("/api/clouds", get(clouds))
            .with_state(self.clone())
    }
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\', '\0']) && !id.starts_with('.')
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
    #[serde(default)]
    filter: Filter,
}

async fn report_page(State(svc): State<ReviewService>, Query(q): Query<PageQuery>) -> Json<ReportPage> {
    Json(svc.page(q.offset, q.limit.unwrap_or(DEFAULT_PAGE_LIMIT), q.filter))
}

async fn image(State(svc): State<ReviewService>, axum::extract::Path(id): axum::extract::Path<String>) -> Response {
    let Some(path) = svc.image_path(&id) else {
        return (
            StatusCode::NOT_FOUND,
            Json(json!({ "error": "NotFound", "message": id })),
        )
            .into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    image_id: String,
    verdict: serde_json::Value,
    note: Option<String>,
    reviewer: Option<String>,
}

async fn decision(
    State(svc): State<ReviewService>,
    body: axum::body::Bytes,
) -> Result<Json<serde_json::Value>, ReviewError> {
    let body: DecisionBody =
        serde_json::from_slice(&body).map_err(|e| ReviewError::VerdictInvalid(format!("malformed body: {e}")))?;
    let verdict = body
        .verdict
        .as_str()
        .ok_or_else(|| ReviewError::VerdictInvalid("verdict must be a string".into()))?
        .parse::<Verdict>()
        .map_err(ReviewError::VerdictInvalid)?;
    let d = Decision {
        image_id: body.image_id,
        verdict,
        note: body.note,
        timestamp: now_secs(),
        reviewer: body.reviewer,
    };
    let summary = tokio::task::spawn_blocking(move || svc.record(d))
        .await
        .map_err(|e| ReviewError::Server(std::io::Error::other(e)))??;
    Ok(Json(json!({ "summary": summary })))
}

async fn summary(State(svc): State<ReviewService>) -> Json<SummaryView> {
    Json(svc.summary())
}

async fn clouds(State(svc): State<ReviewService>) -> Json<Clouds> {
    Json(svc.clouds().clone())
}

/// Binds `addr`, prints `listening on http://<addr>` to stdout and serves
/// until ctrl-c.
pub async fn serve(service: ReviewService, addr: &str) -> Result<(), ReviewError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ReviewError::BindFailure {
            addr: addr.to_string(),
            source,
        })?;
    let local: SocketAddr = listener.local_addr().map_err(ReviewError::Server)?;
    println!("listening on http://{local}");
    use std::io::Write as _;
    let _ = std::io::stdout().flush();
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ReviewError::Server)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanner::{FlagEntry, ReportHeader};
    use std::collections::BTreeMap;

    fn config(dir: &Path) -> ReviewConfig {
        let entries: Vec<FlagEntry> = (0..6)
            .map(|i| FlagEntry {
                id: format!("img{i}"),
                p: 1.0 - i as f64 * 0.1,
                flagged: i < 4,
            })
            .collect();
        ReviewConfig {
            report: FlagReport {
                header: ReportHeader {
                    dataset_name: "t".into(),
                    total_count: 6,
                    threshold: 0.65,
                    model_fingerprint: "x".into(),
                    flagged_count: 4,
                },
                entries,
            },
            annotations: AnnotationSet(BTreeMap::from([("img0".into(), vec!["revolver".into()])])),
            captions: CaptionSet(BTreeMap::from([(
                "img1".into(),
                vec!["one".into(), "two".into(), "three".into(), "four".into()],
            )])),
            log_path: dir.join("decisions.jsonl"),
            images_dir: Some(dir.to_path_buf()),
            stopwords: docgen::Stopwords::builtin(),
            chi2: docgen::Chi2Params::default(),
        }
    }

    fn d(id: &str, v: Verdict) -> Decision {
        Decision {
            image_id: id.into(),
            verdict: v,
            note: None,
            timestamp: 1,
            reviewer: None,
        }
    }

    #[test]
    fn record_updates_summary_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let svc = ReviewService::open(config(dir.path())).unwrap();
        assert_eq!(svc.summary().pending, 4);
        assert_eq!(svc.summary().ratio, 0.0);
        let s = svc.record(d("img0", Verdict::ConfirmInappropriate)).unwrap();
        assert_eq!((s.pending, s.confirmed), (3, 1));
        let s = svc.record(d("img0", Verdict::RejectFlag)).unwrap();
        assert_eq!((s.pending, s.confirmed, s.rejected), (3, 0, 1));

        let len = std::fs::metadata(dir.path().join("decisions.jsonl")).unwrap().len();
        assert!(matches!(
            svc.record(d("img5", Verdict::Unsure)),
            Err(ReviewError::UnknownId(_))
        ));
        assert!(matches!(
            svc.record(d("nope", Verdict::Unsure)),
            Err(ReviewError::UnknownId(_))
        ));
        assert_eq!(
            std::fs::metadata(dir.path().join("decisions.jsonl")).unwrap().len(),
            len
        );

        let before = svc.log_snapshot();
        drop(svc);
        let svc = ReviewService::open(config(dir.path())).unwrap();
        assert_eq!(svc.log_snapshot(), before);
        assert_eq!(svc.verdict("img0"), Some(Verdict::RejectFlag));
        assert_eq!(svc.review_summary(), before.summary(["img0", "img1", "img2", "img3"]));
    }

    #[test]
    fn corrupt_or_foreign_log_refuses_to_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        let good = serde_json::to_string(&d("img1", Verdict::Unsure)).unwrap();
        std::fs::write(&path, format!("{good}\n{{broken\n")).unwrap();
        match ReviewService::open(config(dir.path())) {
            Err(ReviewError::CorruptLog { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other.err()),
        }
        let foreign = serde_json::to_string(&d("img5", Verdict::Unsure)).unwrap();
        std::fs::write(&path, format!("{good}\n\n{foreign}\n")).unwrap();
        match ReviewService::open(config(dir.path())) {
            Err(ReviewError::CorruptLog { line, .. }) => assert_eq!(line, 3),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn pages_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let svc = ReviewService::open(config(dir.path())).unwrap();
        svc.record(d("img2", Verdict::Unsure)).unwrap();
        let all = svc.page(0, 100, Filter::All);
        assert_eq!(all.matching, 6);
        assert_eq!(all.entries[0].labels, vec!["revolver".to_string()]);
        assert_eq!(all.entries[1].captions.len(), 3);
        assert_eq!(all.entries[2].verdict.as_deref(), Some("unsure"));
        assert_eq!(all.entries[3].verdict.as_deref(), Some("pending"));
        assert_eq!(all.entries[5].verdict, None);
        let pending = svc.page(1, 1, Filter::Pending);
        assert_eq!(pending.matching, 3);
        assert_eq!(pending.entries.len(), 1);
        assert_eq!(pending.entries[0].id, "img1");
        assert!(svc.page(0, 10, Filter::Confirmed).entries.is_empty());
    }

    #[test]
    fn image_lookup_rejects_traversal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img0.png"), b"png").unwrap();
        let svc = ReviewService::open(config(dir.path())).unwrap();
        assert_eq!(svc.image_path("img0"), Some(dir.path().join("img0.png")));
        assert_eq!(svc.image_path("img1"), None);
        assert_eq!(svc.image_path("../img0"), None);
        assert_eq!(svc.image_path(".."), None);
        assert!(!is_safe_id("a/b"));
    }
}

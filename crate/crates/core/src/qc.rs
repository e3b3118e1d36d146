//! Human review of synthesized trajectories.
//!
//! State is a fold of an append-only decision log over the initial
//! trajectories file. Each log line carries a digest of its payload and a
//! running chain digest, so a log that was edited after the fact fails to
//! replay. Writes use optimistic versioning: a write names the version it
//! was based on and is refused if the item has moved on.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{crop_pixels, encode_png, Corpus, CorpusError};
use crate::evidence::EvidenceRecord;
use crate::io::{self, IoError};
use crate::trajectory::{validate_trajectory, ToolCall, Trajectory, Violation};

pub const CURATED_FILE: &str = "curated.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_PAGE_SIZE: usize = 20;
pub const MAX_PAGE_SIZE: usize = 500;
const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, thiserror::Error)]
pub enum QcError {
    #[error("unknown item `{0}`")]
    NotFound(String),
    #[error("item `{id}` is at version {actual}, write expected {expected}")]
    Conflict {
        id: String,
        expected: u64,
        actual: u64,
    },
    #[error("item `{id}` body rejected with {} violation(s)", violations.len())]
    Validation {
        id: String,
        violations: Vec<Violation>,
    },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("duplicate trajectory id `{0}` in review input")]
    DuplicateItem(String),
    #[error("decision log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    File(#[from] IoError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Dropped,
    Edited,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Pending => "pending",
            ReviewStatus::Accepted => "accepted",
            ReviewStatus::Dropped => "dropped",
            ReviewStatus::Edited => "edited",
        }
    }

    /// Included in the curated export.
    pub fn is_kept(self) -> bool {
        matches!(self, ReviewStatus::Accepted | ReviewStatus::Edited)
    }
}

impl fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReviewStatus {
    type Err = QcError;

    fn from_str(s: &str) -> Result<Self, QcError> {
        match s {
            "pending" => Ok(ReviewStatus::Pending),
            "accepted" => Ok(ReviewStatus::Accepted),
            "dropped" => Ok(ReviewStatus::Dropped),
            "edited" => Ok(ReviewStatus::Edited),
            other => Err(QcError::BadRequest(format!(
                "unknown status `{other}`; expected pending, accepted, dropped or edited"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewAction {
    Accept,
    Drop,
    Edit,
}

impl ReviewAction {
    fn status(self) -> ReviewStatus {
        match self {
            ReviewAction::Accept => ReviewStatus::Accepted,
            ReviewAction::Drop => ReviewStatus::Dropped,
            ReviewAction::Edit => ReviewStatus::Edited,
        }
    }
}

/// Actions allowed through [`QcService::record_decision`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Drop,
}

impl From<Decision> for ReviewAction {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Accept => ReviewAction::Accept,
            Decision::Drop => ReviewAction::Drop,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub timestamp: String,
    pub reviewer: String,
    pub action: ReviewAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub status: ReviewStatus,
    /// Starts at 1 and grows by one per accepted write.
    pub version: u64,
    pub trajectory: Trajectory,
    pub history: Vec<HistoryEntry>,
}

impl ReviewItem {
    fn fresh(trajectory: Trajectory) -> Self {
        Self {
            id: trajectory.id.clone(),
            status: ReviewStatus::Pending,
            version: 1,
            trajectory,
            history: Vec::new(),
        }
    }

    pub fn summary(&self) -> ItemSummary {
        ItemSummary {
            id: self.id.clone(),
            instance_id: self.trajectory.instance_id.clone(),
            status: self.status,
            version: self.version,
            turns: self.trajectory.turns.len(),
        }
    }

    fn apply(&mut self, e: &DecisionLogEntry) {
        if let Some(body) = &e.body {
            self.trajectory = body.clone();
        }
        self.status = e.action.status();
        self.version = e.version;
        self.history.push(HistoryEntry {
            timestamp: e.timestamp.clone(),
            reviewer: e.reviewer.clone(),
            action: e.action,
            body: e.body.clone(),
        });
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub id: String,
    pub instance_id: String,
    pub status: ReviewStatus,
    pub version: u64,
    pub turns: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<ItemSummary>,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
}

/// The part of a log entry covered by its payload digest.
#[derive(Serialize)]
struct Payload<'a> {
    item_id: &'a str,
    version: u64,
    action: ReviewAction,
    reviewer: &'a str,
    timestamp: &'a str,
    body: &'a Option<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLogEntry {
    /// Position in the log, from 0.
    pub seq: u64,
    pub item_id: String,
    /// Item version after this write.
    pub version: u64,
    pub action: ReviewAction,
    pub reviewer: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Trajectory>,
    pub payload_digest: String,
    /// `sha256(previous chain digest ‖ payload digest)`, hex.
    pub chain_digest: String,
}

impl DecisionLogEntry {
    fn payload_digest(&self) -> String {
        let payload = Payload {
            item_id: &self.item_id,
            version: self.version,
            action: self.action,
            reviewer: &self.reviewer,
            timestamp: &self.timestamp,
            body: &self.body,
        };
        let bytes = serde_json::to_vec(&payload).expect("plain data serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn seal(&mut self, prev_chain: &str) {
        self.payload_digest = self.payload_digest();
        self.chain_digest = chain(prev_chain, &self.payload_digest);
    }
}

fn chain(prev: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(payload.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: usize,
    pub accepted: usize,
    pub dropped: usize,
    pub edited: usize,
}

impl StatusCounts {
    fn add(&mut self, s: ReviewStatus) {
        match s {
            ReviewStatus::Pending => self.pending += 1,
            ReviewStatus::Accepted => self.accepted += 1,
            ReviewStatus::Dropped => self.dropped += 1,
            ReviewStatus::Edited => self.edited += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub trajectories_file: String,
    pub exported: usize,
    pub counts: StatusCounts,
    pub log_entries: u64,
    pub chain_head: String,
}

/// Curated file contents and manifest, before anything touches disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Export {
    pub curated_jsonl: String,
    pub manifest: ExportManifest,
}

impl Export {
    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("plain data serializes");
        s.push('\n');
        s
    }

    /// Writes `curated.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), QcError> {
        let io_err = |path: PathBuf| move |source| QcError::Io { path, source };
        fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;
        let curated = dir.join(CURATED_FILE);
        fs::write(&curated, &self.curated_jsonl).map_err(io_err(curated.clone()))?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, self.manifest_json()).map_err(io_err(manifest.clone()))?;
        Ok(())
    }
}

/// Renders the export of a set of items, in id order.
pub fn render_export<'a>(
    items: impl IntoIterator<Item = &'a ReviewItem>,
    log_entries: u64,
    chain_head: &str,
) -> Export {
    let mut counts = StatusCounts::default();
    let mut kept = Vec::new();
    for item in items {
        counts.add(item.status);
        if item.status.is_kept() {
            kept.push(&item.trajectory);
        }
    }
    Export {
        curated_jsonl: io::to_jsonl(&kept),
        manifest: ExportManifest {
            trajectories_file: CURATED_FILE.to_string(),
            exported: kept.len(),
            counts,
            log_entries,
            chain_head: chain_head.to_string(),
        },
    }
}

/// Folds `log` over the initial trajectories, verifying versions and the
/// digest chain. Returns the items by id and the chain head.
pub fn replay(
    initial: &[Trajectory],
    log: &[DecisionLogEntry],
) -> Result<(BTreeMap<String, ReviewItem>, String), QcError> {
    let mut items = BTreeMap::new();
    for t in initial {
        if items
            .insert(t.id.clone(), ReviewItem::fresh(t.clone()))
            .is_some()
        {
            return Err(QcError::DuplicateItem(t.id.clone()));
        }
    }
    let mut head = GENESIS.to_string();
    for (n, e) in log.iter().enumerate() {
        let bad = |message: String| QcError::Log {
            line: n + 1,
            message,
        };
        if e.seq != n as u64 {
            return Err(bad(format!("sequence {} out of order", e.seq)));
        }
        if e.payload_digest() != e.payload_digest {
            return Err(bad("payload digest mismatch".into()));
        }
        let next = chain(&head, &e.payload_digest);
        if next != e.chain_digest {
            return Err(bad("chain digest mismatch".into()));
        }
        let item = items
            .get_mut(&e.item_id)
            .ok_or_else(|| bad(format!("unknown item `{}`", e.item_id)))?;
        if e.version != item.version + 1 {
            return Err(bad(format!(
                "item `{}` jumps from version {} to {}",
                e.item_id, item.version, e.version
            )));
        }
        if (e.action == ReviewAction::Edit) != e.body.is_some() {
            return Err(bad("only edits carry a body".into()));
        }
        item.apply(e);
        head = next;
    }
    Ok((items, head))
}

pub fn read_log(path: &Path) -> Result<Vec<DecisionLogEntry>, QcError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(io::read_jsonl(path)?)
}

struct LogState {
    file: Option<(PathBuf, File)>,
    entries: Vec<DecisionLogEntry>,
    head: String,
}

/// Frame reference resolvable through the service's image routes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub index: usize,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipView {
    /// Position among the trajectory's tool calls.
    pub call_index: usize,
    pub turn: usize,
    pub frames: Vec<FrameRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropOverlay {
    pub call_index: usize,
    pub turn: usize,
    pub frame: FrameRef,
    /// `[x1, y1, x2, y2]` in source-frame pixels.
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub crop_url: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderBundle {
    pub instance_id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub video: String,
    pub frame_count: usize,
    pub clips: Vec<ClipView>,
    pub crops: Vec<CropOverlay>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item: ReviewItem,
    pub bundle: RenderBundle,
}

pub struct QcService {
    corpus: Arc<Corpus>,
    evidence: BTreeMap<String, EvidenceRecord>,
    initial: Vec<Trajectory>,
    items: BTreeMap<String, Mutex<ReviewItem>>,
    log: Mutex<LogState>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a panicked writer never leaves a half-applied item: state changes
    // happen after the log append, in one assignment
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl QcService {
    /// Builds the service over `initial`, replaying an existing log at
    /// `log_path` and appending to it from then on. With no path the log is
    /// kept in memory only.
    pub fn open(
        corpus: Arc<Corpus>,
        evidence: Vec<EvidenceRecord>,
        initial: Vec<Trajectory>,
        log_path: Option<&Path>,
    ) -> Result<Self, QcError> {
        let entries = match log_path {
            Some(p) => read_log(p)?,
            None => Vec::new(),
        };
        let (items, head) = replay(&initial, &entries)?;
        let file = match log_path {
            Some(p) => {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|source| QcError::Io {
                        path: p.to_path_buf(),
                        source,
                    })?;
                Some((p.to_path_buf(), f))
            }
            None => None,
        };
        Ok(Self {
            corpus,
            evidence: evidence
                .into_iter()
                .map(|e| (e.instance_id.clone(), e))
                .collect(),
            initial,
            items: items.into_iter().map(|(k, v)| (k, Mutex::new(v))).collect(),
            log: Mutex::new(LogState {
                file,
                entries,
                head,
            }),
        })
    }

    pub fn initial(&self) -> &[Trajectory] {
        &self.initial
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn slot(&self, id: &str) -> Result<&Mutex<ReviewItem>, QcError> {
        self.items
            .get(id)
            .ok_or_else(|| QcError::NotFound(id.to_string()))
    }

    pub fn item(&self, id: &str) -> Result<ReviewItem, QcError> {
        Ok(lock(self.slot(id)?).clone())
    }

    /// Items in id order, optionally filtered by status. `page` is 1-based.
    pub fn list_items(
        &self,
        status: Option<ReviewStatus>,
        page: usize,
        page_size: usize,
    ) -> Result<Page, QcError> {
        if page == 0 {
            return Err(QcError::BadRequest("page numbers start at 1".into()));
        }
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(QcError::BadRequest(format!(
                "page_size must lie in 1..={MAX_PAGE_SIZE}"
            )));
        }
        let matching: Vec<ItemSummary> = self
            .items
            .values()
            .map(|m| lock(m).summary())
            .filter(|s| status.is_none_or(|st| s.status == st))
            .collect();
        let total = matching.len();
        let items = matching
            .into_iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .collect();
        Ok(Page {
            items,
            page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
        })
    }

    pub fn get_item(&self, id: &str) -> Result<ItemView, QcError> {
        let item = self.item(id)?;
        let bundle = self.bundle(&item)?;
        Ok(ItemView { item, bundle })
    }

    fn bundle(&self, item: &ReviewItem) -> Result<RenderBundle, QcError> {
        let t = &item.trajectory;
        let q = self
            .corpus
            .instance(&t.instance_id)
            .ok_or_else(|| QcError::NotFound(t.instance_id.clone()))?;
        let video = self.corpus.video_of(q)?;
        let frame_ref = |index: usize| FrameRef {
            index,
            url: format!("/items/{}/frames/{index}", item.id),
        };
        let mut clips = Vec::new();
        let mut crops = Vec::new();
        let calls = t
            .turns
            .iter()
            .enumerate()
            .filter_map(|(turn, x)| x.tool_call.as_ref().map(|c| (turn, c)));
        for (call_index, (turn, call)) in calls.enumerate() {
            match call {
                ToolCall::Clip { frames } => clips.push(ClipView {
                    call_index,
                    turn,
                    frames: frames.iter().map(|&f| frame_ref(f)).collect(),
                }),
                ToolCall::Crop { frame, bbox } => crops.push(CropOverlay {
                    call_index,
                    turn,
                    frame: frame_ref(*frame),
                    bbox: bbox.coords(),
                    crop_url: format!("/items/{}/crops/{call_index}", item.id),
                }),
            }
        }
        Ok(RenderBundle {
            instance_id: q.id.clone(),
            question: q.question.clone(),
            answers: q.answers.clone(),
            video: video.id().to_string(),
            frame_count: video.frame_count(),
            clips,
            crops,
        })
    }

    /// PNG bytes of one frame of the item's video.
    pub fn frame_png(&self, id: &str, index: usize) -> Result<Vec<u8>, QcError> {
        let item = self.item(id)?;
        let q = self
            .corpus
            .instance(&item.trajectory.instance_id)
            .ok_or_else(|| QcError::NotFound(item.trajectory.instance_id.clone()))?;
        let frame = self
            .corpus
            .video_of(q)?
            .frame(index)
            .map_err(|_| QcError::NotFound(format!("{id}/frames/{index}")))?;
        Ok(encode_png(frame)?)
    }

    /// PNG bytes of the region cropped by the item's `call_index`-th call.
    pub fn crop_png(&self, id: &str, call_index: usize) -> Result<Vec<u8>, QcError> {
        let item = self.item(id)?;
        let missing = || QcError::NotFound(format!("{id}/crops/{call_index}"));
        let Some(ToolCall::Crop { frame, bbox }) = item.trajectory.tool_calls().nth(call_index)
        else {
            return Err(missing());
        };
        let q = self
            .corpus
            .instance(&item.trajectory.instance_id)
            .ok_or_else(missing)?;
        let frame = self
            .corpus
            .video_of(q)?
            .frame(*frame)
            .map_err(|_| missing())?;
        let region = crop_pixels(frame, bbox).map_err(|_| missing())?;
        Ok(encode_png(&region)?)
    }

    fn violations(&self, t: &Trajectory) -> Vec<Violation> {
        let ev = self
            .evidence
            .get(&t.instance_id)
            .cloned()
            .unwrap_or_else(|| EvidenceRecord::unmatched(t.instance_id.clone()));
        validate_trajectory(t, &self.corpus, &ev).violations
    }

    /// Accepts or drops an item. Accepting re-validates the current body so
    /// that every exported item is valid.
    pub fn record_decision(
        &self,
        id: &str,
        decision: Decision,
        reviewer: &str,
        expected_version: u64,
    ) -> Result<ReviewItem, QcError> {
        self.write(id, decision.into(), None, reviewer, expected_version)
    }

    /// Replaces an item's body after validating it.
    pub fn save_edit(
        &self,
        id: &str,
        body: Trajectory,
        reviewer: &str,
        expected_version: u64,
    ) -> Result<ReviewItem, QcError> {
        self.write(
            id,
            ReviewAction::Edit,
            Some(body),
            reviewer,
            expected_version,
        )
    }

    fn write(
        &self,
        id: &str,
        action: ReviewAction,
        body: Option<Trajectory>,
        reviewer: &str,
        expected_version: u64,
    ) -> Result<ReviewItem, QcError> {
        let mut item = lock(self.slot(id)?);
        if item.version != expected_version {
            return Err(QcError::Conflict {
                id: id.to_string(),
                expected: expected_version,
                actual: item.version,
            });
        }
        let check = match (&body, action) {
            (Some(b), _) => {
                let mut v = Vec::new();
                if b.id != item.id || b.instance_id != item.trajectory.instance_id {
                    v.push(Violation::Reference {
                        message: format!(
                            "edited body must keep id `{}` and instance `{}`",
                            item.id, item.trajectory.instance_id
                        ),
                    });
                }
                v.extend(self.violations(b));
                v
            }
            (None, ReviewAction::Accept) => self.violations(&item.trajectory),
            (None, _) => Vec::new(),
        };
        if !check.is_empty() {
            return Err(QcError::Validation {
                id: id.to_string(),
                violations: check,
            });
        }

        let mut log = lock(&self.log);
        let mut entry = DecisionLogEntry {
            seq: log.entries.len() as u64,
            item_id: id.to_string(),
            version: item.version + 1,
            action,
            reviewer: reviewer.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            body,
            payload_digest: String::new(),
            chain_digest: String::new(),
        };
        entry.seal(&log.head);
        if let Some((path, file)) = &mut log.file {
            let mut line = serde_json::to_string(&entry).expect("plain data serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|source| QcError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        log.head = entry.chain_digest.clone();
        item.apply(&entry);
        log.entries.push(entry);
        Ok(item.clone())
    }

    pub fn log_entries(&self) -> Vec<DecisionLogEntry> {
        lock(&self.log).entries.clone()
    }

    pub fn chain_head(&self) -> String {
        lock(&self.log).head.clone()
    }

    /// The export of the current state.
    pub fn export(&self) -> Export {
        // hold the log so no write lands between reading items and the head
        let log = lock(&self.log);
        let items: Vec<ReviewItem> = self.items.values().map(|m| lock(m).clone()).collect();
        render_export(&items, log.entries.len() as u64, &log.head)
    }

    pub fn export_to(&self, dir: &Path) -> Result<ExportManifest, QcError> {
        let export = self.export();
        export.write(dir)?;
        Ok(export.manifest)
    }
}

/// Replays a log onto the initial trajectories and renders the export.
pub fn replay_export(initial: &[Trajectory], log: &[DecisionLogEntry]) -> Result<Export, QcError> {
    let (items, head) = replay(initial, log)?;
    Ok(render_export(items.values(), log.len() as u64, &head))
}

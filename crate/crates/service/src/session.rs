//! Per-client analysis sessions: prune selection, aggregation kind, the
//! current forward and a bounded set of stored snapshots.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use vlscope_core::analytics::AggKind;
use vlscope_core::model::PruneConfig;
use vlscope_core::CapturedState32;

/// Snapshots kept per session; the least recently used is evicted first.
pub const MAX_SNAPSHOTS: usize = 16;

/// A frozen forward with its k summaries.
#[derive(Debug)]
pub struct Snapshot {
    pub snapshot_id: String,
    pub instance_id: Option<String>,
    pub image_id: String,
    pub question: String,
    pub prune: PruneConfig,
    pub state: CapturedState32,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl Snapshot {
    pub fn new(
        snapshot_id: String,
        instance_id: Option<String>,
        image_id: String,
        question: String,
        prune: PruneConfig,
        state: CapturedState32,
    ) -> Self {
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            snapshot_id,
            instance_id,
            image_id,
            question,
            prune,
            state,
            created_at,
        }
    }
}

#[derive(Debug, Default)]
pub struct Session {
    pub prune: PruneConfig,
    pub agg: AggKind,
    pub current: Option<Arc<Snapshot>>,
    snapshots: VecDeque<Arc<Snapshot>>,
    next_id: u64,
}

impl Session {
    pub fn next_snapshot_id(&mut self) -> String {
        self.next_id += 1;
        format!("snap-{}", self.next_id)
    }

    /// Stores `snap` as the most recent snapshot and makes it current.
    pub fn push(&mut self, snap: Arc<Snapshot>) {
        self.snapshots.push_back(snap.clone());
        while self.snapshots.len() > MAX_SNAPSHOTS {
            self.snapshots.pop_front();
        }
        self.current = Some(snap);
    }

    /// Looks a snapshot up and marks it as recently used.
    pub fn snapshot(&mut self, id: &str) -> Option<Arc<Snapshot>> {
        let pos = self.snapshots.iter().position(|s| s.snapshot_id == id)?;
        let snap = self.snapshots.remove(pos)?;
        self.snapshots.push_back(snap.clone());
        Some(snap)
    }

    pub fn snapshot_ids(&self) -> Vec<String> {
        self.snapshots.iter().map(|s| s.snapshot_id.clone()).collect()
    }
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

/// All sessions, keyed by client-chosen id. Each session has its own lock,
/// so requests of different sessions never wait on each other.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl SessionStore {
    /// The session with this id, created on first use with aggregation
    /// `agg`.
    pub fn get_or_create(&self, id: &str, agg: AggKind) -> SessionHandle {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_owned())
            .or_insert_with(|| {
                Arc::new(tokio::sync::Mutex::new(Session {
                    agg,
                    ..Session::default()
                }))
            })
            .clone()
    }

    pub fn get(&self, id: &str) -> Option<SessionHandle> {
        let map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

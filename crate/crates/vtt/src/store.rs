use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::Utc;
use lesionaug_core::dataio::{ManifestFile, MANIFEST_FILE};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{VttError, VttResult};
use crate::session::{create_session, session_report, PoolEntry, Rating, Truth, VttReport, VttSession};

const SESSION_DIR: &str = "sessions";

/// Image entries of a saved manifest, with paths resolved against its directory.
pub fn pool_from_manifest(path: &Path) -> VttResult<Vec<PoolEntry>> {
    let path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&path).map_err(|e| VttError::io(path.display().to_string(), e))?;
    let doc: ManifestFile = serde_json::from_str(&text).map_err(|source| VttError::Json {
        context: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(doc
        .records
        .into_iter()
        .map(|r| PoolEntry {
            image_id: r.image_id,
            path: base.join(r.path),
        })
        .collect())
}

/// Rater-facing cursor view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextItem {
    Item {
        item_id: String,
        index: usize,
        total: usize,
        image_url: String,
    },
    Complete { complete: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingAck {
    pub accepted: bool,
    /// Position of the rated item in the session.
    pub index: usize,
}

struct SessionState {
    session: VttSession,
    ratings: Vec<Rating>,
}

impl SessionState {
    fn cursor(&self) -> usize {
        self.ratings.len()
    }
}

/// Sessions persisted under `<root>/sessions` as `<id>.json` plus an
/// append-only `<id>.ratings.jsonl`.
pub struct VttStore {
    root: PathBuf,
    real: Vec<PoolEntry>,
    synthetic: Vec<PoolEntry>,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> VttResult<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| VttError::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| VttError::Json {
                context: path.display().to_string(),
                source,
            })
        })
        .collect()
}

impl VttStore {
    /// Open (or create) a store rooted at `root`, restoring every persisted session.
    pub fn open(root: &Path, real: Vec<PoolEntry>, synthetic: Vec<PoolEntry>) -> VttResult<Self> {
        let dir = root.join(SESSION_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| VttError::io(dir.display().to_string(), e))?;
        let mut sessions = HashMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| VttError::io(dir.display().to_string(), e))?;
        for entry in entries {
            let path = entry.map_err(|e| VttError::io(dir.display().to_string(), e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name.strip_suffix(".json") else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(|e| VttError::io(name, e))?;
            let session: VttSession = serde_json::from_str(&text).map_err(|source| VttError::Json {
                context: name.to_string(),
                source,
            })?;
            let ratings = read_jsonl(&dir.join(format!("{id}.ratings.jsonl")))?;
            sessions.insert(id.to_string(), Arc::new(Mutex::new(SessionState { session, ratings })));
        }
        Ok(VttStore {
            root: root.to_path_buf(),
            real,
            synthetic,
            sessions: Mutex::new(sessions),
        })
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join(SESSION_DIR).join(format!("{id}.json"))
    }

    fn ratings_path(&self, id: &str) -> PathBuf {
        self.root.join(SESSION_DIR).join(format!("{id}.ratings.jsonl"))
    }

    fn get(&self, id: &str) -> VttResult<Arc<Mutex<SessionState>>> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| VttError::UnknownSession(id.to_string()))
    }

    /// Create and persist a session; a missing seed is drawn at random.
    pub fn create(&self, rater_id: &str, n_per_class: usize, seed: Option<u64>) -> VttResult<VttSession> {
        let mut rng = rand::rng();
        let seed = seed.unwrap_or_else(|| rng.random());
        let mut sessions = self.sessions.lock().expect("session map lock");
        let id = loop {
            let id = format!("{:016x}", rng.random::<u64>());
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        let session = create_session(&self.real, &self.synthetic, n_per_class, rater_id, seed, &id)?;
        let path = self.session_path(&id);
        let text = serde_json::to_string_pretty(&session).expect("session serialises");
        std::fs::write(&path, text).map_err(|e| VttError::io(path.display().to_string(), e))?;
        sessions.insert(
            id,
            Arc::new(Mutex::new(SessionState {
                session: session.clone(),
                ratings: Vec::new(),
            })),
        );
        Ok(session)
    }

    pub fn next_item(&self, session_id: &str) -> VttResult<NextItem> {
        let state = self.get(session_id)?;
        let state = state.lock().expect("session lock");
        let total = state.session.items.len();
        Ok(match state.session.items.get(state.cursor()) {
            Some(item) => NextItem::Item {
                item_id: item.item_id.clone(),
                index: state.cursor(),
                total,
                image_url: format!("/api/images/{}", item.item_id),
            },
            None => NextItem::Complete { complete: true },
        })
    }

    /// Accept a judgment for the cursor item. Resubmitting an already rated
    /// item with the same judgment is acknowledged without a second record.
    pub fn submit(&self, session_id: &str, item_id: &str, judgment: Truth, elapsed_ms: u64) -> VttResult<RatingAck> {
        let state = self.get(session_id)?;
        let mut state = state.lock().expect("session lock");
        let index = state
            .session
            .items
            .iter()
            .position(|i| i.item_id == item_id)
            .ok_or_else(|| VttError::UnknownItem(item_id.to_string()))?;
        if index < state.cursor() {
            let prior = &state.ratings[index];
            return if prior.judgment == judgment {
                Ok(RatingAck { accepted: true, index })
            } else {
                Err(VttError::ConflictingRating(item_id.to_string()))
            };
        }
        if index != state.cursor() {
            return Err(VttError::OutOfOrder {
                item_id: item_id.to_string(),
                cursor: state.cursor(),
            });
        }
        let rating = Rating {
            session_id: session_id.to_string(),
            item_id: item_id.to_string(),
            judgment,
            elapsed_ms,
            submitted_at: Utc::now(),
        };
        let path = self.ratings_path(session_id);
        let mut line = serde_json::to_string(&rating).expect("rating serialises");
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| VttError::io(path.display().to_string(), e))?;
        state.ratings.push(rating);
        Ok(RatingAck { accepted: true, index })
    }

    pub fn report(&self, session_id: &str) -> VttResult<VttReport> {
        let state = self.get(session_id)?;
        let state = state.lock().expect("session lock");
        Ok(session_report(&state.session, &state.ratings))
    }

    /// File backing an item id of the form `<session>-<k>`.
    pub fn image_path(&self, item_id: &str) -> VttResult<PathBuf> {
        let unknown = || VttError::UnknownItem(item_id.to_string());
        let (sid, _) = item_id.rsplit_once('-').ok_or_else(unknown)?;
        let state = self.get(sid).map_err(|_| unknown())?;
        let state = state.lock().expect("session lock");
        state
            .session
            .items
            .iter()
            .find(|i| i.item_id == item_id)
            .map(|i| i.path.clone())
            .ok_or_else(unknown)
    }
}

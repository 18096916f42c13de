use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chunkforest::forest::{load_forest_with, Forest, LoadOptions};
use chunkforest::seed::RngSeed;
use chunkforest::steering::{parse_history_jsonl, Session, SessionMode, SteeringEngine};
use chunkforest::study::{aggregate_report, Deck, RatingStore, Report, StudyError};

use crate::views::{session_view, SessionView};
use crate::{ApiError, ServiceConfig};

const SESSIONS_DIR: &str = "sessions";
const STUDY_JOURNAL: &str = "study/journal.jsonl";

/// Shared service state. Each session sits behind its own lock so requests
/// for one session are serialized while different sessions run in parallel.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    engine: SteeringEngine,
    deck: Deck,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    store: Mutex<RatingStore>,
    sessions_dir: Option<PathBuf>,
}

fn io_error(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::from(StudyError::Io(format!("{}: {e}", path.display())))
}

impl AppState {
    /// Loads the forest and deck, then restores persisted sessions and
    /// study data from the data directory.
    pub fn load(config: &ServiceConfig) -> Result<Self, ApiError> {
        let mut forest = load_forest_with(
            &config.forest_path,
            LoadOptions {
                lazy_leaves: config.lazy_leaves,
            },
        )?;
        if forest.bin_edges().is_none() {
            if let Err(e) = forest.index_features() {
                eprintln!("warning: forest has no feature bins and cannot be indexed: {e}");
            }
        }
        let deck = match &config.cards_path {
            Some(p) => Deck::load(p)?,
            None => Deck::default(),
        };
        Self::new(Arc::new(forest), deck, config.data_dir.as_deref())
    }

    pub fn new(forest: Arc<Forest>, deck: Deck, data_dir: Option<&Path>) -> Result<Self, ApiError> {
        let engine = SteeringEngine::new(forest, deck.ids().map(str::to_string).collect::<Vec<_>>());
        let (store, sessions_dir) = match data_dir {
            Some(dir) => {
                let sessions_dir = dir.join(SESSIONS_DIR);
                fs::create_dir_all(&sessions_dir).map_err(|e| io_error(&sessions_dir, e))?;
                (RatingStore::open(&dir.join(STUDY_JOURNAL))?, Some(sessions_dir))
            }
            None => (RatingStore::new(), None),
        };
        let mut sessions = HashMap::new();
        if let Some(dir) = &sessions_dir {
            for (id, session) in restore_sessions(&engine, dir)? {
                sessions.insert(id, Arc::new(Mutex::new(session)));
            }
        }
        Ok(AppState {
            inner: Arc::new(Inner {
                engine,
                deck,
                sessions: RwLock::new(sessions),
                store: Mutex::new(store),
                sessions_dir,
            }),
        })
    }

    pub fn engine(&self) -> &SteeringEngine {
        &self.inner.engine
    }

    pub fn deck(&self) -> &Deck {
        &self.inner.deck
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.read().expect("session map lock").len()
    }

    pub fn create_session(&self, mode: SessionMode, card_id: &str, seed: Option<u64>) -> Result<SessionView, ApiError> {
        let seed = RngSeed(seed.unwrap_or_else(rand::random));
        let mut map = self.inner.sessions.write().expect("session map lock");
        let id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !map.contains_key(&id) {
                break id;
            }
        };
        let session = self.inner.engine.start_session(id.clone(), mode, card_id, seed)?;
        self.persist(&session)?;
        let view = session_view(self.inner.engine.forest(), &session)?;
        map.insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&SteeringEngine, &Session) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let handle = self.session(id)?;
        let session = handle.lock().expect("session lock");
        f(&self.inner.engine, &session)
    }

    /// Runs `f` on a copy of the session and commits it only once `f`
    /// succeeded and the history was persisted.
    pub fn mutate_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&SteeringEngine, &mut Session) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let handle = self.session(id)?;
        let mut session = handle.lock().expect("session lock");
        let mut draft = session.clone();
        let out = f(&self.inner.engine, &mut draft)?;
        if draft.history().len() != session.history().len() {
            self.persist(&draft)?;
        }
        *session = draft;
        Ok(out)
    }

    fn persist(&self, session: &Session) -> Result<(), ApiError> {
        let Some(dir) = &self.inner.sessions_dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.jsonl", session.id));
        let tmp = dir.join(format!(".{}.jsonl.tmp", session.id));
        fs::write(&tmp, session.history_jsonl()).map_err(|e| io_error(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_error(&path, e))
    }

    pub fn study<T>(&self, f: impl FnOnce(&mut RatingStore) -> Result<T, StudyError>) -> Result<T, ApiError> {
        let mut store = self.inner.store.lock().expect("rating store lock");
        f(&mut store).map_err(ApiError::from)
    }

    pub fn report(&self) -> Result<Report, ApiError> {
        let order: Vec<String> = self.inner.deck.ids().map(str::to_string).collect();
        self.study(|store| Ok(aggregate_report(store, &order)))
    }
}

/// Replays every `*.jsonl` history; a log that fails to replay is skipped
/// with a warning.
fn restore_sessions(engine: &SteeringEngine, dir: &Path) -> Result<Vec<(String, Session)>, ApiError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        match parse_history_jsonl(&text).and_then(|h| engine.replay(&h)) {
            Ok(session) => out.push((session.id.clone(), session)),
            Err(e) => eprintln!("warning: skipping session log {}: {e}", path.display()),
        }
    }
    Ok(out)
}

//! Append-only session history.
//!
//! Layout: `<root>/<session_id>/events.jsonl` holds one event per line and
//! `<root>/<session_id>/artifacts/` the PNG files they reference.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{ServiceError, ServiceResult};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const ARTIFACT_DIR: &str = "artifacts";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub index: u64,
    /// Milliseconds since the Unix epoch; strictly increasing within a
    /// session.
    pub timestamp_ms: u64,
    pub seed: u64,
    pub fine_model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_model: Option<String>,
    /// Artifact file names inside the session's artifact directory.
    pub coarse: String,
    pub fine: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb: Option<String>,
    pub resampled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub events: Vec<SessionEvent>,
}

/// PNG payloads for one new event, written before the event line.
pub struct NewEvent<'a> {
    pub seed: u64,
    pub fine_model: &'a str,
    pub rgb_model: Option<&'a str>,
    pub coarse_png: &'a [u8],
    pub fine_png: &'a [u8],
    pub rgb_png: Option<&'a [u8]>,
    pub resampled: bool,
}

pub struct SessionStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Internal(format!("{}: {e}", path.display()))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> ServiceResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> ServiceResult<PathBuf> {
        let dir = self.root.join(id);
        if !valid_id(id) || !dir.join(EVENTS_FILE).is_file() {
            return Err(ServiceError::NotFound(format!("unknown session `{id}`")));
        }
        Ok(dir)
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        Arc::clone(locks.entry(id.to_string()).or_default())
    }

    pub fn create(&self) -> ServiceResult<Session> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        let art = dir.join(ARTIFACT_DIR);
        fs::create_dir_all(&art).map_err(|e| io_err(&art, e))?;
        let events = dir.join(EVENTS_FILE);
        fs::write(&events, b"").map_err(|e| io_err(&events, e))?;
        Ok(Session {
            session_id: id,
            events: Vec::new(),
        })
    }

    pub fn get(&self, id: &str) -> ServiceResult<Session> {
        let path = self.dir(id)?.join(EVENTS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
            })
            .collect::<ServiceResult<Vec<SessionEvent>>>()?;
        Ok(Session {
            session_id: id.to_string(),
            events,
        })
    }

    /// Session ids sorted lexically.
    pub fn list(&self) -> ServiceResult<Vec<String>> {
        let rd = fs::read_dir(&self.root).map_err(|e| io_err(&self.root, e))?;
        let mut ids: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(EVENTS_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Writes the artifacts and appends the event under the session lock.
    pub fn append(&self, id: &str, new: NewEvent<'_>) -> ServiceResult<SessionEvent> {
        let dir = self.dir(id)?;
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let prev = self.get(id)?.events.pop();
        let index = prev.as_ref().map_or(0, |e| e.index + 1);
        let timestamp_ms = match &prev {
            Some(p) => now_ms().max(p.timestamp_ms + 1),
            None => now_ms(),
        };
        let art = dir.join(ARTIFACT_DIR);
        let write = |name: String, bytes: &[u8]| -> ServiceResult<String> {
            let p = art.join(&name);
            fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
            Ok(name)
        };
        let event = SessionEvent {
            index,
            timestamp_ms,
            seed: new.seed,
            fine_model: new.fine_model.to_string(),
            rgb_model: new.rgb_model.map(str::to_string),
            coarse: write(format!("{index:05}_coarse.png"), new.coarse_png)?,
            fine: write(format!("{index:05}_fine.png"), new.fine_png)?,
            rgb: new
                .rgb_png
                .map(|b| write(format!("{index:05}_rgb.png"), b))
                .transpose()?,
            resampled: new.resampled,
        };
        let path = dir.join(EVENTS_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let line = serde_json::to_string(&event)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| io_err(&path, e))?;
        Ok(event)
    }

    /// Reads one artifact. Names with path separators are rejected.
    pub fn artifact(&self, id: &str, name: &str) -> ServiceResult<Vec<u8>> {
        let dir = self.dir(id)?;
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(ServiceError::BadRequest(format!("bad artifact name `{name}`")));
        }
        let p = dir.join(ARTIFACT_DIR).join(name);
        fs::read(&p).map_err(|_| ServiceError::NotFound(format!("artifact `{id}/{name}`")))
    }
}

pub fn artifact_url(session_id: &str, name: &str) -> String {
    format!("/artifacts/{session_id}/{name}")
}

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl Turn {
    pub fn user(content: &str, image_id: Option<String>) -> Self {
        Self {
            role: Role::User,
            content: content.to_string(),
            image_id,
        }
    }

    pub fn assistant(content: &str) -> Self {
        Self {
            role: Role::Assistant,
            content: content.to_string(),
            image_id: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub history: Vec<Turn>,
    /// Union of the concepts referenced so far, in first-use order.
    pub active_concepts: Vec<String>,
}

/// In-memory sessions. Each session sits behind its own lock so turns in
/// different sessions do not contend.
#[derive(Default)]
pub struct SessionStore {
    inner: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    fn slot(&self, id: &str) -> Arc<Mutex<Session>> {
        let mut map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(Session {
                    session_id: id.to_string(),
                    ..Default::default()
                }))
            })
            .clone()
    }

    /// Appends one exchange; history only ever grows.
    pub fn append(&self, id: &str, concepts: &[String], user: Turn, assistant: Turn) {
        let slot = self.slot(id);
        let mut s = slot.lock().unwrap_or_else(|e| e.into_inner());
        for c in concepts {
            if !s.active_concepts.contains(c) {
                s.active_concepts.push(c.clone());
            }
        }
        s.history.push(user);
        s.history.push(assistant);
    }

    pub fn get(&self, id: &str) -> Option<Session> {
        let map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        map.get(id).map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).clone())
    }

    pub fn snapshot(&self) -> Vec<Session> {
        let map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let mut all: Vec<Session> = map
            .values()
            .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .collect();
        all.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        all
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(&self.snapshot())?;
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let sessions: Vec<Session> = serde_json::from_slice(&std::fs::read(path)?)?;
        let store = Self::default();
        {
            let mut map = store.inner.lock().unwrap_or_else(|e| e.into_inner());
            for s in sessions {
                map.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_appends_and_snapshots_round_trip() {
        let store = SessionStore::default();
        store.append("s1", &["⟨a⟩".into()], Turn::user("hi", None), Turn::assistant("Yes"));
        store.append("s1", &["⟨b⟩".into(), "⟨a⟩".into()], Turn::user("q", Some("img".into())), Turn::assistant("No"));
        let s = store.get("s1").unwrap();
        assert_eq!(s.history.len(), 4);
        assert_eq!(s.active_concepts, vec!["⟨a⟩", "⟨b⟩"]);
        let dir = std::env::temp_dir().join(format!("plvm-sessions-{}", std::process::id()));
        store.save(&dir).unwrap();
        let back = SessionStore::load(&dir).unwrap();
        assert_eq!(back.snapshot(), store.snapshot());
        let _ = std::fs::remove_file(dir);
    }
}

//! Versioned session persistence on an embedded SQLite file in WAL mode.
//!
//! Logical tables are described in `docs/schema.md`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rusqlite::{params, Connection, ErrorCode, OptionalExtension};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::protocol::{AgentEvent, InputItem};

pub const STATE_SCHEMA_VERSION: i64 = 5;
pub const LOG_SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreVersion {
    pub state_schema: i64,
    pub log_schema: i64,
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("store schema {found} is newer than supported {supported}")]
    SchemaTooNew { found: i64, supported: i64 },
    #[error("store schema {found} predates the oldest supported version {supported}")]
    SchemaTooOld { found: i64, supported: i64 },
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub created_at_ms: u64,
    pub config: Value,
    pub status: String,
}

impl SessionRecord {
    pub fn new(session_id: impl Into<String>, config: Value) -> Self {
        Self {
            session_id: session_id.into(),
            created_at_ms: now_ms(),
            config,
            status: "running".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub memory_id: String,
    pub session_id: String,
    pub text: String,
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    pub session_id: String,
    pub parent_id: Option<String>,
    pub depth: u32,
    pub status: String,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

const SCHEMA: &str = "
CREATE TABLE sessions (
    session_id TEXT PRIMARY KEY,
    created_at INTEGER NOT NULL,
    config TEXT NOT NULL,
    status TEXT NOT NULL
);
CREATE TABLE messages (
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    seq INTEGER NOT NULL,
    item TEXT NOT NULL,
    PRIMARY KEY (session_id, seq)
);
CREATE TABLE agents (
    agent_id TEXT PRIMARY KEY,
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    parent_id TEXT,
    depth INTEGER NOT NULL,
    status TEXT NOT NULL
);
CREATE TABLE memories (
    memory_id TEXT PRIMARY KEY,
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    text TEXT NOT NULL,
    created_at INTEGER NOT NULL
);
CREATE TABLE events (
    session_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    event TEXT NOT NULL,
    PRIMARY KEY (session_id, seq)
);
";

fn corrupt_on_notadb(e: rusqlite::Error) -> StateError {
    match e.sqlite_error_code() {
        Some(ErrorCode::NotADatabase) | Some(ErrorCode::DatabaseCorrupt) => {
            StateError::CorruptStore(e.to_string())
        }
        _ => StateError::Sqlite(e),
    }
}

pub struct Store {
    conn: Connection,
    path: PathBuf,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

/// Opens (creating if needed) the store at `path`.
pub fn open_store(path: &Path) -> Result<Store, StateError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StateError::CorruptStore(e.to_string()))?;
    }
    let conn = Connection::open(path).map_err(corrupt_on_notadb)?;
    let mode: String = conn
        .query_row("PRAGMA journal_mode=WAL", [], |r| r.get(0))
        .map_err(corrupt_on_notadb)?;
    if !mode.eq_ignore_ascii_case("wal") {
        return Err(StateError::CorruptStore(format!(
            "could not enable WAL (journal_mode={mode})"
        )));
    }
    conn.execute_batch(
        "PRAGMA synchronous=NORMAL; PRAGMA foreign_keys=ON; PRAGMA busy_timeout=5000;",
    )
    .map_err(corrupt_on_notadb)?;
    conn.execute_batch(
        "CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value INTEGER NOT NULL)",
    )
    .map_err(corrupt_on_notadb)?;

    let stored = |key: &str| -> Result<Option<i64>, StateError> {
        Ok(conn
            .query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))
            .optional()?)
    };
    match (stored("state_schema")?, stored("log_schema")?) {
        (None, None) => {
            let tx = conn.unchecked_transaction()?;
            tx.execute_batch(SCHEMA)?;
            tx.execute(
                "INSERT INTO meta (key, value) VALUES ('state_schema', ?1), ('log_schema', ?2)",
                params![STATE_SCHEMA_VERSION, LOG_SCHEMA_VERSION],
            )?;
            tx.commit()?;
        }
        (Some(state), Some(log)) => {
            for (found, supported) in [(state, STATE_SCHEMA_VERSION), (log, LOG_SCHEMA_VERSION)] {
                if found > supported {
                    return Err(StateError::SchemaTooNew { found, supported });
                }
                if found < supported {
                    return Err(StateError::SchemaTooOld { found, supported });
                }
            }
        }
        _ => {
            return Err(StateError::CorruptStore(
                "incomplete schema version stamp".into(),
            ))
        }
    }
    Ok(Store {
        conn,
        path: path.to_path_buf(),
    })
}

impl Store {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn version(&self) -> Result<StoreVersion, StateError> {
        let get = |key: &str| -> Result<i64, StateError> {
            Ok(self
                .conn
                .query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0))?)
        };
        Ok(StoreVersion {
            state_schema: get("state_schema")?,
            log_schema: get("log_schema")?,
        })
    }

    /// Writes the session row and replaces its messages in one transaction.
    pub fn persist_session(
        &mut self,
        session: &SessionRecord,
        messages: &[InputItem],
    ) -> Result<(), StateError> {
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO sessions (session_id, created_at, config, status) VALUES (?1, ?2, ?3, ?4)
             ON CONFLICT(session_id) DO UPDATE SET config = excluded.config, status = excluded.status",
            params![
                session.session_id,
                session.created_at_ms as i64,
                session.config.to_string(),
                session.status
            ],
        )?;
        tx.execute(
            "DELETE FROM messages WHERE session_id = ?1",
            [&session.session_id],
        )?;
        {
            let mut stmt = tx.prepare_cached(
                "INSERT INTO messages (session_id, seq, item) VALUES (?1, ?2, ?3)",
            )?;
            for (seq, item) in messages.iter().enumerate() {
                let json =
                    serde_json::to_string(item).expect("InputItem serialization is infallible");
                stmt.execute(params![session.session_id, seq as i64, json])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    pub fn set_status(&mut self, session_id: &str, status: &str) -> Result<(), StateError> {
        let n = self.conn.execute(
            "UPDATE sessions SET status = ?2 WHERE session_id = ?1",
            params![session_id, status],
        )?;
        if n == 0 {
            return Err(StateError::UnknownSession(session_id.to_string()));
        }
        Ok(())
    }

    pub fn load_session(
        &self,
        session_id: &str,
    ) -> Result<(SessionRecord, Vec<InputItem>), StateError> {
        // One read transaction so the row and its messages come from the same
        // snapshot.
        let tx = self.conn.unchecked_transaction()?;
        let record = tx
            .query_row(
                "SELECT session_id, created_at, config, status FROM sessions WHERE session_id = ?1",
                [session_id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, i64>(1)?,
                        r.get::<_, String>(2)?,
                        r.get::<_, String>(3)?,
                    ))
                },
            )
            .optional()?
            .ok_or_else(|| StateError::UnknownSession(session_id.to_string()))?;
        let config =
            serde_json::from_str(&record.2).map_err(|e| StateError::CorruptStore(e.to_string()))?;
        let session = SessionRecord {
            session_id: record.0,
            created_at_ms: record.1 as u64,
            config,
            status: record.3,
        };
        let mut messages = Vec::new();
        {
            let mut stmt =
                tx.prepare_cached("SELECT item FROM messages WHERE session_id = ?1 ORDER BY seq")?;
            let rows = stmt.query_map([session_id], |r| r.get::<_, String>(0))?;
            for row in rows {
                messages.push(
                    serde_json::from_str(&row?)
                        .map_err(|e| StateError::CorruptStore(e.to_string()))?,
                );
            }
        }
        tx.finish()?;
        Ok((session, messages))
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StateError> {
        let mut stmt = self
            .conn
            .prepare("SELECT session_id FROM sessions ORDER BY created_at, session_id")?;
        let ids = stmt
            .query_map([], |r| r.get(0))?
            .collect::<Result<_, _>>()?;
        Ok(ids)
    }

    pub fn append_event(&mut self, session_id: &str, event: &AgentEvent) -> Result<(), StateError> {
        let json = serde_json::to_string(event).expect("event serialization is infallible");
        self.conn.execute(
            "INSERT INTO events (session_id, seq, event)
             VALUES (?1, (SELECT COALESCE(MAX(seq) + 1, 0) FROM events WHERE session_id = ?1), ?2)",
            params![session_id, json],
        )?;
        Ok(())
    }

    pub fn load_events(&self, session_id: &str) -> Result<Vec<AgentEvent>, StateError> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT event FROM events WHERE session_id = ?1 ORDER BY seq")?;
        let rows = stmt.query_map([session_id], |r| r.get::<_, String>(0))?;
        rows.map(|row| {
            serde_json::from_str(&row?).map_err(|e| StateError::CorruptStore(e.to_string()))
        })
        .collect()
    }

    pub fn upsert_agent(&mut self, agent: &AgentRecord) -> Result<(), StateError> {
        self.ensure_session(&agent.session_id)?;
        self.conn.execute(
            "INSERT INTO agents (agent_id, session_id, parent_id, depth, status) VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(agent_id) DO UPDATE SET status = excluded.status",
            params![agent.agent_id, agent.session_id, agent.parent_id, agent.depth, agent.status],
        )?;
        Ok(())
    }

    pub fn agents(&self, session_id: &str) -> Result<Vec<AgentRecord>, StateError> {
        let mut stmt = self.conn.prepare(
            "SELECT agent_id, session_id, parent_id, depth, status FROM agents WHERE session_id = ?1 ORDER BY rowid",
        )?;
        let rows = stmt.query_map([session_id], |r| {
            Ok(AgentRecord {
                agent_id: r.get(0)?,
                session_id: r.get(1)?,
                parent_id: r.get(2)?,
                depth: r.get(3)?,
                status: r.get(4)?,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn add_memory(&mut self, memory: &MemoryRecord) -> Result<(), StateError> {
        self.ensure_session(&memory.session_id)?;
        self.conn.execute(
            "INSERT INTO memories (memory_id, session_id, text, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![memory.memory_id, memory.session_id, memory.text, memory.created_at_ms as i64],
        )?;
        Ok(())
    }

    pub fn memories(&self, session_id: &str) -> Result<Vec<MemoryRecord>, StateError> {
        let mut stmt = self.conn.prepare(
            "SELECT memory_id, session_id, text, created_at FROM memories WHERE session_id = ?1 ORDER BY created_at, rowid",
        )?;
        let rows = stmt.query_map([session_id], |r| {
            Ok(MemoryRecord {
                memory_id: r.get(0)?,
                session_id: r.get(1)?,
                text: r.get(2)?,
                created_at_ms: r.get::<_, i64>(3)? as u64,
            })
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    fn ensure_session(&self, session_id: &str) -> Result<(), StateError> {
        let exists: bool = self.conn.query_row(
            "SELECT EXISTS(SELECT 1 FROM sessions WHERE session_id = ?1)",
            [session_id],
            |r| r.get(0),
        )?;
        if exists {
            Ok(())
        } else {
            Err(StateError::UnknownSession(session_id.to_string()))
        }
    }

    /// Line-delimited JSON dump: the session, then messages, agents,
    /// memories and events.
    pub fn export_session(&self, session_id: &str) -> Result<String, StateError> {
        let (session, messages) = self.load_session(session_id)?;
        let mut lines = vec![json!({"record": "session", "data": session})];
        lines.extend(
            messages
                .iter()
                .map(|m| json!({"record": "message", "data": m})),
        );
        lines.extend(
            self.agents(session_id)?
                .iter()
                .map(|a| json!({"record": "agent", "data": a})),
        );
        lines.extend(
            self.memories(session_id)?
                .iter()
                .map(|m| json!({"record": "memory", "data": m})),
        );
        lines.extend(
            self.load_events(session_id)?
                .iter()
                .map(|e| json!({"record": "event", "data": e})),
        );
        Ok(lines.iter().map(|l| format!("{l}\n")).collect())
    }

    #[doc(hidden)]
    pub fn stamp_version_for_tests(&mut self, key: &str, value: i64) -> Result<(), StateError> {
        self.conn.execute(
            "UPDATE meta SET value = ?2 WHERE key = ?1",
            params![key, value],
        )?;
        Ok(())
    }
}

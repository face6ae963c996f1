//! Sessions: engine, live state and event log per id, plus recovery from the logs on disk.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use worksheet::engine::Engine;
use worksheet::eventlog::{recover_log, redact, replay, secrets_in, Event, EventWriter, LogLine};
use worksheet::kb::{KbStore, LlmTranslator, TableTranslator, Translator};
use worksheet::llm::{BackendError, LlmClient};
use worksheet::policy::{ExecutionRecord, KnowledgeBackend};
use worksheet::respond::{LlmResponder, ResponderBackend, TemplateResponder};
use worksheet::semparse::{default_few_shots, Clock, LlmParser, ParseRequest, ParserBackend, ScriptedBackend};
use worksheet::spec::{load_spec_file, TaskSpec};
use worksheet::state::DialogueState;

use crate::config::Config;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown spec `{0}`")]
    UnknownSpec(String),
    #[error("backend setup failed: {0}")]
    BackendInit(String),
    #[error("no session `{0}`")]
    SessionNotFound(String),
    #[error("session `{0}` is handling another turn")]
    SessionBusy(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownSpec(_) => "UnknownSpec",
            ServiceError::BackendInit(_) => "BackendInitError",
            ServiceError::SessionNotFound(_) => "SessionNotFound",
            ServiceError::SessionBusy(_) => "SessionBusy",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Storage(_) => "StorageError",
        }
    }
}

fn storage(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParserChoice {
    #[default]
    Llm,
    /// Parser output per turn number, for tests and demos. Parser calls whose 1-based position
    /// is listed in `fail_calls` fail instead, to exercise the error path.
    Scripted {
        #[serde(deserialize_with = "turn_keys")]
        script: BTreeMap<u32, String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        fail_calls: Vec<usize>,
    },
}

// Internally tagged enums buffer their content, which loses the string-to-int coercion of map keys.
fn turn_keys<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, String>, D::Error> {
    let raw = BTreeMap::<String, String>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| k.trim().parse().map(|k| (k, v)).map_err(|_| serde::de::Error::custom(format!("script key `{k}` is not a turn number"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResponderChoice {
    #[default]
    Template,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorChoice {
    /// Lookup table from the spec's `translations.json`.
    #[default]
    Table,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub parser: ParserChoice,
    pub responder: ResponderChoice,
    pub translator: TranslatorChoice,
    /// Stub api seed; the configured seed when unset.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub spec: String,
    #[serde(default)]
    pub backends: Backends,
}

/// Written next to each log so a restarted server can rebuild the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionMeta {
    id: String,
    spec: String,
    backends: Backends,
    created_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn: u32,
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub acts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnPayload {
    pub turn: u32,
    pub reply: String,
    pub acts: Vec<String>,
    pub executions: Vec<ExecutionRecord>,
    pub state: DialogueState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub spec: String,
    pub created_at: String,
    pub updated_at: String,
    pub state: DialogueState,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greeting: Option<String>,
}

/// Rebuild the user-visible conversation from logged events.
pub fn transcript_of(lines: &[LogLine]) -> Vec<TranscriptEntry> {
    let mut out = Vec::new();
    let mut turn = 0;
    let mut acts = Vec::new();
    for l in lines {
        match &l.event {
            Event::SessionStarted { greeting: Some(g), .. } => {
                out.push(TranscriptEntry { turn: 0, speaker: Speaker::Agent, text: g.clone(), acts: vec![] })
            }
            Event::UserTurn { turn: t, utterance } => {
                turn = *t;
                acts.clear();
                out.push(TranscriptEntry { turn, speaker: Speaker::User, text: utterance.clone(), acts: vec![] });
            }
            Event::Act { canonical, .. } => acts.push(canonical.clone()),
            Event::Reply { text } => {
                out.push(TranscriptEntry { turn, speaker: Speaker::Agent, text: text.clone(), acts: std::mem::take(&mut acts) })
            }
            _ => {}
        }
    }
    out
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct Session {
    meta: SessionMeta,
    engine: Engine,
    state: DialogueState,
    log: EventWriter<File>,
    lines: Vec<LogLine>,
    redact_fields: Vec<String>,
    updated_at: String,
}

impl Session {
    fn append(&mut self, events: Vec<Event>) -> Result<(), ServiceError> {
        let known = secrets_in(&self.state, &self.redact_fields);
        for e in events {
            let e = redact(&e, &self.redact_fields, &known);
            let ts = now();
            self.log.append(e.clone(), Some(ts.clone())).map_err(storage)?;
            self.lines.push(LogLine { seq: self.lines.len() as u64, ts: Some(ts), event: e });
        }
        Ok(())
    }

    /// Blocking: runs the parser, policy and responder, then appends the turn's events.
    pub fn take_turn(&mut self, utterance: &str) -> Result<TurnPayload, ServiceError> {
        let (r, events) = self.engine.take_turn(&mut self.state, utterance);
        self.append(events)?;
        self.updated_at = now();
        Ok(TurnPayload {
            turn: self.lines.iter().filter(|l| matches!(l.event, Event::UserTurn { .. })).count() as u32,
            acts: r.canonical_acts(),
            reply: r.reply,
            executions: r.executions,
            state: self.state.clone(),
            backend_error: r.backend_error,
        })
    }

    pub fn state(&self) -> &DialogueState {
        &self.state
    }

    pub fn log_lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.meta.id.clone(),
            spec: self.meta.spec.clone(),
            created_at: self.meta.created_at.clone(),
            updated_at: self.updated_at.clone(),
            state: self.state.clone(),
            transcript: transcript_of(&self.lines),
        }
    }
}

struct FaultInjecting {
    inner: ScriptedBackend,
    fail_calls: Vec<usize>,
    calls: AtomicUsize,
}

impl ParserBackend for FaultInjecting {
    fn complete(&self, req: &ParseRequest<'_>) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_calls.contains(&n) {
            return Err(BackendError::Transport(format!("injected failure on parser call {n}")));
        }
        self.inner.complete(req)
    }
}

struct Loaded {
    spec: Arc<TaskSpec>,
    store: Arc<KbStore>,
    table: Arc<TableTranslator>,
}

pub type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct Store {
    config: Config,
    specs: Mutex<HashMap<String, Arc<Loaded>>>,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

fn is_identifier(s: &str) -> bool {
    let mut c = s.chars();
    c.next().is_some_and(|f| f.is_ascii_alphabetic() || f == '_') && c.all(|x| x.is_ascii_alphanumeric() || x == '_' || x == '-')
}

impl Store {
    /// Open the data directory and rebuild every session whose log is there.
    pub fn open(config: Config) -> Result<Store, ServiceError> {
        std::fs::create_dir_all(config.data_dir.join("sessions")).map_err(storage)?;
        let store = Store { config, specs: Mutex::new(HashMap::new()), sessions: RwLock::new(HashMap::new()) };
        store.recover_all()?;
        Ok(store)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    fn session_dir(&self) -> PathBuf {
        self.config.data_dir.join("sessions")
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.session_dir().join(format!("{id}.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.session_dir().join(format!("{id}.meta.json"))
    }

    fn spec_path(&self, name: &str) -> Option<PathBuf> {
        ["json", "csv"].iter().map(|ext| self.config.specs_dir.join(format!("{name}.{ext}"))).find(|p| p.is_file())
    }

    fn load(&self, name: &str) -> Result<Arc<Loaded>, ServiceError> {
        if let Some(l) = self.specs.lock().expect("spec cache").get(name) {
            return Ok(l.clone());
        }
        if !is_identifier(name) {
            return Err(ServiceError::UnknownSpec(name.into()));
        }
        let path = self.spec_path(name).ok_or_else(|| ServiceError::UnknownSpec(name.into()))?;
        let spec = load_spec_file(&path).map_err(|e| ServiceError::BackendInit(e.to_string()))?;
        let kb_dir = self.config.kb_root.join(name);
        let store = if spec.kb_schemas.is_empty() {
            KbStore::new()
        } else {
            KbStore::load_dir(&spec, &kb_dir).map_err(|e| ServiceError::BackendInit(e.to_string()))?
        };
        let tr_path = kb_dir.join("translations.json");
        let table = if tr_path.is_file() {
            let text = std::fs::read_to_string(&tr_path).map_err(|e| ServiceError::BackendInit(e.to_string()))?;
            TableTranslator::from_json(&text).map_err(|e| ServiceError::BackendInit(format!("{}: {e}", tr_path.display())))?
        } else {
            TableTranslator::default()
        };
        let loaded = Arc::new(Loaded { spec: Arc::new(spec), store: Arc::new(store), table: Arc::new(table) });
        self.specs.lock().expect("spec cache").insert(name.into(), loaded.clone());
        Ok(loaded)
    }

    fn engine(&self, loaded: &Loaded, b: &Backends) -> Engine {
        let llm = || LlmClient::http(self.config.llm.clone());
        let parser: Arc<dyn ParserBackend> = match &b.parser {
            ParserChoice::Llm => Arc::new(LlmParser { client: llm() }),
            ParserChoice::Scripted { script, fail_calls } if fail_calls.is_empty() => Arc::new(ScriptedBackend::new(script.clone())),
            ParserChoice::Scripted { script, fail_calls } => Arc::new(FaultInjecting {
                inner: ScriptedBackend::new(script.clone()),
                fail_calls: fail_calls.clone(),
                calls: AtomicUsize::new(0),
            }),
        };
        let responder: Arc<dyn ResponderBackend> = match b.responder {
            ResponderChoice::Template => Arc::new(TemplateResponder),
            ResponderChoice::Llm => Arc::new(LlmResponder { client: llm() }),
        };
        let translator: Arc<dyn Translator> = match b.translator {
            TranslatorChoice::Table => loaded.table.clone(),
            TranslatorChoice::Llm => Arc::new(LlmTranslator { client: llm() }),
        };
        Engine {
            spec: loaded.spec.clone(),
            kb: KnowledgeBackend { store: loaded.store.clone(), translator },
            apis: worksheet::apis::ApiRuntime::new(b.seed.unwrap_or(self.config.seed)),
            parser,
            responder,
            clock: Clock { date: self.config.clock.unwrap_or_else(|| chrono::Local::now().date_naive()) },
            few_shots: default_few_shots(),
        }
    }

    /// Blocking: loads the spec on first use and writes the session files.
    pub fn create(&self, req: &CreateSession) -> Result<Created, ServiceError> {
        let loaded = self.load(&req.spec)?;
        let engine = self.engine(&loaded, &req.backends);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let meta = SessionMeta { id: id.clone(), spec: req.spec.clone(), backends: req.backends.clone(), created_at: now() };
        std::fs::write(self.meta_path(&id), serde_json::to_vec_pretty(&meta).expect("meta serializes")).map_err(storage)?;
        let file = File::create(self.log_path(&id)).map_err(storage)?;
        let (state, events) = engine.start();
        let greeting = loaded.spec.greeting.clone();
        let mut s = Session {
            updated_at: meta.created_at.clone(),
            meta,
            engine,
            state,
            log: EventWriter::new(file),
            lines: vec![],
            redact_fields: self.config.redact_fields.clone(),
        };
        s.append(events)?;
        self.sessions.write().expect("sessions").insert(id.clone(), Arc::new(tokio::sync::Mutex::new(s)));
        tracing::info!(session = %id, spec = %req.spec, "session created");
        Ok(Created { session_id: id, greeting })
    }

    pub fn session(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions.read().expect("sessions").get(id).cloned().ok_or_else(|| ServiceError::SessionNotFound(id.into()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("sessions").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn recover(&self, meta_path: &Path) -> Result<(), ServiceError> {
        let meta: SessionMeta = serde_json::from_slice(&std::fs::read(meta_path).map_err(storage)?).map_err(storage)?;
        let loaded = self.load(&meta.spec)?;
        let engine = self.engine(&loaded, &meta.backends);
        let path = self.log_path(&meta.id);
        let lines = recover_log(&path).map_err(storage)?;
        let state = replay(&lines);
        let file = OpenOptions::new().append(true).open(&path).map_err(storage)?;
        let updated_at = lines.iter().rev().find_map(|l| l.ts.clone()).unwrap_or_else(|| meta.created_at.clone());
        let id = meta.id.clone();
        let s = Session {
            log: EventWriter::resume(file, lines.len() as u64),
            meta,
            engine,
            state,
            lines,
            redact_fields: self.config.redact_fields.clone(),
            updated_at,
        };
        self.sessions.write().expect("sessions").insert(id, Arc::new(tokio::sync::Mutex::new(s)));
        Ok(())
    }

    fn recover_all(&self) -> Result<(), ServiceError> {
        for entry in std::fs::read_dir(self.session_dir()).map_err(storage)? {
            let p = entry.map_err(storage)?.path();
            if p.to_string_lossy().ends_with(".meta.json") {
                if let Err(e) = self.recover(&p) {
                    tracing::warn!(path = %p.display(), error = %e, "could not recover session");
                }
            }
        }
        Ok(())
    }
}

//! The single boundary for language-model and embedding calls.
//!
//! Callers build a [`ChatRequest`] and send it through an [`OracleSession`],
//! which numbers the call, retries transient backend failures, and appends a
//! [`CallRecord`] to its log. Sessions are scoped (one per task, one per
//! maintenance barrier) so call ordinals do not depend on thread scheduling;
//! the writer concatenates session logs in a fixed order at each barrier.

mod remote;
mod scripted;
pub mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::text::HashingEmbedder;

pub use remote::{HttpTransport, RemoteBackend, RemoteConfig, ReqwestTransport, TransportError};
pub use scripted::{PatternRule, Responder, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Executor,
    Extractor,
    Refactorer,
    Refiner,
    Credit,
    BundleVerdict,
    Meta,
}

impl RoleTag {
    pub const ALL: [RoleTag; 7] = [
        Self::Executor,
        Self::Extractor,
        Self::Refactorer,
        Self::Refiner,
        Self::Credit,
        Self::BundleVerdict,
        Self::Meta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Executor => "executor",
            Self::Extractor => "extractor",
            Self::Refactorer => "refactorer",
            Self::Refiner => "refiner",
            Self::Credit => "credit",
            Self::BundleVerdict => "bundle_verdict",
            Self::Meta => "meta",
        }
    }

    /// Executor and verdict calls always decode greedily.
    pub fn requires_greedy(self) -> bool {
        matches!(self, Self::Executor | Self::BundleVerdict)
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

impl Speaker {
    pub fn wire_name(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
            Self::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::System, text: text.into() }
    }
    pub fn user(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::User, text: text.into() }
    }
    pub fn assistant(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub messages: Vec<Message>,
    pub decode: DecodeParams,
}

impl ChatRequest {
    /// Builds a request; greedy roles get temperature 0 regardless of the
    /// requested value.
    pub fn new(role_tag: RoleTag, messages: Vec<Message>, temperature: f64) -> Self {
        let temperature = if role_tag.requires_greedy() { 0.0 } else { temperature };
        Self {
            role_tag,
            messages,
            decode: DecodeParams { temperature, max_output_tokens: 1024 },
        }
    }

    /// Single user message request.
    pub fn prompt(role_tag: RoleTag, text: impl Into<String>, temperature: f64) -> Self {
        Self::new(role_tag, vec![Message::user(text)], temperature)
    }

    /// All message texts joined, as seen by a text-matching backend.
    pub fn flat_text(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// Call scope. Ordinals are counted per (scope, role).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Scope {
    Global,
    Task(u64),
    Barrier(u64),
    Eval(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallKey {
    pub scope: Scope,
    pub role: RoleTag,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
    #[error("scripted tape exhausted for {role} call #{ordinal}")]
    TapeExhausted { role: RoleTag, ordinal: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    TransportFailure { attempts: u32, detail: String },
    #[error("scripted tape exhausted for {role} call #{ordinal}")]
    TapeExhausted { role: RoleTag, ordinal: u32 },
}

/// Anything that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, key: &CallKey, request: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub key: CallKey,
    pub request: ChatRequest,
    pub outcome: CallOutcome,
    pub attempts: u32,
}

impl CallRecord {
    pub fn response(&self) -> Option<&str> {
        match &self.outcome {
            CallOutcome::Ok(t) => Some(t),
            CallOutcome::Failed(_) => None,
        }
    }
}

/// Append-only call log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallLog {
    pub records: Vec<CallRecord>,
}

impl CallLog {
    pub fn extend(&mut self, other: CallLog) {
        self.records.extend(other.records);
    }

    pub fn count(&self, role: RoleTag) -> usize {
        self.records.iter().filter(|r| r.key.role == role).count()
    }

    pub fn iter_role(&self, role: RoleTag) -> impl Iterator<Item = &CallRecord> {
        self.records.iter().filter(move |r| r.key.role == role)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("call record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }
}

/// Shared handle over a backend plus the transport retry budget.
#[derive(Clone)]
pub struct Oracle {
    backend: Arc<dyn ChatBackend>,
    retry_budget: u32,
    embedder: HashingEmbedder,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle").field("retry_budget", &self.retry_budget).finish()
    }
}

impl Oracle {
    pub fn new(backend: Arc<dyn ChatBackend>, retry_budget: u32) -> Self {
        Self { backend, retry_budget, embedder: HashingEmbedder::default() }
    }

    pub fn session(&self, scope: Scope) -> OracleSession {
        OracleSession {
            oracle: self.clone(),
            scope,
            ordinals: BTreeMap::new(),
            log: CallLog::default(),
        }
    }

    pub fn retry_budget(&self) -> u32 {
        self.retry_budget
    }

    /// Unit-norm local embedding; the zero vector for empty text.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.embedder.embed(text)
    }
}

/// A scoped, logging view of an [`Oracle`]. Not shared across threads: each
/// parallel task gets its own session.
#[derive(Debug)]
pub struct OracleSession {
    oracle: Oracle,
    scope: Scope,
    ordinals: BTreeMap<RoleTag, u32>,
    log: CallLog,
}

impl OracleSession {
    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn retry_budget(&self) -> u32 {
        self.oracle.retry_budget
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.oracle.embed(text)
    }

    pub fn chat(&mut self, request: ChatRequest) -> Result<String, OracleError> {
        let ordinal = {
            let slot = self.ordinals.entry(request.role_tag).or_insert(0);
            let o = *slot;
            *slot += 1;
            o
        };
        let key = CallKey { scope: self.scope, role: request.role_tag, ordinal };
        let max_attempts = 1 + self.oracle.retry_budget;
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.oracle.backend.complete(&key, &request) {
                Ok(text) => break Ok(text),
                Err(BackendError::Transient(detail)) if attempts < max_attempts => {
                    let _ = detail;
                    continue;
                }
                Err(BackendError::Transient(detail)) | Err(BackendError::Fatal(detail)) => {
                    break Err(OracleError::TransportFailure { attempts, detail })
                }
                Err(BackendError::TapeExhausted { role, ordinal }) => {
                    break Err(OracleError::TapeExhausted { role, ordinal })
                }
            }
        };
        let outcome = match &result {
            Ok(t) => CallOutcome::Ok(t.clone()),
            Err(e) => CallOutcome::Failed(e.to_string()),
        };
        self.log.records.push(CallRecord { key, request, outcome, attempts });
        result
    }

    pub fn log(&self) -> &CallLog {
        &self.log
    }

    pub fn into_log(self) -> CallLog {
        self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_roles_force_temperature_zero() {
        let r = ChatRequest::prompt(RoleTag::Executor, "x", 0.9);
        assert_eq!(r.decode.temperature, 0.0);
        let r = ChatRequest::prompt(RoleTag::BundleVerdict, "x", 0.5);
        assert_eq!(r.decode.temperature, 0.0);
        let r = ChatRequest::prompt(RoleTag::Extractor, "x", 0.7);
        assert_eq!(r.decode.temperature, 0.7);
    }

    #[test]
    fn first_call_returns_first_tape_entry_and_strict_tape_exhausts() {
        let backend = ScriptedBackend::strict().with_tape(RoleTag::Executor, ["A"]);
        let oracle = Oracle::new(Arc::new(backend), 2);
        let mut s = oracle.session(Scope::Global);
        assert_eq!(s.chat(ChatRequest::prompt(RoleTag::Executor, "q", 0.0)).unwrap(), "A");
        let err = s.chat(ChatRequest::prompt(RoleTag::Executor, "q", 0.0)).unwrap_err();
        assert_eq!(err, OracleError::TapeExhausted { role: RoleTag::Executor, ordinal: 1 });
        assert_eq!(s.log().records.len(), 2);
    }

    #[test]
    fn transient_failures_within_budget_succeed() {
        let backend = ScriptedBackend::strict()
            .with_failures(RoleTag::Credit, 2)
            .with_tape(RoleTag::Credit, ["ok"]);
        let oracle = Oracle::new(Arc::new(backend), 2);
        let mut s = oracle.session(Scope::Global);
        assert_eq!(s.chat(ChatRequest::prompt(RoleTag::Credit, "q", 0.0)).unwrap(), "ok");
        assert_eq!(s.log().records[0].attempts, 3);
    }

    #[test]
    fn transient_failures_beyond_budget_fail() {
        let backend = ScriptedBackend::strict()
            .with_failures(RoleTag::Credit, 3)
            .with_tape(RoleTag::Credit, ["ok"]);
        let oracle = Oracle::new(Arc::new(backend), 2);
        let mut s = oracle.session(Scope::Global);
        let err = s.chat(ChatRequest::prompt(RoleTag::Credit, "q", 0.0)).unwrap_err();
        assert!(matches!(err, OracleError::TransportFailure { attempts: 3, .. }));
    }

    #[test]
    fn ordinals_are_per_scope_and_role() {
        let backend = ScriptedBackend::lenient();
        let oracle = Oracle::new(Arc::new(backend), 0);
        let mut a = oracle.session(Scope::Task(1));
        let mut b = oracle.session(Scope::Task(2));
        for _ in 0..2 {
            let _ = a.chat(ChatRequest::prompt(RoleTag::Extractor, "x", 0.0));
        }
        let _ = a.chat(ChatRequest::prompt(RoleTag::Credit, "x", 0.0));
        let _ = b.chat(ChatRequest::prompt(RoleTag::Extractor, "x", 0.0));
        let ords: Vec<_> = a.log().records.iter().map(|r| (r.key.role, r.key.ordinal)).collect();
        assert_eq!(ords, vec![(RoleTag::Extractor, 0), (RoleTag::Extractor, 1), (RoleTag::Credit, 0)]);
        assert_eq!(b.log().records[0].key.ordinal, 0);
    }

    #[test]
    fn call_log_round_trips_through_jsonl() {
        let backend = ScriptedBackend::strict().with_tape(RoleTag::Meta, ["r1", "r2"]);
        let oracle = Oracle::new(Arc::new(backend), 0);
        let mut s = oracle.session(Scope::Barrier(3));
        s.chat(ChatRequest::prompt(RoleTag::Meta, "a", 0.2)).unwrap();
        s.chat(ChatRequest::prompt(RoleTag::Meta, "b", 0.2)).unwrap();
        let log = s.into_log();
        assert_eq!(CallLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}

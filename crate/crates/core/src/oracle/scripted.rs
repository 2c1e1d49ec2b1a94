use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use super::{BackendError, CallKey, CallLog, CallOutcome, ChatBackend, ChatRequest, RoleTag, Scope};

/// Programmatic fallback for a scripted backend. Returning `None` passes the
/// call on to the strict/lenient exhaustion handling.
pub trait Responder: Send + Sync {
    fn respond(&self, key: &CallKey, request: &ChatRequest) -> Option<String>;
}

/// Responds with `response` whenever the request text contains `needle`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternRule {
    pub role: Option<RoleTag>,
    pub needle: String,
    pub response: String,
}

#[derive(Debug, Clone)]
enum Entry {
    Text(String),
    Transient,
    Fatal(String),
}

/// Deterministic backend. Lookup order per call:
/// exact (scope, role, ordinal) entries, then the role's ordered tape, then
/// pattern rules, then responders. Nothing matched is an error in strict mode
/// and an empty completion otherwise.
#[derive(Clone, Default)]
pub struct ScriptedBackend {
    keyed: BTreeMap<CallKey, Entry>,
    tapes: Arc<Mutex<BTreeMap<RoleTag, VecDeque<Entry>>>>,
    rules: Vec<PatternRule>,
    responders: Vec<Arc<dyn Responder>>,
    strict: bool,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("keyed", &self.keyed.len())
            .field("rules", &self.rules.len())
            .field("responders", &self.responders.len())
            .field("strict", &self.strict)
            .finish()
    }
}

impl ScriptedBackend {
    pub fn strict() -> Self {
        Self { strict: true, ..Self::default() }
    }

    pub fn lenient() -> Self {
        Self::default()
    }

    pub fn with_tape<I, S>(self, role: RoleTag, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        {
            let mut tapes = self.tapes.lock().expect("tape lock");
            let tape = tapes.entry(role).or_default();
            tape.extend(responses.into_iter().map(|r| Entry::Text(r.into())));
        }
        self
    }

    /// Queues `n` transient failures on the role's tape.
    pub fn with_failures(self, role: RoleTag, n: usize) -> Self {
        {
            let mut tapes = self.tapes.lock().expect("tape lock");
            let tape = tapes.entry(role).or_default();
            tape.extend(std::iter::repeat_n(Entry::Transient, n));
        }
        self
    }

    pub fn with_keyed(mut self, key: CallKey, response: impl Into<String>) -> Self {
        self.keyed.insert(key, Entry::Text(response.into()));
        self
    }

    pub fn with_rule(mut self, rule: PatternRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_responder(mut self, responder: Arc<dyn Responder>) -> Self {
        self.responders.push(responder);
        self
    }

    /// A strict backend that answers exactly what the log recorded, keyed by
    /// (scope, role, ordinal).
    pub fn from_call_log(log: &CallLog) -> Self {
        let mut backend = Self::strict();
        for r in &log.records {
            let entry = match &r.outcome {
                CallOutcome::Ok(t) => Entry::Text(t.clone()),
                CallOutcome::Failed(e) => Entry::Fatal(e.clone()),
            };
            backend.keyed.insert(r.key, entry);
        }
        backend
    }

    fn resolve(entry: Entry) -> Result<String, BackendError> {
        match entry {
            Entry::Text(t) => Ok(t),
            Entry::Transient => Err(BackendError::Transient("scripted transient failure".into())),
            Entry::Fatal(e) => Err(BackendError::Fatal(e)),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, key: &CallKey, request: &ChatRequest) -> Result<String, BackendError> {
        if let Some(entry) = self.keyed.get(key) {
            return Self::resolve(entry.clone());
        }
        if let Some(entry) = self
            .tapes
            .lock()
            .expect("tape lock")
            .get_mut(&request.role_tag)
            .and_then(VecDeque::pop_front)
        {
            return Self::resolve(entry);
        }
        if !self.rules.is_empty() {
            let text = request.flat_text();
            if let Some(rule) = self
                .rules
                .iter()
                .find(|r| r.role.is_none_or(|role| role == request.role_tag) && text.contains(&r.needle))
            {
                return Ok(rule.response.clone());
            }
        }
        for responder in &self.responders {
            if let Some(text) = responder.respond(key, request) {
                return Ok(text);
            }
        }
        if self.strict {
            Err(BackendError::TapeExhausted { role: key.role, ordinal: key.ordinal })
        } else {
            Ok(String::new())
        }
    }
}

impl ScriptedBackend {
    /// Scope helper for tests that key responses explicitly.
    pub fn key(scope: Scope, role: RoleTag, ordinal: u32) -> CallKey {
        CallKey { scope, role, ordinal }
    }
}

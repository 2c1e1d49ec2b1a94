use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, CallKey, ChatBackend, ChatRequest};

pub const ENV_ENDPOINT: &str = "SKILLMETA_ENDPOINT";
pub const ENV_API_KEY: &str = "SKILLMETA_API_KEY";
pub const ENV_MODEL: &str = "SKILLMETA_MODEL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Full chat-completions URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl RemoteConfig {
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok()?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".to_string());
        let api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Some(Self { endpoint, api_key, model })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Minimal HTTP surface the remote backend needs: POST a JSON body, get the
/// status code and body text back.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<(u16, String), TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<(u16, String), TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError(e.to_string()))?;
        Ok((status, text))
    }
}

/// Chat-completions wire client. Model, endpoint and key never affect logic.
pub struct RemoteBackend {
    config: RemoteConfig,
    transport: Box<dyn HttpTransport>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, transport: Box<dyn HttpTransport>) -> Self {
        Self { config, transport }
    }

    pub fn with_reqwest(config: RemoteConfig) -> Result<Self, TransportError> {
        Ok(Self::new(config, Box::new(ReqwestTransport::new(Duration::from_secs(120))?)))
    }

    pub fn wire_body(&self, request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| json!({ "role": m.speaker.wire_name(), "content": m.text }))
            .collect();
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_output_tokens,
        })
    }

    pub fn parse_wire_response(body: &str) -> Result<String, BackendError> {
        let parsed: WireResponse =
            serde_json::from_str(body).map_err(|e| BackendError::Fatal(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("response has no choice content".into()))
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, _key: &CallKey, request: &ChatRequest) -> Result<String, BackendError> {
        let body = self.wire_body(request);
        let (status, text) = self
            .transport
            .post_json(&self.config.endpoint, self.config.api_key.as_deref(), &body)
            .map_err(|e| BackendError::Transient(e.0))?;
        match status {
            200..=299 => Self::parse_wire_response(&text),
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("http {status}"))),
            _ => Err(BackendError::Fatal(format!("http {status}: {}", crate::text::clip(&text, 200)))),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::oracle::{Message, Oracle, OracleError, RoleTag, Scope};

    struct FakeTransport {
        replies: Mutex<Vec<Result<(u16, String), TransportError>>>,
        seen: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    impl HttpTransport for FakeTransport {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &serde_json::Value,
        ) -> Result<(u16, String), TransportError> {
            self.seen.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn backend(replies: Vec<Result<(u16, String), TransportError>>) -> (RemoteBackend, Arc<Mutex<Vec<serde_json::Value>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let t = FakeTransport { replies: Mutex::new(replies), seen: seen.clone() };
        let cfg = RemoteConfig { endpoint: "http://x/v1/chat/completions".into(), api_key: None, model: "m".into() };
        (RemoteBackend::new(cfg, Box::new(t)), seen)
    }

    #[test]
    fn two_transient_failures_then_success_within_budget() {
        let (b, seen) = backend(vec![
            Ok((503, "busy".into())),
            Err(TransportError("reset".into())),
            Ok((200, ok_body("fine"))),
        ]);
        let oracle = Oracle::new(Arc::new(b), 2);
        let mut s = oracle.session(Scope::Global);
        let req = ChatRequest::new(RoleTag::Executor, vec![Message::system("s"), Message::user("u")], 0.7);
        assert_eq!(s.chat(req).unwrap(), "fine");
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 3);
        assert_eq!(bodies[0]["messages"][0]["role"], "system");
        assert_eq!(bodies[0]["temperature"], 0.0);
        assert_eq!(bodies[0]["max_tokens"], 1024);
        assert_eq!(bodies[0]["model"], "m");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (b, seen) = backend(vec![Ok((401, "nope".into())), Ok((200, ok_body("late")))]);
        let oracle = Oracle::new(Arc::new(b), 2);
        let mut s = oracle.session(Scope::Global);
        let err = s.chat(ChatRequest::prompt(RoleTag::Meta, "u", 0.2)).unwrap_err();
        assert!(matches!(err, OracleError::TransportFailure { attempts: 1, .. }));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn malformed_body_is_fatal() {
        assert!(RemoteBackend::parse_wire_response("{}").is_err());
        assert!(RemoteBackend::parse_wire_response(r#"{"choices":[]}"#).is_err());
        assert_eq!(RemoteBackend::parse_wire_response(&ok_body("x")).unwrap(), "x");
    }
}

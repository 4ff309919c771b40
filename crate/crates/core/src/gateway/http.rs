//! Chat-completion HTTP backend (OpenAI-compatible wire format).

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, GenerationRequest, RoleTag};
use crate::data_model::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    /// `"Authorization"` sends `Bearer <key>`; any other name sends the raw key
    /// (e.g. `"api-key"` for Azure deployments).
    pub auth_header: String,
    /// Model name per role.
    pub models: BTreeMap<RoleTag, String>,
    pub timeout_secs: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key: None,
            auth_header: "Authorization".into(),
            models: BTreeMap::new(),
            timeout_secs: 120,
        }
    }
}

pub struct ChatCompletionBackend {
    client: reqwest::blocking::Client,
    settings: HttpSettings,
}

impl ChatCompletionBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(format!("cannot build http client: {e}")))?;
        Ok(Self { client, settings })
    }

    fn model_for(&self, role: RoleTag) -> Result<&str, BackendError> {
        self.settings
            .models
            .get(&role)
            .map(String::as_str)
            .ok_or_else(|| BackendError::Fatal(format!("no model configured for role {role}")))
    }
}

/// JSON body for one request.
pub(crate) fn request_body(model: &str, request: &GenerationRequest) -> serde_json::Value {
    let mut messages = Vec::with_capacity(request.history.len() + 2);
    if let Some(system) = &request.system_prompt {
        messages.push(json!({"role": "system", "content": system}));
    }
    for turn in &request.history {
        let role = match turn.role {
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        messages.push(json!({"role": role, "content": turn.text}));
    }
    messages.push(json!({"role": "user", "content": request.user_prompt}));
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "max_tokens": request.max_tokens,
    })
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(|m| m.as_str()).map(String::from))
        .unwrap_or_else(|| body.chars().take(500).collect())
}

impl Backend for ChatCompletionBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let model = self.model_for(request.role_tag)?;
        let body = request_body(model, request);
        let mut builder = self
            .client
            .post(&self.settings.endpoint)
            .header("Content-Type", "application/json")
            .body(body.to_string());
        if let Some(key) = &self.settings.api_key {
            builder = if self.settings.auth_header.eq_ignore_ascii_case("authorization") {
                builder.header("Authorization", format!("Bearer {key}"))
            } else {
                builder.header(self.settings.auth_header.as_str(), key.as_str())
            };
        }
        let response = builder.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited(error_message(&text)));
        }
        if status.is_server_error() || status.as_u16() == 408 {
            return Err(BackendError::Transient(format!("{status}: {}", error_message(&text))));
        }
        if !status.is_success() {
            return Err(BackendError::Fatal(format!("{status}: {}", error_message(&text))));
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("malformed completion: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("completion has no content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Turn;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the given (status, body) pairs, one per connection, and sends
    /// each received request body back over the channel.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((headers, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, rx)
    }

    fn settings(url: String) -> HttpSettings {
        HttpSettings {
            endpoint: url,
            api_key: Some("k-123".into()),
            models: [(RoleTag::Evol, "evol-model".to_string())].into_iter().collect(),
            timeout_secs: 10,
            ..HttpSettings::default()
        }
    }

    #[test]
    fn sends_chat_body_and_parses_choice() {
        let (url, rx) = serve(vec![(200, r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#.into())]);
        let backend = ChatCompletionBackend::new(settings(url)).unwrap();
        let mut req = GenerationRequest::new(RoleTag::Evol, "prompt text").history(vec![
            Turn::user("u0"),
            Turn::assistant("a0"),
        ]);
        req.system_prompt = Some("sys".into());
        assert_eq!(backend.complete(&req).unwrap(), "hello");
        let (headers, body) = rx.recv().unwrap();
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer k-123"));
        let body: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["model"], "evol-model");
        assert_eq!(body["temperature"], 0.0);
        let roles: Vec<&str> = body["messages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["role"].as_str().unwrap())
            .collect();
        assert_eq!(roles, ["system", "user", "assistant", "user"]);
        assert_eq!(body["messages"][3]["content"], "prompt text");
    }

    #[test]
    fn classifies_status_codes() {
        let (url, _rx) = serve(vec![
            (429, r#"{"error":{"message":"slow down"}}"#.into()),
            (503, "unavailable".into()),
            (401, r#"{"error":{"message":"bad key"}}"#.into()),
        ]);
        let backend = ChatCompletionBackend::new(settings(url)).unwrap();
        let req = GenerationRequest::new(RoleTag::Evol, "p");
        assert_eq!(backend.complete(&req), Err(BackendError::RateLimited("slow down".into())));
        assert!(matches!(backend.complete(&req), Err(BackendError::Transient(_))));
        match backend.complete(&req) {
            Err(BackendError::Fatal(m)) => assert!(m.contains("bad key")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_model_is_fatal() {
        let backend = ChatCompletionBackend::new(settings("http://127.0.0.1:9/".into())).unwrap();
        assert!(matches!(
            backend.complete(&GenerationRequest::new(RoleTag::Tagger, "p")),
            Err(BackendError::Fatal(_))
        ));
    }
}

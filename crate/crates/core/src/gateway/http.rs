//! OpenAI-compatible HTTP backend.
//!
//! Requests a single generated token with `temperature = 0` and the top-k
//! next-token log-probabilities. Both the legacy completions shape
//! (`choices[0].logprobs.top_logprobs[0]` as a `{token: logprob}` map) and the
//! chat shape (`choices[0].logprobs.content[0].top_logprobs` as a list) are
//! understood.
//!
//! Servers with automatic prefix caching (vLLM, llama.cpp) reuse the shared
//! prompt prefix on their own; the full prompt is always sent.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, FirstTokenDistribution, GatewayError, QueryRequest, TokenProb, YesTokenSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// `POST {base}/chat/completions` with system/user messages.
    #[default]
    Chat,
    /// `POST {base}/completions` with the flattened prompt text.
    Completions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub endpoint: Endpoint,
    #[serde(default = "default_top_k")]
    pub top_k: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Key into the shipped yes-token table; defaults to matching `model`.
    #[serde(default)]
    pub yes_table: Option<String>,
    /// Never serialized; read from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
}

fn default_top_k() -> u32 {
    20
}

fn default_timeout() -> u64 {
    60
}

impl HttpConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        HttpConfig {
            base_url: base_url.to_string(),
            model: model.to_string(),
            endpoint: Endpoint::default(),
            top_k: default_top_k(),
            timeout_secs: default_timeout(),
            yes_table: None,
            api_key: None,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    yes: YesTokenSet,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .field("endpoint", &self.config.endpoint)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let lookup = config.yes_table.clone().unwrap_or_else(|| config.model.clone());
        let yes = YesTokenSet::for_model(&lookup).unwrap_or_else(YesTokenSet::bilingual);
        HttpBackend { config, agent, yes }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// JSON body for one request.
    pub fn request_body(&self, request: &QueryRequest) -> Value {
        match self.config.endpoint {
            Endpoint::Completions => json!({
                "model": self.config.model,
                "prompt": request.prompt.full,
                "max_tokens": 1,
                "temperature": 0.0,
                "logprobs": self.config.top_k,
            }),
            Endpoint::Chat => {
                let mut messages = Vec::new();
                if !request.prompt.system.is_empty() {
                    messages.push(json!({"role": "system", "content": request.prompt.system}));
                }
                messages.push(json!({"role": "user", "content": request.prompt.user}));
                json!({
                    "model": self.config.model,
                    "messages": messages,
                    "max_tokens": 1,
                    "temperature": 0.0,
                    "logprobs": true,
                    "top_logprobs": self.config.top_k,
                })
            }
        }
    }

    fn url(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        match self.config.endpoint {
            Endpoint::Chat => format!("{base}/chat/completions"),
            Endpoint::Completions => format!("{base}/completions"),
        }
    }
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn yes_tokens(&self) -> YesTokenSet {
        self.yes.clone()
    }

    fn describe(&self) -> String {
        let framing = match self.config.endpoint {
            Endpoint::Chat => "server chat template (system/user roles)",
            Endpoint::Completions => "template chat format, flattened",
        };
        format!(
            "{} via {} [{framing}, top_k={}]",
            self.config.model,
            self.url(),
            self.config.top_k
        )
    }

    fn query(&self, request: &QueryRequest) -> Result<FirstTokenDistribution, GatewayError> {
        let body = self.request_body(request).to_string();
        let mut req = self
            .agent
            .post(&self.url())
            .header("Content-Type", "application/json")
            .header("Idempotency-Key", &request.key);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.as_bytes())
            .map_err(|e| GatewayError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transient(e.to_string()))?;
        match status {
            200..=299 => parse_logprobs_response(&text),
            408 | 409 | 425 | 429 | 500..=599 => {
                Err(GatewayError::Transient(format!("HTTP {status}: {}", snippet(&text))))
            }
            400 | 404 | 422 if text.to_lowercase().contains("logprob") => Err(GatewayError::UnsupportedBackend(
                format!("HTTP {status}: {}", snippet(&text)),
            )),
            _ => Err(GatewayError::ProtocolError(format!(
                "HTTP {status}: {}",
                snippet(&text)
            ))),
        }
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

/// Extract the first-position top-k distribution from a response body.
pub fn parse_logprobs_response(body: &str) -> Result<FirstTokenDistribution, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::ProtocolError(format!("invalid JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::ProtocolError("response has no choices".into()))?;
    let logprobs = match choice.get("logprobs") {
        None | Some(Value::Null) => {
            return Err(GatewayError::UnsupportedBackend("response carries no logprobs".into()))
        }
        Some(lp) => lp,
    };

    let mut items = Vec::new();
    if let Some(content) = logprobs.get("content").and_then(Value::as_array) {
        let first = content
            .first()
            .ok_or_else(|| GatewayError::ProtocolError("empty logprobs content".into()))?;
        let top = first
            .get("top_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::UnsupportedBackend("no top_logprobs in chat response".into()))?;
        for entry in top {
            let token = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::ProtocolError("top_logprobs entry without token".into()))?;
            let lp = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(|| GatewayError::ProtocolError("top_logprobs entry without logprob".into()))?;
            let id = entry.get("id").and_then(Value::as_u64).map(|i| i as u32);
            items.push(TokenProb {
                token: token.to_string(),
                id,
                prob: lp.exp(),
            });
        }
    } else if let Some(top) = logprobs.get("top_logprobs").and_then(Value::as_array) {
        let first = top
            .first()
            .and_then(Value::as_object)
            .ok_or_else(|| GatewayError::ProtocolError("top_logprobs[0] is not an object".into()))?;
        for (token, lp) in first {
            let lp = lp
                .as_f64()
                .ok_or_else(|| GatewayError::ProtocolError(format!("non-numeric logprob for {token:?}")))?;
            items.push(TokenProb {
                token: token.clone(),
                id: None,
                prob: lp.exp(),
            });
        }
        // JSON object order is not meaningful; keep output deterministic.
        items.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token)));
    } else {
        return Err(GatewayError::UnsupportedBackend(
            "logprobs present but no top-k candidates".into(),
        ));
    }
    FirstTokenDistribution::new(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::yes_probability;

    #[test]
    fn parses_completions_shape() {
        let body = json!({
            "choices": [{
                "text": "Yes",
                "logprobs": {
                    "tokens": ["Yes"],
                    "top_logprobs": [{"Yes": 0.5f64.ln(), " yes": 0.2f64.ln(), "No": 0.15f64.ln(), "no": 0.05f64.ln(), "Maybe": 0.03f64.ln()}]
                }
            }]
        })
        .to_string();
        let d = parse_logprobs_response(&body).unwrap();
        assert_eq!(d.items().len(), 5);
        assert!((d.coverage() - 0.93).abs() < 1e-12);
        assert!((yes_probability(&d, &YesTokenSet::english()) - 0.7).abs() < 1e-12);
        assert_eq!(d.items()[0].token, "Yes");
    }

    #[test]
    fn parses_chat_shape() {
        let body = json!({
            "choices": [{
                "message": {"role": "assistant", "content": "Ja"},
                "logprobs": {"content": [{
                    "token": "Ja", "logprob": 0.6f64.ln(),
                    "top_logprobs": [
                        {"token": "Ja", "logprob": 0.6f64.ln(), "bytes": [74, 97]},
                        {"token": "Nein", "logprob": 0.3f64.ln()}
                    ]
                }]}
            }]
        })
        .to_string();
        let d = parse_logprobs_response(&body).unwrap();
        assert!((yes_probability(&d, &YesTokenSet::bilingual()) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn missing_logprobs_is_unsupported() {
        let body = r#"{"choices":[{"text":"Yes","logprobs":null}]}"#;
        assert!(matches!(
            parse_logprobs_response(body),
            Err(GatewayError::UnsupportedBackend(_))
        ));
    }

    #[test]
    fn malformed_is_protocol_error() {
        assert!(matches!(
            parse_logprobs_response("not json"),
            Err(GatewayError::ProtocolError(_))
        ));
        assert!(matches!(
            parse_logprobs_response(r#"{"data":[]}"#),
            Err(GatewayError::ProtocolError(_))
        ));
        let over = json!({"choices":[{"logprobs":{"top_logprobs":[{"a": 0.0, "b": 0.0}]}}]}).to_string();
        assert!(matches!(
            parse_logprobs_response(&over),
            Err(GatewayError::ProtocolError(_))
        ));
    }

    #[test]
    fn request_bodies() {
        use crate::prompting::{ChatFormat, RenderedPrompt};
        let prompt = RenderedPrompt {
            prefix: "P\n\n".into(),
            suffix: "U".into(),
            full: "P\n\nU".into(),
            system: "P".into(),
            user: "U".into(),
            chat: ChatFormat::Messages,
        };
        let req = QueryRequest::new(prompt, "a", "t", None);
        let mut cfg = HttpConfig::new("http://localhost:1/v1/", "meta-llama/Llama-3.1-8B-Instruct");
        let b = HttpBackend::new(cfg.clone());
        let body = b.request_body(&req);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "U");
        assert_eq!(body["top_logprobs"], 20);
        assert_eq!(body["max_tokens"], 1);
        assert_eq!(b.url(), "http://localhost:1/v1/chat/completions");
        assert_eq!(b.yes_tokens().model_id(), "llama-3.1-8b");

        cfg.endpoint = Endpoint::Completions;
        let b = HttpBackend::new(cfg);
        let body = b.request_body(&req);
        assert_eq!(body["prompt"], "P\n\nU");
        assert_eq!(body["logprobs"], 20);
    }
}

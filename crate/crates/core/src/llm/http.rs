use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GenerationRequest, LlmError, TextGenerator};
use crate::http::{agent, credential, post_json, HttpFailure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpGeneratorConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

/// Chat-completions style endpoint.
pub struct HttpGenerator {
    config: HttpGeneratorConfig,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(config: HttpGeneratorConfig) -> Self {
        let agent = agent(Duration::from_secs(config.timeout_secs));
        Self { config, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl TextGenerator for HttpGenerator {
    fn provider_id(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, LlmError> {
        let key = credential(self.config.api_key_env.as_deref()).map_err(LlmError::Auth)?;
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let value = post_json(&self.agent, &self.endpoint(), key.as_deref(), &body).map_err(
            |failure| match failure {
                HttpFailure::Timeout => LlmError::Timeout,
                HttpFailure::Status(401 | 403, body) => LlmError::Auth(body),
                HttpFailure::Status(408, _) => LlmError::Timeout,
                HttpFailure::Status(status, body) => LlmError::Provider {
                    status: Some(status),
                    detail: body,
                },
                HttpFailure::Transport(detail) => LlmError::Provider {
                    status: None,
                    detail,
                },
                HttpFailure::Decode(detail) => LlmError::Provider {
                    status: Some(200),
                    detail: format!("undecodable response: {detail}"),
                },
            },
        )?;
        completion_text(&value).ok_or_else(|| LlmError::Provider {
            status: Some(200),
            detail: format!("response has no choices[0].message.content: {value}"),
        })
    }
}

fn completion_text(value: &Value) -> Option<String> {
    let choice = value.get("choices")?.get(0)?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testing::{dead_url, serve};
    use crate::llm::{LlmClient, RetryPolicy};
    use std::sync::Arc;

    fn config(base_url: String, api_key_env: Option<&str>) -> HttpGeneratorConfig {
        HttpGeneratorConfig {
            base_url,
            model: "test-model".into(),
            api_key_env: api_key_env.map(str::to_string),
            timeout_secs: 5,
        }
    }

    #[test]
    fn sends_chat_request_and_reads_completion() {
        let (url, rx) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"Show me news about AI"}}]}"#.into(),
        )]);
        std::env::set_var("REINVOKE_TEST_KEY_A", "sekrit");
        let gen = HttpGenerator::new(config(url, Some("REINVOKE_TEST_KEY_A")));
        let out = gen
            .complete(&GenerationRequest::new("The relevant query is:", 0.7))
            .unwrap();
        assert_eq!(out, "Show me news about AI");

        let captured = rx.recv().unwrap();
        assert_eq!(captured.request_line, "POST /chat/completions HTTP/1.1");
        assert!(captured
            .headers
            .iter()
            .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sekrit")));
        let body: Value = serde_json::from_str(&captured.body).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["messages"][0]["content"], "The relevant query is:");
    }

    #[test]
    fn unauthorized_maps_to_auth_without_retry() {
        let (url, rx) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
        let client = LlmClient::new(
            Arc::new(HttpGenerator::new(config(url, None))),
            RetryPolicy::no_backoff(3),
        );
        let err = client.generate(&GenerationRequest::new("p", 0.0)).unwrap_err();
        assert!(matches!(err, LlmError::Auth(_)));
        rx.recv().unwrap();
        assert!(rx.try_recv().is_err());
    }

    #[test]
    fn server_errors_are_retried() {
        let (url, rx) = serve(vec![
            (503, "{}".into()),
            (200, r#"{"choices":[{"message":{"content":"ok"}}]}"#.into()),
        ]);
        let client = LlmClient::new(
            Arc::new(HttpGenerator::new(config(url, None))),
            RetryPolicy::no_backoff(3),
        );
        let resp = client.generate(&GenerationRequest::new("p", 0.0)).unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(rx.iter().take(2).count(), 2);
    }

    #[test]
    fn unreachable_endpoint_is_provider_error() {
        let client = LlmClient::new(
            Arc::new(HttpGenerator::new(config(dead_url(), None))),
            RetryPolicy::no_backoff(2),
        );
        let err = client.generate(&GenerationRequest::new("p", 0.0)).unwrap_err();
        assert!(matches!(err, LlmError::Provider { status: None, .. }), "{err:?}");
    }

    #[test]
    fn missing_credential_is_auth_error() {
        let gen = HttpGenerator::new(config(dead_url(), Some("REINVOKE_TEST_UNSET_VAR")));
        let err = gen.complete(&GenerationRequest::new("p", 0.0)).unwrap_err();
        assert!(matches!(err, LlmError::Auth(_)));
    }
}

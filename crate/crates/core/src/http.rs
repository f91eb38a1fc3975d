//! Minimal blocking JSON-over-HTTP helper shared by the generation and
//! embedding providers.

use std::time::Duration;

use serde_json::Value;

#[derive(Debug)]
pub(crate) enum HttpFailure {
    Timeout,
    Transport(String),
    /// Non-2xx status with the response body.
    Status(u16, String),
    Decode(String),
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Reads the credential from the named environment variable.
pub(crate) fn credential(env_var: Option<&str>) -> Result<Option<String>, String> {
    match env_var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| format!("credential environment variable `{name}` is not set")),
    }
}

pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
) -> Result<Value, HttpFailure> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = bearer {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| match e {
        ureq::Error::Timeout(_) => HttpFailure::Timeout,
        other => HttpFailure::Transport(other.to_string()),
    })?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| HttpFailure::Transport(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(HttpFailure::Status(status, text));
    }
    serde_json::from_str(&text).map_err(|e| HttpFailure::Decode(e.to_string()))
}

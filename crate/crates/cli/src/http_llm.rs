//! Chat-endpoint adapter for report label extraction.
//!
//! Speaks the common chat-completions JSON shape over HTTP so any
//! OpenAI-compatible server works. Connection details come from the
//! environment (`ENDOKED_LLM_ENDPOINT`, optional `ENDOKED_LLM_API_KEY` and
//! `ENDOKED_LLM_MODEL`), keeping credentials out of config files.

use std::time::Duration;

use endoked_core::report_nlp::{LabelExtractor, LabelSource, PromptExchange, Role};
use endoked_core::{Error, Result};

pub const ENV_ENDPOINT: &str = "ENDOKED_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "ENDOKED_LLM_API_KEY";
pub const ENV_MODEL: &str = "ENDOKED_LLM_MODEL";
const DEFAULT_MODEL: &str = "gpt-4";

pub struct HttpExtractor {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpExtractor {
    pub fn new(endpoint: String, api_key: Option<String>, model: String) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Transport(format!("build http client: {e}")))?;
        Ok(HttpExtractor { endpoint, api_key, model, client })
    }

    /// Configuration from the environment; a missing endpoint is a config
    /// error since nothing sensible can be guessed.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| {
            Error::Config(format!("extract.extractor=http requires {ENV_ENDPOINT} to be set"))
        })?;
        let api_key = std::env::var(ENV_API_KEY).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.into());
        HttpExtractor::new(endpoint, api_key, model)
    }
}

/// Request body for one prompt exchange.
pub fn chat_body(prompt: &PromptExchange, model: &str) -> serde_json::Value {
    let mut messages = vec![serde_json::json!({
        "role": "system",
        "content": prompt.system_text,
    })];
    for (role, text) in &prompt.history {
        messages.push(serde_json::json!({ "role": role_name(role), "content": text }));
    }
    messages.push(serde_json::json!({ "role": "user", "content": prompt.user_text }));
    serde_json::json!({ "model": model, "messages": messages, "temperature": 0 })
}

fn role_name(role: &Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// Assistant text out of a chat-completions reply.
pub fn parse_chat_reply(reply: &serde_json::Value) -> Result<String> {
    reply["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Transport("chat reply lacks choices[0].message.content".into()))
}

impl LabelExtractor for HttpExtractor {
    fn send(&self, prompt: &PromptExchange) -> Result<String> {
        let mut req = self.client.post(&self.endpoint).json(&chat_body(prompt, &self.model));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Transport(format!("endpoint returned HTTP {status}")));
        }
        let body: serde_json::Value =
            resp.json().map_err(|e| Error::Transport(format!("decode reply: {e}")))?;
        parse_chat_reply(&body)
    }

    fn source(&self) -> LabelSource {
        LabelSource::Llm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use endoked_core::report_nlp::build_prompt;

    #[test]
    fn body_carries_system_history_and_user_turns() {
        let mut prompt = build_prompt("No polyps were identified.").unwrap();
        prompt.history.push((Role::Assistant, "0".into()));
        let body = chat_body(&prompt, "m1");
        assert_eq!(body["model"], "m1");
        let messages = body["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 3);
        assert_eq!(messages[0]["role"], "system");
        assert_eq!(messages[1]["role"], "assistant");
        assert_eq!(messages[2]["role"], "user");
        assert!(messages[2]["content"]
            .as_str()
            .unwrap()
            .contains("No polyps were identified."));
    }

    #[test]
    fn reply_parsing_requires_the_standard_shape() {
        let good = serde_json::json!({
            "choices": [{ "message": { "role": "assistant", "content": " 1 " } }]
        });
        assert_eq!(parse_chat_reply(&good).unwrap(), " 1 ");
        let bad = serde_json::json!({ "choices": [] });
        assert!(matches!(parse_chat_reply(&bad), Err(Error::Transport(_))));
    }
}

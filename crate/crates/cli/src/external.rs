//! Question generation through an OpenAI-compatible chat-completions endpoint.

use std::time::Duration;

use serde_json::{json, Value};

use modelcompose::mcub::{parse_triplets, render_prompt, EntityGroup, McqItem, McubError, QuestionGenerator};

pub const TOKEN_ENV: &str = "MODELCOMPOSE_API_KEY";

pub struct ExternalGenerator {
    url: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl ExternalGenerator {
    pub fn new(url: String, model: String, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            url,
            model,
            token,
            agent,
        }
    }

    fn request(&self, prompt: &str, seed: u64) -> Result<String, McubError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "seed": seed,
        });
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| McubError::Generator(format!("{}: {e}", self.url)))?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| McubError::Generator(format!("unreadable response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| McubError::Generator("response has no choices[0].message.content".into()))
    }
}

impl QuestionGenerator for ExternalGenerator {
    fn generate(&self, group: &EntityGroup, seed: u64) -> Result<Vec<McqItem>, McubError> {
        let text = self.request(&render_prompt(group), seed)?;
        parse_triplets(&text, group)
    }
}

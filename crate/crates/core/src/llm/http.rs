use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::{ChatProvider, ChatRequest, ChatResponse, Embedder, LlmError};

/// Endpoint settings for an OpenAI-style chat/embedding API.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

/// Blocking HTTP client for `/chat/completions` and `/embeddings`.
pub struct HttpProvider {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingList {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::ProviderUnreachable(e.to_string()))?;
        Ok(HttpProvider { config, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<reqwest::blocking::Response, LlmError> {
        let mut req = self.client.post(self.url(path)).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::ProviderUnreachable(e.to_string()))?;
        if !resp.status().is_success() {
            let status = resp.status();
            let text = resp.text().unwrap_or_default();
            return Err(LlmError::ProviderUnreachable(format!("{status}: {text}")));
        }
        Ok(resp)
    }
}

impl ChatProvider for HttpProvider {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let started = Instant::now();
        let body = json!({
            "model": self.config.model,
            "temperature": req.temperature,
            "messages": req.messages,
        });
        let parsed: ChatCompletion = self
            .post("chat/completions", body)?
            .json()
            .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::MalformedResponse("response has no message content".into()))?;
        let usage = parsed.usage.unwrap_or(Usage {
            prompt_tokens: 0,
            completion_tokens: 0,
        });
        Ok(ChatResponse {
            text,
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
            model_id: parsed.model.unwrap_or_else(|| self.config.model.clone()),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

impl Embedder for HttpProvider {
    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::EmptyText);
        }
        let model = self.config.embedding_model.as_deref().unwrap_or(&self.config.model);
        let parsed: EmbeddingList = self
            .post("embeddings", json!({"model": model, "input": text}))?
            .json()
            .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        let mut v = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| LlmError::MalformedResponse("embedding response has no data".into()))?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(LlmError::MalformedResponse("degenerate embedding".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

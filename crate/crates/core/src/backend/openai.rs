//! Client for OpenAI-compatible `/completions` endpoints.
//!
//! Scoring sends one batched request with `prompt = [context + continuation, ...]`,
//! `echo: true`, `logprobs: 0`, `max_tokens: 1`, `temperature: 0`, and sums the
//! echoed `token_logprobs` of the tokens that overlap the continuation (using
//! the character `text_offset` of each token). Choices are matched back to
//! continuations through their `index` field. Generation sends the context
//! with the sampling parameters. The exact request and response shapes are
//! documented in `docs/wire-protocol.md`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendInfo, GenParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    /// Base URL including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub context_window: usize,
    /// Token estimate used for window checks: `ceil(chars / chars_per_token)`.
    pub chars_per_token: f64,
    pub timeout_secs: u64,
    pub max_attempts: usize,
    pub backoff_base_ms: u64,
    /// Also send `no_repeat_ngram_size` for servers that understand it.
    pub send_no_repeat_ngram: bool,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        OpenAiConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt2".into(),
            api_key: None,
            context_window: 1024,
            chars_per_token: 4.0,
            timeout_secs: 60,
            max_attempts: 3,
            backoff_base_ms: 500,
            send_no_repeat_ngram: false,
        }
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Network { attempts: 0, message: e.to_string() })?;
        Ok(OpenAiBackend { config, client })
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// Request body for scoring `continuations` after `context`.
    pub fn scoring_request(&self, context: &str, continuations: &[String]) -> Value {
        let prompts: Vec<String> = continuations.iter().map(|c| format!("{context}{c}")).collect();
        json!({
            "model": self.config.model,
            "prompt": prompts,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        })
    }

    pub fn generation_request(&self, context: &str, params: &GenParams) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": context,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "n": 1,
        });
        if !params.stop_sequences.is_empty() {
            body["stop"] = json!(params.stop_sequences);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if self.config.send_no_repeat_ngram && params.block_ngram > 0 {
            body["no_repeat_ngram_size"] = json!(params.block_ngram);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<CompletionResponse, BackendError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut request = self.client.post(self.url()).json(body);
            if let Some(key) = &self.config.api_key {
                request = request.bearer_auth(key);
            }
            let response = match request.send() {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("completion request attempt {attempt} failed: {e}");
                    last = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            let text = response.text().map_err(|e| BackendError::Network { attempts: attempt, message: e.to_string() });
            let text = match text {
                Ok(t) => t,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if status.is_server_error() {
                log::warn!("completion request attempt {attempt}: HTTP {status}");
                last = format!("HTTP {}: {}", status.as_u16(), text);
                continue;
            }
            if !status.is_success() {
                return Err(BackendError::Http { status: status.as_u16(), body: text });
            }
            return serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()));
        }
        Err(BackendError::Network { attempts, message: last })
    }
}

/// Sum of log-probabilities of tokens overlapping characters at or after
/// `boundary` and before `end`.
fn continuation_logprob(lp: &Logprobs, boundary: usize, end: usize) -> Result<f64, BackendError> {
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::Protocol("logprobs arrays differ in length".into()));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for ((tok, logprob), &offset) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset) {
        let tok_end = offset + tok.chars().count();
        if offset >= end || tok_end <= boundary {
            continue;
        }
        match logprob {
            Some(v) => {
                total += v;
                counted += 1;
            }
            None => return Err(BackendError::Protocol("missing logprob inside continuation".into())),
        }
    }
    if counted == 0 {
        return Err(BackendError::Protocol("no echoed tokens cover the continuation".into()));
    }
    Ok(total)
}

impl Backend for OpenAiBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { model_id: self.config.model.clone(), context_window: self.config.context_window }
    }

    fn count_tokens(&self, text: &str) -> usize {
        (text.chars().count() as f64 / self.config.chars_per_token).ceil() as usize
    }

    fn score_continuations(&self, context: &str, continuations: &[String]) -> Result<Vec<f64>, BackendError> {
        if continuations.is_empty() {
            return Ok(Vec::new());
        }
        let response = self.post(&self.scoring_request(context, continuations))?;
        let boundary = context.chars().count();
        let mut scores = vec![None; continuations.len()];
        for choice in &response.choices {
            let slot = scores
                .get_mut(choice.index)
                .ok_or_else(|| BackendError::Protocol(format!("unexpected choice index {}", choice.index)))?;
            let lp = choice.logprobs.as_ref().ok_or_else(|| BackendError::Protocol("choice without logprobs".into()))?;
            let end = boundary + continuations[choice.index].chars().count();
            *slot = Some(continuation_logprob(lp, boundary, end)?);
        }
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| BackendError::Protocol(format!("no choice for continuation {i}"))))
            .collect()
    }

    fn generate(&self, context: &str, params: &GenParams) -> Result<String, BackendError> {
        let response = self.post(&self.generation_request(context, params))?;
        response
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logprob_window() {
        let lp = Logprobs {
            tokens: vec!["Hi".into(), ":".into(), " pos".into(), "itive".into(), "!".into()],
            token_logprobs: vec![None, Some(-1.0), Some(-0.5), Some(-0.25), Some(-3.0)],
            text_offset: vec![0, 2, 3, 7, 12],
        };
        assert_eq!(continuation_logprob(&lp, 3, 12).unwrap(), -0.75);
        assert!(continuation_logprob(&lp, 0, 3).is_err());
    }

    #[test]
    fn request_shapes() {
        let b = OpenAiBackend::new(OpenAiConfig { model: "m".into(), ..Default::default() }).unwrap();
        let r = b.scoring_request("ctx", &[" a".into(), " b".into()]);
        assert_eq!(r["prompt"], json!(["ctx a", "ctx b"]));
        assert_eq!(r["echo"], json!(true));
        let g = b.generation_request("ctx", &GenParams { stop_sequences: vec!["\n\n\n".into()], ..Default::default() });
        assert_eq!(g["temperature"], json!(2.0));
        assert_eq!(g["max_tokens"], json!(128));
        assert_eq!(g["stop"], json!(["\n\n\n"]));
        assert!(g.get("no_repeat_ngram_size").is_none());
    }

    #[test]
    fn token_estimate() {
        let b = OpenAiBackend::new(OpenAiConfig::default()).unwrap();
        assert_eq!(b.count_tokens("abcde"), 2);
        assert_eq!(b.count_tokens(""), 0);
    }
}

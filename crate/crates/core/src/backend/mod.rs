//! Language-model backends.
//!
//! A [`Backend`] answers two questions: the total log-probability of each of
//! several continuations after a context, and a sampled continuation of a
//! context. [`label_distribution`] and [`generate`] wrap those calls with the
//! context-window check and the closed-set softmax over labels.

mod cache;
mod mock;
mod openai;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{CacheEntry, CacheMode, CachedBackend, OfflineBackend};
pub use mock::{MockBackend, MockConfig};
pub use openai::{OpenAiBackend, OpenAiConfig};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("context of {tokens} tokens does not fit the {window}-token window")]
    ContextOverflow { tokens: usize, window: usize },
    #[error("request failed after {attempts} attempt(s): {message}")]
    Network { attempts: usize, message: String },
    #[error("server returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("fixture incomplete: no cached response for key {key}")]
    FixtureIncomplete { key: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

impl BackendError {
    /// Whether retrying the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Network { .. } => true,
            BackendError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Size of n-grams that may not repeat within one continuation; 0 disables.
    pub block_ngram: usize,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            temperature: 2.0,
            max_new_tokens: 128,
            block_ngram: 4,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidParams(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidParams("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model_id: String,
    pub context_window: usize,
}

/// Per-label scores for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQueryResult {
    /// Total log-probability of each label's continuation.
    pub scores: Vec<f64>,
    /// Softmax of `scores`.
    pub normalized: Vec<f64>,
}

pub trait Backend: Send + Sync {
    fn info(&self) -> BackendInfo;

    /// Token count of `text` as this backend measures it.
    fn count_tokens(&self, text: &str) -> usize;

    /// Summed token log-probabilities of each continuation given `context`.
    fn score_continuations(&self, context: &str, continuations: &[String]) -> Result<Vec<f64>, BackendError>;

    /// Sample a continuation of `context`.
    fn generate(&self, context: &str, params: &GenParams) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn info(&self) -> BackendInfo {
        (**self).info()
    }
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }
    fn score_continuations(&self, context: &str, continuations: &[String]) -> Result<Vec<f64>, BackendError> {
        (**self).score_continuations(context, continuations)
    }
    fn generate(&self, context: &str, params: &GenParams) -> Result<String, BackendError> {
        (**self).generate(context, params)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn info(&self) -> BackendInfo {
        (**self).info()
    }
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }
    fn score_continuations(&self, context: &str, continuations: &[String]) -> Result<Vec<f64>, BackendError> {
        (**self).score_continuations(context, continuations)
    }
    fn generate(&self, context: &str, params: &GenParams) -> Result<String, BackendError> {
        (**self).generate(context, params)
    }
}

/// Numerically stable softmax. All `-inf` inputs give the uniform vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / scores.len() as f64; scores.len()];
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Closed-set label distribution for `continuations` after `context`.
pub fn label_distribution<B: Backend + ?Sized>(
    backend: &B,
    context: &str,
    continuations: &[String],
) -> Result<LabelQueryResult, BackendError> {
    let window = backend.info().context_window;
    let longest = continuations.iter().map(|c| backend.count_tokens(c)).max().unwrap_or(0);
    let tokens = backend.count_tokens(context) + longest;
    if tokens > window {
        return Err(BackendError::ContextOverflow { tokens, window });
    }
    let scores = backend.score_continuations(context, continuations)?;
    if scores.len() != continuations.len() || scores.iter().any(|s| s.is_nan()) {
        return Err(BackendError::Protocol(format!(
            "expected {} finite scores, got {:?}",
            continuations.len(),
            scores
        )));
    }
    let normalized = softmax(&scores);
    Ok(LabelQueryResult { scores, normalized })
}

/// Sample a continuation after checking that `context` leaves room for
/// `max_new_tokens`. Stop sequences and n-gram blocking are enforced on the
/// returned text regardless of what the backend did.
pub fn generate<B: Backend + ?Sized>(backend: &B, context: &str, params: &GenParams) -> Result<String, BackendError> {
    params.validate()?;
    let window = backend.info().context_window;
    let tokens = backend.count_tokens(context) + params.max_new_tokens;
    if tokens > window {
        return Err(BackendError::ContextOverflow { tokens, window });
    }
    let text = backend.generate(context, params)?;
    let text = truncate_at_stop(&text, &params.stop_sequences);
    Ok(truncate_repeated_ngram(text, params.block_ngram).to_string())
}

/// Prefix of `text` before the earliest stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// Byte offsets `(start, end)` of whitespace-delimited tokens.
pub(crate) fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Prefix of `text` ending before the first whitespace token that would
/// complete an n-gram already seen earlier in `text`.
pub fn truncate_repeated_ngram(text: &str, n: usize) -> &str {
    if n == 0 {
        return text;
    }
    let spans = token_spans(text);
    let mut seen = std::collections::HashSet::new();
    for end in n..=spans.len() {
        let gram: Vec<&str> = spans[end - n..end].iter().map(|&(s, e)| &text[s..e]).collect();
        if !seen.insert(gram) {
            // Keep everything before the whitespace preceding the repeat.
            let cut = spans[end - 2].1;
            return &text[..cut];
        }
    }
    text
}

/// Map `f` over `items` on at most `parallelism` threads, keeping input order.
pub fn par_map<T, R, F>(parallelism: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if parallelism <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[-3.2]), vec![1.0]);
        assert_eq!(softmax(&[-1.0, -1.0]), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 1000.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(softmax(&[f64::NEG_INFINITY; 2]), vec![0.5, 0.5]);
    }

    #[test]
    fn stop_truncation() {
        let stops = vec!["<eos>".to_string(), "##".to_string()];
        assert_eq!(truncate_at_stop("a b ## c <eos>", &stops), "a b ");
        assert_eq!(truncate_at_stop("abc", &stops), "abc");
    }

    #[test]
    fn ngram_truncation() {
        assert_eq!(truncate_repeated_ngram("a b c a b c", 3), "a b c a b");
        assert_eq!(truncate_repeated_ngram("a b a b", 2), "a b a");
        assert_eq!(truncate_repeated_ngram("a a", 1), "a");
        assert_eq!(truncate_repeated_ngram("a b c d", 2), "a b c d");
        assert_eq!(truncate_repeated_ngram("x x x", 0), "x x x");
    }

    #[test]
    fn params_validation() {
        assert!(GenParams::default().validate().is_ok());
        assert!(GenParams { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(GenParams { max_new_tokens: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        assert_eq!(par_map(4, &items, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}

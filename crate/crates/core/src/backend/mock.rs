//! Deterministic stand-in language model.
//!
//! Scoring: the query is the context from the last sample start onward, the
//! demonstrations are the complete samples extracted before it. For label `v`
//!
//! ```text
//! score(v) = overlap(query words, keywords[v])
//!          + recency_bias * sum_j salience(demo_j) * recency_decay^(n-1-j) * [label(demo_j) == v]
//!          + noise * (hash(context, continuation) - 0.5)
//! ```
//!
//! where `salience(demo) = 0.5 + hash(demo text)` lies in `[0.5, 1.5)` and all
//! hashes are SHA-256 based, so scores are identical on every platform.
//!
//! Generation: a ChaCha8 stream seeded from `(seed, params.seed, context)`
//! picks `samples_per_generation` corpus sentences with random labels,
//! renders them with the template, and emits them one whitespace token at a
//! time under the length, stop-sequence and n-gram rules. When the n-gram
//! rule fires the mock stops instead of resampling.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{token_spans, Backend, BackendError, BackendInfo, GenParams};
use crate::rng;
use crate::template::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub model_id: String,
    pub context_window: usize,
    /// Keyword list per label id.
    pub keywords: Vec<Vec<String>>,
    pub recency_bias: f64,
    pub recency_decay: f64,
    pub noise: f64,
    /// Sentences used for generation. Pair tasks separate premise and
    /// hypothesis with a tab.
    pub corpus: Vec<String>,
    pub samples_per_generation: usize,
    pub seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            model_id: "mock-v1".into(),
            context_window: 4096,
            keywords: Vec::new(),
            recency_bias: 1.0,
            recency_decay: 0.5,
            noise: 0.01,
            corpus: Vec::new(),
            samples_per_generation: 2,
            seed: 0,
        }
    }
}

pub struct MockBackend {
    config: MockConfig,
    template: PromptTemplate,
    score_calls: AtomicUsize,
    generate_calls: AtomicUsize,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

impl MockBackend {
    /// `template` must already be aligned to the dataset's labels.
    pub fn new(config: MockConfig, template: PromptTemplate) -> Self {
        MockBackend { config, template, score_calls: AtomicUsize::new(0), generate_calls: AtomicUsize::new(0) }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Number of `score_continuations` calls served so far.
    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    fn query_start(&self, context: &str) -> usize {
        let marker = if self.template.input_prefix.is_empty() {
            &self.template.sample_separator
        } else {
            &self.template.input_prefix
        };
        match context.rfind(marker.as_str()) {
            Some(i) if self.template.input_prefix.is_empty() => i + marker.len(),
            Some(i) => i,
            None => 0,
        }
    }

    /// Per-label bias from the demonstrations in `context`.
    pub fn order_bias(&self, context: &str) -> Vec<f64> {
        let n_labels = self.template.verbalizer.len();
        let mut bias = vec![0.0; n_labels];
        let demos = self.template.extract(&context[..self.query_start(context)]);
        let n = demos.len();
        for (j, demo) in demos.iter().enumerate() {
            let Some(label) = self.template.verbalizer.iter().position(|w| *w == demo.label) else {
                continue;
            };
            let text = match &demo.text_b {
                Some(b) => format!("{}\t{}", demo.text_a, b),
                None => demo.text_a.clone(),
            };
            let salience = 0.5 + rng::unit_hash(&["salience", &text]);
            let weight = self.config.recency_decay.powi((n - 1 - j) as i32);
            bias[label] += self.config.recency_bias * salience * weight;
        }
        bias
    }

    /// Keyword overlap of the query part of `context` with each label.
    pub fn keyword_overlap(&self, context: &str) -> Vec<f64> {
        let query: Vec<String> = words(&context[self.query_start(context)..]).collect();
        (0..self.template.verbalizer.len())
            .map(|label| {
                let Some(list) = self.config.keywords.get(label) else { return 0.0 };
                let list: HashSet<String> = list.iter().map(|k| k.to_lowercase()).collect();
                query.iter().filter(|w| list.contains(*w)).count() as f64
            })
            .collect()
    }

    fn sample_text(&self, index: usize) -> (String, Option<String>) {
        let line = &self.config.corpus[index];
        match (self.template.is_pair(), line.split_once('\t')) {
            (true, Some((a, b))) => (a.to_string(), Some(b.to_string())),
            (true, None) => (line.clone(), Some(line.clone())),
            (false, _) => (line.clone(), None),
        }
    }
}

impl Backend for MockBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { model_id: self.config.model_id.clone(), context_window: self.config.context_window }
    }

    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn score_continuations(&self, context: &str, continuations: &[String]) -> Result<Vec<f64>, BackendError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        let overlap = self.keyword_overlap(context);
        let bias = self.order_bias(context);
        Ok(continuations
            .iter()
            .map(|cont| {
                let noise = self.config.noise * (rng::unit_hash(&["noise", context, cont]) - 0.5);
                let word = cont.strip_prefix(self.template.label_lead.as_str()).unwrap_or(cont);
                match self.template.verbalizer.iter().position(|w| w == word.trim()) {
                    Some(label) => overlap[label] + bias[label] + noise,
                    None => noise,
                }
            })
            .collect())
    }

    fn generate(&self, context: &str, params: &GenParams) -> Result<String, BackendError> {
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        if self.config.corpus.is_empty() || self.template.verbalizer.is_empty() {
            return Ok(String::new());
        }
        let seed = rng::derive_seed(self.config.seed, &params.seed.unwrap_or(0).to_string());
        let mut stream = rng::rng_for(seed, context);
        let mut samples = Vec::with_capacity(self.config.samples_per_generation);
        for _ in 0..self.config.samples_per_generation {
            let (a, b) = self.sample_text(rng::index(&mut stream, self.config.corpus.len()));
            let label = rng::index(&mut stream, self.template.verbalizer.len());
            let mut s = self
                .template
                .linearize_unlabeled(&a, b.as_deref())
                .map_err(|e| BackendError::Protocol(e.to_string()))?;
            s.push_str(&self.template.continuation(label));
            samples.push(s);
        }
        let full = self.template.concat(&samples);

        let spans = token_spans(&full);
        let mut seen = HashSet::new();
        let mut end = 0;
        for (i, &(_, tok_end)) in spans.iter().enumerate().take(params.max_new_tokens) {
            if params.block_ngram > 0 && i + 1 >= params.block_ngram {
                let gram: Vec<&str> =
                    spans[i + 1 - params.block_ngram..=i].iter().map(|&(s, e)| &full[s..e]).collect();
                if !seen.insert(gram) {
                    break;
                }
            }
            end = tok_end;
        }
        let mut out = &full[..end];
        let cut = params.stop_sequences.iter().filter(|s| !s.is_empty()).filter_map(|s| out.find(s.as_str())).min();
        if let Some(cut) = cut {
            out = &out[..cut];
        }
        Ok(out.to_string())
    }
}

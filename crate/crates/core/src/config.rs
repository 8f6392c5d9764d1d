//! Experiment configuration file (TOML).
//!
//! ```toml
//! output_dir = "out"
//!
//! [dataset]
//! train = "data/train.jsonl"      # paths are relative to this file
//! eval = "data/dev.jsonl"         # defaults to `train`
//! format = "jsonl"                # defaults to the file extension
//! label_names = ["negative", "positive"]   # optional
//!
//! [template]
//! preset = "sst2"                 # or: file = "templates.toml", id = "mine"
//!
//! [backend]
//! kind = "mock"                   # or "openai"
//! parallelism = 4
//!
//! [backend.openai]
//! base_url = "http://localhost:8000/v1"
//! model = "gpt2"
//! api_key_env = "PROMPTORDER_API_KEY"
//! context_window = 1024
//!
//! [backend.mock]
//! keywords = { negative = ["dull"], positive = ["great"] }
//! corpus_file = "corpus.txt"
//!
//! [run]
//! shots = 4                       # default: 1 for dbpedia, 2 for agnews, else 4
//! num_train_sets = 5
//! max_permutations = 24
//! top_k = 4
//! eval_subsample = 256
//!
//! [generation]
//! temperature = 2.0
//! max_new_tokens = 128
//! block_ngram = 4
//!
//! [cache]
//! dir = "cache"
//! mode = "record"                 # "off" (alias "live"), "record" or "replay"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{GenParams, MockConfig, OpenAiConfig};
use crate::dataset::DatasetFormat;
use crate::error::{Error, Result};
use crate::eval::StdKind;
use crate::scoring::ProbabilityMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub template: TemplateSection,
    pub backend: BackendSection,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub generation: GenParams,
    #[serde(default)]
    pub cache: CacheSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<DatasetFormat>,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    OpenAi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub openai: Option<OpenAiSection>,
    #[serde(default)]
    pub mock: Option<MockSection>,
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiSection {
    #[serde(flatten)]
    pub client: OpenAiConfig,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

fn default_key_env() -> String {
    "PROMPTORDER_API_KEY".into()
}

/// Mock model settings with keywords keyed by label name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSection {
    #[serde(default)]
    pub keywords: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub corpus: Vec<String>,
    #[serde(default)]
    pub corpus_file: Option<PathBuf>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub context_window: Option<usize>,
    #[serde(default)]
    pub recency_bias: Option<f64>,
    #[serde(default)]
    pub recency_decay: Option<f64>,
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default)]
    pub samples_per_generation: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MockSection {
    /// Resolve into a [`MockConfig`] for a dataset with `label_names`.
    pub fn resolve(&self, label_names: &[String], base_dir: &Path) -> Result<MockConfig> {
        let defaults = MockConfig::default();
        for key in self.keywords.keys() {
            if !label_names.contains(key) {
                return Err(Error::Config(format!("mock keywords for unknown label {key:?}")));
            }
        }
        let keywords = label_names.iter().map(|l| self.keywords.get(l).cloned().unwrap_or_default()).collect();
        let mut corpus = self.corpus.clone();
        if let Some(file) = &self.corpus_file {
            let path = base_dir.join(file);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            corpus.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string));
        }
        Ok(MockConfig {
            model_id: self.model_id.clone().unwrap_or(defaults.model_id),
            context_window: self.context_window.unwrap_or(defaults.context_window),
            keywords,
            recency_bias: self.recency_bias.unwrap_or(defaults.recency_bias),
            recency_decay: self.recency_decay.unwrap_or(defaults.recency_decay),
            noise: self.noise.unwrap_or(defaults.noise),
            corpus,
            samples_per_generation: self.samples_per_generation.unwrap_or(defaults.samples_per_generation),
            seed: self.seed.unwrap_or(defaults.seed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training samples per set; `None` picks the per-dataset default.
    pub shots: Option<usize>,
    pub num_train_sets: usize,
    /// Explicit per-set seeds. When absent, set `i` uses `derive_seed(seed, "train-set-i")`.
    pub seeds: Option<Vec<u64>>,
    pub seed: u64,
    pub max_permutations: usize,
    pub top_k: usize,
    pub eval_subsample: usize,
    pub balanced: bool,
    pub std: StdKind,
    pub generations_per_candidate: usize,
    pub probability: ProbabilityMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            shots: None,
            num_train_sets: 5,
            seeds: None,
            seed: 0,
            max_permutations: 24,
            top_k: 4,
            eval_subsample: 256,
            balanced: true,
            std: StdKind::Population,
            generations_per_candidate: 1,
            probability: ProbabilityMode::Renormalized,
        }
    }
}

impl RunConfig {
    /// Shots for a dataset: explicit value, else 1 for DBPedia, 2 for AGNews,
    /// 4 otherwise (matched on the dataset or template name).
    pub fn shots_for(&self, name: &str) -> usize {
        if let Some(s) = self.shots {
            return s;
        }
        let name = name.to_ascii_lowercase();
        if name.contains("dbpedia") {
            1
        } else if name.contains("agnews") || name.contains("ag_news") {
            2
        } else {
            4
        }
    }

    pub fn train_set_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.num_train_sets)
                .map(|i| crate::rng::derive_seed(self.seed, &format!("train-set-{i}")))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.max_permutations {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= max_permutations, got top_k={} max_permutations={}",
                self.top_k, self.max_permutations
            )));
        }
        if self.train_set_seeds().is_empty() {
            return Err(Error::Config("need at least one train set".into()));
        }
        if self.eval_subsample == 0 {
            return Err(Error::Config("eval_subsample must be at least 1".into()));
        }
        if self.shots == Some(0) {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheSetting {
    #[default]
    #[serde(alias = "live")]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub dir: Option<PathBuf>,
    pub mode: CacheSetting,
}

impl ExperimentSpec {
    pub fn parse(source: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&source).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.generation.validate().map_err(|e| Error::Config(e.to_string()))?;
        match (&self.template.preset, &self.template.file) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("template needs exactly one of preset or file".into())),
        }
        match self.backend.kind {
            BackendKind::Mock if self.backend.mock.is_none() => {
                return Err(Error::Config("backend.kind = \"mock\" needs a [backend.mock] table".into()))
            }
            BackendKind::OpenAi if self.backend.openai.is_none() => {
                return Err(Error::Config("backend.kind = \"openai\" needs a [backend.openai] table".into()))
            }
            _ => {}
        }
        if self.cache.mode != CacheSetting::Off && self.cache.dir.is_none() {
            return Err(Error::Config("cache mode needs cache.dir".into()));
        }
        Ok(())
    }
}

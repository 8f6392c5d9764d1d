//! End-to-end pipeline: sample train sets, build and score candidates on a
//! generated probing set, then evaluate selection strategies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, CacheMode, CachedBackend, MockBackend, OpenAiBackend};
use crate::config::{BackendKind, CacheSetting, ExperimentSpec};
use crate::dataset::{load_dataset, sample_train_set, subsample_eval, Dataset, DatasetFormat, LabeledExample, TrainSet};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_candidate, majority_baseline, mean, oracle_select, run_statistics, split_train_select, topk_sweep,
    StdKind, Strategy, StrategyStats,
};
use crate::permute::{
    duplicate_contexts, enumerate_orderings, label_symbols, render_candidates, PromptCandidate, SampleOrder,
};
use crate::probing::{build_probing_set, ProbingDiagnostics, ProbingOptions, ProbingSet};
use crate::rng;
use crate::scoring::{rank_candidates, score_candidates, CandidateScore, Metric};
use crate::template::{load_templates, preset, PromptTemplate};

/// A loaded, validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub base_dir: PathBuf,
    pub train: Dataset,
    pub eval_set: Vec<LabeledExample>,
    /// Template aligned to the dataset's label ids.
    pub template: PromptTemplate,
    pub shots: usize,
    pub config_hash: String,
}

#[derive(Serialize)]
struct HashInput<'a> {
    train_sha256: String,
    eval_sha256: String,
    label_names: &'a [String],
    template: &'a PromptTemplate,
    shots: usize,
    run: &'a crate::config::RunConfig,
    generation: &'a crate::backend::GenParams,
    backend: serde_json::Value,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Drop examples the template cannot render unambiguously.
fn usable(examples: Vec<LabeledExample>, tpl: &PromptTemplate) -> Vec<LabeledExample> {
    examples
        .into_iter()
        .filter(|ex| match tpl.check_example(ex) {
            Ok(()) => true,
            Err(e) => {
                log::warn!("skipping {e}");
                false
            }
        })
        .collect()
}

impl Experiment {
    pub fn load(config_path: &Path) -> Result<Self> {
        let spec = ExperimentSpec::load(config_path)?;
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_spec(spec, base)
    }

    pub fn from_spec(spec: ExperimentSpec, base_dir: PathBuf) -> Result<Self> {
        spec.validate()?;
        let resolve = |p: &Path| base_dir.join(p);
        let train_path = resolve(&spec.dataset.train);
        let eval_path = spec.dataset.eval.as_deref().map(resolve).unwrap_or_else(|| train_path.clone());
        let format_of = |p: &Path| {
            spec.dataset
                .format
                .or_else(|| DatasetFormat::from_path(p))
                .ok_or_else(|| Error::Config(format!("cannot tell the format of {}", p.display())))
        };
        let train = load_dataset(&train_path, format_of(&train_path)?, spec.dataset.label_names.clone())?;
        let eval_full = load_dataset(&eval_path, format_of(&eval_path)?, Some(train.label_names.clone()))?;

        let raw_template = match (&spec.template.preset, &spec.template.file) {
            (Some(id), _) => preset(id)?,
            (None, Some(file)) => {
                let templates = load_templates(&resolve(file))?;
                match &spec.template.id {
                    Some(id) => templates
                        .into_iter()
                        .find(|t| &t.id == id)
                        .ok_or_else(|| Error::Config(format!("template {id:?} not found")))?,
                    None => templates
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::Config("template file is empty".into()))?,
                }
            }
            (None, None) => return Err(Error::Config("no template configured".into())),
        };
        let template = raw_template.aligned_to(&train.label_names)?;
        if template.is_pair() != train.pair_task {
            return Err(Error::Config(format!(
                "template {} and dataset {} disagree on sentence-pair input",
                template.id, train.name
            )));
        }
        let train = train.with_examples(usable(train.examples.clone(), &template));
        let eval_full = eval_full.with_examples(usable(eval_full.examples.clone(), &template));
        let eval_seed = rng::derive_seed(spec.run.seed, "eval");
        let eval_set = subsample_eval(&eval_full, spec.run.eval_subsample, eval_seed);
        if eval_set.is_empty() {
            return Err(Error::Config("evaluation set is empty".into()));
        }
        let shots = spec.run.shots_for(&format!("{} {}", train.name, raw_template.id));

        let backend_identity = match spec.backend.kind {
            BackendKind::Mock => serde_json::json!({
                "kind": "mock",
                "config": spec.backend.mock.as_ref().expect("validated").resolve(&train.label_names, &base_dir)?,
            }),
            BackendKind::OpenAi => serde_json::json!({
                "kind": "openai",
                "model": spec.backend.openai.as_ref().expect("validated").client.model,
            }),
        };
        let input = HashInput {
            train_sha256: file_sha256(&train_path)?,
            eval_sha256: file_sha256(&eval_path)?,
            label_names: &train.label_names,
            template: &template,
            shots,
            run: &spec.run,
            generation: &spec.generation,
            backend: backend_identity,
        };
        let json = serde_json::to_string(&input).map_err(|e| Error::Config(e.to_string()))?;
        let config_hash = hex::encode(&Sha256::digest(json.as_bytes())[..8]);

        Ok(Experiment { spec, base_dir, train, eval_set, template, shots, config_hash })
    }

    /// The configured backend, wrapped in the response cache when enabled.
    pub fn backend(&self) -> Result<Arc<dyn Backend>> {
        let inner: Arc<dyn Backend> = match self.spec.backend.kind {
            BackendKind::Mock => {
                let cfg = self.spec.backend.mock.as_ref().expect("validated");
                Arc::new(MockBackend::new(cfg.resolve(&self.train.label_names, &self.base_dir)?, self.template.clone()))
            }
            BackendKind::OpenAi => {
                let section = self.spec.backend.openai.as_ref().expect("validated");
                let mut client = section.client.clone();
                if client.api_key.is_none() {
                    client.api_key = std::env::var(&section.api_key_env).ok();
                }
                Arc::new(OpenAiBackend::new(client).map_err(|e| Error::Config(e.to_string()))?)
            }
        };
        let mode = match self.spec.cache.mode {
            CacheSetting::Off => return Ok(inner),
            CacheSetting::Record => CacheMode::Record,
            CacheSetting::Replay => CacheMode::Replay,
        };
        let dir = self.base_dir.join(self.spec.cache.dir.as_ref().expect("validated"));
        let cached = CachedBackend::new(inner, dir, mode).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Arc::new(cached))
    }

    pub fn train_sets(&self) -> Result<Vec<TrainSet>> {
        self.spec
            .run
            .train_set_seeds()
            .into_iter()
            .map(|seed| Ok(sample_train_set(&self.train, self.shots, seed, self.spec.run.balanced)?))
            .collect()
    }

    pub fn orderings(&self, ts: &TrainSet) -> Vec<SampleOrder> {
        enumerate_orderings(ts.shots(), self.spec.run.max_permutations, rng::derive_seed(ts.seed, "orderings"))
    }

    pub fn candidates(&self, ts: &TrainSet, orderings: &[SampleOrder]) -> Result<Vec<PromptCandidate>> {
        Ok(render_candidates(ts, &self.template, orderings, &label_symbols(&self.train.label_names))?)
    }

    fn parallelism(&self) -> usize {
        self.spec.backend.parallelism.max(1)
    }

    /// Probe, score and rank the candidates of every train set.
    pub fn select(&self, backend: &dyn Backend) -> Result<SelectRun> {
        let model_id = backend.info().model_id;
        let probing = ProbingOptions {
            params: self.spec.generation.clone(),
            generations_per_candidate: self.spec.run.generations_per_candidate,
            parallelism: self.parallelism(),
        };
        let k = self.spec.run.top_k;
        let mut sets = Vec::new();
        let mut all_candidates = Vec::new();
        let mut probing_sets = Vec::new();
        for (index, ts) in self.train_sets()?.into_iter().enumerate() {
            let orderings = self.orderings(&ts);
            let candidates = self.candidates(&ts, &orderings)?;
            let dups = duplicate_contexts(&candidates);
            if !dups.is_empty() {
                log::warn!("train set {index}: {} candidate pairs render identical contexts", dups.len());
            }
            let probe_set = build_probing_set(&candidates, backend, &self.template, &probing)?;
            log::info!("train set {index}: {} probes from {} candidates", probe_set.len(), candidates.len());
            let scores = score_candidates(
                backend,
                &self.template,
                &candidates,
                &probe_set.probes,
                self.spec.run.probability,
                self.parallelism(),
            )?;
            sets.push(SetSelection {
                index,
                seed: ts.seed,
                sample_ids: ts.samples.iter().map(|s| s.id.clone()).collect(),
                orderings,
                label_patterns: candidates.iter().map(|c| c.label_pattern.clone()).collect(),
                duplicate_contexts: dups,
                num_probes: probe_set.len(),
                probing: probe_set.diagnostics.clone(),
                selected_global: rank_candidates(&scores, Metric::GlobalE, k),
                selected_local: rank_candidates(&scores, Metric::LocalE, k),
                scores,
            });
            all_candidates.push(candidates);
            probing_sets.push(probe_set);
        }
        Ok(SelectRun {
            selection: Selection {
                config_hash: self.config_hash.clone(),
                model_id,
                dataset: self.train.name.clone(),
                template: self.template.id.clone(),
                top_k: k,
                train_sets: sets,
            },
            candidates: all_candidates,
            probing: probing_sets,
        })
    }

    /// Evaluate `strategies` on the evaluation subsample. Entropy strategies
    /// take their picks from `selection`, which must come from the same
    /// configuration.
    pub fn evaluate(
        &self,
        backend: &dyn Backend,
        selection: Option<&Selection>,
        strategies: &[Strategy],
    ) -> Result<RunReport> {
        let wants = |s: Strategy| strategies.contains(&s);
        let needs_selection = wants(Strategy::LocalE) || wants(Strategy::GlobalE);
        let selection = match selection {
            Some(sel) if sel.config_hash != self.config_hash => {
                return Err(Error::Config(format!(
                    "selection was produced by configuration {} but the current configuration is {}",
                    sel.config_hash, self.config_hash
                )))
            }
            Some(sel) => Some(sel),
            None if needs_selection => {
                return Err(Error::Config("localE/globalE evaluation needs the output of select".into()))
            }
            None => None,
        };
        let k = self.spec.run.top_k;
        let majority = majority_baseline(&self.eval_set)?;
        let mut set_reports = Vec::new();
        for (index, ts) in self.train_sets()?.into_iter().enumerate() {
            let orderings = self.orderings(&ts);
            let sample_ids: Vec<String> = ts.samples.iter().map(|s| s.id.clone()).collect();
            let chosen = selection.map(|s| s.train_sets.get(index)).transpose_none(index)?;
            if let Some(sel) = chosen {
                if sel.sample_ids != sample_ids || sel.orderings != orderings {
                    return Err(Error::Config(format!("train set {index} differs from the recorded selection")));
                }
            }
            let candidates = self.candidates(&ts, &orderings)?;
            let evaluations = candidates
                .iter()
                .map(|c| evaluate_candidate(backend, &self.template, c, &self.eval_set, self.parallelism()))
                .collect::<Result<Vec<_>>>()?;
            let accuracies: Vec<f64> = evaluations.iter().map(|e| e.accuracy).collect();
            let pick_mean = |idx: &[usize]| mean(&idx.iter().map(|&i| accuracies[i]).collect::<Vec<_>>());

            let mut selected = BTreeMap::new();
            let mut strategy_accuracy = BTreeMap::new();
            if wants(Strategy::All) {
                strategy_accuracy.insert(Strategy::All, mean(&accuracies));
            }
            if let Some(sel) = chosen {
                for (strategy, picks) in
                    [(Strategy::GlobalE, &sel.selected_global), (Strategy::LocalE, &sel.selected_local)]
                {
                    if wants(strategy) {
                        strategy_accuracy.insert(strategy, pick_mean(picks));
                        selected.insert(strategy, picks.clone());
                    }
                }
            }
            if wants(Strategy::Oracle) {
                let picks = oracle_select(&accuracies, k);
                strategy_accuracy.insert(Strategy::Oracle, pick_mean(&picks));
                selected.insert(Strategy::Oracle, picks);
            }
            let mut split = None;
            if wants(Strategy::Split) {
                if ts.shots() < 2 {
                    log::warn!("train set {index}: split-train needs at least 2 shots; skipped");
                } else {
                    let s = split_train_select(
                        &ts,
                        &self.template,
                        backend,
                        k,
                        self.spec.run.max_permutations,
                        rng::derive_seed(ts.seed, "split"),
                        self.parallelism(),
                    )?;
                    let eval_accuracy = s
                        .selected
                        .iter()
                        .map(|&i| {
                            Ok(evaluate_candidate(backend, &self.template, &s.candidates[i], &self.eval_set, self.parallelism())?
                                .accuracy)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    strategy_accuracy.insert(Strategy::Split, mean(&eval_accuracy));
                    split = Some(SplitReport {
                        prompt_ids: s.prompt_set.samples.iter().map(|x| x.id.clone()).collect(),
                        validation_ids: s.validation.iter().map(|x| x.id.clone()).collect(),
                        orderings: s.candidates.iter().map(|c| c.ordering.clone()).collect(),
                        validation_accuracy: s.validation_accuracy,
                        selected: s.selected,
                        eval_accuracy,
                    });
                }
            }
            if wants(Strategy::Majority) {
                strategy_accuracy.insert(Strategy::Majority, majority);
            }
            set_reports.push(SetReport {
                index,
                seed: ts.seed,
                sample_ids,
                label_patterns: candidates.iter().map(|c| c.label_pattern.clone()).collect(),
                orderings,
                accuracies,
                predicted_histograms: evaluations.into_iter().map(|e| e.histogram).collect(),
                scores: chosen.map(|s| s.scores.clone()),
                selected,
                strategy_accuracy,
                split,
            });
        }
        let mut stats = BTreeMap::new();
        for strategy in Strategy::ALL {
            let per_set: Vec<f64> =
                set_reports.iter().filter_map(|s| s.strategy_accuracy.get(&strategy).copied()).collect();
            if !per_set.is_empty() {
                stats.insert(strategy, run_statistics(&per_set, self.spec.run.std)?);
            }
        }
        Ok(RunReport {
            config_hash: self.config_hash.clone(),
            model_id: backend.info().model_id,
            dataset: self.train.name.clone(),
            template: self.template.id.clone(),
            label_names: self.train.label_names.clone(),
            shots: self.shots,
            top_k: k,
            eval_size: self.eval_set.len(),
            std: self.spec.run.std,
            majority,
            train_sets: set_reports,
            strategies: stats,
        })
    }
}

trait TransposeNone<'a> {
    fn transpose_none(self, index: usize) -> Result<Option<&'a SetSelection>>;
}

impl<'a> TransposeNone<'a> for Option<Option<&'a SetSelection>> {
    fn transpose_none(self, index: usize) -> Result<Option<&'a SetSelection>> {
        match self {
            None => Ok(None),
            Some(Some(s)) => Ok(Some(s)),
            Some(None) => Err(Error::Config(format!("selection has no train set {index}"))),
        }
    }
}

/// Contents of `selected.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub config_hash: String,
    pub model_id: String,
    pub dataset: String,
    pub template: String,
    pub top_k: usize,
    pub train_sets: Vec<SetSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSelection {
    pub index: usize,
    pub seed: u64,
    pub sample_ids: Vec<String>,
    pub orderings: Vec<SampleOrder>,
    pub label_patterns: Vec<String>,
    pub duplicate_contexts: Vec<(usize, usize)>,
    pub num_probes: usize,
    pub probing: ProbingDiagnostics,
    pub scores: Vec<CandidateScore>,
    #[serde(rename = "selected_globalE")]
    pub selected_global: Vec<usize>,
    #[serde(rename = "selected_localE")]
    pub selected_local: Vec<usize>,
}

/// Everything `select` produced, including what only goes to other artifacts.
#[derive(Debug, Clone)]
pub struct SelectRun {
    pub selection: Selection,
    pub candidates: Vec<Vec<PromptCandidate>>,
    pub probing: Vec<ProbingSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub prompt_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub orderings: Vec<SampleOrder>,
    pub validation_accuracy: Vec<f64>,
    pub selected: Vec<usize>,
    /// Evaluation accuracy of each selected ordering.
    pub eval_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub index: usize,
    pub seed: u64,
    pub sample_ids: Vec<String>,
    pub orderings: Vec<SampleOrder>,
    pub label_patterns: Vec<String>,
    /// Accuracy of each candidate on the evaluation subsample.
    pub accuracies: Vec<f64>,
    /// Predicted-label counts of each candidate on the evaluation subsample.
    pub predicted_histograms: Vec<Vec<usize>>,
    #[serde(default)]
    pub scores: Option<Vec<CandidateScore>>,
    pub selected: BTreeMap<Strategy, Vec<usize>>,
    pub strategy_accuracy: BTreeMap<Strategy, f64>,
    #[serde(default)]
    pub split: Option<SplitReport>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub model_id: String,
    pub dataset: String,
    pub template: String,
    pub label_names: Vec<String>,
    pub shots: usize,
    pub top_k: usize,
    pub eval_size: usize,
    pub std: StdKind,
    pub majority: f64,
    pub train_sets: Vec<SetReport>,
    pub strategies: BTreeMap<Strategy, StrategyStats>,
}

/// One point of the top-K curve, averaged over train sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub metric: Metric,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

impl RunReport {
    /// Top-K curves for both metrics. Needs entropy scores in the report.
    pub fn sweep(&self) -> Result<Vec<SweepPoint>> {
        let mut out = Vec::new();
        for metric in [Metric::GlobalE, Metric::LocalE] {
            let mut curves = Vec::new();
            for set in &self.train_sets {
                let scores = set
                    .scores
                    .as_ref()
                    .ok_or_else(|| Error::Config("report has no entropy scores; evaluate after select".into()))?;
                curves.push(topk_sweep(scores, &set.accuracies, metric));
            }
            let len = curves.iter().map(Vec::len).min().unwrap_or(0);
            for k in 1..=len {
                let per_set: Vec<f64> = curves.iter().map(|c| c[k - 1].1).collect();
                let stats = run_statistics(&per_set, self.std)?;
                out.push(SweepPoint { metric, k, mean: stats.mean, std: stats.std });
            }
        }
        Ok(out)
    }

    /// Per-candidate accuracies across all train sets, in order.
    pub fn flat_accuracies(&self) -> Vec<f64> {
        self.train_sets.iter().flat_map(|s| s.accuracies.iter().copied()).collect()
    }

    /// Identity of the candidate pool: sample ids and orderings per set.
    pub fn candidate_key(&self) -> Vec<(Vec<String>, Vec<SampleOrder>)> {
        self.train_sets.iter().map(|s| (s.sample_ids.clone(), s.orderings.clone())).collect()
    }
}

/// Spearman correlations of per-candidate accuracies across reports (one per
/// model). All reports must cover the same candidates.
pub fn correlate_reports(reports: &[RunReport]) -> Result<Vec<Vec<f64>>> {
    if reports.len() < 2 {
        return Err(Error::Invalid("correlation needs at least two reports".into()));
    }
    let key = reports[0].candidate_key();
    for r in &reports[1..] {
        if r.candidate_key() != key {
            return Err(Error::Invalid(format!(
                "report for {} covers different candidates than report for {}",
                r.model_id, reports[0].model_id
            )));
        }
    }
    let series: Vec<Vec<f64>> = reports.iter().map(RunReport::flat_accuracies).collect();
    crate::eval::correlation_matrix(&series)
}

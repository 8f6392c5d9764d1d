//! Entropy statistics of a candidate's predictions on the probing set, and
//! ranking of candidates by them.
//!
//! For candidate `m` and probe `i`, the backend gives a label distribution
//! `p(v | c_m + T(x_i))`. The predicted label is its argmax (lowest label id
//! on ties).
//!
//! - GlobalE is the entropy of the predicted-label histogram over the probes.
//! - LocalE is the mean over probes of the entropy of each distribution.
//!
//! Entropies are in nats with `0 ln 0 = 0`. Both come from one backend query
//! per (candidate, probe) pair.

use serde::{Deserialize, Serialize};

use crate::backend::{self, par_map, Backend, LabelQueryResult};
use crate::error::{Error, Result};
use crate::permute::PromptCandidate;
use crate::probing::Probe;
use crate::template::PromptTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "globalE")]
    GlobalE,
    #[serde(rename = "localE")]
    LocalE,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::GlobalE => "globalE",
            Metric::LocalE => "localE",
        }
    }
}

/// Which probability vector feeds LocalE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbabilityMode {
    /// Softmax over the label set.
    #[default]
    Renormalized,
    /// `exp(score)` per label without renormalization.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_index: usize,
    #[serde(rename = "globalE")]
    pub global_entropy: f64,
    #[serde(rename = "localE")]
    pub local_entropy: f64,
    pub histogram: Vec<usize>,
}

impl CandidateScore {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::GlobalE => self.global_entropy,
            Metric::LocalE => self.local_entropy,
        }
    }
}

/// Index of the largest probability; the lowest index wins ties.
pub fn predict_label(probabilities: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate().skip(1) {
        if p > probabilities[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probabilities: &[f64]) -> f64 {
    -probabilities.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy of the empirical distribution given by `histogram`.
pub fn global_entropy(histogram: &[usize]) -> Result<f64> {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("global entropy of an empty probing set".into()));
    }
    let p: Vec<f64> = histogram.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(entropy(&p))
}

/// Mean per-probe entropy.
pub fn local_entropy<P: AsRef<[f64]>>(distributions: &[P]) -> Result<f64> {
    if distributions.is_empty() {
        return Err(Error::Invalid("local entropy of an empty probing set".into()));
    }
    let total: f64 = distributions.iter().map(|p| entropy(p.as_ref())).sum();
    Ok(total / distributions.len() as f64)
}

/// Counts of predicted labels.
pub fn histogram<P: AsRef<[f64]>>(distributions: &[P], num_labels: usize) -> Vec<usize> {
    let mut counts = vec![0; num_labels];
    for p in distributions {
        counts[predict_label(p.as_ref())] += 1;
    }
    counts
}

/// Score one candidate from its per-probe label query results.
pub fn score_from_results(
    candidate_index: usize,
    results: &[LabelQueryResult],
    mode: ProbabilityMode,
) -> Result<CandidateScore> {
    let num_labels = results.first().map(|r| r.normalized.len()).unwrap_or(0);
    let normalized: Vec<&[f64]> = results.iter().map(|r| r.normalized.as_slice()).collect();
    let local = match mode {
        ProbabilityMode::Renormalized => local_entropy(&normalized)?,
        ProbabilityMode::Raw => {
            let raw: Vec<Vec<f64>> = results.iter().map(|r| r.scores.iter().map(|s| s.exp()).collect()).collect();
            local_entropy(&raw)?
        }
    };
    let hist = histogram(&normalized, num_labels);
    Ok(CandidateScore { candidate_index, global_entropy: global_entropy(&hist)?, local_entropy: local, histogram: hist })
}

/// Context for classifying `text_a`/`text_b` under a candidate context.
pub fn query_context(tpl: &PromptTemplate, candidate_context: &str, text_a: &str, text_b: Option<&str>) -> Result<String> {
    Ok(format!("{}{}", tpl.open_next(candidate_context), tpl.linearize_unlabeled(text_a, text_b)?))
}

/// Label distributions of every probe under one candidate.
pub fn query_candidate<B: Backend + ?Sized>(
    backend: &B,
    tpl: &PromptTemplate,
    candidate: &PromptCandidate,
    probes: &[Probe],
    parallelism: usize,
) -> Result<Vec<LabelQueryResult>> {
    let continuations = tpl.continuations();
    par_map(parallelism, &probes.iter().enumerate().collect::<Vec<_>>(), |&(i, probe)| {
        let ctx = query_context(tpl, &candidate.context, &probe.text, probe.text_b.as_deref())?;
        backend::label_distribution(backend, &ctx, &continuations)
            .map_err(|e| Error::backend(format!("candidate {}, probe {i}", candidate.index), e))
    })
    .into_iter()
    .collect()
}

/// The predicted label for one probe under one candidate.
pub fn predict<B: Backend + ?Sized>(
    backend: &B,
    tpl: &PromptTemplate,
    candidate: &PromptCandidate,
    probe: &Probe,
) -> Result<usize> {
    let r = query_candidate(backend, tpl, candidate, std::slice::from_ref(probe), 1)?;
    Ok(predict_label(&r[0].normalized))
}

/// GlobalE and LocalE for every candidate over the same probes.
pub fn score_candidates<B: Backend + ?Sized>(
    backend: &B,
    tpl: &PromptTemplate,
    candidates: &[PromptCandidate],
    probes: &[Probe],
    mode: ProbabilityMode,
    parallelism: usize,
) -> Result<Vec<CandidateScore>> {
    if probes.is_empty() {
        return Err(Error::Invalid("cannot score candidates on an empty probing set".into()));
    }
    let continuations = tpl.continuations();
    let jobs: Vec<(usize, usize)> =
        (0..candidates.len()).flat_map(|c| (0..probes.len()).map(move |p| (c, p))).collect();
    let results = par_map(parallelism, &jobs, |&(c, p)| {
        let probe = &probes[p];
        let ctx = query_context(tpl, &candidates[c].context, &probe.text, probe.text_b.as_deref())?;
        backend::label_distribution(backend, &ctx, &continuations)
            .map_err(|e| Error::backend(format!("candidate {}, probe {p}", candidates[c].index), e))
    });
    let mut results = results.into_iter();
    candidates
        .iter()
        .map(|cand| {
            let per_probe = results.by_ref().take(probes.len()).collect::<Result<Vec<_>>>()?;
            score_from_results(cand.index, &per_probe, mode)
        })
        .collect()
}

/// Candidate indices of the top `k` scores, highest first; equal scores keep
/// ascending candidate index.
pub fn rank_candidates(scores: &[CandidateScore], metric: Metric, k: usize) -> Vec<usize> {
    let values: Vec<(usize, f64)> = scores.iter().map(|s| (s.candidate_index, s.metric(metric))).collect();
    rank_by_value(&values, k)
}

/// Top `k` of `(index, value)` pairs by descending value, ties by index.
pub fn rank_by_value(values: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(i, _)| i).collect()
}

//! Probing-set construction: sample a continuation of every candidate
//! context, extract the samples it contains, and keep only their inputs.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backend::{self, par_map, Backend, GenParams};
use crate::error::{Error, Result};
use crate::permute::PromptCandidate;
use crate::rng;
use crate::template::PromptTemplate;

/// An unlabeled probe input and the candidate whose generation produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub source_candidate: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbingDiagnostics {
    pub generations: usize,
    /// Candidates whose generations yielded no complete sample.
    pub failed_candidates: Vec<usize>,
    pub rejected_segments: usize,
    pub incomplete_tails: usize,
    /// Probes whose text repeats an earlier probe. They are kept.
    pub duplicate_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbingSet {
    pub probes: Vec<Probe>,
    pub diagnostics: ProbingDiagnostics,
}

impl ProbingSet {
    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbingOptions {
    pub params: GenParams,
    /// Generations sampled per candidate.
    pub generations_per_candidate: usize,
    pub parallelism: usize,
}

impl Default for ProbingOptions {
    fn default() -> Self {
        ProbingOptions { params: GenParams::default(), generations_per_candidate: 1, parallelism: 1 }
    }
}

/// Parameters for the `replica`-th generation of a candidate. Replica 0 uses
/// `params` unchanged; later replicas get derived seeds so that they are
/// distinct requests.
fn replica_params(params: &GenParams, replica: usize) -> GenParams {
    if replica == 0 {
        return params.clone();
    }
    let seed = rng::derive_seed(params.seed.unwrap_or(0), &format!("replica-{replica}"));
    GenParams { seed: Some(seed), ..params.clone() }
}

/// Build the probing set from every candidate's generation(s).
///
/// Each candidate context is followed by the template's sample separator
/// before sampling, so the model starts a fresh sample. Probes are assembled
/// in candidate order whatever order the generations complete in.
pub fn build_probing_set<B: Backend + ?Sized>(
    candidates: &[PromptCandidate],
    backend: &B,
    tpl: &PromptTemplate,
    options: &ProbingOptions,
) -> Result<ProbingSet> {
    if candidates.is_empty() {
        return Err(Error::Invalid("probing needs at least one candidate".into()));
    }
    let replicas = options.generations_per_candidate.max(1);
    let jobs: Vec<(usize, usize)> =
        candidates.iter().flat_map(|c| (0..replicas).map(move |r| (c.index, r))).collect();
    let contexts: Vec<String> = candidates.iter().map(|c| tpl.open_next(&c.context)).collect();
    let position = |index: usize| candidates.iter().position(|c| c.index == index).unwrap_or(0);

    let generations = par_map(options.parallelism, &jobs, |&(index, replica)| {
        let params = replica_params(&options.params, replica);
        backend::generate(backend, &contexts[position(index)], &params)
            .map_err(|e| Error::backend(format!("generation for candidate {index}"), e))
    });

    let mut probes = Vec::new();
    let mut diag = ProbingDiagnostics { generations: jobs.len(), ..Default::default() };
    let mut per_candidate = vec![0usize; candidates.len()];
    for (&(index, _), generated) in jobs.iter().zip(generations) {
        let extraction = tpl.extract_with_stats(&generated?);
        diag.rejected_segments += extraction.rejected;
        diag.incomplete_tails += usize::from(extraction.incomplete_tail);
        per_candidate[position(index)] += extraction.samples.len();
        // Generated labels are dropped here.
        probes.extend(extraction.samples.into_iter().map(|s| Probe {
            text: s.text_a,
            text_b: s.text_b,
            source_candidate: index,
        }));
    }
    diag.failed_candidates =
        candidates.iter().zip(&per_candidate).filter(|(_, &n)| n == 0).map(|(c, _)| c.index).collect();
    let mut seen = HashSet::new();
    diag.duplicate_probes = probes.iter().filter(|p| !seen.insert((&p.text, &p.text_b))).count();

    if probes.is_empty() {
        return Err(Error::EmptyProbingSet);
    }
    if probes.len() < candidates.len() {
        log::warn!("probing set has {} probes for {} candidates", probes.len(), candidates.len());
    }
    Ok(ProbingSet { probes, diagnostics: diag })
}

//! Accuracy of candidate prompts, selection baselines, and order-sensitivity
//! statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{self, par_map, Backend};
use crate::dataset::{LabeledExample, TrainSet};
use crate::error::{Error, Result};
use crate::permute::{enumerate_orderings, label_symbols, render_candidates, PromptCandidate};
use crate::rng;
use crate::scoring::{predict_label, query_context, rank_by_value, rank_candidates, CandidateScore, Metric};
use crate::template::PromptTemplate;

/// How a train set's candidates are reduced to one accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Mean over every candidate.
    #[serde(rename = "all")]
    All,
    #[serde(rename = "localE")]
    LocalE,
    #[serde(rename = "globalE")]
    GlobalE,
    /// Top-k by accuracy on the evaluation data itself.
    #[serde(rename = "oracle")]
    Oracle,
    /// Half the shots as prompt, half as a validation set.
    #[serde(rename = "split")]
    Split,
    #[serde(rename = "majority")]
    Majority,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::All, Strategy::LocalE, Strategy::GlobalE, Strategy::Oracle, Strategy::Split, Strategy::Majority];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::All => "all",
            Strategy::LocalE => "localE",
            Strategy::GlobalE => "globalE",
            Strategy::Oracle => "oracle",
            Strategy::Split => "split",
            Strategy::Majority => "majority",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Predictions of one candidate on an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub histogram: Vec<usize>,
}

pub fn accuracy_of(predictions: &[usize], gold: &[usize]) -> f64 {
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len() as f64
}

/// Classify every example of `eval_set` under `context`.
pub fn evaluate_context<B: Backend + ?Sized>(
    backend: &B,
    tpl: &PromptTemplate,
    context: &str,
    eval_set: &[LabeledExample],
    parallelism: usize,
    what: &str,
) -> Result<Evaluation> {
    if eval_set.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let continuations = tpl.continuations();
    let predictions = par_map(parallelism, eval_set, |ex| {
        let ctx = query_context(tpl, context, &ex.text_a, ex.text_b.as_deref())?;
        backend::label_distribution(backend, &ctx, &continuations)
            .map(|r| predict_label(&r.normalized))
            .map_err(|e| Error::backend(format!("{what}, example {}", ex.id), e))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = eval_set.iter().map(|e| e.label).collect();
    let mut histogram = vec![0; tpl.verbalizer.len()];
    for &p in &predictions {
        histogram[p] += 1;
    }
    Ok(Evaluation { accuracy: accuracy_of(&predictions, &gold), predictions, histogram })
}

pub fn evaluate_candidate<B: Backend + ?Sized>(
    backend: &B,
    tpl: &PromptTemplate,
    candidate: &PromptCandidate,
    eval_set: &[LabeledExample],
    parallelism: usize,
) -> Result<Evaluation> {
    evaluate_context(backend, tpl, &candidate.context, eval_set, parallelism, &format!("candidate {}", candidate.index))
}

/// Fraction of `eval_set` whose label is predicted correctly under `candidate`.
pub fn accuracy<B: Backend + ?Sized>(
    backend: &B,
    tpl: &PromptTemplate,
    candidate: &PromptCandidate,
    eval_set: &[LabeledExample],
) -> Result<f64> {
    Ok(evaluate_candidate(backend, tpl, candidate, eval_set, 1)?.accuracy)
}

/// Accuracy of always predicting the most frequent label.
pub fn majority_baseline(eval_set: &[LabeledExample]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Invalid("majority baseline of an empty set".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for ex in eval_set {
        *counts.entry(ex.label).or_insert(0usize) += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    Ok(max as f64 / eval_set.len() as f64)
}

/// Top `k` candidate indices by accuracy (`accuracies[i]` belongs to
/// candidate `i`); ties keep the lower index.
pub fn oracle_select(accuracies: &[f64], k: usize) -> Vec<usize> {
    let values: Vec<(usize, f64)> = accuracies.iter().copied().enumerate().collect();
    rank_by_value(&values, k)
}

/// Result of selecting orderings with half the shots held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSelection {
    /// Samples used inside the prompts.
    pub prompt_set: TrainSet,
    pub validation: Vec<LabeledExample>,
    pub candidates: Vec<PromptCandidate>,
    pub validation_accuracy: Vec<f64>,
    /// Indices into `candidates`, best first.
    pub selected: Vec<usize>,
}

/// Split the training samples in half (seeded), permute the first half into
/// prompts, and keep the `k` best by accuracy on the second half. With an odd
/// `n` the prompt half gets `floor(n / 2)` samples.
#[allow(clippy::too_many_arguments)]
pub fn split_train_select<B: Backend + ?Sized>(
    ts: &TrainSet,
    tpl: &PromptTemplate,
    backend: &B,
    k: usize,
    max_permutations: usize,
    seed: u64,
    parallelism: usize,
) -> Result<SplitSelection> {
    let n = ts.shots();
    if n < 2 {
        return Err(Error::Invalid(format!("split-train selection needs at least 2 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::rng_for(seed, "split-train"), &mut order);
    let half = n / 2;
    let prompt_set = TrainSet { samples: order[..half].iter().map(|&i| ts.samples[i].clone()).collect(), seed: ts.seed };
    let validation: Vec<LabeledExample> = order[half..].iter().map(|&i| ts.samples[i].clone()).collect();
    let orderings = enumerate_orderings(half, max_permutations, rng::derive_seed(seed, "split-orderings"));
    let symbols = label_symbols(&tpl.label_names);
    let candidates = render_candidates(&prompt_set, tpl, &orderings, &symbols)?;
    let validation_accuracy = candidates
        .iter()
        .map(|c| Ok(evaluate_candidate(backend, tpl, c, &validation, parallelism)?.accuracy))
        .collect::<Result<Vec<_>>>()?;
    let selected = oracle_select(&validation_accuracy, k);
    Ok(SplitSelection { prompt_set, validation, candidates, validation_accuracy, selected })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("spearman inputs differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("spearman needs at least two observations".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Invalid("spearman is undefined for a constant input".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise Spearman correlations; the diagonal is 1.
pub fn correlation_matrix(series: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = series.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let rho = spearman(&series[i], &series[j])?;
            m[i][j] = rho;
            m[j][i] = rho;
        }
    }
    Ok(m)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean accuracy of the top-`k` candidates by `metric`, for `k = 1..=|scores|`.
/// `accuracies[i]` belongs to candidate index `i`.
pub fn topk_sweep(scores: &[CandidateScore], accuracies: &[f64], metric: Metric) -> Vec<(usize, f64)> {
    let ranked = rank_candidates(scores, metric, scores.len());
    (1..=ranked.len())
        .map(|k| {
            let picked: Vec<f64> = ranked[..k].iter().map(|&i| accuracies[i]).collect();
            (k, mean(&picked))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyStats {
    pub mean: f64,
    pub std: f64,
    /// One value per train set.
    pub per_set: Vec<f64>,
}

/// Mean and standard deviation over per-train-set values.
pub fn run_statistics(per_set: &[f64], kind: StdKind) -> Result<StrategyStats> {
    if per_set.is_empty() {
        return Err(Error::Invalid("statistics need at least one train set".into()));
    }
    let m = mean(per_set);
    let ss: f64 = per_set.iter().map(|v| (v - m) * (v - m)).sum();
    let denom = match kind {
        StdKind::Population => per_set.len() as f64,
        StdKind::Sample if per_set.len() > 1 => (per_set.len() - 1) as f64,
        StdKind::Sample => 1.0,
    };
    Ok(StrategyStats { mean: m, std: (ss / denom).sqrt(), per_set: per_set.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;

    fn ex(label: usize) -> LabeledExample {
        LabeledExample { id: "e".into(), text_a: "t".into(), text_b: None, label }
    }

    #[test]
    fn accuracy_counts() {
        assert!((accuracy_of(&[1, 0, 1], &[1, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy_of(&[0, 0], &[1, 1]), 0.0);
    }

    #[test]
    fn majority() {
        assert!((majority_baseline(&[ex(1), ex(1), ex(0)]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(majority_baseline(&[ex(2), ex(2)]).unwrap(), 1.0);
        let balanced: Vec<_> = (0..256).map(|i| ex(i % 2)).collect();
        assert_eq!(majority_baseline(&balanced).unwrap(), 0.5);
        assert!(majority_baseline(&[]).is_err());
    }

    #[test]
    fn oracle() {
        assert_eq!(oracle_select(&[0.9, 0.5, 0.7, 0.6, 0.8, 0.1], 4), vec![0, 4, 2, 3]);
        assert_eq!(oracle_select(&[0.5; 6], 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn spearman_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman(&a, &[1.0, 2.0]).is_err());
        assert!(spearman(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn stats() {
        let one = run_statistics(&[0.7], StdKind::Population).unwrap();
        assert_eq!((one.mean, one.std), (0.7, 0.0));
        let two = run_statistics(&[60.0, 70.0], StdKind::Population).unwrap();
        assert_eq!((two.mean, two.std), (65.0, 5.0));
        let s = run_statistics(&[60.0, 70.0], StdKind::Sample).unwrap();
        assert!((s.std - 50f64.sqrt()).abs() < 1e-12);
    }

    fn sc(i: usize, g: f64) -> CandidateScore {
        CandidateScore { candidate_index: i, global_entropy: g, local_entropy: g, histogram: vec![] }
    }

    #[test]
    fn sweep_endpoints_and_monotone_fixture() {
        let acc: Vec<f64> = (0..24).map(|i| 0.5 + i as f64 / 100.0).collect();
        // Score order equals accuracy order.
        let scores: Vec<_> = (0..24).map(|i| sc(i, i as f64)).collect();
        let sweep = topk_sweep(&scores, &acc, Metric::GlobalE);
        assert_eq!(sweep.len(), 24);
        assert_eq!(sweep[0], (1, acc[23]));
        assert!((sweep[23].1 - mean(&acc)).abs() < 1e-12);
        assert!(sweep.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    proptest! {
        #[test]
        fn spearman_symmetric(a in proptest::collection::vec(0.0f64..1.0, 3..12), seed in any::<u64>()) {
            let mut b = a.clone();
            rng::shuffle(&mut rng::rng_for(seed, "t"), &mut b);
            if let (Ok(x), Ok(y)) = (spearman(&a, &b), spearman(&b, &a)) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&x));
            }
            if a.iter().any(|v| *v != a[0]) {
                prop_assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sweep_full_k_is_mean(acc in proptest::collection::vec(0.0f64..1.0, 1..30), seed in any::<u64>()) {
            let mut vals: Vec<f64> = (0..acc.len()).map(|i| i as f64).collect();
            rng::shuffle(&mut rng::rng_for(seed, "s"), &mut vals);
            let scores: Vec<_> = vals.iter().enumerate().map(|(i, &v)| sc(i, v)).collect();
            let sweep = topk_sweep(&scores, &acc, Metric::LocalE);
            prop_assert!((sweep.last().unwrap().1 - mean(&acc)).abs() < 1e-12);
        }

        #[test]
        fn selection_invariant_to_positive_scaling(vals in proptest::collection::vec(0.0f64..1.0, 1..24), c in 0.01f64..100.0, k in 1usize..8) {
            let a: Vec<_> = vals.iter().enumerate().map(|(i, &v)| sc(i, v)).collect();
            let b: Vec<_> = vals.iter().enumerate().map(|(i, &v)| sc(i, v * c)).collect();
            let mut sa = rank_candidates(&a, Metric::GlobalE, k);
            let mut sb = rank_candidates(&b, Metric::GlobalE, k);
            sa.sort_unstable();
            sb.sort_unstable();
            // Scaling can merge or split near-ties only through rounding.
            if vals.iter().all(|v| vals.iter().filter(|w| (*w - v).abs() < 1e-9).count() == 1) {
                prop_assert_eq!(sa, sb);
            }
        }

        #[test]
        fn strategy_mean_within_range(vals in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            let s = run_statistics(&vals, StdKind::Population).unwrap();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.mean >= lo - 1e-12 && s.mean <= hi + 1e-12);
        }
    }
}

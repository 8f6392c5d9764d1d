//! Orderings of a training set and the prompt candidates they produce.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::TrainSet;
use crate::rng;
use crate::template::{PromptTemplate, TemplateError};

/// A permutation of sample indices `0..n`.
pub type SampleOrder = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub index: usize,
    pub ordering: SampleOrder,
    pub context: String,
    pub label_pattern: String,
}

/// `n!`, saturating at `u128::MAX`.
pub fn factorial(n: usize) -> u128 {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k)).unwrap_or(u128::MAX)
}

/// Rearrange `perm` into its lexicographic successor. Returns false when
/// `perm` was already the last permutation.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Orderings of `n` samples.
///
/// When `n! <= cap` every ordering is returned in lexicographic order.
/// Otherwise `cap` distinct orderings are drawn uniformly: each draw is a
/// seeded Fisher-Yates shuffle, and duplicates are redrawn.
pub fn enumerate_orderings(n: usize, cap: usize, seed: u64) -> Vec<SampleOrder> {
    assert!(n >= 1 && cap >= 1, "enumerate_orderings needs n >= 1 and cap >= 1");
    if factorial(n) <= cap as u128 {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut out = vec![perm.clone()];
        while next_permutation(&mut perm) {
            out.push(perm.clone());
        }
        return out;
    }
    let mut rng = rng::rng_for(seed, "orderings");
    let mut seen = HashSet::with_capacity(cap);
    let mut out = Vec::with_capacity(cap);
    // Rejection only bites when cap is close to n!, and n! > cap here.
    let max_draws = cap.saturating_mul(1000).saturating_add(1000);
    for _ in 0..max_draws {
        if out.len() == cap {
            break;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng, &mut perm);
        if seen.insert(perm.clone()) {
            out.push(perm);
        }
    }
    out
}

/// One display symbol per label: upper-cased initials when those are
/// distinct (`N`/`P` for negative/positive), otherwise `A`, `B`, ...
pub fn label_symbols(label_names: &[String]) -> Vec<char> {
    let initials: Vec<char> = label_names
        .iter()
        .map(|n| n.chars().next().map(|c| c.to_ascii_uppercase()).unwrap_or('?'))
        .collect();
    let distinct: HashSet<char> = initials.iter().copied().collect();
    if distinct.len() == initials.len() && !distinct.contains(&'?') {
        initials
    } else {
        (0..label_names.len())
            .map(|i| char::from_u32('A' as u32 + (i as u32 % 26)).unwrap_or('?'))
            .collect()
    }
}

pub fn label_pattern(ts: &TrainSet, ordering: &[usize], symbols: &[char]) -> String {
    ordering.iter().map(|&i| symbols[ts.samples[i].label]).collect()
}

/// Group orderings by the label sequence they induce.
pub fn label_patterns(
    ts: &TrainSet,
    orderings: &[SampleOrder],
    symbols: &[char],
) -> BTreeMap<String, Vec<SampleOrder>> {
    let mut groups: BTreeMap<String, Vec<SampleOrder>> = BTreeMap::new();
    for ordering in orderings {
        groups.entry(label_pattern(ts, ordering, symbols)).or_default().push(ordering.clone());
    }
    groups
}

/// One candidate per ordering; `index` is the position in `orderings`.
pub fn render_candidates(
    ts: &TrainSet,
    tpl: &PromptTemplate,
    orderings: &[SampleOrder],
    symbols: &[char],
) -> Result<Vec<PromptCandidate>, TemplateError> {
    let rendered = ts
        .samples
        .iter()
        .map(|s| tpl.linearize(s, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(orderings
        .iter()
        .enumerate()
        .map(|(index, ordering)| {
            let parts: Vec<&str> = ordering.iter().map(|&i| rendered[i].as_str()).collect();
            PromptCandidate {
                index,
                ordering: ordering.clone(),
                context: tpl.concat(&parts),
                label_pattern: label_pattern(ts, ordering, symbols),
            }
        })
        .collect())
}

/// Pairs `(first, duplicate)` of candidates whose contexts are identical.
pub fn duplicate_contexts(candidates: &[PromptCandidate]) -> Vec<(usize, usize)> {
    let mut first: HashMap<&str, usize> = HashMap::new();
    let mut dups = Vec::new();
    for c in candidates {
        match first.get(c.context.as_str()) {
            Some(&f) => dups.push((f, c.index)),
            None => {
                first.insert(&c.context, c.index);
            }
        }
    }
    dups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledExample;
    use crate::template::preset;
    use proptest::prelude::*;

    fn train(labels: &[usize], texts: &[&str]) -> TrainSet {
        TrainSet {
            samples: labels
                .iter()
                .zip(texts)
                .enumerate()
                .map(|(i, (&label, t))| LabeledExample {
                    id: format!("s{i}"),
                    text_a: t.to_string(),
                    text_b: None,
                    label,
                })
                .collect(),
            seed: 0,
        }
    }

    fn np() -> Vec<char> {
        label_symbols(&["negative".into(), "positive".into()])
    }

    #[test]
    fn four_samples_give_all_24() {
        let o = enumerate_orderings(4, 24, 0);
        assert_eq!(o.len(), 24);
        assert_eq!(o[0], vec![0, 1, 2, 3]);
        assert_eq!(o[23], vec![3, 2, 1, 0]);
        let mut sorted = o.clone();
        sorted.sort();
        assert_eq!(sorted, o);
    }

    #[test]
    fn single_sample() {
        assert_eq!(enumerate_orderings(1, 24, 5), vec![vec![0]]);
    }

    #[test]
    fn eight_samples_capped() {
        let o = enumerate_orderings(8, 24, 3);
        assert_eq!(o.len(), 24);
        let set: HashSet<_> = o.iter().collect();
        assert_eq!(set.len(), 24);
        assert_eq!(o, enumerate_orderings(8, 24, 3));
        assert_ne!(o, enumerate_orderings(8, 24, 4));
    }

    #[test]
    fn cap_just_below_factorial() {
        let o = enumerate_orderings(4, 23, 0);
        assert_eq!(o.iter().collect::<HashSet<_>>().len(), 23);
    }

    #[test]
    fn balanced_binary_has_six_patterns() {
        let ts = train(&[1, 1, 0, 0], &["a", "b", "c", "d"]);
        let groups = label_patterns(&ts, &enumerate_orderings(4, 24, 0), &np());
        let keys: Vec<&str> = groups.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["NNPP", "NPNP", "NPPN", "PNNP", "PNPN", "PPNN"]);
        assert!(groups.values().all(|v| v.len() == 4));
    }

    #[test]
    fn single_label_one_pattern() {
        let ts = train(&[1, 1, 1], &["a", "b", "c"]);
        assert_eq!(label_patterns(&ts, &enumerate_orderings(3, 24, 0), &np()).len(), 1);
    }

    #[test]
    fn one_pos_two_neg() {
        // 3!/2! multiset permutations.
        let ts = train(&[1, 0, 0], &["a", "b", "c"]);
        let g = label_patterns(&ts, &enumerate_orderings(3, 24, 0), &np());
        assert_eq!(g.len(), 3);
        assert!(g.values().all(|v| v.len() == 2));
    }

    #[test]
    fn symbols_fall_back_when_initials_collide() {
        let s = label_symbols(&["good".into(), "great".into(), "bad".into()]);
        assert_eq!(s, vec!['A', 'B', 'C']);
    }

    #[test]
    fn candidates_follow_orderings() {
        let tpl = preset("sst2").unwrap();
        let ts = train(&[1, 0, 1, 0], &["w", "x", "y", "z"]);
        let orderings = enumerate_orderings(4, 24, 0);
        let cands = render_candidates(&ts, &tpl, &orderings, &np()).unwrap();
        assert_eq!(cands.len(), 24);
        let distinct: HashSet<_> = cands.iter().map(|c| c.context.as_str()).collect();
        assert_eq!(distinct.len(), 24);
        let identity: Vec<String> = ts.samples.iter().map(|s| tpl.linearize(s, true).unwrap()).collect();
        assert_eq!(cands[0].context, tpl.concat(&identity));
        assert_eq!(cands[0].label_pattern, "PNPN");
        assert!(duplicate_contexts(&cands).is_empty());
    }

    #[test]
    fn identical_texts_flag_duplicates() {
        let tpl = preset("sst2").unwrap();
        let ts = train(&[1, 1, 0], &["same", "same", "other"]);
        let cands = render_candidates(&ts, &tpl, &enumerate_orderings(3, 24, 0), &np()).unwrap();
        // Swapping samples 0 and 1 never changes the text: 3 duplicate pairs.
        let dups = duplicate_contexts(&cands);
        assert_eq!(dups.len(), 3);
        for (a, b) in dups {
            let mut swapped = cands[a].ordering.clone();
            for v in swapped.iter_mut() {
                *v = match *v {
                    0 => 1,
                    1 => 0,
                    o => o,
                };
            }
            assert_eq!(swapped, cands[b].ordering);
        }
    }

    proptest! {
        #[test]
        fn orderings_are_distinct_permutations(n in 1usize..9, cap in 1usize..60, seed in any::<u64>()) {
            let o = enumerate_orderings(n, cap, seed);
            let expected = (factorial(n).min(cap as u128)) as usize;
            prop_assert_eq!(o.len(), expected);
            let set: HashSet<_> = o.iter().collect();
            prop_assert_eq!(set.len(), o.len());
            for p in &o {
                let mut s = p.clone();
                s.sort_unstable();
                prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn pattern_count_is_multinomial(labels in proptest::collection::vec(0usize..3, 1..6)) {
            let texts: Vec<String> = (0..labels.len()).map(|i| format!("t{i}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let ts = train(&labels, &refs);
            let n = labels.len();
            let groups = label_patterns(&ts, &enumerate_orderings(n, 1000, 0), &['A', 'B', 'C']);
            let mut denom = 1u128;
            for v in 0..3 {
                denom *= factorial(labels.iter().filter(|&&l| l == v).count());
            }
            prop_assert_eq!(groups.len() as u128, factorial(n) / denom);
        }
    }
}

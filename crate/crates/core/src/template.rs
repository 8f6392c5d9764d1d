//! Prompt templates: rendering samples to text, concatenating them into a
//! prompt context, and extracting `(sentence, label)` pairs back out of
//! generated text.
//!
//! A rendered sample is
//!
//! ```text
//! {input_prefix}{text_a}[{second_prefix}{text_b}]{label_prefix}{label_lead}{verbalizer}
//! ```
//!
//! and the unlabeled form stops right after `label_prefix`, so a label
//! continuation is `{label_lead}{verbalizer}`.
//!
//! Extraction scans left to right for literal prefixes. A label runs until the
//! first `end_of_sample_marker`, `sample_separator` or newline, or to the end
//! of the text. One leading and one trailing space are trimmed from each
//! extracted field; nothing else is normalized.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledExample;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("template {template} has no label for dataset label {label:?}")]
    UnmappedLabel { template: String, label: String },
    #[error("example {id}: {message}")]
    Example { id: String, message: String },
    #[error("unknown template preset {0:?}")]
    UnknownPreset(String),
    #[error("failed to read template file {path}: {message}")]
    File { path: String, message: String },
}

fn default_lead() -> String {
    " ".into()
}

fn default_separator() -> String {
    "\n\n".into()
}

fn default_end_marker() -> String {
    "\n".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    /// Precedes the sentence (or the premise for pair tasks). May be empty.
    #[serde(default)]
    pub input_prefix: String,
    /// Precedes the hypothesis for pair tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_prefix: Option<String>,
    pub label_prefix: String,
    #[serde(default = "default_lead")]
    pub label_lead: String,
    /// Dataset-facing label names, aligned with `verbalizer`.
    #[serde(default)]
    pub label_names: Vec<String>,
    /// Surface string per label id. Defaults to `label_names`.
    #[serde(default)]
    pub verbalizer: Vec<String>,
    #[serde(default = "default_separator")]
    pub sample_separator: String,
    #[serde(default = "default_end_marker")]
    pub end_of_sample_marker: String,
}

/// One sample recovered from generated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedSample {
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: String,
}

/// Extraction result with counts of what was thrown away.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub samples: Vec<ExtractedSample>,
    /// Segments that were delimited but unusable (empty sentence or label).
    pub rejected: usize,
    /// Whether a trailing, unterminated segment was discarded.
    pub incomplete_tail: bool,
}

impl PromptTemplate {
    pub fn is_pair(&self) -> bool {
        self.second_prefix.is_some()
    }

    fn invalid(&self, message: impl Into<String>) -> TemplateError {
        TemplateError::Invalid { id: self.id.clone(), message: message.into() }
    }

    fn terminators(&self) -> impl Iterator<Item = &str> {
        [self.end_of_sample_marker.as_str(), self.sample_separator.as_str(), "\n"]
            .into_iter()
            .filter(|t| !t.is_empty())
    }

    /// Check structural invariants: non-empty label prefix, distinct
    /// verbalizer strings that cannot collide with the delimiters.
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.label_prefix.is_empty() {
            return Err(self.invalid("label_prefix must be non-empty"));
        }
        if self.second_prefix.as_deref() == Some("") {
            return Err(self.invalid("second_prefix must be non-empty when present"));
        }
        if self.sample_separator.is_empty() {
            return Err(self.invalid("sample_separator must be non-empty"));
        }
        if !self.label_names.is_empty() && self.label_names.len() != self.verbalizer.len() {
            return Err(self.invalid("label_names and verbalizer differ in length"));
        }
        for (i, word) in self.verbalizer.iter().enumerate() {
            if word.trim().is_empty() {
                return Err(self.invalid("empty verbalizer entry"));
            }
            if self.verbalizer[..i].contains(word) {
                return Err(self.invalid(format!("duplicate verbalizer {word:?}")));
            }
            if word.contains(&self.label_prefix) || self.terminators().any(|t| word.contains(t)) {
                return Err(self.invalid(format!("verbalizer {word:?} contains a delimiter")));
            }
        }
        Ok(())
    }

    /// Reorder the verbalizer to follow a dataset's label ids.
    ///
    /// Each dataset label is matched against the template's label names
    /// exactly, then case-insensitively, then as an integer index into the
    /// template's label order. A template with no labels adopts the dataset's
    /// names as its verbalizer.
    pub fn aligned_to(&self, dataset_labels: &[String]) -> Result<PromptTemplate, TemplateError> {
        let names = if self.label_names.is_empty() { &self.verbalizer } else { &self.label_names };
        let mut out = self.clone();
        if names.is_empty() {
            out.label_names = dataset_labels.to_vec();
            out.verbalizer = dataset_labels.to_vec();
            out.validate()?;
            return Ok(out);
        }
        let mut verbalizer = Vec::with_capacity(dataset_labels.len());
        for label in dataset_labels {
            let pos = names
                .iter()
                .position(|n| n == label)
                .or_else(|| names.iter().position(|n| n.eq_ignore_ascii_case(label)))
                .or_else(|| label.parse::<usize>().ok().filter(|&i| i < names.len()));
            let pos = pos.ok_or_else(|| TemplateError::UnmappedLabel {
                template: self.id.clone(),
                label: label.clone(),
            })?;
            verbalizer.push(self.verbalizer[pos].clone());
        }
        out.label_names = dataset_labels.to_vec();
        out.verbalizer = verbalizer;
        out.validate()?;
        Ok(out)
    }

    /// Reject examples whose text would make extraction ambiguous.
    pub fn check_example(&self, x: &LabeledExample) -> Result<(), TemplateError> {
        let bad = |message: String| TemplateError::Example { id: x.id.clone(), message };
        if self.is_pair() != x.text_b.is_some() {
            return Err(bad(if self.is_pair() {
                "pair template needs a hypothesis".into()
            } else {
                "single-text template cannot render a sentence pair".into()
            }));
        }
        let texts = std::iter::once(&x.text_a).chain(x.text_b.as_ref());
        for text in texts {
            if text.contains(&self.label_prefix) {
                return Err(bad(format!("text contains label prefix {:?}", self.label_prefix)));
            }
            if text.starts_with(' ') || text.ends_with(' ') {
                return Err(bad("text has leading or trailing spaces".into()));
            }
        }
        if let Some(second) = &self.second_prefix {
            if x.text_a.contains(second.as_str()) {
                return Err(bad(format!("premise contains {second:?}")));
            }
        }
        if self.input_prefix.is_empty() && x.text_a.starts_with(char::is_whitespace) {
            return Err(bad("text starts with whitespace".into()));
        }
        if x.label >= self.verbalizer.len() {
            return Err(bad(format!("label {} has no verbalizer", x.label)));
        }
        Ok(())
    }

    /// The label continuation scored after an unlabeled sample.
    pub fn continuation(&self, label: usize) -> String {
        format!("{}{}", self.label_lead, self.verbalizer[label])
    }

    pub fn continuations(&self) -> Vec<String> {
        (0..self.verbalizer.len()).map(|l| self.continuation(l)).collect()
    }

    fn render_inputs(&self, text_a: &str, text_b: Option<&str>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(text_a.len() + 64);
        out.push_str(&self.input_prefix);
        out.push_str(text_a);
        match (&self.second_prefix, text_b) {
            (Some(prefix), Some(b)) => {
                out.push_str(prefix);
                out.push_str(b);
            }
            (Some(_), None) => return Err(self.invalid("pair template needs text_b")),
            (None, Some(_)) => return Err(self.invalid("single-text template got text_b")),
            (None, None) => {}
        }
        out.push_str(&self.label_prefix);
        Ok(out)
    }

    /// Render one example, with its verbalized label or ending at the label
    /// prefix.
    pub fn linearize(&self, x: &LabeledExample, include_label: bool) -> Result<String, TemplateError> {
        let mut out = self.render_inputs(&x.text_a, x.text_b.as_deref())?;
        if include_label {
            let word = self.verbalizer.get(x.label).ok_or_else(|| TemplateError::Example {
                id: x.id.clone(),
                message: format!("label {} has no verbalizer", x.label),
            })?;
            out.push_str(&self.label_lead);
            out.push_str(word);
        }
        Ok(out)
    }

    /// Unlabeled rendering of raw text (used for probes).
    pub fn linearize_unlabeled(&self, text_a: &str, text_b: Option<&str>) -> Result<String, TemplateError> {
        self.render_inputs(text_a, text_b)
    }

    /// Join rendered samples into one context.
    pub fn concat<S: AsRef<str>>(&self, parts: &[S]) -> String {
        let mut out = String::new();
        for (i, part) in parts.iter().enumerate() {
            if i > 0 {
                out.push_str(&self.sample_separator);
            }
            out.push_str(part.as_ref());
        }
        out
    }

    /// Context plus separator, ready for the next sample to be appended.
    pub fn open_next(&self, context: &str) -> String {
        if context.is_empty() {
            String::new()
        } else {
            format!("{context}{}", self.sample_separator)
        }
    }

    /// All complete `(sentence, label)` pairs in `generated`, in order.
    pub fn extract(&self, generated: &str) -> Vec<ExtractedSample> {
        self.extract_with_stats(generated).samples
    }

    pub fn extract_with_stats(&self, generated: &str) -> Extraction {
        let mut out = Extraction::default();
        let text = generated;
        let mut pos = 0usize;
        while pos < text.len() {
            let start = if self.input_prefix.is_empty() {
                let rest = &text[pos..];
                let skipped = rest.len() - rest.trim_start().len();
                if skipped == rest.len() {
                    break;
                }
                pos + skipped
            } else {
                match text[pos..].find(&self.input_prefix) {
                    Some(off) => pos + off,
                    None => break,
                }
            };
            let body = start + self.input_prefix.len();

            let (text_a, b_start) = match &self.second_prefix {
                Some(second) => match text[body..].find(second.as_str()) {
                    Some(off) => (&text[body..body + off], body + off + second.len()),
                    None => {
                        out.incomplete_tail = true;
                        break;
                    }
                },
                None => ("", body),
            };
            let Some(off) = text[b_start..].find(&self.label_prefix) else {
                out.incomplete_tail = true;
                break;
            };
            let label_at = b_start + off;
            let last_field = &text[b_start..label_at];
            let label_start = label_at + self.label_prefix.len();

            let terminator = self
                .terminators()
                .filter_map(|t| text[label_start..].find(t).map(|o| (label_start + o, t.len())))
                .min();
            let (label_end, next) = match terminator {
                Some((end, len)) => (end, end + len),
                None => (text.len(), text.len()),
            };
            let raw_label = &text[label_start..label_end];
            let label = match raw_label.strip_prefix(self.label_lead.as_str()) {
                Some(l) if !self.label_lead.is_empty() => l,
                _ => raw_label.strip_prefix(' ').unwrap_or(raw_label),
            };
            let label = trim_one_space_end(label);
            pos = next.max(start + 1);

            if label.is_empty() {
                if terminator.is_none() {
                    out.incomplete_tail = true;
                    break;
                }
                out.rejected += 1;
                continue;
            }
            let (a, b) = if self.is_pair() {
                (trim_one_space(text_a), Some(trim_one_space(last_field)))
            } else {
                (trim_one_space(last_field), None)
            };
            let contaminated = a.contains(&self.label_prefix)
                || b.is_some_and(|b| b.contains(&self.label_prefix))
                || a.is_empty()
                || b.is_some_and(str::is_empty);
            if contaminated {
                out.rejected += 1;
                continue;
            }
            out.samples.push(ExtractedSample {
                text_a: a.to_string(),
                text_b: b.map(str::to_string),
                label: label.to_string(),
            });
        }
        out
    }
}

fn trim_one_space(s: &str) -> &str {
    trim_one_space_end(s.strip_prefix(' ').unwrap_or(s))
}

fn trim_one_space_end(s: &str) -> &str {
    s.strip_suffix(' ').unwrap_or(s)
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    #[serde(rename = "template")]
    templates: Vec<PromptTemplate>,
}

/// Parse a TOML template file holding one or more `[[template]]` tables.
pub fn parse_templates(source: &str) -> Result<Vec<PromptTemplate>, TemplateError> {
    let file: TemplateFile = toml::from_str(source).map_err(|e| TemplateError::File {
        path: "<inline>".into(),
        message: e.to_string(),
    })?;
    file.templates
        .into_iter()
        .map(|mut t| {
            if t.verbalizer.is_empty() {
                t.verbalizer = t.label_names.clone();
            }
            t.validate()?;
            Ok(t)
        })
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>, TemplateError> {
    let source = std::fs::read_to_string(path).map_err(|e| TemplateError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_templates(&source).map_err(|e| match e {
        TemplateError::File { message, .. } => {
            TemplateError::File { path: path.display().to_string(), message }
        }
        other => other,
    })
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

fn two_line(id: &str, input: &str, label: &str, labels: &[&str]) -> PromptTemplate {
    PromptTemplate {
        id: id.into(),
        input_prefix: format!("{input}: "),
        second_prefix: None,
        label_prefix: format!("\n{label}:"),
        label_lead: default_lead(),
        label_names: words(labels),
        verbalizer: words(labels),
        sample_separator: default_separator(),
        end_of_sample_marker: default_end_marker(),
    }
}

fn entailment(id: &str, labels: &[&str]) -> PromptTemplate {
    PromptTemplate {
        second_prefix: Some("\nhypothesis: ".into()),
        ..two_line(id, "premise", "prediction", labels)
    }
}

const BINARY: &[&str] = &["negative", "positive"];
const DBPEDIA: &[&str] = &[
    "company",
    "school",
    "artist",
    "athlete",
    "politics",
    "transportation",
    "building",
    "nature",
    "village",
    "animal",
    "plant",
    "album",
    "film",
    "book",
];

/// Built-in templates.
///
/// Per-dataset presets (`sst2`, `sst5`, `mr`, `cr`, `mpqa`, `subj`, `trec`,
/// `agnews`, `dbpedia`, `cb`, `rte`), the four SST-2 template variants
/// (`sst2-t1` .. `sst2-t4`), the single-line prompt style (`sst2-inline`),
/// and label-agnostic `generic` / `generic-caps` templates that take their
/// verbalizer from the dataset. Binary sentiment presets order labels
/// negative, positive so integer labels 0/1 map the conventional way.
pub fn presets() -> Vec<PromptTemplate> {
    vec![
        two_line("sst2", "Review", "Sentiment", BINARY),
        two_line("sst2-t1", "Review", "Sentiment", BINARY),
        two_line("sst2-t2", "Input", "Prediction", BINARY),
        PromptTemplate {
            label_names: words(BINARY),
            ..two_line("sst2-t3", "Review", "Sentiment", &["bad", "good"])
        },
        PromptTemplate {
            input_prefix: String::new(),
            label_prefix: " It was".into(),
            label_names: words(BINARY),
            ..two_line("sst2-t4", "", "", &["bad", "good"])
        },
        PromptTemplate {
            label_prefix: ". Sentiment:".into(),
            sample_separator: ". ".into(),
            end_of_sample_marker: ".".into(),
            ..two_line("sst2-inline", "Review", "", BINARY)
        },
        two_line("sst5", "Review", "Sentiment", &["terrible", "bad", "okay", "good", "great"]),
        two_line("mr", "Review", "Sentiment", BINARY),
        two_line("cr", "Review", "Sentiment", BINARY),
        two_line("mpqa", "Review", "Sentiment", BINARY),
        two_line("subj", "Input", "Type", &["subjective", "objective"]),
        two_line(
            "trec",
            "Question",
            "Type",
            &["description", "entity", "expression", "human", "location", "number"],
        ),
        two_line("agnews", "input", "type", &["world", "sports", "business", "technology"]),
        two_line("dbpedia", "input", "type", DBPEDIA),
        entailment("cb", &["true", "false", "neither"]),
        entailment("rte", &["True", "False"]),
        two_line("generic", "input", "type", &[]),
        two_line("generic-caps", "Input", "Type", &[]),
    ]
}

pub fn preset(id: &str) -> Result<PromptTemplate, TemplateError> {
    presets()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| TemplateError::UnknownPreset(id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, text: &str, label: usize) -> LabeledExample {
        LabeledExample { id: id.into(), text_a: text.into(), text_b: None, label }
    }

    #[test]
    fn presets_are_valid_and_unique() {
        let all = presets();
        for t in &all {
            t.validate().unwrap();
        }
        let mut ids: Vec<_> = all.iter().map(|t| t.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), all.len());
    }

    #[test]
    fn inline_style_matches_reference_rendering() {
        let t = preset("sst2-inline").unwrap();
        let a = ex("1", "the greatest musicians", 1);
        let b = ex("2", "redundant concept", 0);
        assert_eq!(t.linearize(&a, true).unwrap(), "Review: the greatest musicians. Sentiment: positive");
        let unlabeled = t.linearize(&a, false).unwrap();
        assert!(unlabeled.ends_with("Sentiment:"));
        let parts = [t.linearize(&a, true).unwrap(), t.linearize(&b, true).unwrap()];
        assert_eq!(
            t.concat(&parts),
            "Review: the greatest musicians. Sentiment: positive. Review: redundant concept. Sentiment: negative"
        );
        assert_eq!(
            t.extract(&t.concat(&parts)),
            vec![
                ExtractedSample { text_a: "the greatest musicians".into(), text_b: None, label: "positive".into() },
                ExtractedSample { text_a: "redundant concept".into(), text_b: None, label: "negative".into() },
            ]
        );
    }

    #[test]
    fn two_line_rendering() {
        let t = preset("sst2").unwrap();
        let x = ex("1", "nice movie", 1);
        assert_eq!(t.linearize(&x, false).unwrap(), "Review: nice movie\nSentiment:");
        assert_eq!(t.linearize(&x, true).unwrap(), "Review: nice movie\nSentiment: positive");
    }

    #[test]
    fn pair_rendering_has_three_lines() {
        let t = preset("rte").unwrap();
        let x = LabeledExample {
            id: "r".into(),
            text_a: "No Weapons of Mass Destruction Found in Iraq Yet.".into(),
            text_b: Some("Weapons of Mass Destruction Found in Iraq.".into()),
            label: 1,
        };
        let s = t.linearize(&x, true).unwrap();
        assert_eq!(
            s,
            "premise: No Weapons of Mass Destruction Found in Iraq Yet.\nhypothesis: Weapons of Mass Destruction Found in Iraq.\nprediction: False"
        );
        assert_eq!(s.lines().count(), 3);
        let no_b = LabeledExample { text_b: None, ..x };
        assert!(t.linearize(&no_b, true).is_err());
    }

    #[test]
    fn concat_single_and_reversed() {
        let t = preset("sst2").unwrap();
        assert_eq!(t.concat(&["only"]), "only");
        let fwd = t.concat(&["a", "b"]);
        let rev = t.concat(&["b", "a"]);
        assert_ne!(fwd, rev);
        assert_eq!(fwd.len(), rev.len());
    }

    #[test]
    fn truncated_third_segment_is_dropped() {
        let t = preset("sst2").unwrap();
        let parts: Vec<String> = ["alpha beta", "gamma delta", "epsilon zeta"]
            .iter()
            .enumerate()
            .map(|(i, s)| t.linearize(&ex("x", s, i % 2), true).unwrap())
            .collect();
        let full = t.concat(&parts);
        let cut = &full[..full.len() - "eta\nSentiment: negative".len()];
        let got = t.extract_with_stats(cut);
        assert_eq!(got.samples.len(), 2);
        assert!(got.incomplete_tail);
    }

    #[test]
    fn garbage_extracts_nothing() {
        let t = preset("sst2").unwrap();
        assert!(t.extract("garbage with no prefixes").is_empty());
        assert!(t.extract("").is_empty());
    }

    #[test]
    fn label_cut_at_end_of_text_is_kept_if_nonempty() {
        let t = preset("sst2").unwrap();
        let got = t.extract_with_stats("Review: ok\nSentiment:");
        assert!(got.samples.is_empty());
        assert!(got.incomplete_tail);
    }

    #[test]
    fn empty_input_prefix_template() {
        let t = preset("sst2-t4").unwrap();
        let a = t.linearize(&ex("1", "A fine film.", 1), true).unwrap();
        assert_eq!(a, "A fine film. It was good");
        let b = t.linearize(&ex("2", "Dull.", 0), true).unwrap();
        let got = t.extract(&t.concat(&[a, b]));
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].text_a, "Dull.");
        assert_eq!(got[1].label, "bad");
    }

    #[test]
    fn alignment_by_name_case_and_index() {
        let t = preset("sst2-t3").unwrap();
        let flipped = t.aligned_to(&["positive".into(), "negative".into()]).unwrap();
        assert_eq!(flipped.verbalizer, vec!["good", "bad"]);
        let idx = t.aligned_to(&["0".into(), "1".into()]).unwrap();
        assert_eq!(idx.verbalizer, vec!["bad", "good"]);
        let rte = preset("rte").unwrap().aligned_to(&["false".into(), "true".into()]).unwrap();
        assert_eq!(rte.verbalizer, vec!["False", "True"]);
        assert!(t.aligned_to(&["maybe".into()]).is_err());
        let g = preset("generic").unwrap().aligned_to(&["world".into(), "sports".into()]).unwrap();
        assert_eq!(g.continuation(1), " sports");
    }

    #[test]
    fn examples_with_label_prefix_are_rejected() {
        let t = preset("sst2-inline").unwrap();
        assert!(t.check_example(&ex("1", "bad. Sentiment: trick", 0)).is_err());
        assert!(t.check_example(&ex("1", "fine", 0)).is_ok());
    }

    #[test]
    fn template_file_roundtrip() {
        let src = r#"
[[template]]
id = "custom"
input_prefix = "Text: "
label_prefix = "\nLabel:"
label_names = ["neg", "pos"]
verbalizer = ["bad", "great"]

[[template]]
id = "bare"
label_prefix = " =>"
label_names = ["a", "b"]
"#;
        let ts = parse_templates(src).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].sample_separator, "\n\n");
        assert_eq!(ts[1].verbalizer, vec!["a", "b"]);
        let dup = "[[template]]\nid='d'\nlabel_prefix=':'\nlabel_names=['a','a']\n";
        assert!(parse_templates(dup).is_err());
    }
}

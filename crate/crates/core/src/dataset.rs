//! Classification datasets: ingestion from JSONL/CSV and seeded sampling of
//! training sets and evaluation subsets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty dataset")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("duplicate label name {0:?}")]
    DuplicateLabel(String),
    #[error("requested {requested} examples but the dataset has only {available}")]
    NotEnoughExamples { requested: usize, available: usize },
    #[error("unknown dataset format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),
}

/// One classification instance. `text_b` carries the hypothesis for
/// sentence-pair tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<LabeledExample>,
    pub label_names: Vec<String>,
    pub pair_task: bool,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of examples per label id.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels()];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// A copy of this dataset restricted to `examples`, keeping labels.
    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> Dataset {
        Dataset { examples, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl FromStr for DatasetFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::Jsonl => f.write_str("jsonl"),
            DatasetFormat::Csv => f.write_str("csv"),
        }
    }
}

impl DatasetFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Some(DatasetFormat::Jsonl),
            "csv" => Some(DatasetFormat::Csv),
            _ => None,
        }
    }
}

/// A row before label strings are mapped to ids.
struct RawRow {
    line: usize,
    id: Option<String>,
    text_a: String,
    text_b: Option<String>,
    label: RawLabel,
}

enum RawLabel {
    Name(String),
    Index(u64),
}

impl RawLabel {
    fn as_name(&self) -> String {
        match self {
            RawLabel::Name(s) => s.clone(),
            RawLabel::Index(i) => i.to_string(),
        }
    }
}

/// Load a dataset file.
///
/// Label names come from `label_names` when given, otherwise from a JSONL
/// metadata line `{"label_names": [...]}` at the top of the file, otherwise
/// they are inferred as the sorted distinct labels (numerically sorted when
/// every label is an integer). Example order follows file order.
///
/// Surrounding whitespace is trimmed from every text field.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    label_names: Option<Vec<String>>,
) -> Result<Dataset, DatasetError> {
    let content = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    parse_dataset(&name, &content, format, label_names)
}

/// Parse dataset text already in memory. See [`load_dataset`].
pub fn parse_dataset(
    name: &str,
    content: &str,
    format: DatasetFormat,
    label_names: Option<Vec<String>>,
) -> Result<Dataset, DatasetError> {
    let (rows, meta_names) = match format {
        DatasetFormat::Jsonl => parse_jsonl(content)?,
        DatasetFormat::Csv => (parse_csv(content)?, None),
    };
    if rows.is_empty() {
        return Err(DatasetError::Empty);
    }
    let pair_task = rows[0].text_b.is_some();
    for row in &rows {
        if row.text_b.is_some() != pair_task {
            return Err(DatasetError::Malformed {
                line: row.line,
                message: "mixes single-text and premise/hypothesis rows".into(),
            });
        }
    }

    let explicit = label_names.or(meta_names);
    let names = match &explicit {
        Some(names) => names.clone(),
        None => infer_label_names(&rows),
    };
    let mut seen = BTreeSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(DatasetError::DuplicateLabel(n.clone()));
        }
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let examples = rows
        .into_iter()
        .map(|row| {
            let label = match (&row.label, explicit.is_some()) {
                // With declared names, bare integers index into them.
                (RawLabel::Index(i), true) if !index.contains_key(i.to_string().as_str()) => {
                    let i = *i as usize;
                    if i < names.len() {
                        Some(i)
                    } else {
                        None
                    }
                }
                (raw, _) => index.get(raw.as_name().as_str()).copied(),
            };
            let label = label.ok_or_else(|| DatasetError::UnknownLabel {
                line: row.line,
                label: row.label.as_name(),
            })?;
            Ok(LabeledExample {
                id: row.id.unwrap_or_else(|| format!("{}", row.line)),
                text_a: row.text_a,
                text_b: row.text_b,
                label,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;

    Ok(Dataset { name: name.to_string(), examples, label_names: names, pair_task })
}

fn infer_label_names(rows: &[RawRow]) -> Vec<String> {
    let distinct: BTreeSet<String> = rows.iter().map(|r| r.label.as_name()).collect();
    let mut names: Vec<String> = distinct.into_iter().collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap_or_default());
    }
    names
}

fn parse_jsonl(content: &str) -> Result<(Vec<RawRow>, Option<Vec<String>>), DatasetError> {
    let mut rows = Vec::new();
    let mut meta = None;
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DatasetError::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        if rows.is_empty() && meta.is_none() && !obj.contains_key("label") {
            if let Some(names) = obj.get("label_names") {
                let names: Vec<String> =
                    serde_json::from_value(names.clone()).map_err(|e| DatasetError::Malformed {
                        line: line_no,
                        message: format!("label_names: {e}"),
                    })?;
                meta = Some(names);
                continue;
            }
        }
        let field = |key: &str| -> Result<Option<String>, DatasetError> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(Value::Number(n)) if key == "id" => Ok(Some(n.to_string())),
                Some(_) => Err(DatasetError::Malformed {
                    line: line_no,
                    message: format!("field {key:?} must be a string"),
                }),
            }
        };
        let label = match obj.get("label") {
            Some(Value::String(s)) => RawLabel::Name(s.clone()),
            Some(Value::Number(n)) => match n.as_u64() {
                Some(i) => RawLabel::Index(i),
                None => RawLabel::Name(n.to_string()),
            },
            Some(Value::Bool(b)) => RawLabel::Name(b.to_string()),
            _ => {
                return Err(DatasetError::Malformed { line: line_no, message: "missing label".into() })
            }
        };
        let (text_a, text_b) = texts(line_no, field("text")?, field("premise")?, field("hypothesis")?)?;
        rows.push(RawRow { line: line_no, id: field("id")?, text_a, text_b, label });
    }
    Ok((rows, meta))
}

fn parse_csv(content: &str) -> Result<Vec<RawRow>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Malformed { line: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (id_col, text_col, premise_col, hyp_col, label_col) =
        (col("id"), col("text"), col("premise"), col("hypothesis"), col("label"));
    let label_col = label_col.ok_or(DatasetError::Malformed {
        line: 1,
        message: "header has no label column".into(),
    })?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is line 1.
        let line_no = i + 2;
        let record = record.map_err(|e| DatasetError::Malformed { line: line_no, message: e.to_string() })?;
        let get = |c: Option<usize>| c.and_then(|c| record.get(c)).map(str::to_string);
        let label = get(Some(label_col)).unwrap_or_default();
        let label = match label.parse::<u64>() {
            Ok(i) => RawLabel::Index(i),
            Err(_) => RawLabel::Name(label),
        };
        let (text_a, text_b) = texts(line_no, get(text_col), get(premise_col), get(hyp_col))?;
        rows.push(RawRow {
            line: line_no,
            id: get(id_col).filter(|s| !s.is_empty()),
            text_a,
            text_b,
            label,
        });
    }
    Ok(rows)
}

fn texts(
    line: usize,
    text: Option<String>,
    premise: Option<String>,
    hypothesis: Option<String>,
) -> Result<(String, Option<String>), DatasetError> {
    let (a, b) = match (text, premise, hypothesis) {
        (Some(t), None, None) => (t, None),
        (None, Some(p), Some(h)) => (p, Some(h)),
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(DatasetError::Malformed {
                line,
                message: "row has both text and premise/hypothesis".into(),
            })
        }
        _ => {
            return Err(DatasetError::Malformed {
                line,
                message: "row needs text, or premise and hypothesis".into(),
            })
        }
    };
    let (a, b) = (a.trim().to_string(), b.map(|b| b.trim().to_string()));
    if a.is_empty() || b.as_deref().is_some_and(str::is_empty) {
        return Err(DatasetError::Malformed { line, message: "empty text".into() });
    }
    Ok((a, b))
}

/// The `n` training samples that get permuted into prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSet {
    pub samples: Vec<LabeledExample>,
    pub seed: u64,
}

impl TrainSet {
    pub fn shots(&self) -> usize {
        self.samples.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Draw `shots` examples without replacement.
///
/// With `balanced`, labels are visited round-robin so per-label counts differ
/// by at most one (as far as each label's pool allows). Leftover slots go to
/// labels by descending dataset frequency, ties broken in seeded order. The
/// resulting samples are shuffled once more so the identity ordering carries
/// no label structure.
pub fn sample_train_set(
    d: &Dataset,
    shots: usize,
    seed: u64,
    balanced: bool,
) -> Result<TrainSet, DatasetError> {
    if shots == 0 || shots > d.len() {
        return Err(DatasetError::NotEnoughExamples { requested: shots, available: d.len() });
    }
    let mut rng = rng::rng_for(seed, "train-set");
    let mut chosen: Vec<usize> = if balanced {
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); d.num_labels()];
        for (i, ex) in d.examples.iter().enumerate() {
            pools[ex.label].push(i);
        }
        for pool in pools.iter_mut() {
            rng::shuffle(&mut rng, pool);
        }
        let mut order: Vec<usize> = (0..pools.len()).filter(|&l| !pools[l].is_empty()).collect();
        rng::shuffle(&mut rng, &mut order);
        // Stable sort keeps the seeded order among equal frequencies.
        order.sort_by_key(|&l| std::cmp::Reverse(pools[l].len()));
        let mut cursors = vec![0usize; pools.len()];
        let mut picked = Vec::with_capacity(shots);
        while picked.len() < shots {
            for &l in &order {
                if picked.len() == shots {
                    break;
                }
                if let Some(&idx) = pools[l].get(cursors[l]) {
                    picked.push(idx);
                    cursors[l] += 1;
                }
            }
        }
        picked
    } else {
        let mut all: Vec<usize> = (0..d.len()).collect();
        rng::shuffle(&mut rng, &mut all);
        all.truncate(shots);
        all
    };
    rng::shuffle(&mut rng, &mut chosen);
    Ok(TrainSet { samples: chosen.into_iter().map(|i| d.examples[i].clone()).collect(), seed })
}

/// Uniform subsample of `min(n, |d|)` examples without replacement, returned
/// in dataset order.
pub fn subsample_eval(d: &Dataset, n: usize, seed: u64) -> Vec<LabeledExample> {
    if n >= d.len() {
        return d.examples.clone();
    }
    let mut rng = rng::rng_for(seed, "eval-subsample");
    let mut idx: Vec<usize> = (0..d.len()).collect();
    // Partial Fisher-Yates: the first n slots end up a uniform n-subset.
    for i in 0..n {
        let j = i + rng::index(&mut rng, d.len() - i);
        idx.swap(i, j);
    }
    let mut picked = idx[..n].to_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| d.examples[i].clone()).collect()
}

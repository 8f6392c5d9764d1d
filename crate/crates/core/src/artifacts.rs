//! Run artifacts on disk. Every file records the configuration hash that
//! produced it: a `# config_hash=<hex>` first line in CSV files and a
//! `config_hash` field in JSON and JSONL records. Writes go to a temporary
//! file in the target directory and are renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::Strategy;
use crate::experiment::{RunReport, SelectRun, Selection, SweepPoint};
use crate::permute::SampleOrder;

pub const CANDIDATES: &str = "candidates.csv";
pub const PROBING_SET: &str = "probing_set.jsonl";
pub const SCORES: &str = "scores.csv";
pub const SELECTED: &str = "selected.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP: &str = "sweep.csv";
pub const CORRELATION: &str = "correlation.csv";

const HASH_LINE: &str = "# config_hash=";

/// Write `bytes` to `path` atomically, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// The configuration hash recorded in an artifact, if it has one.
pub fn recorded_hash(path: &Path) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    let first = text.lines().next()?;
    if let Some(h) = first.strip_prefix(HASH_LINE) {
        return Some(h.trim().to_string());
    }
    let json: serde_json::Value = if path.extension().is_some_and(|e| e == "jsonl") {
        serde_json::from_str(first).ok()?
    } else {
        serde_json::from_str(&text).ok()?
    };
    json.get("config_hash")?.as_str().map(str::to_string)
}

/// Refuse to replace artifacts recorded under a different configuration
/// unless `force` is set.
pub fn guard_overwrite(dir: &Path, names: &[&str], hash: &str, force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for name in names {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        match recorded_hash(&path) {
            Some(h) if h == hash => {}
            Some(h) => {
                return Err(Error::Config(format!(
                    "{} was written by configuration {h}, not {hash}; pass --force to overwrite",
                    path.display()
                )))
            }
            None => {
                return Err(Error::Config(format!(
                    "{} exists without a configuration hash; pass --force to overwrite",
                    path.display()
                )))
            }
        }
    }
    Ok(())
}

fn join_order(order: &SampleOrder) -> String {
    order.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn join_counts(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn csv_bytes(hash: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut out = format!("{HASH_LINE}{hash}\n").into_bytes();
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        let wrap = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        w.write_record(header).map_err(wrap)?;
        for row in rows {
            w.write_record(&row).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    }
    Ok(out)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Files written by `select`.
pub fn write_selection(dir: &Path, run: &SelectRun) -> Result<()> {
    let sel = &run.selection;
    let hash = &sel.config_hash;

    let mut rows = Vec::new();
    for (set, cands) in run.candidates.iter().enumerate() {
        for c in cands {
            rows.push(vec![
                set.to_string(),
                c.index.to_string(),
                join_order(&c.ordering),
                c.label_pattern.clone(),
                c.context.clone(),
            ]);
        }
    }
    let header = ["train_set", "candidate_index", "ordering", "label_pattern", "context"];
    write_atomic(&dir.join(CANDIDATES), &csv_bytes(hash, &header, rows)?)?;

    #[derive(Serialize)]
    struct ProbeLine<'a> {
        config_hash: &'a str,
        train_set: usize,
        text: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        text_b: Option<&'a str>,
        source_candidate: usize,
    }
    let mut jsonl = Vec::new();
    for (set, probing) in run.probing.iter().enumerate() {
        for p in &probing.probes {
            let line = ProbeLine {
                config_hash: hash,
                train_set: set,
                text: &p.text,
                text_b: p.text_b.as_deref(),
                source_candidate: p.source_candidate,
            };
            serde_json::to_writer(&mut jsonl, &line).map_err(|e| Error::Invalid(e.to_string()))?;
            jsonl.push(b'\n');
        }
    }
    write_atomic(&dir.join(PROBING_SET), &jsonl)?;

    let mut rows = Vec::new();
    for set in &sel.train_sets {
        for s in &set.scores {
            rows.push(vec![
                set.index.to_string(),
                s.candidate_index.to_string(),
                join_order(&set.orderings[s.candidate_index]),
                set.label_patterns[s.candidate_index].clone(),
                s.global_entropy.to_string(),
                s.local_entropy.to_string(),
                join_counts(&s.histogram),
            ]);
        }
    }
    let header = ["train_set", "candidate_index", "ordering", "label_pattern", "globalE", "localE", "histogram"];
    write_atomic(&dir.join(SCORES), &csv_bytes(hash, &header, rows)?)?;

    write_atomic(&dir.join(SELECTED), &json_bytes(sel)?)
}

pub fn read_selection(path: &Path) -> Result<Selection> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Strategy table: one row per strategy with mean, std and per-set values.
pub fn report_table(report: &RunReport) -> Result<Vec<u8>> {
    let sets = report.train_sets.len();
    let mut header = vec!["strategy".to_string(), "mean".into(), "std".into()];
    header.extend((0..sets).map(|i| format!("set_{i}")));
    let rows = Strategy::ALL
        .iter()
        .filter_map(|s| report.strategies.get(s).map(|st| (s, st)))
        .map(|(s, st)| {
            let mut row = vec![s.name().to_string(), st.mean.to_string(), st.std.to_string()];
            row.extend(st.per_set.iter().map(f64::to_string));
            row.resize(3 + sets, String::new());
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&report.config_hash, &header, rows)
}

/// Files written by `evaluate`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write_atomic(&dir.join(REPORT_JSON), &json_bytes(report)?)?;
    write_atomic(&dir.join(REPORT_CSV), &report_table(report)?)
}

pub fn sweep_csv(hash: &str, points: &[SweepPoint]) -> Result<Vec<u8>> {
    let rows = points
        .iter()
        .map(|p| vec![p.metric.name().to_string(), p.k.to_string(), p.mean.to_string(), p.std.to_string()])
        .collect();
    csv_bytes(hash, &["metric", "k", "mean", "std"], rows)
}

/// Correlation matrix with one row and column per model. The hash line
/// lists the hashes of the input reports.
pub fn correlation_csv(reports: &[RunReport], matrix: &[Vec<f64>]) -> Result<Vec<u8>> {
    let hash = reports.iter().map(|r| r.config_hash.as_str()).collect::<Vec<_>>().join(",");
    let mut header = vec!["model"];
    header.extend(reports.iter().map(|r| r.model_id.as_str()));
    let rows = reports
        .iter()
        .zip(matrix)
        .map(|(r, row)| std::iter::once(r.model_id.clone()).chain(row.iter().map(f64::to_string)).collect())
        .collect();
    csv_bytes(&hash, &header, rows)
}

/// Human-readable strategy table.
pub fn render_report(report: &RunReport) -> String {
    let mut out = format!(
        "{} / {} / {} ({} shots, top-{}, {} eval examples, config {})\n",
        report.dataset, report.template, report.model_id, report.shots, report.top_k, report.eval_size, report.config_hash
    );
    out.push_str(&format!("{:<10} {:>8} {:>8}\n", "strategy", "mean", "std"));
    for s in Strategy::ALL {
        if let Some(st) = report.strategies.get(&s) {
            out.push_str(&format!("{:<10} {:>8.4} {:>8.4}\n", s.name(), st.mean, st.std));
        }
    }
    for set in &report.train_sets {
        let worst = set
            .predicted_histograms
            .iter()
            .map(|h| {
                let total: usize = h.iter().sum();
                h.iter().copied().max().unwrap_or(0) as f64 / total.max(1) as f64
            })
            .fold(0.0, f64::max);
        out.push_str(&format!(
            "set {}: {} candidates, max predicted-label share {:.3}\n",
            set.index,
            set.accuracies.len(),
            worst
        ));
    }
    out
}

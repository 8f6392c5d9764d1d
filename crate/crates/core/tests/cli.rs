use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mock_sst2");

fn promptorder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptorder")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A scratch experiment built from the mock SST-2 fixture with `extra`
/// appended to the config.
fn scratch(extra: &str, mock_extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for f in ["train.jsonl", "dev.jsonl", "corpus.txt"] {
        fs::copy(Path::new(FIXTURE).join(f), dir.path().join(f)).unwrap();
    }
    let config = format!(
        r#"
[dataset]
train = "train.jsonl"
eval = "dev.jsonl"

[template]
preset = "sst2"

[backend]
kind = "mock"

[backend.mock]
corpus_file = "corpus.txt"
recency_bias = 1.2
noise = 0.05
{mock_extra}

[backend.mock.keywords]
negative = ["dull", "tedious", "boring", "awful", "clumsy", "bland", "messy"]
positive = ["great", "wonderful", "delightful", "moving", "superb", "charming", "brilliant"]

[run]
num_train_sets = 2
eval_subsample = 40
{extra}
"#
    );
    let path = dir.path().join("config.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn select_writes_hashed_artifacts() {
    let (dir, cfg) = scratch("", "");
    let out = dir.path().join("out");
    let o = promptorder(&["select", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let selected = read_json(&out.join("selected.json"));
    let hash = selected["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);
    for set in selected["train_sets"].as_array().unwrap() {
        assert_eq!(set["scores"].as_array().unwrap().len(), 24);
        assert_eq!(set["selected_globalE"].as_array().unwrap().len(), 4);
        assert_eq!(set["selected_localE"].as_array().unwrap().len(), 4);
    }
    for csv in ["candidates.csv", "scores.csv"] {
        let text = fs::read_to_string(out.join(csv)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"));
    }
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 2 + 48);
    let probes = fs::read_to_string(out.join("probing_set.jsonl")).unwrap();
    for line in probes.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], hash.as_str());
    }

    let again = dir.path().join("again");
    assert_eq!(code(&promptorder(&["select", cfg.to_str().unwrap(), "-o", again.to_str().unwrap()])), 0);
    for f in ["candidates.csv", "probing_set.jsonl", "scores.csv", "selected.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn changed_config_needs_force() {
    let (dir, cfg) = scratch("", "");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(code(&promptorder(&["select", cfg, "-o", out, "--sets", "1"])), 0);
    let before = fs::read(Path::new(out).join("selected.json")).unwrap();
    let o = promptorder(&["select", cfg, "-o", out, "--sets", "1", "--seed", "3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert_eq!(fs::read(Path::new(out).join("selected.json")).unwrap(), before);
    assert_eq!(code(&promptorder(&["select", cfg, "-o", out, "--sets", "1", "--seed", "3", "--force"])), 0);
    assert_ne!(fs::read(Path::new(out).join("selected.json")).unwrap(), before);
}

#[test]
fn evaluate_strategies() {
    let (dir, cfg) = scratch("", "");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = promptorder(&["evaluate", cfg, "-o", out_s, "--strategy", "globalE"]);
    assert_eq!(code(&o), 2, "entropy strategies need select first");

    assert_eq!(code(&promptorder(&["select", cfg, "-o", out_s])), 0);
    let o = promptorder(&["evaluate", cfg, "-o", out_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    let strategies = report["strategies"].as_object().unwrap();
    for s in ["all", "localE", "globalE", "oracle", "split", "majority"] {
        assert!(strategies.contains_key(s), "{s}");
    }
    let oracle = strategies["oracle"]["mean"].as_f64().unwrap();
    for (name, st) in strategies {
        assert!(oracle >= st["mean"].as_f64().unwrap(), "oracle below {name}");
    }
    let table = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "strategy,mean,std,set_0,set_1");
    let rows: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["all", "localE", "globalE", "oracle", "split", "majority"]);

    // Per-candidate predicted-label counts are part of every report.
    let hist = &report["train_sets"][0]["predicted_histograms"];
    assert_eq!(hist.as_array().unwrap().len(), 24);

    let o = promptorder(&["sweep", out.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let last_global = sweep.lines().find(|l| l.starts_with("globalE,24,")).unwrap();
    let mean: f64 = last_global.split(',').nth(2).unwrap().parse().unwrap();
    assert!((mean - strategies["all"]["mean"].as_f64().unwrap()).abs() < 1e-12);

    let o = promptorder(&["report", out.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("globalE"));
}

#[test]
fn majority_on_small_fixture() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("tiny.jsonl"),
        "{\"text\":\"a great one\",\"label\":1}\n{\"text\":\"superb stuff\",\"label\":1}\n{\"text\":\"dull thing\",\"label\":0}\n",
    )
    .unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        r#"
[dataset]
train = "tiny.jsonl"
label_names = ["negative", "positive"]
[template]
preset = "sst2"
[backend]
kind = "mock"
[backend.mock]
[run]
shots = 2
num_train_sets = 1
max_permutations = 2
top_k = 1
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = promptorder(&["evaluate", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--strategy", "majority"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    let m = report["strategies"]["majority"]["mean"].as_f64().unwrap();
    assert!((m - 2.0 / 3.0).abs() < 1e-12);
    assert!(String::from_utf8_lossy(&o.stdout).contains("0.6667"));
}

#[test]
fn empty_probing_set_exits_5() {
    let (dir, cfg) = scratch("", "");
    fs::write(dir.path().join("corpus.txt"), "").unwrap();
    let o = promptorder(&["select", cfg.to_str().unwrap(), "-o", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 5);
}

#[test]
fn config_errors_exit_2() {
    let (dir, cfg) = scratch("top_k = 30", "");
    assert_eq!(code(&promptorder(&["select", cfg.to_str().unwrap()])), 2);
    let (_, cfg) = scratch("", "");
    let missing_cache = dir.path().join("no-such-cache");
    let o = promptorder(&["select", cfg.to_str().unwrap(), "--replay", "--cache-dir", missing_cache.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&promptorder(&["select", cfg.to_str().unwrap(), "--temperature", "-1"])), 2);
}

#[test]
fn replay_miss_exits_4() {
    let (dir, cfg) = scratch("", "");
    let cache = dir.path().join("cache");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("o");
    let args = ["select", cfg, "-o", out.to_str().unwrap(), "--sets", "1", "--cache-dir", cache.to_str().unwrap()];
    let mut record = args.to_vec();
    record.push("--record");
    assert_eq!(code(&promptorder(&record)), 0);
    let mut replay = args.to_vec();
    replay.push("--replay");
    assert_eq!(code(&promptorder(&replay)), 0);
    replay.extend(["--max-new-tokens", "64", "--force"]);
    let o = promptorder(&replay);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fixture incomplete"));
}

#[test]
fn correlate_two_models() {
    let mut reports = Vec::new();
    let mut dirs = Vec::new();
    for (model, decay) in [("mock-a", 0.5), ("mock-b", 0.7)] {
        let (dir, cfg) = scratch("", &format!("model_id = \"{model}\"\nrecency_decay = {}", decay));
        let out = dir.path().join("out");
        let o = promptorder(&["evaluate", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--strategy", "all"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        reports.push(out.join("report.json"));
        dirs.push(dir);
    }
    let corr = dirs[0].path().join("corr.csv");
    let o = promptorder(&[
        "correlate",
        reports[0].to_str().unwrap(),
        reports[1].to_str().unwrap(),
        "-o",
        corr.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&corr).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert_eq!(lines[1], "model,mock-a,mock-b");
    assert!(lines[2].starts_with("mock-a,1,"));
    assert!(lines[3].ends_with(",1"));

    let (dir, cfg) = scratch("", "");
    let out = dir.path().join("out");
    let o = promptorder(&["evaluate", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--strategy", "all", "--sets", "1"]);
    assert_eq!(code(&o), 0);
    let o = promptorder(&["correlate", reports[0].to_str().unwrap(), out.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ingest_summary() {
    let (_dir, cfg) = scratch("", "");
    let o = promptorder(&["ingest", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["train_examples"], 40);
    assert_eq!(v["train_label_counts"], serde_json::json!([20, 20]));
    assert_eq!(v["eval_examples"], 40);
    assert_eq!(v["shots"], 4);
    assert_eq!(v["orderings_per_set"], 24);
}

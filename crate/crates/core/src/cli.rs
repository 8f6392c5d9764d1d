//! The `promptorder` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::artifacts::{self, CANDIDATES, CORRELATION, PROBING_SET, REPORT_CSV, REPORT_JSON, SCORES, SELECTED, SWEEP};
use crate::config::{CacheSetting, ExperimentSpec};
use crate::error::{Error, Result};
use crate::eval::Strategy;
use crate::experiment::{correlate_reports, Experiment};
use crate::permute::factorial;

#[derive(Debug, Parser)]
#[command(name = "promptorder", version, about = "Select few-shot prompt orderings with entropy probing")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the datasets and template, then print a summary.
    Ingest(RunArgs),
    /// Generate probing sets, score every candidate ordering and write the top-K picks.
    Select(RunArgs),
    /// Measure evaluation accuracy of each candidate and summarize strategies.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Strategy to report (repeatable): all, localE, globalE, oracle, split, majority.
        /// Default: every strategy.
        #[arg(long = "strategy", value_name = "NAME")]
        strategies: Vec<Strategy>,
    },
    /// Correlate per-candidate accuracies between reports of different models.
    Correlate {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Output CSV [default: correlation.csv next to the first report].
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Write the top-K curve of both metrics for a report.
    Sweep {
        report: PathBuf,
        /// Output CSV [default: sweep.csv next to the report].
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print the strategy table of a report.
    Report {
        report: PathBuf,
        /// Print the CSV table instead.
        #[arg(long)]
        csv: bool,
    },
}

/// Options shared by commands that run the pipeline. Unset flags fall back
/// to the config file, whose defaults are listed here.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Artifact directory [default: output_dir from the config, else ./out next to it].
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Query the backend and store every response in the cache.
    #[arg(long, conflicts_with = "replay")]
    pub record: bool,
    /// Answer every request from the cache; a missing entry exits with status 4.
    #[arg(long)]
    pub replay: bool,
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Training samples per set [default: 4; 2 for AGNews, 1 for DBPedia].
    #[arg(long)]
    pub shots: Option<usize>,
    /// Maximum orderings per train set [default: 24].
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Number of train sets [default: 5].
    #[arg(long)]
    pub sets: Option<usize>,
    /// Orderings kept per metric [default: 4].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Probing generation temperature [default: 2].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Probing generation length [default: 128].
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Master seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite artifacts recorded under a different configuration.
    #[arg(long)]
    pub force: bool,
}

fn absolute(p: &Path) -> PathBuf {
    std::env::current_dir().map(|cwd| cwd.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

impl RunArgs {
    /// The config file with command-line overrides applied.
    pub fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::load(&self.config)?;
        let run = &mut spec.run;
        if let Some(s) = self.shots {
            run.shots = Some(s);
        }
        if let Some(p) = self.permutations {
            run.max_permutations = p;
        }
        if let Some(n) = self.sets {
            run.num_train_sets = n;
            if let Some(seeds) = &mut run.seeds {
                if n > seeds.len() {
                    return Err(Error::Config(format!("--sets {n} exceeds the {} seeds in the config", seeds.len())));
                }
                seeds.truncate(n);
            }
        }
        if let Some(k) = self.top_k {
            run.top_k = k;
        }
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(t) = self.temperature {
            spec.generation.temperature = t;
        }
        if let Some(m) = self.max_new_tokens {
            spec.generation.max_new_tokens = m;
        }
        if let Some(dir) = &self.cache_dir {
            spec.cache.dir = Some(absolute(dir));
        }
        if self.record {
            spec.cache.mode = CacheSetting::Record;
        }
        if self.replay {
            spec.cache.mode = CacheSetting::Replay;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let base = self.config.parent().map(Path::to_path_buf).unwrap_or_default();
        Experiment::from_spec(self.spec()?, base)
    }

    pub fn output_dir(&self, exp: &Experiment) -> PathBuf {
        match (&self.output, &exp.spec.output_dir) {
            (Some(o), _) => absolute(o),
            (None, Some(o)) => exp.base_dir.join(o),
            (None, None) => exp.base_dir.join("out"),
        }
    }
}

/// Parse `args` (including the program name), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    config_hash: &'a str,
    dataset: &'a str,
    label_names: &'a [String],
    train_examples: usize,
    train_label_counts: Vec<usize>,
    eval_examples: usize,
    template: &'a str,
    shots: usize,
    train_sets: usize,
    orderings_per_set: usize,
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest(args) => {
            let exp = args.experiment()?;
            let perms = factorial(exp.shots).min(exp.spec.run.max_permutations as u128) as usize;
            let summary = IngestSummary {
                config_hash: &exp.config_hash,
                dataset: &exp.train.name,
                label_names: &exp.train.label_names,
                train_examples: exp.train.len(),
                train_label_counts: exp.train.label_counts(),
                eval_examples: exp.eval_set.len(),
                template: &exp.template.id,
                shots: exp.shots,
                train_sets: exp.spec.run.train_set_seeds().len(),
                orderings_per_set: perms,
            };
            exp.train_sets()?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| Error::Invalid(e.to_string()))?);
        }
        Command::Select(args) => {
            let exp = args.experiment()?;
            let dir = args.output_dir(&exp);
            artifacts::guard_overwrite(&dir, &[CANDIDATES, PROBING_SET, SCORES, SELECTED], &exp.config_hash, args.force)?;
            let backend = exp.backend()?;
            let run = exp.select(&*backend)?;
            artifacts::write_selection(&dir, &run)?;
            for set in &run.selection.train_sets {
                println!(
                    "set {}: {} candidates, {} probes, globalE top {:?}, localE top {:?}",
                    set.index,
                    set.scores.len(),
                    set.num_probes,
                    set.selected_global,
                    set.selected_local
                );
            }
            println!("wrote {} (config {})", dir.display(), exp.config_hash);
        }
        Command::Evaluate { run, strategies } => {
            let strategies = if strategies.is_empty() { Strategy::ALL.to_vec() } else { strategies };
            let exp = run.experiment()?;
            let dir = run.output_dir(&exp);
            artifacts::guard_overwrite(&dir, &[REPORT_JSON, REPORT_CSV], &exp.config_hash, run.force)?;
            let selected = dir.join(SELECTED);
            let selection = if selected.exists() { Some(artifacts::read_selection(&selected)?) } else { None };
            let backend = exp.backend()?;
            let report = exp.evaluate(&*backend, selection.as_ref(), &strategies)?;
            artifacts::write_report(&dir, &report)?;
            print!("{}", artifacts::render_report(&report));
        }
        Command::Correlate { reports, output, force } => {
            let loaded = reports.iter().map(|p| artifacts::read_report(p)).collect::<Result<Vec<_>>>()?;
            let matrix = correlate_reports(&loaded)?;
            let bytes = artifacts::correlation_csv(&loaded, &matrix)?;
            let out = output.unwrap_or_else(|| sibling(&reports[0], CORRELATION));
            let hash = std::str::from_utf8(&bytes)
                .ok()
                .and_then(|t| t.lines().next())
                .and_then(|l| l.strip_prefix("# config_hash="))
                .unwrap_or_default()
                .to_string();
            guard_file(&out, &hash, force)?;
            artifacts::write_atomic(&out, &bytes)?;
            print!("{}", String::from_utf8_lossy(&bytes));
        }
        Command::Sweep { report, output, force } => {
            let r = artifacts::read_report(&report)?;
            let bytes = artifacts::sweep_csv(&r.config_hash, &r.sweep()?)?;
            let out = output.unwrap_or_else(|| sibling(&report, SWEEP));
            guard_file(&out, &r.config_hash, force)?;
            artifacts::write_atomic(&out, &bytes)?;
            print!("{}", String::from_utf8_lossy(&bytes));
        }
        Command::Report { report, csv } => {
            let r = artifacts::read_report(&report)?;
            if csv {
                print!("{}", String::from_utf8_lossy(&artifacts::report_table(&r)?));
            } else {
                print!("{}", artifacts::render_report(&r));
            }
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn guard_file(path: &Path, hash: &str, force: bool) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    artifacts::guard_overwrite(dir, &[name], hash, force)
}

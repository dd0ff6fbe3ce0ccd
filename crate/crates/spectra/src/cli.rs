//! Command-line entry point. Exit codes: 0 success, 1 numerical failure,
//! 2 usage, configuration or file errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use spectra_core::gradsuite::{self, SuiteOptions};
use spectra_core::checkpoint::Checkpoint;
use spectra_core::merge::{grid_search, two_stage_merge, MergeSpec};
use spectra_core::model::ModelConfig;

use crate::config::{defaults_help, EvalTask, ModalityFilter, RunConfig};
use crate::dataset::{self, Manifest};
use crate::error::{self, Error, Result};
use crate::formats::{load_checkpoint, save_checkpoint};
use crate::pipeline::{self, checkpoint_hash, EvalSet, Model, TrainOptions};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "spectra", version, about = "Wavelength-conditioned vision-language training on synthetic Earth-observation data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus: rasters, sidecars and manifest.jsonl
    GenData {
        /// Run config; defaults apply when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes model.ckpt and steps.csv
    Train {
        /// Run config; defaults apply when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest file or the directory holding manifest.jsonl
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// `all`, `others` or a comma list; overrides train.modality_filter
        #[arg(long)]
        modality_filter: Option<String>,
        /// Start from this checkpoint's parameters
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also restore optimizer state and continue the step count
        #[arg(long, requires = "init")]
        resume: bool,
        /// Overrides train.steps
        #[arg(long)]
        steps: Option<usize>,
        /// Also write step-NNNNNN.ckpt at every multiple of this step count
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Evaluate a checkpoint; writes a JSON report
    Eval {
        /// Run config; defaults apply when absent
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides eval.manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// zero-shot, multilabel, retrieval or all; overrides eval.task
        #[arg(long)]
        task: Option<String>,
        /// Overrides eval.split
        #[arg(long)]
        split: Option<String>,
        /// Overrides eval.modality_filter
        #[arg(long)]
        modality_filter: Option<String>,
        /// Report path; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for similarity-matrix dumps
        #[arg(long)]
        dump_sims: Option<PathBuf>,
    },
    /// Two-stage linear merge: base+rgb at m1, then +others at m2
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        others: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        m1: f64,
        #[arg(long, default_value_t = 0.5)]
        m2: f64,
        /// Merged checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Also write the first-stage checkpoint here
        #[arg(long)]
        intermediate: Option<PathBuf>,
    },
    /// Grid search over m1 (with m2 = 0), then m2 at the chosen m1
    MergeSearch {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        others: PathBuf,
        /// Comma-separated ratios; defaults to merge.grid
        #[arg(long)]
        grid: Option<String>,
        /// Config whose [eval] section scores each candidate
        #[arg(long)]
        eval_config: PathBuf,
        /// Overrides eval.manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Metric used for selection; defaults to the first reported
        #[arg(long)]
        metric: Option<String>,
        /// Receives stage1.csv, stage2.csv, selection.json, merged.ckpt
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        /// 32x32 images, 8x8 grid, one block per tower
        #[arg(long)]
        tiny: bool,
        /// Model architecture from this config instead
        #[arg(long, conflicts_with = "tiny")]
        config: Option<PathBuf>,
        /// Coordinates probed per parameter tensor
        #[arg(long, default_value_t = 3)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render step logs, ratio tables and eval reports as Markdown tables
    Report {
        /// .csv or .json files
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Markdown path; printed to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rows kept from long CSV files
        #[arg(long, default_value_t = 20)]
        max_rows: usize,
    },
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(defaults_help()).after_help(defaults_help())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn output(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => error::write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::config(format!("--grid: '{x}' is not a number"))))
        .collect()
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let m = dataset::generate(&cfg.corpus_config()?, &out)?;
            println!("wrote {} records to {} (manifest {:016x})", m.entries.len(), out.display(), m.hash());
        }
        Command::Train { config, manifest, out, modality_filter, init, resume, steps, save_every } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(f) = modality_filter {
                ModalityFilter::parse(&f, "--modality-filter")?;
                cfg.train.modality_filter = f;
            }
            if steps.is_some() {
                cfg.train.steps = steps;
            }
            let manifest = Manifest::load(&manifest)?;
            let init = init.as_deref().map(load_checkpoint).transpose()?;
            let every = cfg.train.log_every.max(1);
            let opts = TrainOptions { init: init.as_ref(), resume, save_every };
            let save = |c: &Checkpoint| save_checkpoint(c, &out.join(format!("step-{:06}.ckpt", c.meta.step)));
            let outcome = pipeline::train_on_manifest(&cfg, &manifest, opts, save, |l| {
                if l.step % every == 0 {
                    eprintln!("step {:>5}  loss {:.5}  |g| {:.3e}", l.step, l.report.total, l.grad_norm);
                }
            })?;
            let ckpt_path = out.join("model.ckpt");
            save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
            error::write(&out.join("steps.csv"), pipeline::step_log_csv(&outcome.logs))?;
            println!(
                "wrote {} after {} steps (checkpoint {}, config {:016x})",
                ckpt_path.display(),
                outcome.checkpoint.meta.step,
                checkpoint_hash(&outcome.checkpoint),
                cfg.hash()
            );
        }
        Command::Eval { config, checkpoint, manifest, task, split, modality_filter, out, dump_sims } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(t) = task {
                cfg.eval.task = t;
            }
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if let Some(f) = modality_filter {
                cfg.eval.modality_filter = f;
            }
            cfg.validate()?;
            let manifest = manifest
                .or_else(|| cfg.eval.manifest.clone().map(PathBuf::from))
                .ok_or_else(|| Error::config("eval needs --manifest or eval.manifest"))?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = Model::from_checkpoint(&cfg, &ckpt)?;
            let set = EvalSet::load(&cfg, &manifest)?;
            let task = EvalTask::parse(&cfg.eval.task)?;
            let metrics = pipeline::evaluate(&cfg, &model, &set, task, dump_sims.as_deref())?;
            if matches!(task, EvalTask::Retrieval | EvalTask::All) {
                let n = set.records.len();
                for k in cfg.eval.ks.iter().filter(|&&k| k == 0 || k > n) {
                    eprintln!("warning: recall@{k} skipped, only {n} pairs");
                }
            }
            output(&pipeline::eval_report(task, &set, &metrics, &ckpt).to_json(), out.as_deref())?;
        }
        Command::Merge { base, rgb, others, m1, m2, out, intermediate } => {
            let (base, rgb, others) = (load_checkpoint(&base)?, load_checkpoint(&rgb)?, load_checkpoint(&others)?);
            let merged = two_stage_merge(&MergeSpec { base: &base, rgb: &rgb, others: &others, m1, m2 })?;
            if let Some(p) = intermediate {
                save_checkpoint(&merged.intermediate, &p)?;
            }
            save_checkpoint(&merged.merged, &out)?;
            println!("wrote {} (m1 = {m1}, m2 = {m2}, checkpoint {})", out.display(), checkpoint_hash(&merged.merged));
        }
        Command::MergeSearch { base, rgb, others, grid, eval_config, manifest, metric, out } => {
            let cfg = RunConfig::load(Some(&eval_config))?;
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => cfg.merge.grid.clone(),
            };
            let manifest = manifest
                .or_else(|| cfg.eval.manifest.clone().map(PathBuf::from))
                .ok_or_else(|| Error::config("merge-search needs --manifest or eval.manifest in the eval config"))?;
            let (base, rgb, others) = (load_checkpoint(&base)?, load_checkpoint(&rgb)?, load_checkpoint(&others)?);
            let set = EvalSet::load(&cfg, &manifest)?;
            let task = EvalTask::parse(&cfg.eval.task)?;
            let mut model = Model::init(&cfg)?;
            let mut failure: Option<Error> = None;
            let search = grid_search(&base, &rgb, &others, &grid, |ckpt| {
                let mut run = || -> Result<Vec<(String, f64)>> {
                    ckpt.load_into(&mut model.store)?;
                    let mut entries = pipeline::evaluate(&cfg, &model, &set, task, None)?.entries();
                    if let Some(name) = &metric {
                        let i = entries
                            .iter()
                            .position(|(k, _)| k == name)
                            .ok_or_else(|| Error::config(format!("--metric: '{name}' is not reported by task {}", task.name())))?;
                        entries[..=i].rotate_right(1);
                    }
                    Ok(entries)
                };
                run().map_err(|e| {
                    let msg = e.to_string();
                    failure = Some(e);
                    spectra_core::Error::Config(msg)
                })
            });
            let search = match (search, failure) {
                (_, Some(e)) => return Err(e),
                (s, None) => s?,
            };
            error::write(&out.join("stage1.csv"), search.stage1.to_csv())?;
            error::write(&out.join("stage2.csv"), search.stage2.to_csv())?;
            let selection = serde_json::json!({
                "m1": search.m1(),
                "m2": search.m2(),
                "metric": search.stage1.rows.first().and_then(|r| r.1.first()).map(|m| m.0.clone()),
            });
            error::write(&out.join("selection.json"), serde_json::to_string_pretty(&selection).expect("json") + "\n")?;
            let merged = two_stage_merge(&MergeSpec { base: &base, rgb: &rgb, others: &others, m1: search.m1(), m2: search.m2() })?;
            save_checkpoint(&merged.merged, &out.join("merged.ckpt"))?;
            println!("selected m1 = {}, m2 = {} (checkpoint {})", search.m1(), search.m2(), checkpoint_hash(&merged.merged));
        }
        Command::Gradcheck { tiny, config, coords, seed } => {
            let model = match (tiny, config) {
                (_, Some(p)) => RunConfig::load(Some(&p))?.model_config(),
                (true, None) => ModelConfig::tiny(),
                (false, None) => RunConfig::default().model_config(),
            };
            let mut opts = SuiteOptions { model, seed, ..SuiteOptions::default() };
            opts.fd.coords_per_param = Some(coords);
            let result = gradsuite::run(&opts)?;
            println!("{:<18} {:>12} {:>12} {:>8}  worst parameter", "objective", "loss", "max rel err", "coords");
            for c in &result.cases {
                println!(
                    "{:<18} {:>12.6} {:>12.3e} {:>8}  {}",
                    c.objective,
                    c.loss,
                    c.report.max_rel_err(),
                    c.report.checked(),
                    c.report.worst().map_or("-", |w| w.name.as_str())
                );
            }
            if !result.passed() {
                return Err(Error::GradCheck(result.max_rel_err()));
            }
            println!("ok: max relative error {:.3e} < {:e}", result.max_rel_err(), gradsuite::TOLERANCE);
        }
        Command::Report { inputs, out, max_rows } => {
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            output(&report::render(&paths, max_rows)?, out.as_deref())?;
        }
    }
    Ok(())
}

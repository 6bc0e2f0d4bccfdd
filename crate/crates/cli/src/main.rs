//! `dtmamba`: generate synthetic cohorts, train and evaluate the model,
//! profile a block and verify gradients.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use dtmamba::gradcheck::{check_model, ModelCheckConfig};
use dtmamba::hazard::{ClassWeights, DEFAULT_HORIZONS};
use dtmamba::metrics::{CvSummary, MeanStd};
use dtmamba::profiler::{bench_throughput, profile_row, ProfileConfig, ThroughputReport};
use dtmamba::synth::{self, CohortSpec};
use dtmamba::train::{self, cross_validate, prepare_samples, train_split, with_threads, Sample};
use dtmamba::{Ablation, Checkpoint, TrainConfig, Trainer};
use serde::Serialize;

/// Patch size used when no training config is given.
const DEFAULT_PATCH: usize = 8;

#[derive(Parser)]
#[command(name = "dtmamba", version, about = "Time-aware 3D selective-scan risk model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic longitudinal cohort.
    Generate {
        /// Cohort spec (JSON); defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the cohort seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-validate over the learning-rate grid, or resume one run.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON); defaults are derived from the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// dt, fusion or interslice.
        #[arg(long)]
        ablate: Option<Ablation>,
        /// Fold count; must match the dataset split. 1 trains on everything.
        #[arg(long)]
        folds: Option<usize>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue the run saved in this checkpoint.
        #[arg(long, conflicts_with_all = ["config", "ablate", "folds"])]
        resume: Option<PathBuf>,
        #[arg(long, env = "DTMAMBA_THREADS")]
        threads: Option<usize>,
    },
    /// Print c-index and horizon AUCs of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Score every patient instead of the checkpoint's held-out fold.
        #[arg(long)]
        all: bool,
        #[arg(long, env = "DTMAMBA_THREADS")]
        threads: Option<usize>,
    },
    /// Print parameter and FLOP counts, optionally with measured throughput.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Measure single-threaded throughput over the configured lengths.
        #[arg(long)]
        bench: bool,
        /// Also measure this many sequences per call on all threads.
        #[arg(long, requires = "bench")]
        parallel: Option<usize>,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients of a small model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Bad invocation or configuration; exits with 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|e| {
        e.is::<Usage>() || matches!(e.downcast_ref::<dtmamba::Error>(), Some(dtmamba::Error::Config(_)))
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { spec, out, seed } => generate(spec.as_deref(), &out, seed),
        Command::Train {
            data,
            config,
            out,
            ablate,
            folds,
            epochs,
            resume,
            threads,
        } => with_threads(threads, || match resume {
            Some(ckpt) => resume_run(&data, &ckpt, &out, epochs),
            None => train_cv(&data, config.as_deref(), &out, ablate, folds, epochs),
        })
        .map_err(|e| usage(e.to_string()))
        .and_then(|r| r),
        Command::Eval {
            data,
            ckpt,
            all,
            threads,
        } => with_threads(threads, || eval(&data, &ckpt, all))
            .map_err(|e| usage(e.to_string()))
            .and_then(|r| r),
        Command::Profile {
            config,
            bench,
            parallel,
            report,
        } => profile(config.as_deref(), bench, parallel, report.as_deref()),
        Command::Gradcheck { config } => gradcheck(config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid {what} {}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn generate(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut spec: CohortSpec = match spec {
        Some(p) => read_json(p, "cohort spec")?,
        None => CohortSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let records = synth::generate_records(&spec)?;
    synth::write_dataset(out, &records, spec.image(), spec.folds, Some(&spec))?;
    let s = synth::summarize(&records, spec.folds, DEFAULT_HORIZONS);
    println!("wrote {} patients to {}", s.patients, out.display());
    println!("cases {}  controls {}  visits {}  absent views {}", s.cases, s.controls, s.visits, s.absent_views);
    let years: Vec<String> = s
        .events_per_year
        .iter()
        .enumerate()
        .map(|(i, n)| if i < DEFAULT_HORIZONS { format!("{}y:{n}", i + 1) } else { format!(">{i}y:{n}") })
        .collect();
    println!("events per year  {}", years.join("  "));
    println!("patients per fold  {:?}", s.patients_per_fold);
    Ok(ExitCode::SUCCESS)
}

fn load_data(data: &Path) -> Result<(synth::DatasetManifest, Vec<synth::PatientRecord>)> {
    if !data.join(synth::MANIFEST_FILE).is_file() {
        return Err(usage(format!("{} has no {}", data.display(), synth::MANIFEST_FILE)));
    }
    Ok(synth::load_dataset(data)?)
}

fn check_image(cfg: &TrainConfig, manifest: &synth::DatasetManifest) -> Result<()> {
    let i = cfg.model.image;
    if [i.channels, i.height, i.width] != manifest.image {
        return Err(usage(format!(
            "config image {:?} does not match dataset image {:?}",
            [i.channels, i.height, i.width],
            manifest.image
        )));
    }
    Ok(())
}

fn default_config(manifest: &synth::DatasetManifest, records: &[synth::PatientRecord]) -> Result<TrainConfig> {
    let max_visits = records.iter().map(|r| r.visits.len()).max().unwrap_or(1);
    Ok(TrainConfig::for_image(manifest.image_config(DEFAULT_PATCH), max_visits)?)
}

fn fmt_mean(m: &Option<MeanStd>) -> String {
    m.as_ref().map_or("n/a".into(), |m| format!("{:.3} ± {:.3}", m.mean, m.std))
}

fn print_summary(lr: f64, s: &CvSummary) {
    let aucs: Vec<String> = s.auc.iter().map(fmt_mean).collect();
    println!("lr {lr:e}  c-index {}  AUC 1..5y [{}]", fmt_mean(&s.c_index), aucs.join(", "));
}

fn train_cv(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    ablate: Option<Ablation>,
    folds: Option<usize>,
    epochs: Option<usize>,
) -> Result<ExitCode> {
    let (manifest, records) = load_data(data)?;
    let mut cfg = match config {
        Some(p) => {
            let c: TrainConfig = read_json(p, "training config")?;
            c.validate()?;
            c
        }
        None => default_config(&manifest, &records)?,
    };
    check_image(&cfg, &manifest)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let folds = folds.unwrap_or(manifest.folds);
    if folds == 0 || (folds > 1 && folds != manifest.folds) {
        return Err(usage(format!("--folds {folds}: the dataset is split into {} folds", manifest.folds)));
    }
    let samples = prepare_samples(&cfg.model, &records)?;
    drop(records);

    if folds == 1 {
        let cfg = cfg.with_ablation(ablate);
        let weights = ClassWeights::from_outcomes(samples.iter().map(|s| &s.outcome), cfg.model.horizons);
        for &lr in &cfg.learning_rates {
            let dir = out.join(format!("lr{lr:e}"));
            let trainer = Trainer::new(&cfg, lr, None, weights)?;
            let (_, run) = train_split(trainer, &samples, &[], Some(&dir))?;
            let last = run.history.last().ok_or_else(|| anyhow!("no epochs were run"))?;
            println!("lr {lr:e}  final train loss {:.6}  -> {}", last.train_loss, dir.display());
        }
        return Ok(ExitCode::SUCCESS);
    }

    let report = cross_validate(&cfg, ablate, &samples, folds, Some(out))?;
    for r in &report.results {
        print_summary(r.learning_rate, &r.summary);
    }
    println!("best lr {:e}; report in {}", report.best_learning_rate, out.join("cv.json").display());
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| usage(format!("cannot load checkpoint: {e}")))
}

fn split(samples: Vec<Sample>, fold: Option<usize>) -> (Vec<Sample>, Vec<Sample>) {
    match fold {
        Some(k) => samples.into_iter().partition(|s| s.fold != k),
        None => (samples, Vec::new()),
    }
}

fn resume_run(data: &Path, ckpt: &Path, out: &Path, epochs: Option<usize>) -> Result<ExitCode> {
    let mut state = load_checkpoint(ckpt)?;
    if let Some(e) = epochs {
        state.config.epochs = e;
    }
    let (manifest, records) = load_data(data)?;
    check_image(&state.config, &manifest)?;
    let samples = prepare_samples(&state.config.model, &records)?;
    let (train, valid) = split(samples, state.fold);
    let start = state.epoch;
    let (trainer, _) = train_split(Trainer::resume(state), &train, &valid, Some(out))?;
    for rec in &trainer.state.history[start..] {
        let c = rec.validation.as_ref().and_then(|v| v.c_index);
        println!(
            "epoch {}  loss {:.6}  c-index {}",
            rec.epoch,
            rec.train_loss,
            c.map_or("n/a".into(), |c| format!("{c:.4}"))
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(data: &Path, ckpt: &Path, all: bool) -> Result<ExitCode> {
    let state = load_checkpoint(ckpt)?;
    let (manifest, records) = load_data(data)?;
    check_image(&state.config, &manifest)?;
    let samples = prepare_samples(&state.config.model, &records)?;
    let samples: Vec<Sample> = match (all, state.fold) {
        (false, Some(k)) => samples.into_iter().filter(|s| s.fold == k).collect(),
        _ => samples,
    };
    let report = train::evaluate(&state.model, &state.params, &samples)?;
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ProfileReport {
    row: dtmamba::profiler::ProfileRow,
    #[serde(skip_serializing_if = "Option::is_none")]
    single_thread: Option<ThroughputReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    parallel: Option<ThroughputReport>,
}

fn print_throughput(title: &str, t: &ThroughputReport) {
    println!("{title}");
    println!("{:>8} {:>12} {:>14} {:>7}", "L", "median s", "tokens/s", "cv");
    for r in &t.rows {
        println!("{:>8} {:>12.3e} {:>14.0} {:>7.3}", r.tokens, r.median_secs, r.tokens_per_sec, r.cv);
    }
    println!("log-log slope {:.3}  median cv {:.3}  peak {:.0} tokens/s", t.slope, t.median_cv, t.peak_tokens_per_sec);
}

fn profile(config: Option<&Path>, bench: bool, parallel: Option<usize>, report: Option<&Path>) -> Result<ExitCode> {
    let cfg: ProfileConfig = match config {
        Some(p) => read_json(p, "profile config")?,
        None => ProfileConfig::default(),
    };
    cfg.block.validate()?;
    let row = profile_row(&cfg.block, cfg.tokens)?;
    println!("{:>6} {:>4} {:>6} {:>7} {:>12} {:>10} {:>14} {:>9}", "d", "N", "layers", "L", "params", "params(M)", "FLOPs", "FLOPs(G)");
    println!(
        "{:>6} {:>4} {:>6} {:>7} {:>12} {:>10.3} {:>14} {:>9.3}",
        row.channels, row.state, row.layers, row.tokens, row.params, row.params_millions, row.flops, row.gflops
    );
    let mut out = ProfileReport {
        row,
        single_thread: None,
        parallel: None,
    };
    if bench {
        let single = with_threads(Some(1), || bench_throughput(&cfg.bench))??;
        print_throughput("single thread", &single);
        out.single_thread = Some(single);
        if let Some(batch) = parallel {
            let mut b = cfg.bench.clone();
            b.batch = batch;
            let par = with_threads(None, || bench_throughput(&b))??;
            print_throughput(&format!("parallel, batch {batch}"), &par);
            out.parallel = Some(par);
        }
    }
    if let Some(path) = report {
        train::write_json(path, &out).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradcheckOutput {
    max_rel_error: f64,
    worst_param: Option<String>,
    worst_index: usize,
    entries_checked: usize,
    params: usize,
    tolerance: f64,
    passed: bool,
}

fn gradcheck(config: Option<&Path>) -> Result<ExitCode> {
    let cfg: ModelCheckConfig = match config {
        Some(p) => read_json(p, "gradcheck config")?,
        None => ModelCheckConfig::default(),
    };
    let c = check_model(&cfg)?;
    print_json(&GradcheckOutput {
        max_rel_error: c.report.max_rel_error,
        worst_param: c.report.worst_param,
        worst_index: c.report.worst_index,
        entries_checked: c.report.entries_checked,
        params: c.params,
        tolerance: cfg.tolerance,
        passed: c.passed,
    })?;
    Ok(if c.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

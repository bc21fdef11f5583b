mod cache;
mod config;
mod report;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use pulsestress_core::ingest::{
    list_subject_files, load_subject, SubjectRecord, Task, MAX_RAW_LABEL,
};
use pulsestress_core::nn::checkpoint::write_checkpoint;
use pulsestress_core::nn::{build_model, Variant};
use pulsestress_core::pipeline::{prepare_subject, PreparedSubject, PreprocessConfig};
use pulsestress_core::train::run_loso;
use rayon::prelude::*;

use crate::config::{Overrides, RunConfig, CACHE_ENV};
use crate::report::{ConfigEcho, MetricsFile, ReportRow, SCHEMA_VERSION};

#[derive(Parser)]
#[command(
    name = "pulsestress",
    version,
    about = "Stress detection from wrist BVP"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// `key = value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory of subject CSV files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Preprocessing cache root [env: PULSESTRESS_CACHE].
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory for results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 2class or 3class.
    #[arg(long, global = true)]
    task: Option<Task>,
    /// hcnn or cnn.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long, global = true)]
    patience: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Subjects held out for validation in each fold.
    #[arg(long, global = true)]
    validation_subjects: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data_dir: self.data_dir.clone(),
            cache_dir: self.cache_dir.clone(),
            out: self.out.clone(),
            task: self.task,
            variant: self.variant,
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            lr: self.lr,
            validation_subjects: self.validation_subjects,
            workers: self.workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check every subject file and print per-subject statistics.
    ValidateData,
    /// Filter, segment and extract features into the cache.
    Preprocess {
        /// Also write the bandpass coefficients as CSV.
        #[arg(long)]
        dump_coeffs: Option<PathBuf>,
    },
    /// Leave-one-subject-out training and evaluation.
    Loso,
    /// Compare metrics files as a CSV table and an SVG bar chart.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} is not a file path", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)
        .with_context(|| format!("writing {}", tmp.display()))?;
    f.sync_all()
        .with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

fn subject_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = list_subject_files(dir)?;
    if files.is_empty() {
        bail!("no subjects found in {}", dir.display());
    }
    Ok(files)
}

fn validate_data(config: &RunConfig) -> Result<ExitCode> {
    let files = subject_files(&config.data_dir)?;
    let results: Vec<_> = files.par_iter().map(load_subject).collect();
    let header: String = (0..=MAX_RAW_LABEL)
        .map(|l| format!(" {:>8}", format!("label{l}")))
        .collect();
    println!(
        "{:<12} {:>10} {:>10}{header}",
        "subject", "samples", "seconds"
    );
    let mut failures = 0;
    for result in &results {
        match result {
            Ok(r) => {
                let counts: String = r
                    .label_histogram()
                    .iter()
                    .map(|c| format!(" {c:>8}"))
                    .collect();
                println!(
                    "{:<12} {:>10} {:>10.1}{counts}",
                    r.subject_id,
                    r.len(),
                    r.duration_s()
                );
            }
            Err(e) => {
                failures += 1;
                println!("error: {e}");
            }
        }
    }
    println!("{} subject file(s), {failures} invalid", results.len());
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn preprocess(config: &RunConfig, dump_coeffs: Option<&Path>) -> Result<()> {
    let pre = PreprocessConfig::new(config.task);
    if let Some(path) = dump_coeffs {
        let coeffs = pre.filter()?;
        atomic_write(path, coeffs.to_csv().as_bytes())?;
        info!("filter coefficients written to {}", path.display());
    }

    let files = subject_files(&config.data_dir)?;
    let key = pre.cache_key(&cache::inputs_digest(&files)?);
    let dir = config.task_cache_dir();
    if let Some(m) = cache::read_manifest(&dir).ok().flatten() {
        if m.key == key {
            let kept: usize = m.subjects.iter().map(|s| s.kept).sum();
            println!(
                "cache hit: {} ({} subjects, {kept} segments, key {})",
                dir.display(),
                m.subjects.len(),
                &key[..12]
            );
            return Ok(());
        }
        info!("cache key changed; rebuilding {}", dir.display());
    }

    let records: Vec<SubjectRecord> = files
        .par_iter()
        .map(load_subject)
        .collect::<Result<_, _>>()?;
    let prepared: Vec<PreparedSubject> = records
        .par_iter()
        .map(|r| prepare_subject(r, &pre))
        .collect::<Result<_, _>>()?;

    for p in &prepared {
        if p.dropped > 0 {
            info!(
                "{}: dropped {} of {} windows with fewer than the minimum beats",
                p.subject_id, p.dropped, p.candidate_windows
            );
        }
        if p.lf_hf_flagged > 0 {
            warn!(
                "{}: {} segments without HF power; LF/HF set to 0",
                p.subject_id, p.lf_hf_flagged
            );
        }
    }
    let manifest = cache::write_cache(&dir, &key, &pre, &prepared)?;
    println!(
        "{:<12} {:>10} {:>8} {:>8}",
        "subject", "windows", "kept", "dropped"
    );
    for s in &manifest.subjects {
        println!(
            "{:<12} {:>10} {:>8} {:>8}",
            s.subject_id, s.candidate_windows, s.kept, s.dropped
        );
    }
    let kept: usize = manifest.subjects.iter().map(|s| s.kept).sum();
    println!(
        "{} subjects, {kept} segments written to {}",
        manifest.subjects.len(),
        dir.display()
    );
    Ok(())
}

fn print_model_summary(variant: Variant, task: Task) {
    let model = build_model::<f32>(variant, task.n_classes(), 0);
    println!(
        "{:<14} {:>6} {:>6} {:>8} {:>12} {:>8}",
        "layer", "kernel", "stride", "act", "output", "params"
    );
    let dash = || "-".to_string();
    for l in model.summary() {
        println!(
            "{:<14} {:>6} {:>6} {:>8} {:>12} {:>8}",
            l.name,
            l.kernel.map_or_else(dash, |k| k.to_string()),
            l.stride.map_or_else(dash, |k| k.to_string()),
            l.activation.unwrap_or("-"),
            format!("{:?}", l.output_shape),
            l.params
        );
    }
    println!("total parameters: {}", model.total_params());
}

fn loso(config: &RunConfig) -> Result<()> {
    let dir = config.task_cache_dir();
    if cache::read_manifest(&dir)?.is_none() {
        bail!(
            "no preprocessed data for task {} in {}; run `pulsestress preprocess --task {}` first",
            config.task,
            dir.display(),
            config.task
        );
    }
    let (manifest, subjects) = cache::load_cache(&dir)?;
    let train = config.train_config();
    print_model_summary(config.variant, config.task);

    let outcome = run_loso(&subjects, &train)?;

    let ckpt_dir = config.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    for (subject, model) in &outcome.models {
        let mut bytes = Vec::new();
        write_checkpoint(model, &mut bytes)?;
        atomic_write(&ckpt_dir.join(format!("{subject}.pst")), &bytes)?;
    }

    let metrics = MetricsFile {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: ConfigEcho {
            task: config.task,
            variant: config.variant,
            seed: config.seed,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            lr: train.lr,
            validation_subjects: train.validation_subject_count,
            model: train.model,
            preprocess: manifest.preprocess,
            cache_key: manifest.key,
        },
        folds: outcome.folds,
        pooled: outcome.pooled,
        per_fold: outcome.per_fold,
        reference: report::reference(config.task, config.variant),
    };
    let path = config.out.join("metrics.json");
    atomic_write(&path, serde_json::to_string_pretty(&metrics)?.as_bytes())?;

    println!();
    println!(
        "{:<12} {:>6} {:>10} {:>10} {:>6}",
        "subject", "n", "accuracy", "macro F1", "epoch"
    );
    for f in &metrics.folds {
        match (&f.metrics, &f.history) {
            (Some(m), Some(h)) => println!(
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>6}",
                f.subject, m.n_samples, m.accuracy, m.macro_f1, h.best_epoch
            ),
            _ => println!(
                "{:<12} skipped: {}",
                f.subject,
                f.warning.as_deref().unwrap_or("")
            ),
        }
    }
    let row = ReportRow::from_metrics(&path, &metrics);
    println!(
        "pooled: accuracy {:.2}%, macro F1 {:.2}% over {} samples",
        row.accuracy, row.macro_f1, metrics.pooled.n_samples
    );
    println!(
        "per fold: accuracy {:.2} ± {:.2}%, macro F1 {:.2} ± {:.2}%",
        row.fold_accuracy.0, row.fold_accuracy.1, row.fold_macro_f1.0, row.fold_macro_f1.1
    );
    if let Some(r) = metrics.reference {
        println!(
            "published: accuracy {:.2}%, macro F1 {:.2}%",
            r.accuracy, r.macro_f1
        );
    }
    println!("metrics written to {}", path.display());
    Ok(())
}

fn report(config: &RunConfig, files: &[PathBuf]) -> Result<()> {
    let rows = files
        .iter()
        .map(|p| report::load_metrics(p).map(|m| ReportRow::from_metrics(p, &m)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&config.out)
        .with_context(|| format!("creating {}", config.out.display()))?;
    let table = report::table_csv(&rows);
    atomic_write(&config.out.join("report.csv"), table.as_bytes())?;
    atomic_write(
        &config.out.join("report.svg"),
        report::bar_chart_svg(&rows).as_bytes(),
    )?;
    print!("{table}");
    println!("report written to {}", config.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = RunConfig::resolve(
        cli.global.config.as_deref(),
        std::env::var_os(CACHE_ENV),
        &cli.global.overrides(),
    )?;
    if let Some(n) = config.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::ValidateData => return validate_data(&config),
        Command::Preprocess { dump_coeffs } => preprocess(&config, dump_coeffs.as_deref())?,
        Command::Loso => {
            fs::create_dir_all(&config.out)
                .with_context(|| format!("creating {}", config.out.display()))?;
            loso(&config)?
        }
        Command::Report { metrics } => report(&config, &metrics)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

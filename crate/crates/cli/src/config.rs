//! Run settings resolved from defaults, an optional `key = value` file, the
//! environment and command-line flags, in increasing order of precedence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pulsestress_core::ingest::Task;
use pulsestress_core::nn::Variant;
use pulsestress_core::train::TrainConfig;

pub const CACHE_ENV: &str = "PULSESTRESS_CACHE";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub out: PathBuf,
    pub task: Task,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr: f64,
    pub validation_subjects: usize,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::new(Task::ThreeClass, Variant::Hcnn, 42);
        Self {
            data_dir: PathBuf::from("data"),
            cache_dir: PathBuf::from(".pulsestress-cache"),
            out: PathBuf::from("results"),
            task: train.task,
            variant: train.variant,
            seed: train.seed,
            epochs: train.max_epochs,
            batch_size: train.batch_size,
            patience: train.patience,
            lr: train.lr,
            validation_subjects: train.validation_subject_count,
            workers: None,
        }
    }
}

/// Values given explicitly on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<Task>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub lr: Option<f64>,
    pub validation_subjects: Option<usize>,
    pub workers: Option<usize>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?} for {key}: {e}"))
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "cache_dir" => self.cache_dir = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "task" => self.task = parse(key, value)?,
            "variant" => self.variant = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "validation_subjects" => self.validation_subjects = parse(key, value)?,
            "workers" => self.workers = Some(parse(key, value)?),
            other => bail!("unknown setting {other:?}"),
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &o.$field { self.$field = v.clone(); })*
            };
        }
        take!(
            data_dir,
            cache_dir,
            out,
            task,
            variant,
            seed,
            epochs,
            batch_size,
            patience,
            lr,
            validation_subjects
        );
        if o.workers.is_some() {
            self.workers = o.workers;
        }
    }

    pub fn resolve(
        file: Option<&Path>,
        env_cache: Option<OsString>,
        flags: &Overrides,
    ) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            config
                .apply_file_text(&text)
                .with_context(|| format!("config {}", path.display()))?;
        }
        if let Some(dir) = env_cache.filter(|d| !d.is_empty()) {
            config.cache_dir = PathBuf::from(dir);
        }
        config.apply_overrides(flags);
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            lr: self.lr,
            validation_subject_count: self.validation_subjects,
            ..TrainConfig::new(self.task, self.variant, self.seed)
        }
    }

    pub fn task_cache_dir(&self) -> PathBuf {
        self.cache_dir.join(self.task.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults_match_training_defaults() {
        let c = RunConfig::default();
        assert_eq!(
            c.train_config(),
            TrainConfig::new(Task::ThreeClass, Variant::Hcnn, 42)
        );
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let f = write_config("epochs = 7\ncache_dir = from-file # comment\nlr=0.01\n");
        let c = RunConfig::resolve(Some(f.path()), None, &Overrides::default()).unwrap();
        assert_eq!((c.epochs, c.lr), (7, 0.01));
        assert_eq!(c.cache_dir, PathBuf::from("from-file"));

        let c = RunConfig::resolve(
            Some(f.path()),
            Some("from-env".into()),
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(c.cache_dir, PathBuf::from("from-env"));

        let flags = Overrides {
            cache_dir: Some("from-flag".into()),
            epochs: Some(3),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Some(f.path()), Some("from-env".into()), &flags).unwrap();
        assert_eq!(c.cache_dir, PathBuf::from("from-flag"));
        assert_eq!(c.epochs, 3);
        assert_eq!(c.lr, 0.01);
    }

    #[test]
    fn bad_file_entries_are_reported() {
        let mut c = RunConfig::default();
        let err = c.apply_file_text("speed = 3").unwrap_err();
        assert!(format!("{err:#}").contains("unknown setting"), "{err:#}");
        let err = c.apply_file_text("\n\ntask = 4class").unwrap_err();
        assert!(format!("{err:#}").contains("line 3"), "{err:#}");
        assert!(c.apply_file_text("noequals").is_err());
    }
}

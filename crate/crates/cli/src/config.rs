//! Run configuration: a flat `key = value` file, overridden by flags.
//!
//! Grammar: one `key = value` pair per line; blank lines and lines whose
//! first non-space character is `#` are ignored; whitespace around keys and
//! values is trimmed; later lines win. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hbvi::families::{FamilyKind, Structure};
use hbvi::optim::LrSchedule;
use hbvi::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Synthetic,
    Preference,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Synthetic => "synthetic",
            ModelKind::Preference => "preference",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(ModelKind::Synthetic),
            "preference" => Ok(ModelKind::Preference),
            other => bail!("unknown model {other:?} (expected synthetic or preference)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub family: FamilyKind,
    pub structure: Structure,
    /// Latent dimension of generated synthetic data.
    pub dim: usize,
    pub branches: usize,
    pub obs_per_branch: usize,
    pub ratings: Option<PathBuf>,
    pub max_ratings_per_user: usize,
    pub threshold: f64,
    pub pca_components: usize,
    pub data: Option<PathBuf>,
    /// Defaults to 0 for synthetic data and 0.1 for ratings.
    pub test_fraction: Option<f64>,
    pub iters: u64,
    pub lr: f64,
    pub lr_drop_every: u64,
    pub lr_drop_factor: f64,
    pub lr_max_drops: u32,
    pub batch_size: Option<usize>,
    pub n_mc: usize,
    pub seed: u64,
    pub trace_every: u64,
    pub ema_smoothing: f64,
    pub k_samples: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = LrSchedule::default();
        Self {
            model: ModelKind::Synthetic,
            family: FamilyKind::Branch,
            structure: Structure::Dense,
            dim: 3,
            branches: 10,
            obs_per_branch: 20,
            ratings: None,
            max_ratings_per_user: 1000,
            threshold: 3.0,
            pca_components: 10,
            data: None,
            test_fraction: None,
            iters: 10_000,
            lr: schedule.base,
            lr_drop_every: schedule.drop_every,
            lr_drop_factor: schedule.drop_factor,
            lr_max_drops: schedule.max_drops,
            batch_size: None,
            n_mc: hbvi::estimators::DEFAULT_N_MC,
            seed: 0,
            trace_every: 100,
            ema_smoothing: hbvi::train::DEFAULT_EMA_SMOOTHING,
            k_samples: hbvi::metrics::DEFAULT_K,
            workers: 1,
            out_dir: PathBuf::from("."),
            checkpoint: None,
            resume: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = parse(key, value)?,
            "family" => self.family = parse(key, value)?,
            "structure" => self.structure = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "branches" => self.branches = parse(key, value)?,
            "obs_per_branch" => self.obs_per_branch = parse(key, value)?,
            "ratings" => self.ratings = optional(key, value)?,
            "max_ratings_per_user" => self.max_ratings_per_user = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "pca_components" => self.pca_components = parse(key, value)?,
            "data" => self.data = optional(key, value)?,
            "test_fraction" => self.test_fraction = optional(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_drop_every" => self.lr_drop_every = parse(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = parse(key, value)?,
            "lr_max_drops" => self.lr_max_drops = parse(key, value)?,
            "batch_size" => self.batch_size = optional(key, value)?,
            "n_mc" => self.n_mc = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "trace_every" => self.trace_every = parse(key, value)?,
            "ema_smoothing" => self.ema_smoothing = parse(key, value)?,
            "k_samples" => self.k_samples = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "out_dir" => self.out_dir = parse(key, value)?,
            "checkpoint" => self.checkpoint = optional(key, value)?,
            "resume" => self.resume = optional(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", origin.display(), n + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{}:{}", origin.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut c = Self::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Every key with its resolved value, in a fixed order. Feeding these
    /// lines back through [`RunConfig::apply_text`] reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.model.to_string()),
            ("family", self.family.to_string()),
            ("structure", self.structure.to_string()),
            ("dim", self.dim.to_string()),
            ("branches", self.branches.to_string()),
            ("obs_per_branch", self.obs_per_branch.to_string()),
            ("ratings", show_path(&self.ratings)),
            (
                "max_ratings_per_user",
                self.max_ratings_per_user.to_string(),
            ),
            ("threshold", format!("{:?}", self.threshold)),
            ("pca_components", self.pca_components.to_string()),
            ("data", show_path(&self.data)),
            (
                "test_fraction",
                show(&self.test_fraction.map(|v| format!("{v:?}"))),
            ),
            ("iters", self.iters.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lr_drop_every", self.lr_drop_every.to_string()),
            ("lr_drop_factor", format!("{:?}", self.lr_drop_factor)),
            ("lr_max_drops", self.lr_max_drops.to_string()),
            ("batch_size", show(&self.batch_size)),
            ("n_mc", self.n_mc.to_string()),
            ("seed", self.seed.to_string()),
            ("trace_every", self.trace_every.to_string()),
            ("ema_smoothing", format!("{:?}", self.ema_smoothing)),
            ("k_samples", self.k_samples.to_string()),
            ("workers", self.workers.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("resume", show_path(&self.resume)),
        ]
    }

    pub fn data_path(&self) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.bin"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.bin"))
    }

    pub fn test_fraction(&self) -> f64 {
        self.test_fraction.unwrap_or(match self.model {
            ModelKind::Synthetic => 0.0,
            ModelKind::Preference => 0.1,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iters: self.iters,
            n_mc: self.n_mc,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                base: self.lr,
                drop_every: self.lr_drop_every,
                drop_factor: self.lr_drop_factor,
                max_drops: self.lr_max_drops,
            },
            seed: self.seed,
            trace_every: self.trace_every,
            ema_smoothing: self.ema_smoothing,
        }
    }
}

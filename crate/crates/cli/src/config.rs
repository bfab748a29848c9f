//! Run settings: command-line flags layered over an optional `key = value`
//! file. Keys in the file are the long flag names without the dashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser};
use snf_core::data::DataSpec;
use snf_core::gradients::{GradConfig, GradMode};
use snf_core::layers::DEFAULT_ALPHA;
use snf_core::model::{BuildOptions, ModelSpec};
use snf_core::training::{LambdaController, TrainConfig};

/// Flags shared by `train`, `eval`, `sample` and `diag-angle`. Every field is
/// optional here; [`Settings::resolve`] fills in the defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct RunOpts {
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// fc2, conv9 or custom:<layers> (comma-separated fc, act, conv<k>, squeeze).
    #[arg(long)]
    pub model: Option<String>,
    /// two_moons, ring, grid, idx:<path> or csv:<path>.
    #[arg(long)]
    pub data: Option<String>,
    /// Gradient mode: snf or exact.
    #[arg(long)]
    pub mode: Option<String>,
    /// Reconstruction penalty weight (initial value with --geco).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Adapt the penalty weight from the reconstruction constraint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub geco: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear learning-rate warm-up length in epochs.
    #[arg(long)]
    pub warmup: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for likelihood evaluation.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Spatial extent of the inverse kernels (odd); defaults to the forward extent.
    #[arg(long)]
    pub asym_kernel: Option<usize>,
    /// Weight of the Jacobian-vector-product inverse penalty; 0 disables it.
    #[arg(long)]
    pub jvp_penalty: Option<f64>,
    /// Probe vectors per layer for the JVP penalty.
    #[arg(long)]
    pub jvp_probes: Option<usize>,
    /// Slope of the smooth leaky ReLU, in (0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Size of generated synthetic datasets.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Read at most this many examples from data files.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Fraction of the data held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// In training, also compute the other gradient mode every n-th batch and
    /// log the angle between the two.
    #[arg(long)]
    pub angle_every: Option<usize>,
    /// Abort when the batch reconstruction loss exceeds this; 0 disables.
    #[arg(long)]
    pub recon_limit: Option<f64>,
    /// Exact conv gradients through a genuine pass of the inverse model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict_exact: Option<bool>,
}

#[derive(Parser)]
#[command(no_binary_name = true)]
struct FileOpts {
    #[command(flatten)]
    opts: RunOpts,
}

macro_rules! layer {
    ($top:expr, $base:expr; $($f:ident),*) => {
        RunOpts { config: None, $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunOpts {
    /// These flags over `base`.
    pub fn over(self, base: RunOpts) -> RunOpts {
        layer!(self, base; model, data, mode, lambda, geco, epochs, batch, lr, warmup, clip, seed, threads, out,
            asym_kernel, jvp_penalty, jvp_probes, alpha, n_points, limit, val_fraction, angle_every, recon_limit,
            strict_exact)
    }

    /// Flags over the file named by `--config`, or over `fallback` when no
    /// file is named and `fallback` exists.
    pub fn with_file(self, fallback: Option<&Path>) -> Result<RunOpts> {
        let path = match (&self.config, fallback) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(p)) if p.exists() => Some(p.to_path_buf()),
            _ => None,
        };
        match path {
            Some(p) => {
                let file = read_config_file(&p)?;
                Ok(self.over(file))
            }
            None => Ok(self),
        }
    }
}

/// Parses `key = value` lines (`#` starts a comment) with the same rules as
/// the command line.
pub fn parse_config_text(text: &str) -> Result<RunOpts> {
    let mut argv = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got `{line}`", i + 1);
        };
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key == "config" {
            bail!("line {}: config files cannot include other config files", i + 1);
        }
        argv.push(format!("--{key}"));
        argv.push(value.to_string());
    }
    let parsed = FileOpts::try_parse_from(&argv).map_err(|e| anyhow::anyhow!("{}", e.to_string().trim_end()))?;
    Ok(parsed.opts)
}

pub fn read_config_file(path: &Path) -> Result<RunOpts> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    parse_config_text(&text).with_context(|| format!("in config file {}", path.display()))
}

/// Fully resolved settings with defaults applied and values validated.
#[derive(Clone, Debug)]
pub struct Settings {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub data_name: String,
    pub mode: GradMode,
    pub lambda: f64,
    pub geco: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: f64,
    pub clip: Option<f64>,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub asym_kernel: Option<usize>,
    pub jvp_penalty: f64,
    pub jvp_probes: usize,
    pub alpha: f64,
    pub n_points: usize,
    pub limit: Option<usize>,
    pub val_fraction: f64,
    pub angle_every: Option<usize>,
    pub recon_limit: Option<f64>,
    pub strict_exact: bool,
}

fn positive_or_none(v: f64) -> Option<f64> {
    (v != 0.0).then_some(v)
}

impl Settings {
    pub fn resolve(o: RunOpts) -> Result<Settings> {
        let data_name = o.data.unwrap_or_else(|| "two_moons".into());
        let s = Settings {
            model: o.model.as_deref().unwrap_or("fc2").parse().context("--model")?,
            data: data_name.parse().context("--data")?,
            data_name,
            mode: o.mode.as_deref().unwrap_or("snf").parse().context("--mode")?,
            lambda: o.lambda.unwrap_or(1.0),
            geco: o.geco.unwrap_or(false),
            epochs: o.epochs.unwrap_or(100),
            batch: o.batch.unwrap_or(100),
            lr: o.lr.unwrap_or(1e-4),
            warmup: o.warmup.unwrap_or(10.0),
            clip: positive_or_none(o.clip.unwrap_or(1e4)),
            seed: o.seed.unwrap_or(0),
            threads: o.threads.unwrap_or(1),
            out: o.out.unwrap_or_else(|| PathBuf::from("snf-run")),
            asym_kernel: o.asym_kernel,
            jvp_penalty: o.jvp_penalty.unwrap_or(0.0),
            jvp_probes: o.jvp_probes.unwrap_or(GradConfig::default().jvp_probes),
            alpha: o.alpha.unwrap_or(DEFAULT_ALPHA),
            n_points: o.n_points.unwrap_or(2000),
            limit: o.limit,
            val_fraction: o.val_fraction.unwrap_or(0.1),
            angle_every: o.angle_every.filter(|&n| n > 0),
            recon_limit: positive_or_none(o.recon_limit.unwrap_or(1.0)),
            strict_exact: o.strict_exact.unwrap_or(false),
        };
        if s.threads == 0 {
            bail!("--threads must be at least 1");
        }
        if !(0.0..1.0).contains(&s.val_fraction) {
            bail!("--val-fraction must be in [0, 1), got {}", s.val_fraction);
        }
        if s.asym_kernel.is_some_and(|k| k % 2 == 0) {
            bail!("--asym-kernel must be odd");
        }
        s.train_config().validate().context("training settings")?;
        Ok(s)
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            alpha: self.alpha,
            lambda: self.lambda,
            inverse_kernel: self.asym_kernel,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            warmup_epochs: self.warmup,
            clip: self.clip,
            lambda: if self.geco {
                LambdaController::geco(self.lambda)
            } else {
                LambdaController::fixed(self.lambda)
            },
            grad: GradConfig {
                mode: self.mode,
                strict_exact: self.strict_exact,
                jvp_weight: self.jvp_penalty,
                jvp_probes: self.jvp_probes,
                ..GradConfig::default()
            },
            seed: self.seed,
            recon_limit: self.recon_limit,
            angle_every: self.angle_every,
            ..TrainConfig::default()
        }
    }

    /// The settings as a config file that reproduces them.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.unwrap_or(0.0);
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "data = {}", self.data_name);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "geco = {}", self.geco);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "clip = {}", opt(self.clip));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "out = {}", self.out.display());
        if let Some(k) = self.asym_kernel {
            let _ = writeln!(s, "asym-kernel = {k}");
        }
        let _ = writeln!(s, "jvp-penalty = {}", self.jvp_penalty);
        let _ = writeln!(s, "jvp-probes = {}", self.jvp_probes);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "n-points = {}", self.n_points);
        if let Some(l) = self.limit {
            let _ = writeln!(s, "limit = {l}");
        }
        let _ = writeln!(s, "val-fraction = {}", self.val_fraction);
        let _ = writeln!(s, "angle-every = {}", self.angle_every.unwrap_or(0));
        let _ = writeln!(s, "recon-limit = {}", opt(self.recon_limit));
        let _ = writeln!(s, "strict-exact = {}", self.strict_exact);
        s
    }
}

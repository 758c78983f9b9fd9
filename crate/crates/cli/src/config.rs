//! Flag definitions and layering over an optional flat JSON config file.
//!
//! Every flag can also appear in the file under its long name
//! (`"max-epochs": 100`). Values given on the command line win.

use std::path::{Path, PathBuf};

use clap::Args;
use kanite::data::{GeneratorConfig, SplitSpec};
use kanite::trainer::{LossKind, MmdKernel, OptimizerKind, SweepConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

macro_rules! layered {
    ($(#[$meta:meta])* pub struct $name:ident { $($(#[$fmeta:meta])* pub $field:ident: Option<$ty:ty>,)* }) => {
        $(#[$meta])*
        #[derive(Args, Debug, Clone, Default, Deserialize)]
        #[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: Option<$ty>,)*
        }

        impl $name {
            /// Fills every unset field from `other`.
            pub fn or(self, other: Self) -> Self {
                Self { $($field: self.$field.or(other.$field),)* }
            }
        }
    };
}

layered! {
    /// Synthetic generator parameters.
    pub struct GenFlags {
        /// Number of rows.
        #[arg(long)]
        pub n: Option<usize>,
        /// Number of treatments (at least 2).
        #[arg(long)]
        pub k: Option<usize>,
        /// Number of covariates.
        #[arg(long)]
        pub dim: Option<usize>,
        /// Confounding strength.
        #[arg(long, allow_negative_numbers = true)]
        pub gamma: Option<f64>,
        /// Outcome noise standard deviation.
        #[arg(long)]
        pub sigma: Option<f64>,
        /// Generator seed.
        #[arg(long = "data-seed")]
        pub data_seed: Option<u64>,
    }
}

layered! {
    /// Model and optimisation settings.
    pub struct TrainFlags {
        /// Input dataset CSV.
        #[arg(long)]
        pub data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        pub out: Option<PathBuf>,
        /// Representation loss: mmd, wass or eb.
        #[arg(long)]
        pub loss: Option<LossKind>,
        /// Kernel of the mmd loss: linear or rbf.
        #[arg(long, value_parser = parse_kernel)]
        pub kernel: Option<MmdKernel>,
        /// Weight of the factual loss.
        #[arg(long)]
        pub alpha: Option<f64>,
        /// Weight of the representation loss.
        #[arg(long)]
        pub beta: Option<f64>,
        /// Learning rate (default depends on the optimiser).
        #[arg(long)]
        pub lr: Option<f64>,
        /// sgd or adam.
        #[arg(long)]
        pub optimizer: Option<OptimizerKind>,
        #[arg(long = "batch-size")]
        pub batch_size: Option<usize>,
        #[arg(long = "max-epochs")]
        pub max_epochs: Option<usize>,
        #[arg(long)]
        pub patience: Option<usize>,
        /// Seed for initialisation, minibatch order and the split.
        #[arg(long)]
        pub seed: Option<u64>,
        /// Spline grid size.
        #[arg(long)]
        pub grid: Option<usize>,
        /// Spline degree.
        #[arg(long)]
        pub degree: Option<usize>,
        /// Representation widths, comma separated.
        #[arg(long = "psi-widths", value_delimiter = ',')]
        pub psi_widths: Option<Vec<usize>>,
        /// Hidden widths of each outcome head, comma separated.
        #[arg(long = "head-widths", value_delimiter = ',')]
        pub head_widths: Option<Vec<usize>>,
        /// L1 weight on spline coefficients.
        #[arg(long)]
        pub sparsify: Option<f64>,
        /// Standardise the outcome before training.
        #[arg(long = "standardize-outcome")]
        pub standardize_outcome: Option<bool>,
        /// Train, validation and test fractions, comma separated.
        #[arg(long, value_delimiter = ',')]
        pub split: Option<Vec<f64>>,
    }
}

layered! {
    /// Sweep axes.
    pub struct SweepFlags {
        /// Grid sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        pub grids: Option<Vec<usize>>,
        /// Spline degrees, comma separated.
        #[arg(long, value_delimiter = ',')]
        pub degrees: Option<Vec<usize>>,
        /// Repetitions per cell.
        #[arg(long)]
        pub reps: Option<usize>,
        /// Parallel training runs.
        #[arg(long)]
        pub jobs: Option<usize>,
    }
}

fn parse_kernel(s: &str) -> Result<MmdKernel, String> {
    match s.to_ascii_lowercase().as_str() {
        "linear" => Ok(MmdKernel::Linear),
        "rbf" => Ok(MmdKernel::Rbf),
        other => Err(format!("unknown kernel `{other}` (expected linear or rbf)")),
    }
}

/// Reads a flat JSON object; the caller picks which sections it holds.
pub fn read_config(path: &Path) -> CliResult<serde_json::Map<String, serde_json::Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(serde_json::Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("config {} must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Pulls the keys belonging to one flag group out of `map`.
pub fn section<T: DeserializeOwned>(
    map: &mut serde_json::Map<String, serde_json::Value>,
    keys: &[&str],
) -> CliResult<T> {
    let picked: serde_json::Map<_, _> = keys.iter().filter_map(|k| map.remove_entry(*k)).collect();
    serde_json::from_value(serde_json::Value::Object(picked)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

pub const GEN_KEYS: &[&str] = &["n", "k", "dim", "gamma", "sigma", "data-seed"];
pub const TRAIN_KEYS: &[&str] = &[
    "data", "out", "loss", "kernel", "alpha", "beta", "lr", "optimizer", "batch-size", "max-epochs", "patience",
    "seed", "grid", "degree", "psi-widths", "head-widths", "sparsify", "standardize-outcome", "split",
];
pub const SWEEP_KEYS: &[&str] = &["grids", "degrees", "reps", "jobs"];

/// Rejects keys that belong to no group of the current command.
pub fn ensure_consumed(map: &serde_json::Map<String, serde_json::Value>) -> CliResult<()> {
    match map.keys().next() {
        Some(k) => Err(CliError::Usage(format!("config: unknown or inapplicable key `{k}`"))),
        None => Ok(()),
    }
}

impl GenFlags {
    pub fn is_empty(&self) -> bool {
        self.n.is_none()
            && self.k.is_none()
            && self.dim.is_none()
            && self.gamma.is_none()
            && self.sigma.is_none()
            && self.data_seed.is_none()
    }

    pub fn resolve(&self) -> GeneratorConfig {
        GeneratorConfig {
            n: self.n.unwrap_or(1000),
            n0: self.dim.unwrap_or(10),
            k: self.k.unwrap_or(2),
            gamma: self.gamma.unwrap_or(1.0),
            sigma: self.sigma.unwrap_or(0.5),
            seed: self.data_seed.unwrap_or(0),
        }
    }
}

impl TrainFlags {
    pub fn resolve(&self) -> CliResult<(TrainConfig, SplitSpec)> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            loss: self.loss.unwrap_or(d.loss),
            mmd_kernel: self.kernel.unwrap_or(d.mmd_kernel),
            lr: self.lr.or(d.lr),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            seed: self.seed.unwrap_or(d.seed),
            grid_size: self.grid.unwrap_or(d.grid_size),
            degree: self.degree.unwrap_or(d.degree),
            psi_widths: self.psi_widths.clone().unwrap_or(d.psi_widths),
            head_widths: self.head_widths.clone().unwrap_or(d.head_widths),
            sparsify: self.sparsify.unwrap_or(d.sparsify),
            standardize_outcome: self.standardize_outcome.unwrap_or(d.standardize_outcome),
            ..d
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let mut split = SplitSpec::with_seed(cfg.seed);
        if let Some(f) = &self.split {
            let [train, val, test] = f[..] else {
                return Err(CliError::Usage(format!("--split needs three fractions, got {}", f.len())));
            };
            split = SplitSpec { train, val, test, ..split };
        }
        split.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((cfg, split))
    }
}

impl SweepFlags {
    pub fn resolve(&self, base: TrainConfig, split: SplitSpec) -> CliResult<SweepConfig> {
        let cfg = SweepConfig {
            base_seed: base.seed,
            grid_sizes: self.grids.clone().unwrap_or_else(|| vec![base.grid_size]),
            degrees: self.degrees.clone().unwrap_or_else(|| vec![base.degree]),
            repetitions: self.reps.unwrap_or(1),
            jobs: self.jobs.unwrap_or(1),
            base,
            split,
        };
        if cfg.grid_sizes.is_empty() || cfg.degrees.is_empty() || cfg.repetitions == 0 || cfg.jobs == 0 {
            return Err(CliError::Usage("--grids, --degrees, --reps and --jobs must be non-empty and positive".into()));
        }
        Ok(cfg)
    }
}

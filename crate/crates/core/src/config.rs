//! Run configuration: a TOML document, named ablation presets and flag
//! overrides.
//!
//! Resolution order is defaults, then the config file, then the preset, then
//! command-line overrides. A preset overwrites the fields it switches; flags
//! win over everything. The top-level `seed` is the single source of
//! randomness and is copied into both the split and the trainer.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, DatasetSpec, Fraction, SplitSpec};
use crate::error::{Error, IoContext, Result};
use crate::losses::LossConfig;
use crate::pseudo_label::DecayConfig;
use crate::training::TrainConfig;

/// Named component switches and hyperparameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "suponly")]
    SupOnly,
    #[serde(rename = "weighted")]
    Weighted,
    #[serde(rename = "weighted+decay")]
    WeightedDecay,
    #[serde(rename = "weighted+threshold")]
    WeightedThreshold,
    #[serde(rename = "weighted+decay+threshold")]
    WeightedDecayThreshold,
    #[serde(rename = "weighted+boundary")]
    WeightedBoundary,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "conservative")]
    Conservative,
}

/// Which parts of the objective a preset turns on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub weighted: bool,
    pub decay: bool,
    pub threshold: bool,
    pub boundary: bool,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::SupOnly,
        Preset::Weighted,
        Preset::WeightedDecay,
        Preset::WeightedThreshold,
        Preset::WeightedDecayThreshold,
        Preset::WeightedBoundary,
        Preset::Full,
        Preset::Standard,
        Preset::Conservative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SupOnly => "suponly",
            Preset::Weighted => "weighted",
            Preset::WeightedDecay => "weighted+decay",
            Preset::WeightedThreshold => "weighted+threshold",
            Preset::WeightedDecayThreshold => "weighted+decay+threshold",
            Preset::WeightedBoundary => "weighted+boundary",
            Preset::Full => "full",
            Preset::Standard => "standard",
            Preset::Conservative => "conservative",
        }
    }

    pub fn components(self) -> Components {
        let c = |weighted, decay, threshold, boundary| Components {
            weighted,
            decay,
            threshold,
            boundary,
        };
        match self {
            Preset::SupOnly => c(false, false, false, false),
            Preset::Weighted => c(true, false, false, false),
            Preset::WeightedDecay => c(true, true, false, false),
            Preset::WeightedThreshold => c(true, false, true, false),
            Preset::WeightedDecayThreshold => c(true, true, true, false),
            Preset::WeightedBoundary => c(true, false, false, true),
            Preset::Full | Preset::Standard | Preset::Conservative => c(true, true, true, true),
        }
    }

    /// Writes the preset's fields into `train`. Pure: depends only on the preset.
    pub fn apply(self, train: &mut TrainConfig) {
        let on = self.components();
        let loss = LossConfig::default();
        let decay = DecayConfig::default();
        train.loss.lambda_unsup = if on.weighted { loss.lambda_unsup } else { 0.0 };
        train.loss.boundary_coeff = if on.boundary { loss.boundary_coeff } else { 0.0 };
        train.decay.alpha = if on.decay { decay.alpha } else { 1.0 };
        train.threshold.enabled = on.threshold;
        match self {
            Preset::Standard => {
                train.loss.gamma = 1.0;
                train.threshold.sensitivity = 0.5;
                train.decay.alpha = 0.9;
            }
            Preset::Conservative => {
                train.loss.gamma = 0.5;
                train.threshold.sensitivity = 1.0;
                train.decay.alpha = 1.0;
            }
            _ => {}
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many epochs; 0 keeps only the stage ends.
    #[serde(default)]
    pub checkpoint_every_epochs: u64,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    /// Held-out set for the final report. Without it the unlabeled split
    /// (which still has masks on disk) is used.
    #[serde(default)]
    pub eval_dataset: Option<DatasetSpec>,
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec {
        kind: DatasetKind::Synthetic,
        root: PathBuf::from("data/synthetic"),
        num_classes: 4,
        ignore_index: crate::maps::IGNORE_INDEX,
    }
}

fn default_split() -> SplitSpec {
    SplitSpec {
        labeled_fraction: Fraction::new(1, 8).expect("valid fraction"),
        seed: 0,
        explicit_list: None,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: None,
            out_dir: default_out_dir(),
            checkpoint_every_epochs: 0,
            dataset: default_dataset(),
            eval_dataset: None,
            split: default_split(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line overrides; `None` leaves the configured value alone.
#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root directory.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Labeled fraction such as `1/8`, or a file listing labeled ids.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Threshold sensitivity.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Confidence decay factor.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Base threshold.
    #[arg(long)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub boundary_coeff: Option<f64>,
    #[arg(long)]
    pub stage1_epochs: Option<u64>,
    #[arg(long)]
    pub stage2_epochs: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_labeled: Option<usize>,
    #[arg(long)]
    pub batch_unlabeled: Option<usize>,
    /// Square crop side.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub teacher_copy_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.dataset.root, &self.data_root);
        set(&mut cfg.out_dir, &self.out);
        if let Some(s) = &self.split {
            match s.parse::<Fraction>() {
                Ok(f) => {
                    cfg.split.labeled_fraction = f;
                    cfg.split.explicit_list = None;
                }
                Err(_) if Path::new(s).is_file() => cfg.split.explicit_list = Some(PathBuf::from(s)),
                Err(e) => return Err(Error::Config(format!("--split `{s}`: {e}"))),
            }
        }
        let t = &mut cfg.train;
        set(&mut t.loss.gamma, &self.gamma);
        set(&mut t.threshold.sensitivity, &self.beta);
        set(&mut t.decay.alpha, &self.alpha);
        set(&mut t.threshold.base, &self.t0);
        set(&mut t.loss.lambda_unsup, &self.lambda);
        set(&mut t.loss.boundary_coeff, &self.boundary_coeff);
        set(&mut t.stage1_epochs, &self.stage1_epochs);
        set(&mut t.stage2_epochs, &self.stage2_epochs);
        set(&mut t.lr_initial, &self.lr);
        set(&mut t.batch_size_labeled, &self.batch_labeled);
        set(&mut t.batch_size_unlabeled, &self.batch_unlabeled);
        if let Some(c) = self.crop {
            t.augment.crop = (c, c);
        }
        set(&mut t.teacher_copy_every_epochs, &self.teacher_copy_every);
        set(&mut cfg.checkpoint_every_epochs, &self.checkpoint_every);
        Ok(())
    }
}

impl RunConfig {
    /// Parses a TOML document; errors carry the offending line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always representable")
    }

    /// Defaults, then `file`, then `preset` (or the file's), then `overrides`.
    pub fn resolve(file: Option<&Path>, preset: Option<Preset>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if preset.is_some() {
            cfg.preset = preset;
        }
        if let Some(p) = cfg.preset {
            p.apply(&mut cfg.train);
        }
        overrides.apply(&mut cfg)?;
        cfg.split.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} < 2", self.dataset.num_classes)));
        }
        if let Some(e) = &self.eval_dataset {
            if e.num_classes != self.dataset.num_classes {
                return Err(Error::Config(format!(
                    "eval_dataset has {} classes, dataset has {}",
                    e.num_classes, self.dataset.num_classes
                )));
            }
        }
        self.train.validate()?;
        self.train.model.validate()
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.out_dir.join("figures")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.ndjson")
    }
}

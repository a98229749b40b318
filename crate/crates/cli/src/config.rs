//! Resolved run configuration: defaults, then an optional TOML file, then
//! command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ltcf_core::losses::ExtractorSource;
use ltcf_core::model::Branches;
use ltcf_core::{DegradationConfig, LossWeights, ModelConfig, ScheduleConfig, TrainOptions};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LTCF_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `low/` and `high/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Number of generated pairs used instead of `root`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<usize>,
    pub synthetic_size: usize,
    /// Fraction of pairs held out for evaluation; `0` evaluates on the
    /// training pairs.
    pub test_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic: None,
            synthetic_size: 64,
            test_ratio: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Save a checkpoint every this many epochs; `0` keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out_root(),
            checkpoint_every: 10,
        }
    }
}

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ltcf-out"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub tile: usize,
    pub overlap: usize,
    pub preview: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tile: 256,
            overlap: 32,
            preview: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: ScheduleConfig,
    pub train: TrainOptions,
    pub degradation: DegradationConfig,
    pub data: DataConfig,
    pub extractor: ExtractorSource,
    pub output: OutputConfig,
    pub inference: InferenceConfig,
}

/// Flag values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub branches: Option<Branches>,
    pub no_fbp: bool,
    pub no_msef: bool,
    pub share_cd: bool,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub patch: Option<usize>,
    pub synthetic: Option<usize>,
    pub data: Option<PathBuf>,
    pub lr: Option<f64>,
    pub alphas: Option<[f64; 5]>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.degradation.seed = s;
        }
        if let Some(b) = o.branches {
            self.model.branches = b;
        }
        self.model.use_fbp &= !o.no_fbp;
        self.model.use_msef &= !o.no_msef;
        self.model.share_cd_weights |= o.share_cd;
        if let Some(e) = o.epochs {
            self.train.epochs = e;
            self.schedule.total_epochs = e;
        }
        if let Some(b) = o.batch {
            self.train.batch_size = b;
        }
        if let Some(p) = o.patch {
            self.train.patch = p;
        }
        if let Some(n) = o.synthetic {
            self.data.synthetic = Some(n);
            self.data.root = None;
        }
        if let Some(d) = &o.data {
            self.data.root = Some(d.clone());
            self.data.synthetic = None;
        }
        if let Some(lr) = o.lr {
            self.schedule.lr_initial = lr;
        }
        if let Some(a) = o.alphas {
            self.loss.set_alphas(a);
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.degradation.validate()?;
        if self.train.batch_size == 0 {
            bail!(ltcf_core::Error::Config(
                "batch size must be positive".into()
            ));
        }
        if self.inference.overlap * 2 >= self.inference.tile {
            bail!(ltcf_core::Error::Config(format!(
                "tile overlap {} must be below half the tile size {}",
                self.inference.overlap, self.inference.tile
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}

/// Parses `a1,a2,a3,a4,a5`.
pub fn parse_alphas(s: &str) -> std::result::Result<[f64; 5], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 5 comma-separated weights, got {}", v.len()))
}

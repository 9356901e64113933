//! Run configuration: one JSON file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use epan::edge::CannyParams;
use epan::train::TrainConfig;
use epan::{ModelConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Validate};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub canny: CannyParams,
    pub paths: Paths,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.output, &mut cfg.paths.log]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().or_invalid()?;
        self.train.validate(&self.model).or_invalid()?;
        self.canny.validate().or_invalid()?;
        if let Some(m) = &self.paths.manifest {
            if !m.is_file() {
                return Err(CliError::Validation(format!("manifest {} does not exist", m.display())));
            }
        }
        Ok(())
    }
}

/// Flags shared by every command that runs edge detection.
#[derive(Args, Clone, Debug, Default)]
pub struct CannyFlags {
    #[arg(long)]
    pub canny_sigma: Option<f64>,
    #[arg(long)]
    pub canny_low: Option<f64>,
    #[arg(long)]
    pub canny_high: Option<f64>,
    /// Blur the binary edge map into a soft mask with this sigma.
    #[arg(long)]
    pub canny_soft_sigma: Option<f64>,
}

impl CannyFlags {
    pub fn apply(&self, p: &mut CannyParams) {
        if let Some(v) = self.canny_sigma {
            p.gaussian_sigma = v;
        }
        if let Some(v) = self.canny_low {
            p.low_threshold = v;
        }
        if let Some(v) = self.canny_high {
            p.high_threshold = v;
        }
        if let Some(v) = self.canny_soft_sigma {
            p.soft_sigma = Some(v);
        }
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub convs_per_level: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub decay_power: Option<f64>,
    /// Square crop side; use the config file for rectangular crops.
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub rotate_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $dst = v; })*
            };
        }
        set! {
            variant => m.variant,
            levels => m.levels,
            base_channels => m.cdn_base_channels,
            convs_per_level => m.convs_per_level,
            epochs => t.epochs,
            batch_size => t.batch_size,
            lr_start => t.lr_start,
            lr_end => t.lr_end,
            decay_power => t.decay_power,
            crop => t.crop_h,
            crop => t.crop_w,
            flip_prob => t.flip_prob,
            rotate_prob => t.rotate_prob,
            seed => t.seed,
            lambda_c => t.loss.lambda_c,
            lambda_e => t.loss.lambda_e,
            checkpoint_every => cfg.checkpoint_every,
        }
    }
}

/// Loads `config` (or defaults) and applies the Canny flag overrides.
pub fn canny_params(config: Option<&Path>, base: Option<CannyParams>, flags: &CannyFlags) -> CliResult<CannyParams> {
    let mut p = match config {
        Some(path) => RunConfig::read(path)?.canny,
        None => base.unwrap_or_default(),
    };
    flags.apply(&mut p);
    p.validate().or_invalid()?;
    Ok(p)
}

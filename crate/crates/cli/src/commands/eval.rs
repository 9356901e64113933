use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use epan::data::{DatasetManifest, Split};
use epan::metrics::{evaluate, EvalReport};
use serde::{Deserialize, Serialize};

use super::load_model;
use crate::config::{canny_params, CannyFlags};
use crate::error::{CliError, CliResult, Validate};

/// Scores checkpoints on the test split of a manifest.
#[derive(Args, Debug)]
pub struct Eval {
    /// Repeat to compare several checkpoints, one row each.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON report path. A plain-text table is written next to it with a
    /// `.txt` extension.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub canny: CannyFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub checkpoint: PathBuf,
    pub variant: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub results: Vec<CheckpointReport>,
}

impl Comparison {
    /// One row per checkpoint; the single-checkpoint case also lists every image.
    pub fn to_table(&self) -> String {
        if let [only] = &self.results[..] {
            return format!("{} ({})\n{}", only.checkpoint.display(), only.variant, only.report.to_table());
        }
        let width = self
            .results
            .iter()
            .map(|r| r.variant.len())
            .chain(["variant".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}  {:>6}", "variant", "psnr_db", "ssim", "images");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>7.4}  {:>6}",
                r.variant, r.report.mean_psnr, r.report.mean_ssim, r.report.count
            );
        }
        out
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

impl Eval {
    pub fn run(&self) -> CliResult<()> {
        let manifest = DatasetManifest::read(&self.manifest)
            .or_invalid()?
            .resolved(self.manifest.parent().unwrap_or(Path::new("")));
        let records = manifest.split(Split::Test);
        if records.is_empty() {
            return Err(CliError::Validation(format!("{} has no test records", self.manifest.display())));
        }
        let mut models = Vec::new();
        for path in &self.checkpoint {
            let (network, stored) = load_model(path)?;
            let params = canny_params(self.config.as_deref(), stored, &self.canny)?;
            models.push((path, network, params));
        }
        let mut results = Vec::new();
        for (path, network, params) in &models {
            let report = evaluate(network, &records, params)?;
            eprintln!(
                "{}: {} psnr {:.4} dB, ssim {:.4} over {} images",
                path.display(),
                network.variant(),
                report.mean_psnr,
                report.mean_ssim,
                report.count
            );
            results.push(CheckpointReport {
                checkpoint: (*path).clone(),
                variant: network.variant().to_string(),
                report,
            });
        }
        let cmp = Comparison { results };
        if let Some(dir) = self.report.parent().filter(|d| !d.as_os_str().is_empty()) {
            super::create_dir(dir)?;
        }
        let json = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::Runtime(e.to_string()))?;
        write(&self.report, &(json + "\n"))?;
        write(&self.report.with_extension("txt"), &cmp.to_table())
    }
}

use std::path::PathBuf;

use clap::Args;
use epan::edge::canny;
use epan::Image;
use log::info;

use super::{create_dir, finish_batch, list_pngs, stem};
use crate::config::{canny_params, CannyFlags};
use crate::error::CliResult;

/// Writes one Canny edge map per input PNG, keeping the file stem.
#[derive(Args, Debug)]
pub struct DetectEdges {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Run config supplying the `canny` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub canny: CannyFlags,
}

impl DetectEdges {
    pub fn run(&self) -> CliResult<()> {
        let params = canny_params(self.config.as_deref(), None, &self.canny)?;
        let inputs = list_pngs(&self.input)?;
        create_dir(&self.output)?;
        let mut failures = Vec::new();
        for path in &inputs {
            let out = self.output.join(format!("{}.png", stem(path)));
            let result = Image::read_png(path)
                .and_then(|img| canny(&img, &params))
                .and_then(|edges| edges.write_png(&out));
            if let Err(e) = result {
                failures.push(e.to_string());
            }
        }
        info!("detect-edges: {} of {} images written to {}", inputs.len() - failures.len(), inputs.len(), self.output.display());
        finish_batch(failures, "images")
    }
}

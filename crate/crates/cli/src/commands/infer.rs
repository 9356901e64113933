use std::path::PathBuf;

use clap::Args;
use epan::edge::canny;
use epan::Image;
use log::info;

use super::{create_dir, finish_batch, list_pngs, load_model, stem};
use crate::config::{canny_params, CannyFlags};
use crate::error::CliResult;

/// Deblurs every PNG in a directory. Only the content output is written.
#[derive(Args, Debug)]
pub struct Infer {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Overrides the edge-detector settings stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub canny: CannyFlags,
}

impl Infer {
    pub fn run(&self) -> CliResult<()> {
        let (network, stored) = load_model(&self.checkpoint)?;
        let params = canny_params(self.config.as_deref(), stored, &self.canny)?;
        let inputs = list_pngs(&self.input)?;
        create_dir(&self.output)?;
        let mut failures = Vec::new();
        for path in &inputs {
            let out = self.output.join(format!("{}.png", stem(path)));
            let result = Image::read_png(path).and_then(|blurry| {
                let edges = canny(&blurry, &params)?;
                let (deblurred, _) = network.infer(&blurry, &edges)?;
                deblurred.write_png(&out)
            });
            if let Err(e) = result {
                failures.push(e.to_string());
            }
        }
        info!(
            "infer: {} of {} images deblurred with {} into {}",
            inputs.len() - failures.len(),
            inputs.len(),
            network.variant(),
            self.output.display()
        );
        finish_batch(failures, "images")
    }
}

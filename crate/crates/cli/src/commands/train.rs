use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use epan::data::{DatasetManifest, Split};
use epan::train::{append_jsonl, TrainSample, Trainer};
use epan::Image;
use log::info;
use serde_json::json;

use super::create_dir;
use crate::config::{RunConfig, TrainFlags};
use crate::error::{CliError, CliResult, Validate};

/// Trains one variant on the train split of a manifest.
#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Final checkpoint path.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-epoch JSONL log; defaults to `<output>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run. Its stored
    /// model and training settings take precedence over the config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `run.ckpt` → `run.e00010.ckpt`.
fn periodic_path(output: &Path, epoch: usize) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match output.extension() {
        Some(ext) => format!("{stem}.e{epoch:05}.{}", ext.to_string_lossy()),
        None => format!("{stem}.e{epoch:05}"),
    };
    output.with_file_name(name)
}

fn load_samples(manifest: &DatasetManifest, cfg: &RunConfig) -> CliResult<Vec<TrainSample>> {
    let records = manifest.split(Split::Train);
    if records.is_empty() {
        return Err(CliError::Validation("the manifest has no training records".into()));
    }
    records
        .iter()
        .map(|r| {
            let sharp = Image::read_png(&r.sharp_path).or_invalid()?;
            let blurry = Image::read_png(&r.blurry_path).or_invalid()?;
            let s = TrainSample::from_pair(blurry, sharp, &cfg.canny).or_invalid()?;
            let (h, w) = s.dims();
            if h < cfg.train.crop_h || w < cfg.train.crop_w {
                return Err(CliError::Validation(format!(
                    "{} is {h}x{w}, smaller than the {}x{} crop",
                    r.blurry_path.display(),
                    cfg.train.crop_h,
                    cfg.train.crop_w
                )));
            }
            Ok(s)
        })
        .collect()
}

impl Train {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        self.flags.apply(&mut cfg);
        if let Some(m) = &self.manifest {
            cfg.paths.manifest = Some(m.clone());
        }
        if let Some(o) = &self.output {
            cfg.paths.output = Some(o.clone());
        }
        if let Some(l) = &self.log {
            cfg.paths.log = Some(l.clone());
        }
        if cfg.paths.manifest.is_none() {
            return Err(CliError::Validation("no manifest given (--manifest or paths.manifest)".into()));
        }
        if cfg.paths.output.is_none() {
            return Err(CliError::Validation("no output checkpoint given (--output or paths.output)".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> CliResult<()> {
        let mut cfg = self.resolve()?;
        let mut trainer = match &self.resume {
            Some(p) => {
                let t = Trainer::resume(p).or_invalid()?;
                cfg.model = t.network.config().clone();
                cfg.train = t.config.clone();
                t
            }
            None => Trainer::new(&cfg.model, cfg.train.clone()).or_invalid()?,
        };
        let manifest_path = cfg.paths.manifest.clone().expect("checked in resolve");
        let output = cfg.paths.output.clone().expect("checked in resolve");
        let log_path = cfg.paths.log.clone().unwrap_or_else(|| with_suffix(&output, ".log.jsonl"));
        let manifest = DatasetManifest::read(&manifest_path)
            .or_invalid()?
            .resolved(manifest_path.parent().unwrap_or(Path::new("")));
        let samples = load_samples(&manifest, &cfg)?;

        for dir in [output.parent(), log_path.parent()].into_iter().flatten() {
            if !dir.as_os_str().is_empty() {
                create_dir(dir)?;
            }
        }
        if self.resume.is_none() && log_path.exists() {
            fs::remove_file(&log_path).map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
        }
        let net = &trainer.network;
        append_jsonl(
            &log_path,
            &json!({
                "event": "start",
                "variant": net.variant(),
                "parameters": net.param_count(),
                "cdn_parameters": net.cdn_param_count(),
                "een_parameters": net.een_param_count(),
                "fusion_parameters": net.fusion_param_count(),
                "samples": samples.len(),
                "start_epoch": trainer.next_epoch,
                "config": &cfg,
            }),
        )?;

        let save = |t: &Trainer, path: &Path| -> CliResult<()> {
            let mut ck = t.checkpoint()?;
            if let Some(serde_json::Value::Object(extra)) = ck.extra.as_mut() {
                extra.insert("canny".into(), serde_json::to_value(cfg.canny).map_err(|e| CliError::Runtime(e.to_string()))?);
            }
            ck.save(path)?;
            Ok(())
        };

        let started = Instant::now();
        let mut first_loss = None;
        let mut last_loss = None;
        while !trainer.is_finished() {
            let stats = match trainer.run_epoch(&samples) {
                Ok(s) => s,
                Err(e) => {
                    append_jsonl(&log_path, &json!({"event": "error", "message": e.to_string()}))?;
                    return Err(e.into());
                }
            };
            append_jsonl(&log_path, &json!({"event": "epoch", "stats": &stats}))?;
            first_loss.get_or_insert(stats.loss);
            last_loss = Some(stats.loss);
            if cfg.checkpoint_every > 0 && trainer.next_epoch % cfg.checkpoint_every == 0 && !trainer.is_finished() {
                save(&trainer, &periodic_path(&output, trainer.next_epoch))?;
            }
        }
        save(&trainer, &output)?;
        append_jsonl(
            &log_path,
            &json!({"event": "finish", "epochs": trainer.next_epoch, "final_loss": last_loss}),
        )?;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        eprintln!(
            "trained {} ({} parameters) for {} epochs in {:.1}s: loss {} -> {}; checkpoint {}",
            trainer.network.variant(),
            trainer.network.param_count(),
            trainer.next_epoch,
            started.elapsed().as_secs_f64(),
            fmt(first_loss),
            fmt(last_loss),
            output.display()
        );
        info!("log written to {}", log_path.display());
        Ok(())
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use epan::data::{
    align_pair, blur_by_averaging, blur_with_kernel, importance_filter, make_linear_kernel, nms, read_boxes,
    split_by_scenario, BoundingBox, DatasetManifest, ManifestRecord, Split, DEFAULT_IOU_THRESHOLD,
    DEFAULT_MIN_IMPORTANCE,
};
use epan::train::append_jsonl;
use epan::Image;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{create_dir, list_pngs, stem};
use crate::error::{CliError, CliResult, Validate};

/// Builds paired sharp/blurry images and a manifest under `--output`.
#[derive(Args, Debug)]
pub struct MakeDataset {
    #[command(subcommand)]
    pub mode: Mode,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Receives `sharp/`, `blurry/` and `manifest.jsonl`.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Share of scenarios assigned to the test split.
    #[arg(long, global = true, default_value_t = 0.25)]
    pub test_fraction: f64,
    /// Explicit test scenarios, overriding `--test-fraction`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub test_scenarios: Vec<String>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Mode {
    /// Convolves each sharp image with a linear motion kernel.
    Kernel {
        #[arg(long)]
        sharp: PathBuf,
        /// Number of samples along the motion path.
        #[arg(long)]
        length: usize,
        /// Motion direction in radians, counter-clockwise from +x.
        #[arg(long, default_value_t = 0.0)]
        angle: f64,
        /// Odd kernel side; defaults to the smallest odd size holding the path.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Averages each clip (one subdirectory of frames) into a blurry image
    /// paired with the clip's middle frame.
    Average {
        #[arg(long)]
        frames: PathBuf,
    },
    /// Crops detected boxes from sharp frames and finds the matching
    /// window in the corresponding blurry frame.
    Align {
        #[arg(long)]
        sharp: PathBuf,
        #[arg(long)]
        blurry: PathBuf,
        /// JSONL sidecar of detections, one box per line.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_IMPORTANCE)]
        min_importance: f64,
    },
}

/// Scenario of an image: the part of its name before the first `__`, so
/// `street__0001` and `street__0002` share the scenario `street`.
pub fn scenario_of(name: &str) -> String {
    name.split("__").next().unwrap_or(name).to_string()
}

/// Chooses the test scenarios: the explicit list if given, otherwise a
/// seeded shuffle of the sorted ids with `round(fraction · n)` of them,
/// at least one and leaving at least one for training.
pub fn test_scenarios(all: &BTreeSet<String>, common: &Common) -> CliResult<BTreeSet<String>> {
    if !common.test_scenarios.is_empty() {
        let chosen: BTreeSet<String> = common.test_scenarios.iter().cloned().collect();
        if let Some(s) = chosen.iter().find(|s| !all.contains(*s)) {
            return Err(CliError::Validation(format!("unknown test scenario {s:?}")));
        }
        return Ok(chosen);
    }
    if !(0.0..=1.0).contains(&common.test_fraction) {
        return Err(CliError::Validation(format!(
            "--test-fraction must lie in [0, 1], got {}",
            common.test_fraction
        )));
    }
    let n = all.len();
    if n < 2 {
        warn!("only {n} scenario; everything goes to the training split");
        return Ok(BTreeSet::new());
    }
    let k = ((common.test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<&String> = all.iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(common.seed));
    Ok(ids.into_iter().take(k).cloned().collect())
}

fn assign(records: Vec<ManifestRecord>, common: &Common) -> CliResult<DatasetManifest> {
    let manifest = DatasetManifest::new(records);
    let all: BTreeSet<String> = manifest.scenarios().into_iter().map(String::from).collect();
    let test = test_scenarios(&all, common)?;
    if test.is_empty() {
        return Ok(manifest);
    }
    let train: BTreeSet<String> = all.difference(&test).cloned().collect();
    if train.is_empty() {
        let records = manifest
            .records
            .into_iter()
            .map(|r| ManifestRecord { split: Split::Test, ..r })
            .collect();
        return Ok(DatasetManifest::new(records));
    }
    split_by_scenario(&manifest, &train).or_invalid()
}

fn require_dir(p: &Path) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} is not a directory", p.display())))
    }
}

struct Writer {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Writer {
    fn new(root: &Path) -> CliResult<Self> {
        create_dir(&root.join("sharp"))?;
        create_dir(&root.join("blurry"))?;
        Ok(Writer {
            root: root.to_path_buf(),
            records: Vec::new(),
        })
    }

    fn add(&mut self, name: &str, sharp: &Image, blurry: &Image) -> CliResult<()> {
        let rel_s = PathBuf::from("sharp").join(format!("{name}.png"));
        let rel_b = PathBuf::from("blurry").join(format!("{name}.png"));
        sharp.write_png(&self.root.join(&rel_s))?;
        blurry.write_png(&self.root.join(&rel_b))?;
        self.records.push(ManifestRecord {
            sharp_path: rel_s,
            blurry_path: rel_b,
            scenario_id: scenario_of(name),
            split: Split::Train,
        });
        Ok(())
    }

    fn finish(self, common: &Common) -> CliResult<DatasetManifest> {
        let manifest = assign(self.records, common)?;
        let path = self.root.join("manifest.jsonl");
        manifest.write(&path)?;
        eprintln!(
            "wrote {} pairs ({} train, {} test) to {}",
            manifest.records.len(),
            manifest.split(Split::Train).len(),
            manifest.split(Split::Test).len(),
            path.display()
        );
        Ok(manifest)
    }
}

fn odd_size(length: usize) -> usize {
    length | 1
}

impl MakeDataset {
    pub fn run(&self) -> CliResult<()> {
        let out = self
            .common
            .output
            .as_deref()
            .ok_or_else(|| CliError::Validation("--output is required".into()))?;
        if !self.common.test_scenarios.is_empty() && self.common.test_scenarios.iter().any(String::is_empty) {
            return Err(CliError::Validation("empty scenario id in --test-scenarios".into()));
        }
        match &self.mode {
            Mode::Kernel {
                sharp,
                length,
                angle,
                size,
            } => {
                require_dir(sharp)?;
                let kernel = make_linear_kernel(*length, *angle, size.unwrap_or(odd_size(*length))).or_invalid()?;
                let inputs = list_pngs(sharp)?;
                let mut w = Writer::new(out)?;
                for path in &inputs {
                    let img = Image::read_png(path)?;
                    w.add(&stem(path), &img, &blur_with_kernel(&img, &kernel))?;
                }
                w.finish(&self.common)?;
            }
            Mode::Average { frames } => {
                require_dir(frames)?;
                let mut clips: Vec<PathBuf> = fs::read_dir(frames)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", frames.display())))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_dir())
                    .collect();
                clips.sort();
                let mut w = Writer::new(out)?;
                for clip in &clips {
                    let paths = list_pngs(clip)?;
                    if paths.is_empty() {
                        continue;
                    }
                    let imgs = paths.iter().map(|p| Image::read_png(p)).collect::<epan::Result<Vec<_>>>()?;
                    let blurry = blur_by_averaging(&imgs)?;
                    let name = clip.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    w.add(&name, &imgs[imgs.len() / 2], &blurry)?;
                }
                w.finish(&self.common)?;
            }
            Mode::Align {
                sharp,
                blurry,
                boxes,
                iou,
                min_importance,
            } => {
                require_dir(sharp)?;
                require_dir(blurry)?;
                if !boxes.is_file() {
                    return Err(CliError::Validation(format!(
                        "align mode needs a boxes sidecar; {} does not exist",
                        boxes.display()
                    )));
                }
                let records = read_boxes(boxes).or_invalid()?;
                if !(*iou > 0.0 && *iou <= 1.0) {
                    return Err(CliError::Validation(format!("--iou must lie in (0, 1], got {iou}")));
                }
                let mut by_image: BTreeMap<&str, Vec<BoundingBox>> = BTreeMap::new();
                for r in &records {
                    by_image.entry(r.image.as_str()).or_default().push(r.bbox);
                }
                for name in by_image.keys() {
                    for dir in [sharp, blurry] {
                        if !dir.join(name).is_file() {
                            return Err(CliError::Validation(format!(
                                "{} named in the boxes sidecar is missing from {}",
                                name,
                                dir.display()
                            )));
                        }
                    }
                }
                let log = out.join("align.jsonl");
                let mut w = Writer::new(out)?;
                if log.exists() {
                    fs::remove_file(&log).map_err(|e| CliError::Runtime(format!("{}: {e}", log.display())))?;
                }
                for (name, boxes) in &by_image {
                    let s = Image::read_png(&sharp.join(name))?;
                    let b = Image::read_png(&blurry.join(name))?;
                    if !s.same_dims(&b) {
                        return Err(CliError::Runtime(format!(
                            "{name}: sharp frame {:?} and blurry frame {:?} differ in size",
                            s.dims(),
                            b.dims()
                        )));
                    }
                    let kept = nms(boxes, *iou)?;
                    let kept = importance_filter(&kept, s.width(), s.height(), *min_importance);
                    info!("{name}: {} boxes, {} kept", boxes.len(), kept.len());
                    let base = stem(Path::new(name));
                    for (k, bx) in kept.iter().enumerate() {
                        let bx = bx.clamp_to(s.width(), s.height())?;
                        let crop = s.crop(bx.y, bx.x, bx.h, bx.w)?;
                        let found = align_pair(&crop, &b, &bx)?;
                        let (x, y) = (bx.x as i64 + found.offset_x, bx.y as i64 + found.offset_y);
                        let window = b.crop(y as usize, x as usize, bx.h, bx.w)?;
                        append_jsonl(
                            &log,
                            &json!({"image": name, "box": bx, "offset_x": found.offset_x, "offset_y": found.offset_y, "psnr": found.psnr}),
                        )?;
                        w.add(&format!("{base}_{k:03}"), &crop, &window)?;
                    }
                }
                w.finish(&self.common)?;
            }
        }
        Ok(())
    }
}

//! Training loop: augmentation, per-epoch shuffling, Adam with a decaying
//! learning rate, checkpointing and resumption.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edge::{canny, CannyParams};
use crate::error::{Error, Result};
use crate::image::{EdgeMap, Image};
use crate::loss::{total_loss, LossWeights};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, Network};
use crate::tensor::{Adam, AdamParams, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_power: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip_prob: f64,
    pub rotate_prob: f64,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 1500,
            lr_start: 1e-3,
            lr_end: 1e-6,
            decay_power: 0.3,
            crop_h: 128,
            crop_w: 128,
            flip_prob: 0.5,
            rotate_prob: 0.5,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end < self.lr_start) {
            return Err(Error::Config(format!(
                "need 0 < lr_end < lr_start, got lr_start={} lr_end={}",
                self.lr_start, self.lr_end
            )));
        }
        if !(self.decay_power > 0.0) {
            return Err(Error::Config(format!("decay_power must be positive, got {}", self.decay_power)));
        }
        let d = model.spatial_divisor();
        if self.crop_h == 0 || self.crop_w == 0 || self.crop_h % d != 0 || self.crop_w % d != 0 {
            return Err(Error::Config(format!(
                "crop {}x{} must be a positive multiple of {d}",
                self.crop_h, self.crop_w
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("rotate_prob", self.rotate_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        TrainConfig::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `lr_start · (lr_end / lr_start)^((epoch / epochs)^decay_power)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::Parameter(format!(
            "epoch {epoch} outside the schedule [0, {}]",
            config.epochs
        )));
    }
    if config.epochs == 0 {
        return Ok(config.lr_start);
    }
    let progress = (epoch as f64 / config.epochs as f64).powf(config.decay_power);
    Ok(config.lr_start * (config.lr_end / config.lr_start).powf(progress))
}

/// Blurry/sharp images with their edge maps, all sharing spatial extents.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub blurry: Image,
    pub sharp: Image,
    pub blurry_edges: EdgeMap,
    pub sharp_edges: EdgeMap,
}

impl TrainSample {
    pub fn new(blurry: Image, sharp: Image, blurry_edges: EdgeMap, sharp_edges: EdgeMap) -> Result<Self> {
        let (_, h, w) = blurry.dims();
        if !blurry.same_dims(&sharp) {
            return Err(Error::dim(format!("blurry {:?} vs sharp {:?}", blurry.dims(), sharp.dims())));
        }
        for (name, e) in [("blurry", &blurry_edges), ("sharp", &sharp_edges)] {
            if e.dims() != (1, h, w) {
                return Err(Error::dim(format!("{name} edge map {:?}, image {h}x{w}", e.dims())));
            }
        }
        Ok(TrainSample {
            blurry,
            sharp,
            blurry_edges,
            sharp_edges,
        })
    }

    /// Computes both edge maps once, on the full images.
    pub fn from_pair(blurry: Image, sharp: Image, canny_params: &CannyParams) -> Result<Self> {
        let mb = canny(&blurry, canny_params)?;
        let ms = canny(&sharp, canny_params)?;
        TrainSample::new(blurry, sharp, mb, ms)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.blurry.height(), self.blurry.width())
    }
}

/// One geometric transform: crop, then optional horizontal flip, then
/// counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub y0: usize,
    pub x0: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Non-square crops only rotate by 0° or 180° so the output keeps the
    /// crop's extents.
    pub fn draw(h: usize, w: usize, config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        if h < config.crop_h || w < config.crop_w {
            return Err(Error::Data(format!(
                "sample {h}x{w} is smaller than the {}x{} crop",
                config.crop_h, config.crop_w
            )));
        }
        let y0 = rng.random_range(0..=h - config.crop_h);
        let x0 = rng.random_range(0..=w - config.crop_w);
        let flip = rng.random::<f64>() < config.flip_prob;
        let rotate = rng.random::<f64>() < config.rotate_prob;
        let quarter_turns = match (rotate, config.crop_h == config.crop_w) {
            (false, _) => 0,
            (true, true) => rng.random_range(1..=3),
            (true, false) => 2,
        };
        Ok(Augmentation {
            y0,
            x0,
            crop_h: config.crop_h,
            crop_w: config.crop_w,
            flip,
            quarter_turns,
        })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = img.crop(self.y0, self.x0, self.crop_h, self.crop_w)?;
        if self.flip {
            out = out.flip_horizontal();
        }
        Ok(out.rotate90(self.quarter_turns))
    }

    pub fn apply_sample(&self, s: &TrainSample) -> Result<TrainSample> {
        Ok(TrainSample {
            blurry: self.apply(&s.blurry)?,
            sharp: self.apply(&s.sharp)?,
            blurry_edges: self.apply(&s.blurry_edges)?,
            sharp_edges: self.apply(&s.sharp_edges)?,
        })
    }
}

/// Draws one transform and applies it to all four planes of `sample`.
pub fn augment(sample: &TrainSample, config: &TrainConfig, rng: &mut impl Rng) -> Result<TrainSample> {
    let (h, w) = sample.dims();
    Augmentation::draw(h, w, config, rng)?.apply_sample(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub content_loss: f64,
    pub edge_loss: Option<f64>,
    pub batches: usize,
}

/// Stream of random draws for one epoch, independent of earlier epochs.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One pass over `dataset` in a freshly shuffled order, with learning rate
/// `lr_at(epoch)`.
pub fn train_epoch(
    network: &mut Network<f32>,
    optimizer: &mut Adam<f32>,
    dataset: &[TrainSample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let lr = lr_at(epoch, config)?;
    train_epoch_with_lr(network, optimizer, dataset, config, epoch, lr)
}

/// [`train_epoch`] with an explicit learning rate.
pub fn train_epoch_with_lr(
    network: &mut Network<f32>,
    optimizer: &mut Adam<f32>,
    dataset: &[TrainSample],
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let variant = network.variant();
    let (mut total, mut content, mut edge) = (0.0, 0.0, 0.0);
    let mut batches = 0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let samples = chunk
            .iter()
            .map(|&i| augment(&dataset[i], config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&TrainSample) -> &Image| Image::stack::<f32>(&samples.iter().map(f).collect::<Vec<_>>());
        let blurry = stack(|s| &s.blurry)?;
        let sharp = stack(|s| &s.sharp)?;
        let blurry_edges = stack(|s| &s.blurry_edges)?;
        let sharp_edges = stack(|s| &s.sharp_edges)?;

        let mut tape = Tape::new();
        let vars = network.bind(&mut tape, true);
        let x = tape.constant(blurry);
        let m = tape.constant(blurry_edges);
        let target = tape.constant(sharp);
        let out = network.forward(&mut tape, &vars, x, Some(m))?;
        let edges = variant.has_edge_branch().then_some(out.edges).flatten();
        let terms = total_loss(&mut tape, out.image, target, edges, &sharp_edges, &config.loss, variant)?;
        let value = tape.value(terms.total).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, batch {b}")));
        }
        tape.backward(terms.total)?;
        network.accumulate_grads(&tape, &vars)?;
        optimizer.step(network.tensors_mut(), lr)?;
        network.zero_grad();

        total += value;
        content += tape.value(terms.content).data()[0] as f64;
        edge += terms.edge_branch.map_or(0.0, |e| tape.value(e).data()[0] as f64);
        batches += 1;
        debug!("epoch {epoch} batch {b}: loss {value:.6}");
    }
    let n = batches as f64;
    Ok(EpochStats {
        epoch,
        lr,
        loss: total / n,
        content_loss: content / n,
        edge_loss: variant.has_edge_branch().then_some(edge / n),
        batches,
    })
}

/// Stored in a checkpoint's `extra` field.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainState {
    train: TrainConfig,
}

/// Owns the network and optimizer across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Index of the next epoch to run.
    pub next_epoch: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate(model)?;
        let network = Network::build(model, config.seed)?;
        let optimizer = Adam::new(AdamParams::default(), network.params().iter().map(|p| &p.tensor));
        info!(
            "built {} network: {} parameters (cdn {}, een {}, fusion {})",
            model.variant,
            network.param_count(),
            network.cdn_param_count(),
            network.een_param_count(),
            network.fusion_param_count()
        );
        Ok(Trainer {
            network,
            optimizer,
            config,
            next_epoch: 0,
        })
    }

    /// Restores a run saved by [`Trainer::save`], continuing at the stored epoch.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::<f32>::load(path)?;
        let state: TrainState = ck
            .extra
            .clone()
            .ok_or_else(|| Error::Config(format!("{} holds no training state", path.display())))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Config(format!("training state: {e}"))))?;
        let (network, epoch, optimizer) = ck.into_network()?;
        let optimizer = optimizer.unwrap_or_else(|| Adam::new(AdamParams::default(), network.params().iter().map(|p| &p.tensor)));
        state.train.validate(network.config())?;
        Ok(Trainer {
            network,
            optimizer,
            config: state.train,
            next_epoch: epoch as usize,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    pub fn run_epoch(&mut self, dataset: &[TrainSample]) -> Result<EpochStats> {
        if self.is_finished() {
            return Err(Error::Contract(format!("all {} epochs already run", self.config.epochs)));
        }
        let stats = train_epoch(&mut self.network, &mut self.optimizer, dataset, &self.config, self.next_epoch)?;
        self.next_epoch += 1;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut ck = Checkpoint::from_network(&self.network, self.next_epoch as u64, Some(&self.optimizer));
        ck.extra = Some(serde_json::to_value(TrainState {
            train: self.config.clone(),
        })?);
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }
}

/// Appends one JSON line to `path`.
pub fn append_jsonl<S: Serialize>(path: &Path, record: &S) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

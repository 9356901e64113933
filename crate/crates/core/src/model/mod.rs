//! The dual-branch deblurring network.
//!
//! The content branch (CDN) is a U-shaped encoder–decoder over the RGB
//! input. The optional edge branch (EEN) has the same topology on the
//! single-channel blurry edge map at a quarter of the width. The CDN adds its
//! output to the blurry input and clamps; the EEN squashes its output with a
//! sigmoid. Every decoder convolution of the CDN is followed by a fusion with
//! the EEN feature taken at the same decoder position.

pub mod checkpoint;
pub mod fusion;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use fusion::{attention_mask, attentive_fuse, fuse, FuseParams, FusionMode};

use crate::error::{Error, Result};
use crate::image::{EdgeMap, Image};
use crate::tensor::{Real, Tape, Tensor, Var};

/// The six ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single-branch baseline, plain MSE.
    Phi,
    PhiCat,
    PhiAdd,
    PhiAtt,
    /// Single branch trained with the edge-weighted loss.
    PhiEal,
    /// Both branches, attentive fusion, edge-weighted loss.
    Epan,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Phi,
        Variant::PhiCat,
        Variant::PhiAdd,
        Variant::PhiAtt,
        Variant::PhiEal,
        Variant::Epan,
    ];

    pub fn fusion(self) -> FusionMode {
        match self {
            Variant::Phi | Variant::PhiEal => FusionMode::None,
            Variant::PhiCat => FusionMode::Concat,
            Variant::PhiAdd => FusionMode::Add,
            Variant::PhiAtt | Variant::Epan => FusionMode::Attentive,
        }
    }

    pub fn has_edge_branch(self) -> bool {
        self.fusion() != FusionMode::None
    }

    /// Whether the content loss carries the edge-weighted term.
    pub fn uses_edge_guided_loss(self) -> bool {
        matches!(self, Variant::PhiEal | Variant::Epan)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Phi => "phi",
            Variant::PhiCat => "phi_cat",
            Variant::PhiAdd => "phi_add",
            Variant::PhiAtt => "phi_att",
            Variant::PhiEal => "phi_eal",
            Variant::Epan => "epan",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of phi, phi_cat, phi_add, phi_att, phi_eal, epan")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub levels: usize,
    pub cdn_base_channels: usize,
    pub een_channel_divisor: usize,
    pub convs_per_level: usize,
    pub kernel_size: usize,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Epan,
            levels: 3,
            cdn_base_channels: 32,
            een_channel_divisor: 4,
            convs_per_level: 2,
            kernel_size: 3,
            image_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.een_channel_divisor != 4 {
            return Err(Error::Config(format!(
                "een_channel_divisor is fixed at 4, got {}",
                self.een_channel_divisor
            )));
        }
        if self.cdn_base_channels == 0 || self.cdn_base_channels % self.een_channel_divisor != 0 {
            return Err(Error::Config(format!(
                "cdn_base_channels {} is not divisible by the edge-branch divisor {}",
                self.cdn_base_channels, self.een_channel_divisor
            )));
        }
        if self.convs_per_level == 0 {
            return Err(Error::Config("convs_per_level must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Content-branch channel width at encoder/decoder level `l`.
    pub fn cdn_channels(&self, level: usize) -> usize {
        self.cdn_base_channels << level
    }

    pub fn een_channels(&self, level: usize) -> usize {
        self.cdn_channels(level) / self.een_channel_divisor
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvRef {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderStage {
    level: usize,
    up: ConvRef,
    convs: Vec<ConvRef>,
}

#[derive(Clone, Debug)]
pub(crate) struct Branch {
    encoder: Vec<Vec<ConvRef>>,
    decoder: Vec<DecoderStage>,
    head: ConvRef,
}

/// Per-level channel widths and the convolution blocks built from them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchShape {
    pub encoder_channels: Vec<usize>,
    /// Output channels of every decoder convolution, deep to shallow.
    pub decoder_channels: Vec<usize>,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Deblurred image `I_D`, clamped to `[0, 1]`.
    pub image: Var,
    /// Enhanced edge map `M_E` (edge-branch variants only).
    pub edges: Option<Var>,
    /// Attention masks, one per fusion site, for attentive variants.
    pub masks: Vec<Var>,
    /// Last activation of every content encoder level, shallow to deep.
    pub encoder_features: Vec<Var>,
    /// Content decoder activations at each fusion site, before fusion.
    pub content_features: Vec<Var>,
    /// Edge decoder activations at each fusion site.
    pub edge_features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    cdn: Branch,
    een: Option<Branch>,
    /// One entry per content decoder convolution.
    sites: Vec<Option<ConvRef>>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so every parameter's initialization depends only on the seed
    // and its own name.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9E3779B97F4A7C15)
}

struct Builder<'a, T: Real> {
    params: &'a mut Vec<Param<T>>,
    seed: u64,
    kernel: usize,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> ConvRef {
        let fan_in = (in_c * k * k).max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let w: Vec<T> = (0..out_c * in_c * k * k)
            .map(|_| T::from_f64(normal.sample(&mut rng)))
            .collect();
        let weight = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            tensor: Tensor::from_parts(vec![out_c, in_c, k, k], w).with_grad(),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(&[out_c]).with_grad(),
        });
        ConvRef {
            weight,
            bias: weight + 1,
            stride,
            pad: k / 2,
        }
    }

    fn branch(&mut self, prefix: &str, cfg: &ModelConfig, io_channels: usize, width: impl Fn(usize) -> usize) -> Branch {
        let k = self.kernel;
        let mut encoder = Vec::new();
        for l in 0..cfg.levels {
            let mut stage = Vec::new();
            for j in 0..cfg.convs_per_level {
                let in_c = match (l, j) {
                    (0, 0) => io_channels,
                    (_, 0) => width(l - 1),
                    _ => width(l),
                };
                let stride = if j == 0 && l > 0 { 2 } else { 1 };
                stage.push(self.conv(&format!("{prefix}.enc{l}.conv{j}"), in_c, width(l), k, stride));
            }
            encoder.push(stage);
        }
        let mut decoder = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            let up = self.conv(&format!("{prefix}.dec{l}.up"), width(l + 1), width(l), k, 1);
            let convs = (0..cfg.convs_per_level)
                .map(|j| {
                    let in_c = if j == 0 { 2 * width(l) } else { width(l) };
                    self.conv(&format!("{prefix}.dec{l}.conv{j}"), in_c, width(l), k, 1)
                })
                .collect();
            decoder.push(DecoderStage { level: l, up, convs });
        }
        let head = self.conv(&format!("{prefix}.head"), width(0), io_channels, k, 1);
        Branch { encoder, decoder, head }
    }
}

impl Branch {
    fn decoder_sites(&self) -> impl Iterator<Item = (usize, ConvRef)> + '_ {
        self.decoder
            .iter()
            .flat_map(|s| std::iter::once((s.level, s.up)).chain(s.convs.iter().map(move |c| (s.level, *c))))
    }
}

impl<T: Real> Network<T> {
    /// Builds a freshly initialized network (He-normal weights, zero biases).
    ///
    /// Each parameter is drawn from a stream keyed by `seed` and its name,
    /// so parameters shared between variants start out identical.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut b = Builder {
            params: &mut params,
            seed,
            kernel: config.kernel_size,
        };
        let cdn = b.branch("cdn", config, config.image_channels, |l| config.cdn_channels(l));
        let mode = config.variant.fusion();
        let een = config
            .variant
            .has_edge_branch()
            .then(|| b.branch("een", config, 1, |l| config.een_channels(l)));

        let mut sites = Vec::new();
        for (i, (level, _)) in cdn.decoder_sites().enumerate() {
            let (c, e) = (config.cdn_channels(level), config.een_channels(level));
            let name = format!("fuse.site{i}");
            let site = match mode {
                FusionMode::None => None,
                FusionMode::Attentive => Some(b.conv(&format!("{name}.g"), e, 1, config.kernel_size, 1)),
                FusionMode::Concat => Some(b.conv(&format!("{name}.proj"), c + e, c, 1, 1)),
                FusionMode::Add => Some(b.conv(&format!("{name}.proj"), e, c, 1, 1)),
            };
            sites.push(site);
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Network {
            config: config.clone(),
            params,
            index,
            cdn,
            een,
            sites,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cdn_param_count(&self) -> usize {
        self.count_prefix("cdn.")
    }

    pub fn een_param_count(&self) -> usize {
        self.count_prefix("een.")
    }

    pub fn fusion_param_count(&self) -> usize {
        self.count_prefix("fuse.")
    }

    fn branch_shape(&self, branch: &Branch) -> BranchShape {
        let out = |c: &ConvRef| self.params[c.weight].tensor.shape()[0];
        BranchShape {
            encoder_channels: branch.encoder.iter().flat_map(|s| s.iter().map(out)).collect(),
            decoder_channels: branch.decoder_sites().map(|(_, c)| out(&c)).collect(),
        }
    }

    pub fn cdn_shape(&self) -> BranchShape {
        self.branch_shape(&self.cdn)
    }

    pub fn een_shape(&self) -> Option<BranchShape> {
        self.een.as_ref().map(|b| self.branch_shape(b))
    }

    pub fn fusion_sites(&self) -> usize {
        self.sites.len()
    }

    /// Zeroes both output heads. The content branch becomes the identity on
    /// inputs in `[0, 1]` and the edge branch outputs 0.5 everywhere.
    pub fn zero_heads(&mut self) {
        let heads: Vec<ConvRef> = std::iter::once(self.cdn.head).chain(self.een.as_ref().map(|b| b.head)).collect();
        for h in heads {
            for i in [h.weight, h.bias] {
                self.params[i].tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(&p.tensor)
                } else {
                    tape.constant(Tensor::from_parts(p.tensor.shape().to_vec(), p.tensor.data().to_vec()))
                }
            })
            .collect()
    }

    /// Adds the tape's leaf gradients into the parameter accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => p.tensor.accumulate_grad(&vec![T::zero(); p.tensor.numel()])?,
            }
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<T>, vars: &[Var], c: ConvRef, x: Var) -> Result<Var> {
        tape.conv2d(x, vars[c.weight], vars[c.bias], c.stride, c.pad)
    }

    /// Runs one branch. `fusion` supplies the edge features to inject after
    /// each decoder activation. Returns the head output, the post-activation
    /// decoder features and the last activation of every encoder level.
    fn run_branch(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        branch: &Branch,
        input: Var,
        fusion: Option<&[Var]>,
        masks: &mut Vec<Var>,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let mut skips = Vec::with_capacity(branch.encoder.len());
        let mut x = input;
        for stage in &branch.encoder {
            for &c in stage {
                let y = self.conv(tape, vars, c, x)?;
                x = tape.relu(y);
            }
            skips.push(x);
        }
        let mode = self.config.variant.fusion();
        let mut features = Vec::new();
        let mut site = 0;
        let mut fuse_here = |tape: &mut Tape<T>, x_c: Var, site: usize| -> Result<Var> {
            let Some(edge) = fusion else { return Ok(x_c) };
            let p = self.sites[site].map(|c| FuseParams {
                weight: vars[c.weight],
                bias: vars[c.bias],
            });
            if mode == FusionMode::Attentive {
                let p = p.ok_or_else(|| Error::Contract("attentive site without mapping".into()))?;
                let m = attention_mask(tape, edge[site], p)?;
                masks.push(m);
                fusion::check_spatial(tape, edge[site], x_c)?;
                return tape.mul(m, x_c);
            }
            fuse(tape, mode, Some(edge[site]), x_c, p)
        };
        for stage in &branch.decoder {
            let up = tape.upsample_nearest(x, 2)?;
            let y = self.conv(tape, vars, stage.up, up)?;
            let y = tape.relu(y);
            x = fuse_here(tape, y, site)?;
            features.push(y);
            site += 1;
            for (j, &c) in stage.convs.iter().enumerate() {
                let inp = if j == 0 {
                    tape.concat_channels(x, skips[stage.level])?
                } else {
                    x
                };
                let y = self.conv(tape, vars, c, inp)?;
                let y = tape.relu(y);
                x = fuse_here(tape, y, site)?;
                features.push(y);
                site += 1;
            }
        }
        let out = self.conv(tape, vars, branch.head, x)?;
        Ok((out, features, skips))
    }

    /// Forward pass on an existing tape.
    ///
    /// `blurry` is `n × C × H × W`; `edges` (`n × 1 × H × W`) is required for
    /// variants with an edge branch and ignored otherwise.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], blurry: Var, edges: Option<Var>) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract("parameters are not bound to this tape".into()));
        }
        let shape = tape.shape(blurry).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::dim(format!("input must be 4-D, got {shape:?}")));
        };
        if c != self.config.image_channels {
            return Err(Error::dim(format!(
                "input channel axis: model expects {} channels, got {c}",
                self.config.image_channels
            )));
        }
        let d = self.config.spatial_divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "input spatial axes {h}x{w} must be positive multiples of {d}"
            )));
        }
        let mut masks = Vec::new();
        let (edge_out, edge_feats) = match &self.een {
            Some(een) => {
                let m = edges.ok_or_else(|| {
                    Error::Contract(format!("variant {} needs a blurry edge map", self.config.variant))
                })?;
                if tape.shape(m) != [n, 1, h, w] {
                    return Err(Error::dim(format!(
                        "edge map must be {:?}, got {:?}",
                        [n, 1, h, w],
                        tape.shape(m)
                    )));
                }
                let (logits, feats, _) = self.run_branch(tape, vars, een, m, None, &mut masks)?;
                (Some(tape.sigmoid(logits)), feats)
            }
            None => (None, Vec::new()),
        };
        let fusion = edge_out.is_some().then_some(&edge_feats[..]);
        let (delta, content_feats, encoder_feats) = self.run_branch(tape, vars, &self.cdn, blurry, fusion, &mut masks)?;
        let sum = tape.add(blurry, delta)?;
        let image = tape.clamp(sum, 0.0, 1.0);
        Ok(ForwardOutput {
            image,
            edges: edge_out,
            masks,
            encoder_features: encoder_feats,
            content_features: content_feats,
            edge_features: edge_feats,
        })
    }

    /// Deblurs one image. Inputs whose extents are not multiples of the
    /// spatial divisor are reflect-padded and the result cropped back. The
    /// enhanced edge map is returned only for inspection.
    pub fn infer(&self, blurry: &Image, edges: &EdgeMap) -> Result<(Image, Option<EdgeMap>)> {
        let (_, h, w) = blurry.dims();
        if edges.dims() != (1, h, w) {
            return Err(Error::dim(format!(
                "edge map {:?} does not match image {:?}",
                edges.dims(),
                blurry.dims()
            )));
        }
        let d = self.config.spatial_divisor();
        let (pb, pe) = (blurry.pad_to_multiple(d), edges.pad_to_multiple(d));
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(pb.to_tensor());
        let m = tape.constant(pe.to_tensor());
        let out = self.forward(&mut tape, &vars, x, Some(m))?;
        let image = Image::unstack(tape.value(out.image))?.remove(0).crop(0, 0, h, w)?;
        let edges = match out.edges {
            Some(e) => Some(Image::unstack(tape.value(e))?.remove(0).crop(0, 0, h, w)?),
            None => None,
        };
        Ok((image, edges))
    }

    /// Replaces parameter values by name; names and shapes must match exactly.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            let p = &mut self.params[i];
            if p.tensor.shape() != t.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t.with_grad();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
            cdn: self.cdn.clone(),
            een: self.een.clone(),
            sites: self.sites.clone(),
        }
    }
}

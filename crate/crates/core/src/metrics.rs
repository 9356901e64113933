//! PSNR, SSIM and dataset evaluation reports.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ManifestRecord;
use crate::edge::{canny, to_grayscale, CannyParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Network;
use crate::tensor::Real;

/// Reported instead of +∞ when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::dim(format!("mse: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.data().len();
    if n == 0 {
        return Err(Error::dim("mse of empty images"));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// `10·log10(max² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Parameter(format!("psnr max_value must be positive, got {max_value}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

pub(crate) fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Parameter(format!("invalid ssim parameters {self:?}")));
        }
        Ok(())
    }
}

/// Filters a plane with the window over valid positions only.
fn window_filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over every valid window position, computed on
/// luminance.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    if !a.same_dims(b) {
        return Err(Error::dim(format!("ssim: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (h, w) = (a.height(), a.width());
    if h < params.window || w < params.window {
        return Err(Error::dim(format!(
            "ssim: image {h}x{w} smaller than the {0}x{0} window",
            params.window
        )));
    }
    let ga = to_grayscale(a)?;
    let gb = to_grayscale(b)?;
    let (pa, pb) = (ga.data(), gb.data());
    let taps = params.taps();
    let sq = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, _, _) = window_filter(pa, h, w, &taps);
    let (mu_b, _, _) = window_filter(pb, h, w, &taps);
    let (e_aa, _, _) = window_filter(&sq(pa, pa), h, w, &taps);
    let (e_bb, _, _) = window_filter(&sq(pb, pb), h, w, &taps);
    let (e_ab, _, _) = window_filter(&sq(pa, pb), h, w, &taps);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub sharp_path: PathBuf,
    pub blurry_path: PathBuf,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("empty dataset: nothing to evaluate".into()));
        }
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(EvalReport {
            count: per_image.len(),
            per_image,
            mean_psnr,
            mean_ssim,
        })
    }

    /// Per-image rows followed by the mean.
    pub fn to_table(&self) -> String {
        let names: Vec<String> = self.per_image.iter().map(|s| s.blurry_path.display().to_string()).collect();
        let width = names.iter().map(|n| n.len()).chain(["image".len(), "mean".len()]).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}", "image", "psnr_db", "ssim");
        for (name, s) in names.iter().zip(&self.per_image) {
            let _ = writeln!(out, "{name:<width$}  {:>9.4}  {:>7.4}", s.psnr, s.ssim);
        }
        let _ = writeln!(out, "{:<width$}  {:>9.4}  {:>7.4}", "mean", self.mean_psnr, self.mean_ssim);
        out
    }
}

/// Scores the deblurred output of `network` against the sharp reference for
/// every record. Edges are detected on the blurry input and the predicted
/// edge map is discarded. The output is quantized to 8 bits first, so the
/// scores describe the image `infer` would write. Paths are used as given.
pub fn evaluate<T: Real>(network: &Network<T>, records: &[&ManifestRecord], canny_params: &CannyParams) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("empty dataset: the split has no records".into()));
    }
    canny_params.validate()?;
    let missing: Vec<&Path> = records
        .iter()
        .flat_map(|r| [r.sharp_path.as_path(), r.blurry_path.as_path()])
        .filter(|p| !p.is_file())
        .collect();
    if let Some(first) = missing.first() {
        let list = missing.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
        return Err(Error::io(
            *first,
            io::Error::new(io::ErrorKind::NotFound, format!("missing files: {list}")),
        ));
    }
    let ssim_params = SsimParams::default();
    let scores = records
        .par_iter()
        .map(|r| {
            let sharp = Image::read_png(&r.sharp_path)?;
            let blurry = Image::read_png(&r.blurry_path)?;
            let edges = canny(&blurry, canny_params)?;
            let deblurred = network.infer(&blurry, &edges)?.0.quantized();
            Ok(ImageScore {
                sharp_path: r.sharp_path.clone(),
                blurry_path: r.blurry_path.clone(),
                psnr: psnr(&deblurred, &sharp, 1.0)?,
                ssim: ssim(&deblurred, &sharp, &ssim_params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(scores)
}

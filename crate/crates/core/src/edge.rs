//! Canny edge maps for the blurry input and the sharp target.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect, EdgeMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub gaussian_sigma: f64,
    /// Hysteresis thresholds on the max-normalized gradient magnitude.
    pub low_threshold: f64,
    pub high_threshold: f64,
    /// When set, the binary map is blurred with this sigma into a soft mask.
    pub soft_sigma: Option<f64>,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            gaussian_sigma: 1.4,
            low_threshold: 0.1,
            high_threshold: 0.2,
            soft_sigma: None,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Parameter(format!(
                "gaussian_sigma must be positive, got {}",
                self.gaussian_sigma
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.low_threshold) || !in_unit(self.high_threshold) {
            return Err(Error::Parameter("canny thresholds must lie in [0, 1]".into()));
        }
        if self.low_threshold >= self.high_threshold {
            return Err(Error::Parameter(format!(
                "low threshold {} must be below high threshold {}",
                self.low_threshold, self.high_threshold
            )));
        }
        if let Some(s) = self.soft_sigma {
            if !(s > 0.0) {
                return Err(Error::Parameter(format!("soft_sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Luminance (ITU-R 601 weights); single-channel images pass through.
pub fn to_grayscale(image: &Image) -> Result<Image> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => {
            let (h, w) = (image.height(), image.width());
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            let data = (0..h * w).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
            Image::new(1, h, w, data)
        }
        c => Err(Error::Parameter(format!("grayscale needs 1 or 3 channels, got {c}"))),
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur of every channel with reflective borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel(sigma)?;
    let r = (taps.len() / 2) as isize;
    let (c, h, w) = image.dims();
    let mut tmp = Image::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * image.get(ci, y, reflect(x as isize + k as isize - r, w)))
                    .sum();
                tmp.set(ci, y, x, s);
            }
        }
    }
    let mut out = Image::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp.get(ci, reflect(y as isize + k as isize - r, h), x))
                    .sum();
                out.set(ci, y, x, s);
            }
        }
    }
    Ok(out)
}

/// 3×3 Sobel response of a single-channel plane.
///
/// Returns the magnitude (divided by its maximum when that is positive) and
/// the orientation `atan2(gy, gx)` in radians; `gx` grows to the right and
/// `gy` downwards.
pub fn sobel_gradients(plane: &Image) -> Result<(Image, Image)> {
    if plane.channels() != 1 {
        return Err(Error::Parameter(format!(
            "sobel needs a single-channel plane, got {}",
            plane.channels()
        )));
    }
    let (h, w) = (plane.height(), plane.width());
    let at = |y: isize, x: isize| plane.get(0, reflect(y, h), reflect(x, w));
    let mut mag = Image::zeros(1, h, w);
    let mut ori = Image::zeros(1, h, w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag.set(0, y as usize, x as usize, gx.hypot(gy));
            ori.set(0, y as usize, x as usize, gy.atan2(gx));
        }
    }
    let max = mag.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    Ok((mag, ori))
}

/// Keeps pixels that are local maxima along their gradient direction,
/// quantized to 0°, 45°, 90° or 135°.
pub fn non_maximum_suppression(mag: &Image, ori: &Image) -> Image {
    let (h, w) = (mag.height(), mag.width());
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag.get(0, y as usize, x as usize)
        }
    };
    let mut out = Image::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let m = mag.get(0, y, x);
            if m <= 0.0 {
                continue;
            }
            let angle = ori.get(0, y, x).rem_euclid(PI);
            let bin = ((angle / (PI / 4.0)).round() as usize) % 4;
            let (dy, dx) = match bin {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let (yi, xi) = (y as isize, x as isize);
            let ahead = at(yi + dy, xi + dx);
            let behind = at(yi - dy, xi - dx);
            // Strict on one side so two-pixel plateaus thin to one pixel.
            if m > behind && m >= ahead {
                out.set(0, y, x, m);
            }
        }
    }
    out
}

/// Double threshold plus 8-connected hysteresis; returns a `{0, 1}` map.
pub fn hysteresis(strength: &Image, low: f64, high: f64) -> Image {
    let (h, w) = (strength.height(), strength.width());
    let mut out = Image::zeros(1, h, w);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if strength.get(0, y, x) >= high {
                out.set(0, y, x, 1.0);
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out.get(0, ny, nx) == 0.0 && strength.get(0, ny, nx) >= low {
                    out.set(0, ny, nx, 1.0);
                    queue.push_back((ny, nx));
                }
            }
        }
    }
    out
}

/// Full Canny pipeline. The result is binary unless `soft_sigma` is set.
pub fn canny(image: &Image, params: &CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let gray = to_grayscale(image)?;
    let smooth = gaussian_blur(&gray, params.gaussian_sigma)?;
    let (mag, ori) = sobel_gradients(&smooth)?;
    let thin = non_maximum_suppression(&mag, &ori);
    let edges = hysteresis(&thin, params.low_threshold, params.high_threshold);
    match params.soft_sigma {
        Some(s) => Ok(gaussian_blur(&edges, s)?.map(|v| v.clamp(0.0, 1.0))),
        None => Ok(edges),
    }
}

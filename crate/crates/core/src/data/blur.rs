//! Synthetic motion blur: kernel convolution and frame averaging.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{reflect, Image};

/// Square, non-negative kernel summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionKernel {
    size: usize,
    weights: Vec<f64>,
}

impl MotionKernel {
    /// Normalizes `weights` (row-major, `size × size`) to unit sum.
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Parameter(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::dim(format!(
                "kernel of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Parameter("kernel weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter("kernel weights sum to zero".into()));
        }
        Ok(MotionKernel {
            size,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        if let Some(c) = w.get_mut(size * size / 2) {
            *c = 1.0;
        }
        MotionKernel::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// A line segment of `length` unit-spaced samples through the kernel
/// centre at `angle` (radians, counter-clockwise from +x), each sample
/// bilinearly splatted onto the grid.
pub fn make_linear_kernel(length: usize, angle: f64, size: usize) -> Result<MotionKernel> {
    if size % 2 == 0 {
        return Err(Error::Parameter(format!("kernel size must be odd, got {size}")));
    }
    if length == 0 || length > size {
        return Err(Error::Parameter(format!("line length {length} must be in 1..={size}")));
    }
    if !angle.is_finite() {
        return Err(Error::Parameter("kernel angle must be finite".into()));
    }
    let theta = angle.rem_euclid(PI);
    let (dx, dy) = (snap(theta.cos()), snap(-theta.sin()));
    let c = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    for j in 0..length {
        let t = j as f64 - (length as f64 - 1.0) / 2.0;
        let (x, y) = (snap(c + t * dx), snap(c + t * dy));
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let wt = wx * wy;
                if wt == 0.0 {
                    continue;
                }
                let (yy, xx) = (y0 as usize + oy, x0 as usize + ox);
                if yy < size && xx < size {
                    w[yy * size + xx] += wt;
                }
            }
        }
    }
    MotionKernel::new(size, w)
}

/// 2-D convolution of every channel with `kernel`, reflecting at borders.
pub fn blur_with_kernel(sharp: &Image, kernel: &MotionKernel) -> Image {
    let (c, h, w) = sharp.dims();
    let k = kernel.size();
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c * h * w];
    out.par_chunks_mut(w.max(1)).enumerate().for_each(|(row, dst)| {
        let (ch, y) = (row / h, row % h);
        let plane = sharp.plane(ch);
        for (x, d) in dst.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..k {
                let sy = reflect(y as isize - (i as isize - r), h);
                for j in 0..k {
                    let kv = kernel.get(i, j);
                    if kv != 0.0 {
                        let sx = reflect(x as isize - (j as isize - r), w);
                        s += kv * plane[sy * w + sx];
                    }
                }
            }
            *d = s;
        }
    });
    Image::new(c, h, w, out).expect("dims preserved")
}

/// Pixelwise mean of a clip of frames.
pub fn blur_by_averaging(frames: &[Image]) -> Result<Image> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("averaging needs at least one frame".into()))?;
    let mut acc = vec![0.0; first.data().len()];
    for (i, f) in frames.iter().enumerate() {
        if !f.same_dims(first) {
            return Err(Error::dim(format!(
                "frame {i} is {:?}, frame 0 is {:?}",
                f.dims(),
                first.dims()
            )));
        }
        acc.iter_mut().zip(f.data()).for_each(|(a, v)| *a += v);
    }
    let n = frames.len() as f64;
    let (c, h, w) = first.dims();
    Image::new(c, h, w, acc.into_iter().map(|v| v / n).collect())
}

//! Translation search of a sharp crop inside a blurry frame.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr_from_mse;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub offset_x: i64,
    pub offset_y: i64,
    pub psnr: f64,
}

/// Window origins examined by [`align_pair`]: the box doubled in both
/// extents about its centre, clamped to the frame. Returns inclusive
/// `(x_min, x_max, y_min, y_max)`.
pub fn search_positions(frame_w: usize, frame_h: usize, b: &BoundingBox) -> Result<(usize, usize, usize, usize)> {
    let cx = 2 * b.x + b.w;
    let cy = 2 * b.y + b.h;
    // Doubled area spans [c - w, c + w] in half-pixel units.
    let x0 = cx.saturating_sub(2 * b.w) / 2;
    let y0 = cy.saturating_sub(2 * b.h) / 2;
    let x1 = ((cx + 2 * b.w) / 2).min(frame_w);
    let y1 = ((cy + 2 * b.h) / 2).min(frame_h);
    if x1 < x0 + b.w || y1 < y0 + b.h {
        return Err(Error::Geometry(format!(
            "search area [{x0}, {x1}) x [{y0}, {y1}) cannot hold a {}x{} window",
            b.w, b.h
        )));
    }
    Ok((x0, x1 - b.w, y0, y1 - b.h))
}

fn window_mse(crop: &Image, frame: &Image, px: usize, py: usize) -> f64 {
    let (c, h, w) = crop.dims();
    let fw = frame.width();
    let mut s = 0.0;
    for ch in 0..c {
        let fp = frame.plane(ch);
        let cp = crop.plane(ch);
        for y in 0..h {
            let row = &fp[(py + y) * fw + px..(py + y) * fw + px + w];
            for (a, b) in cp[y * w..(y + 1) * w].iter().zip(row) {
                s += (a - b) * (a - b);
            }
        }
    }
    s / (c * h * w) as f64
}

/// Ordering used for the argmax: higher PSNR, then smaller L1 offset, then
/// row-major position.
fn better(a: &(f64, i64, i64), b: &(f64, i64, i64)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| (b.1.abs() + b.2.abs()).cmp(&(a.1.abs() + a.2.abs())))
        .then_with(|| (b.2, b.1).cmp(&(a.2, a.1)))
}

/// Exhaustive stride-1 search for the window of `blurry_full` with the
/// highest PSNR against `sharp_crop`, over the doubled search area around
/// `init_box`.
pub fn align_pair(sharp_crop: &Image, blurry_full: &Image, init_box: &BoundingBox) -> Result<AlignmentResult> {
    init_box.validate()?;
    let (c, h, w) = sharp_crop.dims();
    if (h, w) != (init_box.h, init_box.w) {
        return Err(Error::dim(format!(
            "sharp crop is {h}x{w} but the box is {}x{}",
            init_box.h, init_box.w
        )));
    }
    if blurry_full.channels() != c {
        return Err(Error::dim(format!(
            "channel axis: crop has {c}, frame has {}",
            blurry_full.channels()
        )));
    }
    let (x0, x1, y0, y1) = search_positions(blurry_full.width(), blurry_full.height(), init_box)?;
    let (bx, by) = (init_box.x as i64, init_box.y as i64);
    let best = (y0..=y1)
        .into_par_iter()
        .map(|py| {
            (x0..=x1)
                .map(|px| {
                    let p = psnr_from_mse(window_mse(sharp_crop, blurry_full, px, py), 1.0);
                    (p, px as i64 - bx, py as i64 - by)
                })
                .max_by(better)
                .expect("non-empty row")
        })
        .max_by(better)
        .expect("non-empty search area");
    Ok(AlignmentResult {
        offset_x: best.1,
        offset_y: best.2,
        psnr: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_prefers_small_offsets() {
        let a = (10.0, 1, 0);
        let b = (10.0, 2, 0);
        assert_eq!(better(&a, &b), Ordering::Greater);
        // Same L1 distance: earlier row wins.
        let up = (10.0, 0, -1);
        let left = (10.0, -1, 0);
        assert_eq!(better(&up, &left), Ordering::Greater);
    }

    #[test]
    fn search_area_clamps() {
        let b = BoundingBox::new(0, 0, 4, 4, 1.0).unwrap();
        assert_eq!(search_positions(20, 20, &b).unwrap(), (0, 2, 0, 2));
        let b = BoundingBox::new(8, 8, 4, 4, 1.0).unwrap();
        assert_eq!(search_positions(20, 20, &b).unwrap(), (6, 10, 6, 10));
        assert!(search_positions(3, 20, &BoundingBox::new(0, 0, 4, 4, 1.0).unwrap()).is_err());
    }
}

//! Procedural sharp scenes for synthetic datasets and fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// A smooth background gradient overlaid with random axis-aligned
/// rectangles and discs, giving strong edges at many orientations.
pub fn random_scene(seed: u64, channels: usize, height: usize, width: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.2..0.8)).collect();
    let (gy, gx) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let mut img = Image::from_fn(channels, height, width, |c, y, x| {
        let v = base[c] + gy * (y as f64 / height as f64 - 0.5) + gx * (x as f64 / width as f64 - 0.5);
        v.clamp(0.0, 1.0)
    });
    let shapes = 4 + (height * width) / 512;
    for _ in 0..shapes {
        let colour: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(2.0..(height as f64 / 4.0).max(3.0));
        let rx = rng.random_range(2.0..(width as f64 / 4.0).max(3.0));
        let disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (c, v) in colour.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }
    img
}

//! Channel-major real-valued images and 8-bit PNG I/O.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Single-channel image holding an edge map (blurry, sharp or enhanced).
pub type EdgeMap = Image;

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Geometry(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Rotates counter-clockwise by `quarter_turns` × 90°.
    pub fn rotate90(&self, quarter_turns: u8) -> Image {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Image::from_fn(self.channels, w, h, |c, y, x| self.get(c, x, w - 1 - y)),
            2 => Image::from_fn(self.channels, h, w, |c, y, x| self.get(c, h - 1 - y, w - 1 - x)),
            _ => Image::from_fn(self.channels, w, h, |c, y, x| self.get(c, h - 1 - x, y)),
        }
    }

    /// Reflect-pads bottom/right so both extents become multiples of `divisor`.
    pub fn pad_to_multiple(&self, divisor: usize) -> Image {
        let ph = self.height.div_ceil(divisor) * divisor;
        let pw = self.width.div_ceil(divisor) * divisor;
        if (ph, pw) == (self.height, self.width) {
            return self.clone();
        }
        Image::from_fn(self.channels, ph, pw, |c, y, x| {
            self.get(c, reflect(y as isize, self.height), reflect(x as isize, self.width))
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Stacks same-sized images into an `n × c × h × w` tensor.
    pub fn stack<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty image list"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_dims(first) {
                return Err(Error::dim(format!(
                    "stack: image {:?} differs from {:?}",
                    im.dims(),
                    first.dims()
                )));
            }
            data.extend(im.data.iter().map(|&v| T::from_f64(v)));
        }
        Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Image::stack(&[self]).expect("single image always stacks")
    }

    /// Splits an `n × c × h × w` tensor back into images.
    pub fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4()?;
        let per = c * h * w;
        Ok((0..n)
            .map(|i| Image {
                channels: c,
                height: h,
                width: w,
                data: t.data()[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    /// Quantizes to 8 bits per sample, interleaved (gray or RGB).
    pub fn to_bytes8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Parameter(format!("cannot write a {c}-channel PNG"))),
        };
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Codec(e.to_string()))?;
            writer
                .write_image_data(&self.to_bytes8())
                .map_err(|e| Error::Codec(e.to_string()))?;
            writer.finish().map_err(|e| Error::Codec(e.to_string()))?;
        }
        Ok(buf)
    }

    /// Decodes an 8- or 16-bit PNG. Alpha is dropped; palettes are expanded.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let mut limits = png::Limits::default();
        limits.bytes = 256 << 20;
        let mut dec = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(|e| Error::Codec(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Codec("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Codec(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let (samples, keep) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            png::ColorType::Indexed => return Err(Error::Codec("unexpanded palette".into())),
        };
        let mut data = vec![0.0; keep * h * w];
        for y in 0..h {
            let row = &buf[y * info.line_size..y * info.line_size + w * samples];
            for x in 0..w {
                for c in 0..keep {
                    data[(c * h + y) * w + x] = row[x * samples + c] as f64 / 255.0;
                }
            }
        }
        Image::new(keep, h, w, data)
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_png(&bytes).map_err(|e| match e {
            Error::Codec(msg) => Error::Corrupt {
                path: path.to_path_buf(),
                reason: msg,
            },
            other => other,
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Snaps every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        self.map(|v| quantize(v) as f64 / 255.0)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

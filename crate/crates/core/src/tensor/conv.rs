//! im2col convolution kernels. Cross-correlation semantics, zero padding.

use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = input[..] else {
            return Err(Error::dim(format!("conv2d input must be 4-D, got {input:?}")));
        };
        let [o, wc, kh, kw] = weight[..] else {
            return Err(Error::dim(format!("conv2d weight must be 4-D, got {weight:?}")));
        };
        if wc != c {
            return Err(Error::dim(format!(
                "conv2d channel axis: input has {c} channels, weight expects {wc}"
            )));
        }
        if bias != [o] {
            return Err(Error::dim(format!(
                "conv2d bias axis: expected shape [{o}], got {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::dim("conv2d kernel has a zero extent"));
        }
        if h + 2 * pad < kh {
            return Err(Error::dim(format!(
                "conv2d height axis: padded height {} smaller than kernel {kh}",
                h + 2 * pad
            )));
        }
        if w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d width axis: padded width {} smaller than kernel {kw}",
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.ho, self.wo]
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kx`, i.e. those whose
/// input column lies inside the image.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let first = |ox: isize| ox * s + kx as isize - p;
    let mut lo = 0isize;
    while lo < g.wo as isize && first(lo) < 0 {
        lo += 1;
    }
    let mut hi = g.wo as isize;
    while hi > lo && first(hi - 1) >= g.w as isize {
        hi -= 1;
    }
    (lo as usize, hi as usize)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src_row[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let ix0 = lo * g.stride + kx - g.pad;
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (j, &v) in line.iter().enumerate() {
                        dst_row[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Blocked transpose of a row-major `rows × cols` matrix.
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * g.out_plane();
    let mut y = vec![T::zero(); g.n * out_len];
    if out_len == 0 {
        return y;
    }
    y.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len.max(1)))
        .for_each(|(y_n, x_n)| {
            let plane = g.out_plane();
            for (oc, chunk) in y_n.chunks_mut(plane).enumerate() {
                chunk.fill(bias[oc]);
            }
            let mut scratch;
            let col: &[T] = if g.is_pointwise() {
                x_n
            } else {
                scratch = vec![T::zero(); g.patch() * plane];
                im2col(x_n, g, &mut scratch);
                &scratch
            };
            T::gemm(
                g.o,
                g.patch(),
                plane,
                weight,
                g.patch() as isize,
                1,
                col,
                plane as isize,
                1,
                T::one(),
                y_n,
                plane as isize,
                1,
            );
        });
    y
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let in_len = g.c * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.o * plane;
    let patch = g.patch();

    let per_sample: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let x_n = &x[ni * in_len..(ni + 1) * in_len];
            let dy_n = &dy[ni * out_len..(ni + 1) * out_len];

            let db: Vec<T> = dy_n.chunks(plane.max(1)).map(|c| c.iter().copied().sum()).collect();

            let scratch;
            let col: &[T] = if g.is_pointwise() {
                x_n
            } else {
                let mut buf = vec![T::zero(); patch * plane];
                im2col(x_n, g, &mut buf);
                scratch = buf;
                &scratch
            };
            // dW = dY · colᵀ, with colᵀ materialized so both operands are
            // contiguous.
            let mut col_t = vec![T::zero(); plane * patch];
            transpose(col, patch, plane, &mut col_t);
            let mut dw = vec![T::zero(); g.o * patch];
            T::gemm(
                g.o,
                plane,
                patch,
                dy_n,
                plane as isize,
                1,
                &col_t,
                patch as isize,
                1,
                T::zero(),
                &mut dw,
                patch as isize,
                1,
            );

            let dx = need_input.then(|| {
                // dcol = Wᵀ · dY
                let mut dcol = vec![T::zero(); patch * plane];
                T::gemm(
                    patch,
                    g.o,
                    plane,
                    weight,
                    1,
                    patch as isize,
                    dy_n,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx_n = vec![T::zero(); in_len];
                    col2im(&dcol, g, &mut dx_n);
                    dx_n
                }
            });
            (dx, dw, db)
        })
        .collect();

    let mut weight_grad = vec![T::zero(); g.o * patch];
    let mut bias_grad = vec![T::zero(); g.o];
    let mut input_grad = need_input.then(|| Vec::with_capacity(g.n * in_len));
    // Sequential reduction keeps the summation order fixed.
    for (dx, dw, db) in per_sample {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

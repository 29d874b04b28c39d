//! Raw loops behind the tape ops. Every reduction runs in a fixed order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m,n] += a[m,k] * b[k,n]`, row-major.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
            pad_mode: PadMode::Zero,
        }
    }
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Source index for output position `o` and kernel tap `t`, or `None`
    /// when it lands in zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            match self.pad_mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

/// One sample `[C,H,W]` to columns `[C*k*k, oh*ow]`.
pub(crate) fn im2col<T: Real>(x: &[T], d: &ConvDims, g: &ConvGeom) -> Vec<T> {
    let (k, ohw) = (d.k, d.oh * d.ow);
    let mut cols = vec![T::zero(); d.c * k * k * ohw];
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ohw;
                for oy in 0..d.oh {
                    let Some(iy) = g.source(oy, ky, d.h) else {
                        continue;
                    };
                    for ox in 0..d.ow {
                        if let Some(ix) = g.source(ox, kx, d.w) {
                            cols[row + oy * d.ow + ox] = plane[iy * d.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
pub(crate) fn col2im<T: Real>(cols: &[T], d: &ConvDims, g: &ConvGeom, dx: &mut [T]) {
    let (k, ohw) = (d.k, d.oh * d.ow);
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ohw;
                for oy in 0..d.oh {
                    let Some(iy) = g.source(oy, ky, d.h) else {
                        continue;
                    };
                    for ox in 0..d.ow {
                        if let Some(ix) = g.source(ox, kx, d.w) {
                            let v = &mut plane[iy * d.w + ix];
                            *v = *v + cols[row + oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution without bias. `x: [N,C,H,W]`, `w: [O,C,k,k]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    o: usize,
    d: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let in_len = d.c * d.h * d.w;
    let out_len = o * d.oh * d.ow;
    let ckk = d.c * d.k * d.k;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each(|(s, out_s)| {
            let cols = im2col(&x[s * in_len..(s + 1) * in_len], d, g);
            gemm(o, ckk, d.oh * d.ow, w, &cols, out_s);
        });
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw)`; `dx` is skipped
/// when the input does not need it.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    o: usize,
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = d.c * d.h * d.w;
    let ohw = d.oh * d.ow;
    let out_len = o * ohw;
    let ckk = d.c * d.k * d.k;
    let wt = if want_dx {
        transpose(o, ckk, w)
    } else {
        Vec::new()
    };

    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let dy_s = &dy[s * out_len..(s + 1) * out_len];
            let dw_s = want_dw.then(|| {
                let cols = im2col(&x[s * in_len..(s + 1) * in_len], d, g);
                let cols_t = transpose(ckk, ohw, &cols);
                let mut dw = vec![T::zero(); o * ckk];
                gemm(o, ohw, ckk, dy_s, &cols_t, &mut dw);
                dw
            });
            let dx_s = want_dx.then(|| {
                let mut dcols = vec![T::zero(); ckk * ohw];
                gemm(ckk, o, ohw, &wt, dy_s, &mut dcols);
                let mut dx = vec![T::zero(); in_len];
                col2im(&dcols, d, g, &mut dx);
                dx
            });
            (dx_s, dw_s)
        })
        .collect();

    let mut dx = want_dx.then(|| Vec::with_capacity(n * in_len));
    let mut dw = want_dw.then(|| vec![T::zero(); o * ckk]);
    for (dx_s, dw_s) in per_sample {
        if let (Some(acc), Some(part)) = (dx.as_mut(), dx_s) {
            acc.extend_from_slice(&part);
        }
        if let (Some(acc), Some(part)) = (dw.as_mut(), dw_s) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a = *a + p;
            }
        }
    }
    (dx, dw)
}

/// Half-pixel-centred bilinear taps for resizing one axis.
pub(crate) fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

/// Adaptive pooling bin `[start, end)` for output index `o`.
pub(crate) fn adaptive_bin(o: usize, input: usize, output: usize) -> (usize, usize) {
    let start = o * input / output;
    let end = ((o + 1) * input).div_ceil(output);
    (start, end)
}

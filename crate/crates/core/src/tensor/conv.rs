//! 2-D convolution via im2col and GEMM.
//!
//! The patch matrix has one row per `(in_channel, ky, kx)` tap and one column
//! per output position, with each sample's columns contiguous. That lets both
//! the forward pass and the two backward GEMMs run per sample directly into
//! the destination buffer, so results are deterministic (fixed accumulation
//! order) on a single thread.

use super::Scalar;

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        (extent + 2 * padding)
            .checked_sub(k)
            .map(|v| v / stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn taps(&self) -> usize {
        self.ic * self.k * self.k
    }
}

/// Scatter input patches into the `taps x (n*oh*ow)` column matrix.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims) -> Vec<S> {
    let cols = d.n * d.oh * d.ow;
    let mut col = vec![S::zero(); d.taps() * cols];
    for ni in 0..d.n {
        for ci in 0..d.ic {
            let plane = &x[(ni * d.ic + ci) * d.h * d.w..(ni * d.ic + ci + 1) * d.h * d.w];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let row = (ci * d.k + ky) * d.k + kx;
                    let (ox_lo, ox_hi) = tap_range(d.w, d.ow, kx, d.stride, d.padding);
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let src = iy as usize * d.w;
                        let dst = row * cols + (ni * d.oh + oy) * d.ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * d.stride + kx - d.padding;
                            col[dst + ox] = plane[src + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulate column-matrix gradients back onto the
/// input plane.
fn col2im<S: Scalar>(gcol: &[S], d: &ConvDims) -> Vec<S> {
    let cols = d.n * d.oh * d.ow;
    let mut gx = vec![S::zero(); d.n * d.ic * d.h * d.w];
    for ni in 0..d.n {
        for ci in 0..d.ic {
            let base = (ni * d.ic + ci) * d.h * d.w;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let row = (ci * d.k + ky) * d.k + kx;
                    let (ox_lo, ox_hi) = tap_range(d.w, d.ow, kx, d.stride, d.padding);
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let dst = base + iy as usize * d.w;
                        let src = row * cols + (ni * d.oh + oy) * d.ow;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * d.stride + kx - d.padding;
                            gx[dst + ix] += gcol[src + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Output columns `ox` for which `ox*stride + kx - padding` lands inside
/// `[0, w)`.
fn tap_range(w: usize, ow: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let hi_in = w + padding;
    let hi = if hi_in > kx {
        ((hi_in - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, d: &ConvDims) -> Vec<S> {
    let ohw = d.oh * d.ow;
    let taps = d.taps();
    let mut out = vec![S::zero(); d.n * d.oc * ohw];
    let cols = d.n * ohw;
    let col_storage;
    let (col, rsb): (&[S], usize) = if d.is_pointwise() {
        (x, d.h * d.w) // each sample of x is already [ic][h*w]
    } else {
        col_storage = im2col(x, d);
        (&col_storage, cols)
    };
    for ni in 0..d.n {
        let b_off = if d.is_pointwise() {
            ni * d.ic * ohw
        } else {
            ni * ohw
        };
        unsafe {
            S::gemm(
                d.oc,
                taps,
                ohw,
                S::one(),
                w.as_ptr(),
                taps as isize,
                1,
                col.as_ptr().add(b_off),
                rsb as isize,
                1,
                S::zero(),
                out.as_mut_ptr().add(ni * d.oc * ohw),
                ohw as isize,
                1,
            );
        }
    }
    if let Some(bias) = b {
        for ni in 0..d.n {
            for oc in 0..d.oc {
                let base = (ni * d.oc + oc) * ohw;
                let bv = bias[oc];
                for v in &mut out[base..base + ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input<S: Scalar>(gout: &[S], w: &[S], d: &ConvDims) -> Vec<S> {
    let ohw = d.oh * d.ow;
    let taps = d.taps();
    let cols = d.n * ohw;
    if d.is_pointwise() {
        let mut gx = vec![S::zero(); d.n * d.ic * d.h * d.w];
        for ni in 0..d.n {
            unsafe {
                S::gemm(
                    taps,
                    d.oc,
                    ohw,
                    S::one(),
                    w.as_ptr(),
                    1,
                    taps as isize,
                    gout.as_ptr().add(ni * d.oc * ohw),
                    ohw as isize,
                    1,
                    S::zero(),
                    gx.as_mut_ptr().add(ni * taps * ohw),
                    ohw as isize,
                    1,
                );
            }
        }
        return gx;
    }
    let mut gcol = vec![S::zero(); taps * cols];
    for ni in 0..d.n {
        unsafe {
            S::gemm(
                taps,
                d.oc,
                ohw,
                S::one(),
                w.as_ptr(),
                1,
                taps as isize,
                gout.as_ptr().add(ni * d.oc * ohw),
                ohw as isize,
                1,
                S::zero(),
                gcol.as_mut_ptr().add(ni * ohw),
                cols as isize,
                1,
            );
        }
    }
    col2im(&gcol, d)
}

pub(crate) fn conv2d_grad_weight<S: Scalar>(gout: &[S], x: &[S], d: &ConvDims) -> Vec<S> {
    let ohw = d.oh * d.ow;
    let taps = d.taps();
    let cols = d.n * ohw;
    let mut gw = vec![S::zero(); d.oc * taps];
    let col_storage;
    let (col, rsb): (&[S], usize) = if d.is_pointwise() {
        (x, d.h * d.w)
    } else {
        col_storage = im2col(x, d);
        (&col_storage, cols)
    };
    for ni in 0..d.n {
        let b_off = if d.is_pointwise() {
            ni * d.ic * ohw
        } else {
            ni * ohw
        };
        unsafe {
            S::gemm(
                d.oc,
                ohw,
                taps,
                S::one(),
                gout.as_ptr().add(ni * d.oc * ohw),
                ohw as isize,
                1,
                col.as_ptr().add(b_off),
                1,
                rsb as isize,
                S::one(),
                gw.as_mut_ptr(),
                taps as isize,
                1,
            );
        }
    }
    gw
}

pub(crate) fn conv2d_grad_bias<S: Scalar>(gout: &[S], d: &ConvDims) -> Vec<S> {
    let ohw = d.oh * d.ow;
    let mut gb = vec![S::zero(); d.oc];
    for ni in 0..d.n {
        for oc in 0..d.oc {
            let base = (ni * d.oc + oc) * ohw;
            let mut acc = 0.0f64;
            for &v in &gout[base..base + ohw] {
                acc += v.as_f64();
            }
            gb[oc] += S::from_f64(acc);
        }
    }
    gb
}

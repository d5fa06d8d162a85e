//! Shape-rearranging and sampling kernels shared by forward ops and their
//! adjoints. All buffers are dense NCHW, row-major.

use super::Scalar;

/// `out[n][g][y*r+dy][x*r+dx] = x[n][g*r*r + dy*r + dx][y][x]`
pub(crate) fn pixel_shuffle<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<S> {
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![S::zero(); n * co * ho * wo];
    for ni in 0..n {
        for g in 0..co {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = g * r * r + dy * r + dx;
                    let src = ((ni * c + ci) * h) * w;
                    for y in 0..h {
                        let dst = ((ni * co + g) * ho + (y * r + dy)) * wo + dx;
                        for xx in 0..w {
                            out[dst + xx * r] = x[src + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`pixel_shuffle`]; also its adjoint, since the map is a
/// permutation.
pub(crate) fn pixel_unshuffle<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<S> {
    let co = c * r * r;
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![S::zero(); n * co * ho * wo];
    for ni in 0..n {
        for g in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = g * r * r + dy * r + dx;
                    let dst = ((ni * co + ci) * ho) * wo;
                    for y in 0..ho {
                        let src = ((ni * c + g) * h + (y * r + dy)) * wo * r + dx;
                        for xx in 0..wo {
                            out[dst + y * wo + xx] = x[src + xx * r];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[n,c,h,w] -> [n,1,h*w,c]`: one row per pixel, one column per channel.
pub(crate) fn channels_to_cols<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * hw;
            let dst = ni * hw * c + ci;
            for p in 0..hw {
                out[dst + p * c] = x[src + p];
            }
        }
    }
    out
}

/// Inverse (and adjoint) of [`channels_to_cols`].
pub(crate) fn cols_to_channels<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = ni * hw * c + ci;
            let dst = (ni * c + ci) * hw;
            for p in 0..hw {
                out[dst + p] = x[src + p * c];
            }
        }
    }
    out
}

pub(crate) fn slice_channels<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    start: usize,
    end: usize,
) -> Vec<S> {
    let cs = end - start;
    let mut out = Vec::with_capacity(n * cs * hw);
    for ni in 0..n {
        let base = (ni * c + start) * hw;
        out.extend_from_slice(&x[base..base + cs * hw]);
    }
    out
}

/// Adjoint of [`slice_channels`]: add `g` into the `[start, end)` channel band
/// of a zeroed full-size buffer.
pub(crate) fn embed_channels<S: Scalar>(
    g: &[S],
    n: usize,
    c: usize,
    hw: usize,
    start: usize,
    end: usize,
) -> Vec<S> {
    let cs = end - start;
    let mut out = vec![S::zero(); n * c * hw];
    for ni in 0..n {
        let dst = (ni * c + start) * hw;
        out[dst..dst + cs * hw].copy_from_slice(&g[ni * cs * hw..(ni + 1) * cs * hw]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn slice_spatial<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    sh: usize,
    sw: usize,
) -> Vec<S> {
    let mut out = Vec::with_capacity(n * c * sh * sw);
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c + ci) * h + y0) * w + x0;
            for y in 0..sh {
                out.extend_from_slice(&x[base + y * w..base + y * w + sw]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn embed_spatial<S: Scalar>(
    g: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    sh: usize,
    sw: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); n * c * h * w];
    let mut src = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c + ci) * h + y0) * w + x0;
            for y in 0..sh {
                out[base + y * w..base + y * w + sw].copy_from_slice(&g[src..src + sw]);
                src += sw;
            }
        }
    }
    out
}

/// Mean over the spatial extent: `[n,c,h,w] -> [n,c,1,1]`.
pub(crate) fn spatial_mean<S: Scalar>(x: &[S], nc: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); nc];
    for i in 0..nc {
        let mut acc = 0.0f64;
        for &v in &x[i * hw..(i + 1) * hw] {
            acc += v.as_f64();
        }
        out[i] = S::from_f64(acc / hw as f64);
    }
    out
}

/// Bilinear upsampling by an integer factor, half-pixel centers, edges
/// clamped.
pub(crate) fn bilinear_up<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<S> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![S::zero(); n * c * ho * wo];
    let taps_y = bilinear_taps(h, r);
    let taps_x = bilinear_taps(w, r);
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for yo in 0..ho {
            let (y0, y1, fy) = taps_y[yo];
            for xo in 0..wo {
                let (x0, x1, fx) = taps_x[xo];
                let a = src[y0 * w + x0].as_f64();
                let b = src[y0 * w + x1].as_f64();
                let c2 = src[y1 * w + x0].as_f64();
                let d = src[y1 * w + x1].as_f64();
                let top = a + fx * (b - a);
                let bot = c2 + fx * (d - c2);
                dst[yo * wo + xo] = S::from_f64(top + fy * (bot - top));
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_up`]: scatter output gradients back through the same
/// interpolation weights.
pub(crate) fn bilinear_up_adjoint<S: Scalar>(
    g: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> Vec<S> {
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![S::zero(); n * c * h * w];
    let taps_y = bilinear_taps(h, r);
    let taps_x = bilinear_taps(w, r);
    for nc in 0..n * c {
        let src = &g[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        for yo in 0..ho {
            let (y0, y1, fy) = taps_y[yo];
            for xo in 0..wo {
                let (x0, x1, fx) = taps_x[xo];
                let gv = src[yo * wo + xo].as_f64();
                dst[y0 * w + x0] += S::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                dst[y0 * w + x1] += S::from_f64(gv * (1.0 - fy) * fx);
                dst[y1 * w + x0] += S::from_f64(gv * fy * (1.0 - fx));
                dst[y1 * w + x1] += S::from_f64(gv * fy * fx);
            }
        }
    }
    out
}

fn bilinear_taps(extent: usize, r: usize) -> Vec<(usize, usize, f64)> {
    (0..extent * r)
        .map(|o| {
            let pos = (o as f64 + 0.5) / r as f64 - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let i0 = (lo.max(0.0) as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            if lo < 0.0 {
                (i0, i1, 0.0)
            } else {
                (i0, i1, frac)
            }
        })
        .collect()
}

/// Normalized 1-D Gaussian profile of length `win`. The 2-D window is its
/// outer product, which lets the window mean run as two separable passes.
pub(crate) fn gaussian_window<S: Scalar>(win: usize, sigma: f64) -> Vec<S> {
    let half = (win / 2) as f64;
    let mut w = vec![0.0f64; win];
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * sigma * sigma)).exp();
        total += *v;
    }
    w.iter().map(|&v| S::from_f64(v / total)).collect()
}

/// Weighted mean over every fully-contained `win x win` window:
/// `[n,c,h,w] -> [n,c,h-win+1,w-win+1]`, with the window the outer product
/// of the 1-D `profile`. Runs as a horizontal then a vertical pass.
pub(crate) fn window_mean<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    profile: &[S],
) -> Vec<S> {
    let (ho, wo) = (h - win + 1, w - win + 1);
    let mut out = vec![S::zero(); n * c * ho * wo];
    let mut tmp = vec![0.0f64; h * wo];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for y in 0..h {
            for xo in 0..wo {
                let mut acc = 0.0f64;
                for (kx, p) in profile.iter().enumerate() {
                    acc += p.as_f64() * src[y * w + xo + kx].as_f64();
                }
                tmp[y * wo + xo] = acc;
            }
        }
        for yo in 0..ho {
            for xo in 0..wo {
                let mut acc = 0.0f64;
                for (ky, p) in profile.iter().enumerate() {
                    acc += p.as_f64() * tmp[(yo + ky) * wo + xo];
                }
                dst[yo * wo + xo] = S::from_f64(acc);
            }
        }
    }
    out
}

/// Adjoint of [`window_mean`]: the same separable passes transposed.
pub(crate) fn window_mean_adjoint<S: Scalar>(
    g: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    profile: &[S],
) -> Vec<S> {
    let (ho, wo) = (h - win + 1, w - win + 1);
    let mut out = vec![S::zero(); n * c * h * w];
    let mut tmp = vec![0.0f64; h * wo];
    for nc in 0..n * c {
        let src = &g[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for yo in 0..ho {
            for xo in 0..wo {
                let gv = src[yo * wo + xo].as_f64();
                for (ky, p) in profile.iter().enumerate() {
                    tmp[(yo + ky) * wo + xo] += p.as_f64() * gv;
                }
            }
        }
        for y in 0..h {
            for xo in 0..wo {
                let tv = tmp[y * wo + xo];
                for (kx, p) in profile.iter().enumerate() {
                    dst[y * w + xo + kx] += S::from_f64(p.as_f64() * tv);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_shuffle_matches_index_map() {
        // 1x4x2x2 -> 1x1x4x4 with r=2; input channel k holds constant k.
        let x: Vec<f32> = (0..4).flat_map(|k| vec![k as f32; 4]).collect();
        let out = pixel_shuffle(&x, 1, 4, 2, 2, 2);
        for y in 0..4 {
            for xx in 0..4 {
                let expect = ((y % 2) * 2 + (xx % 2)) as f32;
                assert_eq!(out[y * 4 + xx], expect);
            }
        }
    }

    #[test]
    fn shuffle_then_unshuffle_roundtrips() {
        let x: Vec<f64> = (0..2 * 8 * 3 * 5).map(|i| i as f64).collect();
        let s = pixel_shuffle(&x, 2, 8, 3, 5, 2);
        let back = pixel_unshuffle(&s, 2, 2, 6, 10, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn cols_roundtrip() {
        let x: Vec<f64> = (0..3 * 5 * 4).map(|i| i as f64 * 0.5).collect();
        let m = channels_to_cols(&x, 3, 5, 4);
        assert_eq!(m[0 + 1], x[4]); // row 0 (pixel 0), col 1 = channel 1
        let back = cols_to_channels(&m, 3, 5, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn slice_and_embed_channels_are_adjoint_permutations() {
        let x: Vec<f64> = (0..2 * 6 * 4).map(|i| i as f64).collect();
        let s = slice_channels(&x, 2, 6, 4, 1, 4);
        assert_eq!(s.len(), 2 * 3 * 4);
        assert_eq!(s[0], x[4]);
        let e = embed_channels(&s, 2, 6, 4, 1, 4);
        let dot_full: f64 = e.iter().zip(&x).map(|(a, b)| a * b).sum();
        let dot_slice: f64 = s.iter().map(|v| v * v).sum();
        assert_eq!(dot_full, dot_slice);
    }

    #[test]
    fn spatial_slice_extracts_window() {
        let x: Vec<f64> = (0..1 * 1 * 4 * 4).map(|i| i as f64).collect();
        let s = slice_spatial(&x, 1, 1, 4, 4, 1, 2, 2, 2);
        assert_eq!(s, vec![6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn bilinear_up_preserves_constants_and_means() {
        let x = vec![3.25f64; 1 * 1 * 3 * 3];
        let up = bilinear_up(&x, 1, 1, 3, 3, 4);
        assert!(up.iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn bilinear_adjoint_is_transpose() {
        // <up(x), g> must equal <x, up^T(g)> for the map to be a true adjoint.
        let x: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..36).map(|i| (i as f64 * 0.7).cos()).collect();
        let up = bilinear_up(&x, 1, 1, 3, 3, 2);
        let gt = bilinear_up_adjoint(&g, 1, 1, 3, 3, 2);
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gaussian_window_sums_to_one_and_is_symmetric() {
        let w: Vec<f64> = gaussian_window(11, 1.5);
        assert_eq!(w.len(), 11);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for i in 0..11 {
            assert!((w[i] - w[10 - i]).abs() < 1e-15);
        }
        assert!((w[5] - w.iter().cloned().fold(0.0, f64::max)).abs() < 1e-15);
    }

    #[test]
    fn window_mean_of_constant_is_constant() {
        let wgt: Vec<f64> = gaussian_window(3, 1.0);
        let x = vec![2.0f64; 5 * 5];
        let m = window_mean(&x, 1, 1, 5, 5, 3, &wgt);
        assert_eq!(m.len(), 9);
        assert!(m.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn window_mean_adjoint_is_transpose() {
        let wgt: Vec<f64> = gaussian_window(3, 1.5);
        let x: Vec<f64> = (0..25).map(|i| (i as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..9).map(|i| (i as f64 * 1.1).cos()).collect();
        let m = window_mean(&x, 1, 1, 5, 5, 3, &wgt);
        let mt = window_mean_adjoint(&g, 1, 1, 5, 5, 3, &wgt);
        let lhs: f64 = m.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

//! Orthonormal 2-D Haar analysis/synthesis and the T/S/N sub-band regrouping.
//!
//! Coefficients use the orthonormal normalization `(±a±b±c±d)/2`, so analysis
//! and synthesis are transposes of each other, norms are preserved, and each
//! transform is the adjoint of the other in the autodiff graph.

use crate::tensor::{Op, Result, Scalar, Shape, Tensor, TensorError};

/// Total channel count of a 3-channel image after `level` Haar levels.
pub fn level_channels(level: usize) -> usize {
    3 * 4usize.pow(level as u32)
}

/// One Haar analysis level applied per channel.
///
/// Each non-overlapping 2x2 block `[[a,b],[c,d]]` produces
/// `LL=(a+b+c+d)/2`, `HL=(-a+b-c+d)/2`, `LH=(-a-b+c+d)/2`, `HH=(a-b-c+d)/2`;
/// output channels are ordered `[all LL, all HL, all LH, all HH]`, each group
/// preserving input channel order.
pub fn haar_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
        return Err(TensorError::BadArgument {
            op: "haar_forward",
            msg: format!("extents must be even, got {}x{}", s.h(), s.w()),
        });
    }
    let data = haar_forward_buf(&x.data(), s.n(), s.c(), s.h(), s.w());
    Ok(Tensor::from_op(
        Shape::nchw(s.n(), 4 * s.c(), s.h() / 2, s.w() / 2),
        data,
        Op::HaarForward(x.clone()),
    ))
}

/// Exact inverse of [`haar_forward`].
pub fn haar_inverse<S: Scalar>(y: &Tensor<S>) -> Result<Tensor<S>> {
    let s = y.shape();
    if !s.c().is_multiple_of(4) {
        return Err(TensorError::BadArgument {
            op: "haar_inverse",
            msg: format!("channels must be divisible by 4, got {}", s.c()),
        });
    }
    let data = haar_inverse_buf(&y.data(), s.n(), s.c(), s.h(), s.w());
    Ok(Tensor::from_op(
        Shape::nchw(s.n(), s.c() / 4, s.h() * 2, s.w() * 2),
        data,
        Op::HaarInverse(y.clone()),
    ))
}

pub(crate) fn haar_forward_buf<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let (oh, ow) = (h / 2, w / 2);
    let half = S::from_f64(0.5);
    let mut out = vec![S::zero(); n * 4 * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let ll = (ni * 4 * c + ci) * oh * ow;
            let hl = (ni * 4 * c + c + ci) * oh * ow;
            let lh = (ni * 4 * c + 2 * c + ci) * oh * ow;
            let hh = (ni * 4 * c + 3 * c + ci) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let a = src[(2 * oy) * w + 2 * ox];
                    let b = src[(2 * oy) * w + 2 * ox + 1];
                    let cc = src[(2 * oy + 1) * w + 2 * ox];
                    let d = src[(2 * oy + 1) * w + 2 * ox + 1];
                    let o = oy * ow + ox;
                    out[ll + o] = (a + b + cc + d) * half;
                    out[hl + o] = (b + d - a - cc) * half;
                    out[lh + o] = (cc + d - a - b) * half;
                    out[hh + o] = (a + d - b - cc) * half;
                }
            }
        }
    }
    out
}

pub(crate) fn haar_inverse_buf<S: Scalar>(
    y: &[S],
    n: usize,
    c4: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let c = c4 / 4;
    let (oh, ow) = (h * 2, w * 2);
    let half = S::from_f64(0.5);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let ll = &y[(ni * c4 + ci) * h * w..(ni * c4 + ci + 1) * h * w];
            let hl = &y[(ni * c4 + c + ci) * h * w..(ni * c4 + c + ci + 1) * h * w];
            let lh = &y[(ni * c4 + 2 * c + ci) * h * w..(ni * c4 + 2 * c + ci + 1) * h * w];
            let hh = &y[(ni * c4 + 3 * c + ci) * h * w..(ni * c4 + 3 * c + ci + 1) * h * w];
            let dst_base = (ni * c + ci) * oh * ow;
            for yy in 0..h {
                for xx in 0..w {
                    let o = yy * w + xx;
                    let (l, m, p, q) = (ll[o], hl[o], lh[o], hh[o]);
                    let dst = dst_base + (2 * yy) * ow + 2 * xx;
                    out[dst] = (l - m - p + q) * half;
                    out[dst + 1] = (l + m - p - q) * half;
                    out[dst + ow] = (l - m + p - q) * half;
                    out[dst + ow + 1] = (l + m + p + q) * half;
                }
            }
        }
    }
    out
}

/// The encoder's T/S/N decomposition at wavelet level `level`.
pub struct SubbandGroup<S: Scalar> {
    /// Thumbnail / low-signal channels (always 3).
    pub t: Tensor<S>,
    /// High-signal channels (always 3).
    pub s: Tensor<S>,
    /// Noise channels (`3·4^level − 6`).
    pub n: Tensor<S>,
    pub level: usize,
}

impl<S: Scalar> SubbandGroup<S> {
    /// Split an already-mixed `3·4^level`-channel tensor by index:
    /// `[0..3) = T`, `[3..6) = S`, `[6..) = N`.
    pub fn from_tensor(mixed: &Tensor<S>, level: usize) -> Result<Self> {
        let total = level_channels(level);
        if mixed.shape().c() != total {
            return Err(TensorError::BadArgument {
                op: "subband_group",
                msg: format!(
                    "expected {total} channels at level {level}, got {}",
                    mixed.shape().c()
                ),
            });
        }
        if total < 7 {
            return Err(TensorError::BadArgument {
                op: "subband_group",
                msg: format!("need at least 7 channels to split T/S/N, got {total}"),
            });
        }
        Ok(SubbandGroup {
            t: mixed.slice_channels(0, 3)?,
            s: mixed.slice_channels(3, 6)?,
            n: mixed.slice_channels(6, total)?,
            level,
        })
    }

    /// Rebuild the full-width tensor in the same `[T | S | N]` index order
    /// used by [`SubbandGroup::from_tensor`].
    pub fn concat(&self) -> Result<Tensor<S>> {
        Tensor::concat(&[&self.t, &self.s, &self.n])
    }
}

/// Learned 1x1 remix of the wavelet channels followed by the T/S/N index
/// split.
pub fn regroup<S: Scalar>(
    ht: &Tensor<S>,
    mixer_w: &Tensor<S>,
    mixer_b: &Tensor<S>,
    level: usize,
) -> Result<SubbandGroup<S>> {
    let mixed = ht.conv2d(mixer_w, Some(mixer_b), 1, 0)?;
    SubbandGroup::from_tensor(&mixed, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, grad_check};

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).max(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn known_block_values() {
        let x = Tensor::constant(Shape::nchw(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = haar_forward(&x).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 1.0, 2.0, 0.0]);
        let ones = Tensor::constant(Shape::nchw(1, 1, 2, 2), vec![1.0; 4]).unwrap();
        assert_eq!(
            haar_forward(&ones).unwrap().to_vec(),
            vec![2.0, 0.0, 0.0, 0.0]
        );
        let back = haar_inverse(&y).unwrap();
        assert_eq!(back.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matches_explicit_orthonormal_matrix() {
        // Rows of the 4x4 analysis matrix acting on (a, b, c, d).
        let m = [
            [0.5, 0.5, 0.5, 0.5],
            [-0.5, 0.5, -0.5, 0.5],
            [-0.5, -0.5, 0.5, 0.5],
            [0.5, -0.5, -0.5, 0.5],
        ];
        let vals = pseudo(4, 11);
        let x = Tensor::constant(Shape::nchw(1, 1, 2, 2), vals.clone()).unwrap();
        let y = haar_forward(&x).unwrap().to_vec();
        for (row, want) in m.iter().zip(&y) {
            let got: f64 = row.iter().zip(&vals).map(|(a, b)| a * b).sum();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_both_orders() {
        let x = Tensor::constant(Shape::nchw(2, 3, 8, 8), pseudo(2 * 3 * 64, 21)).unwrap();
        let rt = haar_inverse(&haar_forward(&x).unwrap()).unwrap();
        for (a, b) in rt.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        let y = Tensor::constant(Shape::nchw(1, 8, 4, 4), pseudo(8 * 16, 22)).unwrap();
        let rt2 = haar_forward(&haar_inverse(&y).unwrap()).unwrap();
        for (a, b) in rt2.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn preserves_energy() {
        let x = Tensor::constant(Shape::nchw(1, 3, 16, 16), pseudo(768, 33)).unwrap();
        let y = haar_forward(&x).unwrap();
        let nx: f64 = x.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - ny).abs() <= 1e-9 * nx);
    }

    #[test]
    fn zero_high_frequencies_reconstruct_block_constant_upsample() {
        // Only LL set: each 2x2 output block is the constant LL/2.
        let mut y = vec![0.0; 4 * 4];
        let y_ll = 3.0;
        for v in &mut y[0..4] {
            *v = y_ll;
        }
        let t = Tensor::constant(Shape::nchw(1, 4, 2, 2), y).unwrap();
        let x = haar_inverse(&t).unwrap().to_vec();
        for block in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            for dy in 0..2 {
                for dx in 0..2 {
                    assert_eq!(x[(block.0 + dy) * 4 + block.1 + dx], y_ll / 2.0);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_extents() {
        let odd = Tensor::<f32>::zeros(Shape::nchw(1, 3, 5, 4));
        assert!(haar_forward(&odd).is_err());
        let bad_c = Tensor::<f32>::zeros(Shape::nchw(1, 6, 4, 4));
        assert!(haar_inverse(&bad_c).is_err());
    }

    #[test]
    fn transforms_are_adjoint_in_the_graph() {
        let x = Tensor::variable(Shape::nchw(1, 2, 4, 4), pseudo(32, 44)).unwrap();
        let report = grad_check(
            &[("x", &x)],
            || {
                let y = haar_forward(&x)?;
                Ok(y.mul(&y)?.sum())
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        let y = Tensor::variable(Shape::nchw(1, 4, 2, 2), pseudo(16, 45)).unwrap();
        let report = grad_check(
            &[("y", &y)],
            || {
                let x = haar_inverse(&y)?;
                Ok(x.mul(&x)?.sum())
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn identity_mixer_regroup_splits_by_index() {
        let level = 1;
        let c = level_channels(level); // 12
        let x = Tensor::constant(Shape::nchw(1, 3, 8, 8), pseudo(192, 55)).unwrap();
        let ht = haar_forward(&x).unwrap();
        let mut wdata = vec![0.0; c * c];
        for o in 0..c {
            wdata[o * c + o] = 1.0;
        }
        let w = Tensor::constant(Shape::nchw(c, c, 1, 1), wdata).unwrap();
        let b = Tensor::zeros(Shape::nchw(1, c, 1, 1));
        let g = regroup(&ht, &w, &b, level).unwrap();
        assert_eq!(g.t.shape().c(), 3);
        assert_eq!(g.s.shape().c(), 3);
        assert_eq!(g.n.shape().c(), 6);
        // T must equal the three LL channels exactly.
        assert_eq!(g.t.to_vec(), ht.slice_channels(0, 3).unwrap().to_vec());
        let rebuilt = g.concat().unwrap();
        assert_eq!(rebuilt.to_vec(), ht.to_vec());
    }

    #[test]
    fn regroup_channel_counts_per_level() {
        for (level, expect_n) in [(1usize, 6usize), (2, 42)] {
            let c = level_channels(level);
            let ht = Tensor::<f32>::zeros(Shape::nchw(1, c, 4, 4));
            let w = Tensor::zeros(Shape::nchw(c, c, 1, 1));
            let b = Tensor::zeros(Shape::nchw(1, c, 1, 1));
            let g = regroup(&ht, &w, &b, level).unwrap();
            assert_eq!(g.n.shape().c(), expect_n);
        }
    }

    #[test]
    fn backward_through_roundtrip_is_identity_gradient() {
        let x = Tensor::variable(Shape::nchw(1, 1, 4, 4), pseudo(16, 66)).unwrap();
        let loss = haar_inverse(&haar_forward(&x).unwrap()).unwrap().sum();
        backward(&loss).unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }
}

//! Hierarchical training loss and evaluation metrics.
//!
//! The total objective is `L = L_t + α·L1(c) + β·L1(t) + L_G + L_S`: an RMS
//! thumbnail term against the box-averaged clean image, L1 terms on the
//! refined and thumbnail outputs, a forward-difference gradient term, and an
//! SSIM term. All losses are graph scalars so one backward pass covers the
//! whole objective.

use crate::network::{Ablations, ThunderOutputs};
use crate::tensor::{Result, Scalar, Shape, Tensor, TensorError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for unit dynamic range: (0.01)^2 and (0.03)^2.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// Weights on the two L1 terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.6,
            beta: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(TensorError::BadArgument {
                op: "loss_weights",
                msg: format!("weights must be non-negative, got {self:?}"),
            });
        }
        Ok(())
    }
}

/// Scalar graph nodes for the total loss and each component.
pub struct LossReport<S: Scalar> {
    pub total: Tensor<S>,
    pub l_t: Tensor<S>,
    pub l1_c: Tensor<S>,
    pub l1_t: Tensor<S>,
    pub l_g: Tensor<S>,
    pub l_s: Tensor<S>,
}

/// Plain numbers for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: f64,
    pub l_t: f64,
    pub l1_c: f64,
    pub l1_t: f64,
    pub l_g: f64,
    pub l_s: f64,
}

impl<S: Scalar> LossReport<S> {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            total: self.total.value()?.as_f64(),
            l_t: self.l_t.value()?.as_f64(),
            l1_c: self.l1_c.value()?.as_f64(),
            l1_t: self.l1_t.value()?.as_f64(),
            l_g: self.l_g.value()?.as_f64(),
            l_s: self.l_s.value()?.as_f64(),
        })
    }
}

/// Per-channel box average over non-overlapping `factor x factor` blocks,
/// as a stride-`factor` convolution with a fixed kernel.
pub fn box_downsample<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if factor == 0 || !s.h().is_multiple_of(factor) || !s.w().is_multiple_of(factor) {
        return Err(TensorError::BadArgument {
            op: "box_downsample",
            msg: format!("extents of {s} not divisible by {factor}"),
        });
    }
    let c = s.c();
    let inv = S::from_f64(1.0 / (factor * factor) as f64);
    let mut w = vec![S::zero(); c * c * factor * factor];
    for o in 0..c {
        for t in 0..factor * factor {
            w[(o * c + o) * factor * factor + t] = inv;
        }
    }
    let weight = Tensor::constant(Shape::nchw(c, c, factor, factor), w)?;
    x.conv2d(&weight, None, factor, 0)
}

/// RMS distance between the thumbnail and the `2^K` box average of the clean
/// image.
pub fn loss_thumbnail<S: Scalar>(t: &Tensor<S>, x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let xs = box_downsample(x, 1 << k)?;
    if xs.shape() != t.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_thumbnail",
            lhs: t.shape(),
            rhs: xs.shape(),
        });
    }
    let d = xs.sub(t)?;
    Ok(d.mul(&d)?.mean().sqrt())
}

/// Mean absolute difference.
pub fn loss_l1<S: Scalar>(i: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if i.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_l1",
            lhs: i.shape(),
            rhs: x.shape(),
        });
    }
    Ok(i.sub(x)?.abs().mean())
}

fn diff_x<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let s = t.shape();
    t.slice_spatial(0, 1, s.h(), s.w() - 1)?
        .sub(&t.slice_spatial(0, 0, s.h(), s.w() - 1)?)
}

fn diff_y<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let s = t.shape();
    t.slice_spatial(1, 0, s.h() - 1, s.w())?
        .sub(&t.slice_spatial(0, 0, s.h() - 1, s.w())?)
}

/// Orientation-aware term: mean absolute difference of forward-difference
/// gradients, summed over both orientations.
pub fn loss_gradient<S: Scalar>(i_c: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = i_c.shape();
    if s != x.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_gradient",
            lhs: s,
            rhs: x.shape(),
        });
    }
    if s.h() < 2 || s.w() < 2 {
        return Err(TensorError::BadArgument {
            op: "loss_gradient",
            msg: format!("extents of {s} too small for finite differences"),
        });
    }
    loss_l1(&diff_x(i_c)?, &diff_x(x)?)?.add(&loss_l1(&diff_y(i_c)?, &diff_y(x)?)?)
}

/// Mean SSIM over all valid 11x11 Gaussian windows (σ = 1.5), assuming unit
/// dynamic range.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mu_a = a.window_mean(SSIM_WINDOW, SSIM_SIGMA)?;
    let mu_b = b.window_mean(SSIM_WINDOW, SSIM_SIGMA)?;
    let var_a = a
        .mul(a)?
        .window_mean(SSIM_WINDOW, SSIM_SIGMA)?
        .sub(&mu_a.mul(&mu_a)?)?;
    let var_b = b
        .mul(b)?
        .window_mean(SSIM_WINDOW, SSIM_SIGMA)?
        .sub(&mu_b.mul(&mu_b)?)?;
    let cov = a
        .mul(b)?
        .window_mean(SSIM_WINDOW, SSIM_SIGMA)?
        .sub(&mu_a.mul(&mu_b)?)?;
    let c1 = S::from_f64(SSIM_C1);
    let c2 = S::from_f64(SSIM_C2);
    let num = mu_a
        .mul(&mu_b)?
        .scale(S::from_f64(2.0))
        .add_scalar(c1)
        .mul(&cov.scale(S::from_f64(2.0)).add_scalar(c2))?;
    let den = mu_a
        .mul(&mu_a)?
        .add(&mu_b.mul(&mu_b)?)?
        .add_scalar(c1)
        .mul(&var_a.add(&var_b)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean())
}

/// `1 − mean SSIM`.
pub fn loss_ssim<S: Scalar>(i_c: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(ssim(i_c, x)?.scale(S::from_f64(-1.0)).add_scalar(S::one()))
}

fn combine<S: Scalar>(
    l_t: &Tensor<S>,
    l1_c: &Tensor<S>,
    l1_t: &Tensor<S>,
    l_g: &Tensor<S>,
    l_s: &Tensor<S>,
    weights: LossWeights,
) -> Result<Tensor<S>> {
    l_t.add(&l1_c.scale(S::from_f64(weights.alpha)))?
        .add(&l1_t.scale(S::from_f64(weights.beta)))?
        .add(l_g)?
        .add(l_s)
}

/// The full objective. Under `no_thumbnail_loss` the `l_t` term is dropped
/// (reported as zero).
pub fn loss_total<S: Scalar>(
    outputs: &ThunderOutputs<S>,
    x: &Tensor<S>,
    weights: LossWeights,
    flags: Ablations,
) -> Result<LossReport<S>> {
    weights.validate()?;
    let ratio = x.shape().h() / outputs.t_k.shape().h().max(1);
    if !ratio.is_power_of_two() || outputs.t_k.shape().h() * ratio != x.shape().h() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_total",
            lhs: outputs.t_k.shape(),
            rhs: x.shape(),
        });
    }
    let l_t = if flags.no_thumbnail_loss {
        Tensor::zeros(Shape::scalar())
    } else {
        loss_thumbnail(&outputs.t_k, x, ratio.trailing_zeros() as usize)?
    };
    let l1_c = loss_l1(&outputs.i_c, x)?;
    let l1_t = loss_l1(&outputs.i_t, x)?;
    let l_g = loss_gradient(&outputs.i_c, x)?;
    let l_s = loss_ssim(&outputs.i_c, x)?;
    let total = combine(&l_t, &l1_c, &l1_t, &l_g, &l_s, weights)?;
    Ok(LossReport {
        total,
        l_t,
        l1_c,
        l1_t,
        l_g,
        l_s,
    })
}

/// Peak signal-to-noise ratio in dB; +∞ when the inputs are identical.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "psnr",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    if peak <= 0.0 {
        return Err(TensorError::BadArgument {
            op: "psnr",
            msg: format!("peak must be positive, got {peak}"),
        });
    }
    let (da, db) = (a.data(), b.data());
    let mut acc = 0.0f64;
    for (x, y) in da.iter().zip(db.iter()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    let mse = acc / da.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

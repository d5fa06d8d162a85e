//! Graph operations: each variant stores the tensors it was applied to so the
//! backward pass can walk the graph; the corresponding vector-Jacobian
//! products live in `autograd`.

use super::conv::{conv2d_forward, ConvDims};
use super::kernels;
use super::{Result, Scalar, Shape, Tensor, TensorError};

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Div(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    AddScalar(Tensor<S>),
    Abs(Tensor<S>),
    Sqrt(Tensor<S>),
    Sigmoid(Tensor<S>),
    LeakyRelu(Tensor<S>, S),
    Sum(Tensor<S>),
    Mean(Tensor<S>),
    SpatialMean(Tensor<S>),
    MulChannelwise(Tensor<S>, Tensor<S>),
    Concat(Vec<Tensor<S>>),
    SliceChannels {
        x: Tensor<S>,
        start: usize,
        end: usize,
    },
    SliceSpatial {
        x: Tensor<S>,
        y0: usize,
        x0: usize,
    },
    Conv2d {
        x: Tensor<S>,
        w: Tensor<S>,
        b: Option<Tensor<S>>,
        dims: ConvDims,
    },
    PixelShuffle(Tensor<S>, usize),
    PixelUnshuffle(Tensor<S>, usize),
    HaarForward(Tensor<S>),
    HaarInverse(Tensor<S>),
    ChannelsToCols(Tensor<S>),
    ColsToChannels(Tensor<S>),
    MatMul {
        a: Tensor<S>,
        b: Tensor<S>,
        ta: bool,
        tb: bool,
    },
    SolveSpd {
        a: Tensor<S>,
        b: Tensor<S>,
        factors: Vec<S>,
    },
    BilinearUp(Tensor<S>, usize),
    WindowMean {
        x: Tensor<S>,
        win: usize,
        weights: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SpatialMean(a)
            | Op::PixelShuffle(a, _)
            | Op::PixelUnshuffle(a, _)
            | Op::HaarForward(a)
            | Op::HaarInverse(a)
            | Op::ChannelsToCols(a)
            | Op::ColsToChannels(a)
            | Op::BilinearUp(a, _) => vec![a],
            Op::MulChannelwise(a, b) => vec![a, b],
            Op::Concat(parts) => parts.iter().collect(),
            Op::SliceChannels { x, .. } | Op::SliceSpatial { x, .. } | Op::WindowMean { x, .. } => {
                vec![x]
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::MatMul { a, b, .. } | Op::SolveSpd { a, b, .. } => vec![a, b],
        }
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Vec<S> {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Vec<S> {
    a.data().iter().map(|&x| f(x)).collect()
}

pub(crate) fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, rhs)?;
        Ok(Tensor::from_op(
            self.shape(),
            zip(self, rhs, |a, b| a + b),
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, rhs)?;
        Ok(Tensor::from_op(
            self.shape(),
            zip(self, rhs, |a, b| a - b),
            Op::Sub(self.clone(), rhs.clone()),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, rhs)?;
        Ok(Tensor::from_op(
            self.shape(),
            zip(self, rhs, |a, b| a * b),
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    pub fn div(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("div", self, rhs)?;
        Ok(Tensor::from_op(
            self.shape(),
            zip(self, rhs, |a, b| a / b),
            Op::Div(self.clone(), rhs.clone()),
        ))
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        Tensor::from_op(
            self.shape(),
            map(self, |a| a * s),
            Op::Scale(self.clone(), s),
        )
    }

    pub fn add_scalar(&self, s: S) -> Tensor<S> {
        Tensor::from_op(
            self.shape(),
            map(self, |a| a + s),
            Op::AddScalar(self.clone()),
        )
    }

    pub fn abs(&self) -> Tensor<S> {
        Tensor::from_op(self.shape(), map(self, |a| a.abs()), Op::Abs(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor<S> {
        Tensor::from_op(
            self.shape(),
            map(self, |a| a.sqrt()),
            Op::Sqrt(self.clone()),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        Tensor::from_op(
            self.shape(),
            map(self, stable_sigmoid),
            Op::Sigmoid(self.clone()),
        )
    }

    pub fn leaky_relu(&self, slope: S) -> Tensor<S> {
        Tensor::from_op(
            self.shape(),
            map(self, |a| if a > S::zero() { a } else { a * slope }),
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn sum(&self) -> Tensor<S> {
        let acc: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(
            Shape::scalar(),
            vec![S::from_f64(acc)],
            Op::Sum(self.clone()),
        )
    }

    pub fn mean(&self) -> Tensor<S> {
        let acc: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(
            Shape::scalar(),
            vec![S::from_f64(acc / self.numel() as f64)],
            Op::Mean(self.clone()),
        )
    }

    /// Global average pool: `[n,c,h,w] -> [n,c,1,1]`.
    pub fn spatial_mean(&self) -> Tensor<S> {
        let s = self.shape();
        let data = kernels::spatial_mean(&self.data(), s.n() * s.c(), s.h() * s.w());
        Tensor::from_op(
            Shape::nchw(s.n(), s.c(), 1, 1),
            data,
            Op::SpatialMean(self.clone()),
        )
    }

    /// Multiply by a per-channel gate `s` of shape `[n,c,1,1]` or `[1,c,1,1]`.
    pub fn mul_channelwise(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        let (xs, ss) = (self.shape(), s.shape());
        let batch_ok = ss.n() == xs.n() || ss.n() == 1;
        if !batch_ok || ss.c() != xs.c() || ss.h() != 1 || ss.w() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channelwise",
                lhs: xs,
                rhs: ss,
            });
        }
        let hw = xs.h() * xs.w();
        let mut out = vec![S::zero(); xs.numel()];
        {
            let xd = self.data();
            let sd = s.data();
            for ni in 0..xs.n() {
                let sb = if ss.n() == 1 { 0 } else { ni * ss.c() };
                for ci in 0..xs.c() {
                    let gate = sd[sb + ci];
                    let base = (ni * xs.c() + ci) * hw;
                    for i in 0..hw {
                        out[base + i] = xd[base + i] * gate;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            xs,
            out,
            Op::MulChannelwise(self.clone(), s.clone()),
        ))
    }

    /// Concatenate along the channel axis.
    pub fn concat(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| TensorError::BadArgument {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        let s0 = first.shape();
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s,
                });
            }
            channels += s.c();
        }
        let hw = s0.h() * s0.w();
        let mut out = Vec::with_capacity(s0.n() * channels * hw);
        for ni in 0..s0.n() {
            for p in parts {
                let c = p.shape().c();
                let d = p.data();
                out.extend_from_slice(&d[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        Ok(Tensor::from_op(
            Shape::nchw(s0.n(), channels, s0.h(), s0.w()),
            out,
            Op::Concat(parts.iter().map(|&p| p.clone()).collect()),
        ))
    }

    /// Keep channels `[start, end)`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if start >= end || end > s.c() {
            return Err(TensorError::BadArgument {
                op: "slice_channels",
                msg: format!("range {start}..{end} out of bounds for {} channels", s.c()),
            });
        }
        let data = kernels::slice_channels(&self.data(), s.n(), s.c(), s.h() * s.w(), start, end);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), end - start, s.h(), s.w()),
            data,
            Op::SliceChannels {
                x: self.clone(),
                start,
                end,
            },
        ))
    }

    /// Crop a spatial window of extent `h x w` at offset `(y0, x0)`.
    pub fn slice_spatial(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if h == 0 || w == 0 || y0 + h > s.h() || x0 + w > s.w() {
            return Err(TensorError::BadArgument {
                op: "slice_spatial",
                msg: format!("window {h}x{w} at ({y0},{x0}) exceeds {s}"),
            });
        }
        let data = kernels::slice_spatial(&self.data(), s.n(), s.c(), s.h(), s.w(), y0, x0, h, w);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), s.c(), h, w),
            data,
            Op::SliceSpatial {
                x: self.clone(),
                y0,
                x0,
            },
        ))
    }

    /// 2-D convolution with square kernel, zero padding, and optional
    /// per-output-channel bias of shape `[1,oc,1,1]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<S>> {
        let xs = self.shape();
        let ws = weight.shape();
        let (oc, ic, k) = (ws.n(), ws.c(), ws.h());
        if ws.w() != k || k == 0 {
            return Err(TensorError::BadArgument {
                op: "conv2d",
                msg: format!("kernel must be square and non-empty, got {ws}"),
            });
        }
        if ic != xs.c() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(TensorError::BadArgument {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        let oh = ConvDims::out_extent(xs.h(), k, stride, padding);
        let ow = ConvDims::out_extent(xs.w(), k, stride, padding);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(TensorError::BadArgument {
                    op: "conv2d",
                    msg: format!(
                    "empty output for input {xs}, kernel {k}, stride {stride}, padding {padding}"
                ),
                })
            }
        };
        if let Some(b) = bias {
            if b.shape() != Shape::nchw(1, oc, 1, 1) {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: b.shape(),
                    rhs: Shape::nchw(1, oc, 1, 1),
                });
            }
        }
        let dims = ConvDims {
            n: xs.n(),
            ic,
            h: xs.h(),
            w: xs.w(),
            oc,
            k,
            stride,
            padding,
            oh,
            ow,
        };
        let out = conv2d_forward(
            &self.data(),
            &weight.data(),
            bias.map(|b| b.data()).as_deref().map(|v| &v[..]),
            &dims,
        );
        if !out.iter().all(|v| v.as_f64().is_finite()) {
            return Err(TensorError::NonFinite { op: "conv2d" });
        }
        Ok(Tensor::from_op(
            Shape::nchw(xs.n(), oc, oh, ow),
            out,
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                dims,
            },
        ))
    }

    /// `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`, channel-major subpixel order.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if r == 0 || !s.c().is_multiple_of(r * r) {
            return Err(TensorError::BadArgument {
                op: "pixel_shuffle",
                msg: format!("channels {} not divisible by {}", s.c(), r * r),
            });
        }
        let data = kernels::pixel_shuffle(&self.data(), s.n(), s.c(), s.h(), s.w(), r);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), s.c() / (r * r), s.h() * r, s.w() * r),
            data,
            Op::PixelShuffle(self.clone(), r),
        ))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if r == 0 || !s.h().is_multiple_of(r) || !s.w().is_multiple_of(r) {
            return Err(TensorError::BadArgument {
                op: "pixel_unshuffle",
                msg: format!("extents {}x{} not divisible by {r}", s.h(), s.w()),
            });
        }
        let data = kernels::pixel_unshuffle(&self.data(), s.n(), s.c(), s.h(), s.w(), r);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), s.c() * r * r, s.h() / r, s.w() / r),
            data,
            Op::PixelUnshuffle(self.clone(), r),
        ))
    }

    /// View channels as matrix columns: `[n,c,h,w] -> [n,1,h*w,c]`.
    pub fn channels_to_cols(&self) -> Tensor<S> {
        let s = self.shape();
        let data = kernels::channels_to_cols(&self.data(), s.n(), s.c(), s.h() * s.w());
        Tensor::from_op(
            Shape::nchw(s.n(), 1, s.h() * s.w(), s.c()),
            data,
            Op::ChannelsToCols(self.clone()),
        )
    }

    /// Inverse of [`Tensor::channels_to_cols`] for a known spatial extent.
    pub fn cols_to_channels(&self, h: usize, w: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.c() != 1 || s.h() != h * w {
            return Err(TensorError::BadArgument {
                op: "cols_to_channels",
                msg: format!("expected [n,1,{},c], got {s}", h * w),
            });
        }
        let c = s.w();
        let data = kernels::cols_to_channels(&self.data(), s.n(), c, h * w);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), c, h, w),
            data,
            Op::ColsToChannels(self.clone()),
        ))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn bilinear_up(&self, r: usize) -> Result<Tensor<S>> {
        if r == 0 {
            return Err(TensorError::BadArgument {
                op: "bilinear_up",
                msg: "factor must be >= 1".into(),
            });
        }
        let s = self.shape();
        let data = kernels::bilinear_up(&self.data(), s.n(), s.c(), s.h(), s.w(), r);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), s.c(), s.h() * r, s.w() * r),
            data,
            Op::BilinearUp(self.clone(), r),
        ))
    }

    /// Gaussian-weighted mean over every fully contained `win x win` window.
    pub fn window_mean(&self, win: usize, sigma: f64) -> Result<Tensor<S>> {
        let s = self.shape();
        if win.is_multiple_of(2) || win == 0 || sigma <= 0.0 {
            return Err(TensorError::BadArgument {
                op: "window_mean",
                msg: format!("window must be odd and sigma positive, got {win}, {sigma}"),
            });
        }
        if win > s.h() || win > s.w() {
            return Err(TensorError::BadArgument {
                op: "window_mean",
                msg: format!("window {win} exceeds extents {}x{}", s.h(), s.w()),
            });
        }
        let weights = kernels::gaussian_window::<S>(win, sigma);
        let data = kernels::window_mean(&self.data(), s.n(), s.c(), s.h(), s.w(), win, &weights);
        Ok(Tensor::from_op(
            Shape::nchw(s.n(), s.c(), s.h() - win + 1, s.w() - win + 1),
            data,
            Op::WindowMean {
                x: self.clone(),
                win,
                weights,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::constant(shape, data).unwrap()
    }

    #[test]
    fn elementwise_ops_compute_expected_values() {
        let a = t(Shape::nchw(1, 1, 1, 4), vec![1.0, -2.0, 3.0, -4.0]);
        let b = t(Shape::nchw(1, 1, 1, 4), vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![3.0, 0.0, 5.0, -2.0]);
        assert_eq!(a.sub(&b).unwrap().to_vec(), vec![-1.0, -4.0, 1.0, -6.0]);
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![2.0, -4.0, 6.0, -8.0]);
        assert_eq!(a.div(&b).unwrap().to_vec(), vec![0.5, -1.0, 1.5, -2.0]);
        assert_eq!(a.abs().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.scale(0.5).to_vec(), vec![0.5, -1.0, 1.5, -2.0]);
        assert_eq!(a.leaky_relu(0.1).to_vec(), vec![1.0, -0.2, 3.0, -0.4]);
        assert_eq!(a.sum().value().unwrap(), -2.0);
        assert_eq!(a.mean().value().unwrap(), -0.5);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let a = t(Shape::nchw(1, 1, 1, 3), vec![-800.0, 0.0, 800.0]);
        let s = a.sigmoid().to_vec();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.5);
        assert_eq!(s[2], 1.0);
    }

    #[test]
    fn concat_then_slice_channels_roundtrips() {
        let a = t(Shape::nchw(2, 1, 2, 2), (0..8).map(f64::from).collect());
        let b = t(Shape::nchw(2, 2, 2, 2), (8..24).map(f64::from).collect());
        let cat = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::nchw(2, 3, 2, 2));
        assert_eq!(cat.slice_channels(0, 1).unwrap().to_vec(), a.to_vec());
        assert_eq!(cat.slice_channels(1, 3).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn conv2d_validates_arguments() {
        let x = Tensor::<f64>::zeros(Shape::nchw(1, 3, 8, 8));
        let w_rect = Tensor::<f64>::zeros(Shape::nchw(4, 3, 2, 3));
        assert!(x.conv2d(&w_rect, None, 1, 0).is_err());
        let w_badch = Tensor::<f64>::zeros(Shape::nchw(4, 2, 3, 3));
        assert!(x.conv2d(&w_badch, None, 1, 1).is_err());
        let w = Tensor::<f64>::zeros(Shape::nchw(4, 3, 3, 3));
        assert!(x.conv2d(&w, None, 0, 1).is_err());
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), Shape::nchw(1, 4, 8, 8));
        let strided = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(strided.shape(), Shape::nchw(1, 4, 4, 4));
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let x = t(Shape::nchw(1, 1, 3, 3), (1..=9).map(f64::from).collect());
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0; // center tap
        let w = t(Shape::nchw(1, 1, 3, 3), wk);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn spatial_mean_and_channelwise_gate() {
        let x = t(
            Shape::nchw(1, 2, 2, 2),
            vec![1., 2., 3., 4., 10., 20., 30., 40.],
        );
        let m = x.spatial_mean();
        assert_eq!(m.to_vec(), vec![2.5, 25.0]);
        let gated = x.mul_channelwise(&m).unwrap();
        assert_eq!(gated.to_vec()[0..4], [2.5, 5.0, 7.5, 10.0]);
        let shared = t(Shape::nchw(1, 2, 1, 1), vec![2.0, 0.5]);
        let g2 = x.mul_channelwise(&shared).unwrap();
        assert_eq!(g2.to_vec(), vec![2., 4., 6., 8., 5., 10., 15., 20.]);
    }

    #[test]
    fn cols_view_roundtrips() {
        let x = t(Shape::nchw(2, 3, 2, 2), (0..24).map(f64::from).collect());
        let m = x.channels_to_cols();
        assert_eq!(m.shape(), Shape::nchw(2, 1, 4, 3));
        let back = m.cols_to_channels(2, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }
}

//! Reverse-mode differentiation over the recorded graph.
//!
//! Node ids are assigned monotonically at construction, so visiting reachable
//! nodes in descending id order is a topological order. Intermediate
//! gradients live in a map keyed by node id and are dropped as soon as they
//! have been propagated; leaves created with `requires_grad` accumulate into
//! their `grad` slot.

use std::collections::{HashMap, HashSet};

use super::conv::{conv2d_grad_bias, conv2d_grad_input, conv2d_grad_weight};
use super::kernels;
use super::linalg::{chol_solve, matmul_buf};
use super::op::Op;
use super::{Result, Scalar, Tensor, TensorError};

struct Grads<S: Scalar>(HashMap<u64, Vec<S>>);

impl<S: Scalar> Grads<S> {
    /// Does any gradient need to flow into `t`?
    fn wants(&self, t: &Tensor<S>) -> bool {
        t.node.tracked
    }

    fn add(&mut self, t: &Tensor<S>, contribution: Vec<S>) {
        debug_assert_eq!(contribution.len(), t.numel());
        match self.0.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (acc, v) in e.get_mut().iter_mut().zip(contribution) {
                    *acc += v;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(contribution);
            }
        }
    }
}

/// Accumulate `d loss / d leaf` into every reachable `requires_grad` leaf.
/// Repeated calls keep accumulating until [`Tensor::zero_grad`].
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape(),
        });
    }
    if !loss.node.tracked {
        return Ok(());
    }
    let mut nodes = vec![loss.clone()];
    let mut seen: HashSet<u64> = HashSet::new();
    seen.insert(loss.id());
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        for p in t.node.op.parents() {
            if p.node.tracked && seen.insert(p.id()) {
                nodes.push(p.clone());
                stack.push(p.clone());
            }
        }
    }
    nodes.sort_unstable_by(|a, b| b.id().cmp(&a.id()));

    let mut grads = Grads(HashMap::new());
    grads.0.insert(loss.id(), vec![S::one()]);
    for t in &nodes {
        let Some(g) = grads.0.remove(&t.id()) else {
            continue;
        };
        if t.node.requires_grad {
            t.accumulate_grad(&g);
        }
        propagate(t, &g, &mut grads)?;
    }
    Ok(())
}

fn propagate<S: Scalar>(t: &Tensor<S>, g: &[S], grads: &mut Grads<S>) -> Result<()> {
    match &t.node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if grads.wants(a) {
                grads.add(a, g.to_vec());
            }
            if grads.wants(b) {
                grads.add(b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if grads.wants(a) {
                grads.add(a, g.to_vec());
            }
            if grads.wants(b) {
                grads.add(b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if grads.wants(a) {
                let bd = b.data();
                grads.add(
                    a,
                    g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect(),
                );
            }
            if grads.wants(b) {
                let ad = a.data();
                grads.add(
                    b,
                    g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect(),
                );
            }
        }
        Op::Div(a, b) => {
            let bd = b.data();
            if grads.wants(a) {
                grads.add(
                    a,
                    g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv / bv).collect(),
                );
            }
            if grads.wants(b) {
                let out = t.data();
                grads.add(
                    b,
                    g.iter()
                        .zip(out.iter())
                        .zip(bd.iter())
                        .map(|((&gv, &ov), &bv)| -gv * ov / bv)
                        .collect(),
                );
            }
        }
        Op::Scale(a, s) => {
            if grads.wants(a) {
                grads.add(a, g.iter().map(|&v| v * *s).collect());
            }
        }
        Op::AddScalar(a) => {
            if grads.wants(a) {
                grads.add(a, g.to_vec());
            }
        }
        Op::Abs(a) => {
            if grads.wants(a) {
                let ad = a.data();
                grads.add(
                    a,
                    g.iter()
                        .zip(ad.iter())
                        .map(|(&gv, &av)| {
                            if av > S::zero() {
                                gv
                            } else if av < S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                );
            }
        }
        Op::Sqrt(a) => {
            if grads.wants(a) {
                let out = t.data();
                let half = S::from_f64(0.5);
                grads.add(
                    a,
                    g.iter()
                        .zip(out.iter())
                        .map(|(&gv, &ov)| {
                            if ov > S::zero() {
                                gv * half / ov
                            } else {
                                S::zero()
                            }
                        })
                        .collect(),
                );
            }
        }
        Op::Sigmoid(a) => {
            if grads.wants(a) {
                let out = t.data();
                grads.add(
                    a,
                    g.iter()
                        .zip(out.iter())
                        .map(|(&gv, &ov)| gv * ov * (S::one() - ov))
                        .collect(),
                );
            }
        }
        Op::LeakyRelu(a, slope) => {
            if grads.wants(a) {
                let ad = a.data();
                grads.add(
                    a,
                    g.iter()
                        .zip(ad.iter())
                        .map(|(&gv, &av)| if av > S::zero() { gv } else { gv * *slope })
                        .collect(),
                );
            }
        }
        Op::Sum(a) => {
            if grads.wants(a) {
                grads.add(a, vec![g[0]; a.numel()]);
            }
        }
        Op::Mean(a) => {
            if grads.wants(a) {
                let v = g[0] / S::from_f64(a.numel() as f64);
                grads.add(a, vec![v; a.numel()]);
            }
        }
        Op::SpatialMean(a) => {
            if grads.wants(a) {
                let s = a.shape();
                let hw = s.h() * s.w();
                let inv = S::from_f64(1.0 / hw as f64);
                let mut ga = vec![S::zero(); a.numel()];
                for i in 0..s.n() * s.c() {
                    let v = g[i] * inv;
                    for o in &mut ga[i * hw..(i + 1) * hw] {
                        *o = v;
                    }
                }
                grads.add(a, ga);
            }
        }
        Op::MulChannelwise(x, s) => {
            let xs = x.shape();
            let ss = s.shape();
            let hw = xs.h() * xs.w();
            if grads.wants(x) {
                let sd = s.data();
                let mut gx = vec![S::zero(); x.numel()];
                for ni in 0..xs.n() {
                    let sb = if ss.n() == 1 { 0 } else { ni * ss.c() };
                    for ci in 0..xs.c() {
                        let gate = sd[sb + ci];
                        let base = (ni * xs.c() + ci) * hw;
                        for i in 0..hw {
                            gx[base + i] = g[base + i] * gate;
                        }
                    }
                }
                grads.add(x, gx);
            }
            if grads.wants(s) {
                let xd = x.data();
                let mut gs = vec![S::zero(); s.numel()];
                for ni in 0..xs.n() {
                    let sb = if ss.n() == 1 { 0 } else { ni * ss.c() };
                    for ci in 0..xs.c() {
                        let base = (ni * xs.c() + ci) * hw;
                        let mut acc = 0.0f64;
                        for i in 0..hw {
                            acc += (g[base + i] * xd[base + i]).as_f64();
                        }
                        gs[sb + ci] += S::from_f64(acc);
                    }
                }
                grads.add(s, gs);
            }
        }
        Op::Concat(parts) => {
            let s = t.shape();
            let hw = s.h() * s.w();
            let mut offset = 0;
            for p in parts {
                let c = p.shape().c();
                if grads.wants(p) {
                    grads.add(
                        p,
                        kernels::slice_channels(g, s.n(), s.c(), hw, offset, offset + c),
                    );
                }
                offset += c;
            }
        }
        Op::SliceChannels { x, start, end } => {
            if grads.wants(x) {
                let s = x.shape();
                grads.add(
                    x,
                    kernels::embed_channels(g, s.n(), s.c(), s.h() * s.w(), *start, *end),
                );
            }
        }
        Op::SliceSpatial { x, y0, x0 } => {
            if grads.wants(x) {
                let s = x.shape();
                let o = t.shape();
                grads.add(
                    x,
                    kernels::embed_spatial(g, s.n(), s.c(), s.h(), s.w(), *y0, *x0, o.h(), o.w()),
                );
            }
        }
        Op::Conv2d { x, w, b, dims } => {
            if grads.wants(x) {
                grads.add(x, conv2d_grad_input(g, &w.data(), dims));
            }
            if grads.wants(w) {
                grads.add(w, conv2d_grad_weight(g, &x.data(), dims));
            }
            if let Some(b) = b {
                if grads.wants(b) {
                    grads.add(b, conv2d_grad_bias(g, dims));
                }
            }
        }
        Op::PixelShuffle(a, r) => {
            if grads.wants(a) {
                let o = t.shape();
                grads.add(
                    a,
                    kernels::pixel_unshuffle(g, o.n(), o.c(), o.h(), o.w(), *r),
                );
            }
        }
        Op::PixelUnshuffle(a, r) => {
            if grads.wants(a) {
                let o = t.shape();
                grads.add(a, kernels::pixel_shuffle(g, o.n(), o.c(), o.h(), o.w(), *r));
            }
        }
        Op::HaarForward(a) => {
            if grads.wants(a) {
                let o = t.shape();
                grads.add(
                    a,
                    crate::wavelet::haar_inverse_buf(g, o.n(), o.c(), o.h(), o.w()),
                );
            }
        }
        Op::HaarInverse(a) => {
            if grads.wants(a) {
                let o = t.shape();
                grads.add(
                    a,
                    crate::wavelet::haar_forward_buf(g, o.n(), o.c(), o.h(), o.w()),
                );
            }
        }
        Op::ChannelsToCols(a) => {
            if grads.wants(a) {
                let s = a.shape();
                grads.add(a, kernels::cols_to_channels(g, s.n(), s.c(), s.h() * s.w()));
            }
        }
        Op::ColsToChannels(a) => {
            if grads.wants(a) {
                let o = t.shape();
                grads.add(a, kernels::channels_to_cols(g, o.n(), o.c(), o.h() * o.w()));
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let gshape = t.shape();
            if grads.wants(a) {
                let (ga, _) = if !*ta {
                    matmul_buf(g, gshape, &b.data(), b.shape(), false, !*tb)?
                } else {
                    matmul_buf(&b.data(), b.shape(), g, gshape, *tb, true)?
                };
                grads.add(a, ga);
            }
            if grads.wants(b) {
                let (gb, _) = if !*tb {
                    matmul_buf(&a.data(), a.shape(), g, gshape, !*ta, false)?
                } else {
                    matmul_buf(g, gshape, &a.data(), a.shape(), true, *ta)?
                };
                grads.add(b, gb);
            }
        }
        Op::SolveSpd { a, b, factors } => {
            let q = a.shape().h();
            let m = b.shape().w();
            let batches = a.shape().n() * a.shape().c();
            // dB = (sym(A)+eps)^-1 g, reusing the stored factors.
            let mut db = g.to_vec();
            for i in 0..batches {
                chol_solve(
                    &factors[i * q * q..(i + 1) * q * q],
                    q,
                    &mut db[i * q * m..(i + 1) * q * m],
                    m,
                );
            }
            if grads.wants(a) {
                let x = t.data();
                let mut ga = vec![S::zero(); a.numel()];
                for i in 0..batches {
                    let dbi = &db[i * q * m..(i + 1) * q * m];
                    let xi = &x[i * q * m..(i + 1) * q * m];
                    let gai = &mut ga[i * q * q..(i + 1) * q * q];
                    // M = -dB X^T, then symmetrize to match the forward's
                    // symmetrized read of A.
                    for r in 0..q {
                        for c in 0..q {
                            let mut acc = 0.0f64;
                            for p in 0..m {
                                acc += (dbi[r * m + p] * xi[c * m + p]).as_f64();
                            }
                            gai[r * q + c] = S::from_f64(-acc);
                        }
                    }
                    for r in 0..q {
                        for c in 0..r {
                            let avg = (gai[r * q + c].as_f64() + gai[c * q + r].as_f64()) * 0.5;
                            gai[r * q + c] = S::from_f64(avg);
                            gai[c * q + r] = S::from_f64(avg);
                        }
                    }
                }
                grads.add(a, ga);
            }
            if grads.wants(b) {
                grads.add(b, db);
            }
        }
        Op::BilinearUp(a, r) => {
            if grads.wants(a) {
                let s = a.shape();
                grads.add(
                    a,
                    kernels::bilinear_up_adjoint(g, s.n(), s.c(), s.h(), s.w(), *r),
                );
            }
        }
        Op::WindowMean { x, win, weights } => {
            if grads.wants(x) {
                let s = x.shape();
                grads.add(
                    x,
                    kernels::window_mean_adjoint(g, s.n(), s.c(), s.h(), s.w(), *win, weights),
                );
            }
        }
    }
    Ok(())
}

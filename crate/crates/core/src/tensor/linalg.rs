//! Batched matrix products and symmetric positive-definite solves.
//!
//! Tensors are interpreted as `[batch, groups, rows, cols]`; every matrix in
//! the batch is handled independently with a fixed iteration order.

use super::op::Op;
use super::{Result, Scalar, Shape, Tensor, TensorError};

/// Ridge added to the diagonal before factorization in [`solve_spd`].
pub const SOLVE_EPS: f64 = 1e-6;

fn op_dims(shape: Shape, transposed: bool) -> (usize, usize) {
    if transposed {
        (shape.w(), shape.h())
    } else {
        (shape.h(), shape.w())
    }
}

/// Raw batched GEMM: returns `op(a) * op(b)` per batch entry.
pub(crate) fn matmul_buf<S: Scalar>(
    a: &[S],
    ash: Shape,
    b: &[S],
    bsh: Shape,
    ta: bool,
    tb: bool,
) -> Result<(Vec<S>, Shape)> {
    if ash.n() != bsh.n() || ash.c() != bsh.c() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash,
            rhs: bsh,
        });
    }
    let (m, ka) = op_dims(ash, ta);
    let (kb, p) = op_dims(bsh, tb);
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash,
            rhs: bsh,
        });
    }
    let batches = ash.n() * ash.c();
    let (ra, ca) = (ash.h(), ash.w());
    let (rb, cb) = (bsh.h(), bsh.w());
    let (rsa, csa) = if ta {
        (1, ca as isize)
    } else {
        (ca as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, cb as isize)
    } else {
        (cb as isize, 1)
    };
    let mut out = vec![S::zero(); batches * m * p];
    for i in 0..batches {
        unsafe {
            S::gemm(
                m,
                ka,
                p,
                S::one(),
                a.as_ptr().add(i * ra * ca),
                rsa,
                csa,
                b.as_ptr().add(i * rb * cb),
                rsb,
                csb,
                S::zero(),
                out.as_mut_ptr().add(i * m * p),
                p as isize,
                1,
            );
        }
    }
    Ok((out, Shape::nchw(ash.n(), ash.c(), m, p)))
}

/// In-place lower Cholesky factor of a `q x q` matrix (upper triangle is left
/// untouched). Fails with the offending pivot if the matrix is not positive
/// definite.
pub(crate) fn chol_factor<S: Scalar>(a: &mut [S], q: usize) -> Result<()> {
    for j in 0..q {
        let mut d = a[j * q + j].as_f64();
        for k in 0..j {
            let l = a[j * q + k].as_f64();
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(TensorError::NotSpd { smallest_pivot: d });
        }
        let ljj = d.sqrt();
        a[j * q + j] = S::from_f64(ljj);
        for i in j + 1..q {
            let mut v = a[i * q + j].as_f64();
            for k in 0..j {
                v -= a[i * q + k].as_f64() * a[j * q + k].as_f64();
            }
            a[i * q + j] = S::from_f64(v / ljj);
        }
    }
    Ok(())
}

/// Solve `(L L^T) X = B` in place given the lower factor; `b` is `q x m`
/// row-major.
pub(crate) fn chol_solve<S: Scalar>(l: &[S], q: usize, b: &mut [S], m: usize) {
    for i in 0..q {
        for k in 0..i {
            let f = l[i * q + k];
            for col in 0..m {
                let v = b[k * m + col];
                b[i * m + col] = b[i * m + col] - f * v;
            }
        }
        let d = l[i * q + i];
        for col in 0..m {
            b[i * m + col] = b[i * m + col] / d;
        }
    }
    for i in (0..q).rev() {
        for k in i + 1..q {
            let f = l[k * q + i];
            for col in 0..m {
                let v = b[k * m + col];
                b[i * m + col] = b[i * m + col] - f * v;
            }
        }
        let d = l[i * q + i];
        for col in 0..m {
            b[i * m + col] = b[i * m + col] / d;
        }
    }
}

/// Symmetrize, add the ridge, and factor one batch entry of `a`.
pub(crate) fn regularized_factor<S: Scalar>(a: &[S], q: usize, eps: f64) -> Result<Vec<S>> {
    let mut m = vec![S::zero(); q * q];
    for i in 0..q {
        for j in 0..q {
            let avg = (a[i * q + j].as_f64() + a[j * q + i].as_f64()) * 0.5;
            m[i * q + j] = S::from_f64(if i == j { avg + eps } else { avg });
        }
    }
    chol_factor(&mut m, q)?;
    Ok(m)
}

/// Batched matrix product node: `op(a) * op(b)` with optional transposes.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, ta: bool, tb: bool) -> Result<Tensor<S>> {
    let (out, shape) = matmul_buf(&a.data(), a.shape(), &b.data(), b.shape(), ta, tb)?;
    Ok(Tensor::from_op(
        shape,
        out,
        Op::MatMul {
            a: a.clone(),
            b: b.clone(),
            ta,
            tb,
        },
    ))
}

/// Batched SPD solve node: `X = (sym(A) + eps I)^{-1} B` per batch entry,
/// factored by Cholesky. `a` is `[n,g,q,q]`, `b` is `[n,g,q,m]`.
pub fn solve_spd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ash, bsh) = (a.shape(), b.shape());
    let q = ash.h();
    if ash.w() != q {
        return Err(TensorError::BadArgument {
            op: "solve_spd",
            msg: format!("matrix must be square, got {ash}"),
        });
    }
    if bsh.n() != ash.n() || bsh.c() != ash.c() || bsh.h() != q {
        return Err(TensorError::ShapeMismatch {
            op: "solve_spd",
            lhs: ash,
            rhs: bsh,
        });
    }
    let batches = ash.n() * ash.c();
    let m = bsh.w();
    let mut out = b.to_vec();
    let mut factors = vec![S::zero(); batches * q * q];
    {
        let adata = a.data();
        for i in 0..batches {
            let l = regularized_factor(&adata[i * q * q..(i + 1) * q * q], q, SOLVE_EPS)?;
            chol_solve(&l, q, &mut out[i * q * m..(i + 1) * q * m], m);
            factors[i * q * q..(i + 1) * q * q].copy_from_slice(&l);
        }
    }
    Ok(Tensor::from_op(
        bsh,
        out,
        Op::SolveSpd {
            a: a.clone(),
            b: b.clone(),
            factors,
        },
    ))
}

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Solve `op(A) X = B` by LU decomposition with partial pivoting, where
/// `op(A)` is `A` or `A^T`.
pub fn lu_solve<T: Real>(a: &Tensor<T>, b: &Tensor<T>, transpose: bool) -> Result<Tensor<T>> {
    let n = a.shape()[0];
    if a.shape() != [n, n] {
        return Err(Error::Shape(format!("solve needs a square matrix, got {:?}", a.shape())));
    }
    if b.ndim() != 2 || b.shape()[0] != n {
        return Err(Error::Shape(format!(
            "right-hand side {:?} does not match {n}x{n} system",
            b.shape()
        )));
    }
    let m = b.shape()[1];
    let mut lu = if transpose { a.transpose2() } else { a.clone() };
    let scale = lu.data().iter().fold(T::zero(), |acc, &v| acc.max(v.abs()));
    let tol = T::epsilon() * T::lit(n as f64) * scale;
    let mut perm: Vec<usize> = (0..n).collect();
    let d = lu.data_mut();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if d[r * n + col].abs() > d[piv * n + col].abs() {
                piv = r;
            }
        }
        if !(d[piv * n + col].abs() > tol) {
            return Err(Error::Singular);
        }
        if piv != col {
            for c in 0..n {
                d.swap(col * n + c, piv * n + c);
            }
            perm.swap(col, piv);
        }
        let p = d[col * n + col];
        for r in col + 1..n {
            let f = d[r * n + col] / p;
            d[r * n + col] = f;
            if f != T::zero() {
                for c in col + 1..n {
                    let v = d[col * n + c];
                    d[r * n + c] = d[r * n + c] - f * v;
                }
            }
        }
    }
    let mut x = vec![T::zero(); n * m];
    let bd = b.data();
    for (r, &pr) in perm.iter().enumerate() {
        x[r * m..(r + 1) * m].copy_from_slice(&bd[pr * m..(pr + 1) * m]);
    }
    // forward substitution with unit-lower L
    for r in 0..n {
        for c in 0..r {
            let f = d[r * n + c];
            if f != T::zero() {
                for j in 0..m {
                    let v = x[c * m + j];
                    x[r * m + j] = x[r * m + j] - f * v;
                }
            }
        }
    }
    for r in (0..n).rev() {
        for c in r + 1..n {
            let f = d[r * n + c];
            if f != T::zero() {
                for j in 0..m {
                    let v = x[c * m + j];
                    x[r * m + j] = x[r * m + j] - f * v;
                }
            }
        }
        let p = d[r * n + r];
        for j in 0..m {
            x[r * m + j] = x[r * m + j] / p;
        }
    }
    Ok(Tensor::from_vec(&[n, m], x))
}

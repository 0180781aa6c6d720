//! Dense row-major tensors and the scalar trait the numeric code is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. Implemented for `f32` (training runs) and
/// `f64` (gradient checks and oracles).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(extent(m, k, rsa, csa) <= a.len());
                debug_assert!(extent(k, n, rsb, csb) <= b.len());
                debug_assert!(extent(m, n, rsc, csc) <= c.len());
                // SAFETY: the extents of all three operands were checked against
                // their slices above (in debug) and by every caller in this crate.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// A contiguous row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// 2-D matrix product `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(a: &Self, b: &Self, ta: bool, tb: bool) -> Self {
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D, got {:?}", a.shape);
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape);
        let (ar, ac) = (a.shape[0], a.shape[1]);
        let (br, bc) = (b.shape[0], b.shape[1]);
        let (m, k, rsa, csa) = if ta {
            (ac, ar, 1, ac as isize)
        } else {
            (ar, ac, ac as isize, 1)
        };
        let (k2, n, rsb, csb) = if tb {
            (bc, br, 1, bc as isize)
        } else {
            (br, bc, bc as isize, 1)
        };
        assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?} (ta={ta}, tb={tb})", a.shape, b.shape);
        let mut out = Self::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data,
            rsa,
            csa,
            &b.data,
            rsb,
            csb,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        Self::matmul_t(self, other, false, false)
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.ndim(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::from_vec(&[c, r], out)
    }

    /// General axis permutation.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.ndim());
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides = strides(&self.shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let nd = new_shape.len();
        if nd == 0 || self.numel() == 0 {
            return Tensor::from_vec(&new_shape, self.data.clone());
        }
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        let last = nd - 1;
        loop {
            let (len, st) = (new_shape[last], perm_strides[last]);
            for i in 0..len {
                out.push(self.data[off + i * st]);
            }
            // advance the odometer over all but the last axis
            let mut d = last;
            loop {
                if d == 0 {
                    return Tensor::from_vec(&new_shape, out);
                }
                d -= 1;
                idx[d] += 1;
                off += perm_strides[d];
                if idx[d] < new_shape[d] {
                    break;
                }
                off -= perm_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[axis]);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::from_vec(&shape, out)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty());
        let first = parts[0];
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.ndim(), first.ndim());
            assert_eq!(p.shape[..axis], first.shape[..axis]);
            assert_eq!(p.shape[axis + 1..], first.shape[axis + 1..]);
            total += p.shape[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::from_vec(&shape, out)
    }

    /// Index of the maximum along the last axis for every row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().expect("argmax on 0-d tensor");
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Shape resulting from numpy-style broadcasting of `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `target`
/// (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Merge adjacent axes that are contiguous for every operand, so inner rows
/// get as long as possible.
fn coalesce(shape: &[usize], sa: &[usize], sb: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..shape.len() {
        if shape[i] == 1 {
            continue;
        }
        if let (Some(&n), Some(&a), Some(&b)) = (out.0.last(), out.1.last(), out.2.last()) {
            if a == sa[i] * shape[i] && b == sb[i] * shape[i] {
                *out.0.last_mut().unwrap() = n * shape[i];
                *out.1.last_mut().unwrap() = sa[i];
                *out.2.last_mut().unwrap() = sb[i];
                continue;
            }
        }
        out.0.push(shape[i]);
        out.1.push(sa[i]);
        out.2.push(sb[i]);
    }
    if out.0.is_empty() {
        out = (vec![1], vec![0], vec![0]);
    }
    out
}

/// Walk `out_shape` in row-major order one innermost row at a time,
/// reporting `(out_offset, a_offset, b_offset, row_len, a_step, b_step)`.
fn for_each_row2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    if numel(out_shape) == 0 {
        return;
    }
    let (shape, sa, sb) = coalesce(out_shape, sa, sb);
    let last = shape.len() - 1;
    let (len, la, lb) = (shape[last], sa[last], sb[last]);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        f(o, oa, ob, len, la, lb);
        o += len;
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    if b.numel() == 1 && b.ndim() <= a.ndim() {
        let s = b.data[0];
        return a.map(|x| f(x, s));
    }
    if a.numel() == 1 && a.ndim() <= b.ndim() {
        let s = a.data[0];
        return b.map(|y| f(s, y));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape, b.shape));
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    for_each_row2(&out_shape, &sa, &sb, |o, ia, ib, len, la, lb| {
        let dst = &mut out[o..o + len];
        match (la, lb) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&a.data[ia..ia + len]).zip(&b.data[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            (1, 0) => {
                let y = b.data[ib];
                for (d, &x) in dst.iter_mut().zip(&a.data[ia..ia + len]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = a.data[ia];
                for (d, &y) in dst.iter_mut().zip(&b.data[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = f(a.data[ia + i * la], b.data[ib + i * lb]);
                }
            }
        }
    });
    Tensor::from_vec(&out_shape, out)
}

/// Sum `x` down to `shape`, the inverse of broadcasting `shape` up to `x`.
pub fn sum_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape == shape {
        return x.clone();
    }
    let mut out = Tensor::zeros(shape);
    if numel(shape) == 1 {
        out.data[0] = x.sum();
        return out;
    }
    assert!(
        broadcast_shape(shape, &x.shape).as_deref() == Some(&x.shape[..]),
        "cannot sum {:?} to {shape:?}",
        x.shape
    );
    let so = broadcast_strides(shape, &x.shape);
    let sx = strides(&x.shape);
    for_each_row2(&x.shape, &sx, &so, |_, ix, io, len, lx, lo| {
        let src = &x.data[ix..];
        if lo == 0 {
            let mut acc = T::zero();
            for i in 0..len {
                acc = acc + src[i * lx];
            }
            out.data[io] = out.data[io] + acc;
        } else {
            for i in 0..len {
                out.data[io + i * lo] = out.data[io + i * lo] + src[i * lx];
            }
        }
    });
    out
}

/// Broadcast `x` up to `shape`.
pub fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape == shape {
        return x.clone();
    }
    let sx = broadcast_strides(&x.shape, shape);
    let so = strides(shape);
    let mut out = vec![T::zero(); numel(shape)];
    for_each_row2(shape, &so, &sx, |o, _, ix, len, _, lx| {
        for (i, d) in out[o..o + len].iter_mut().enumerate() {
            *d = x.data[ix + i * lx];
        }
    });
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_with_transposes() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);
        let c2 = Tensor::matmul_t(&b, &a, true, true);
        assert_eq!(c2, c.transpose2());
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let x = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect());
        let p = x.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.data()[k * 6 + i * 3 + j], x.data()[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn broadcasting_and_reduction_are_adjoint() {
        let a = Tensor::from_vec(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[4, 1], vec![10.0, 20.0, 30.0, 40.0]);
        let c = broadcast_zip(&a, &b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.data()[3 * 3 + 2], 3.0 + 40.0);
        let s = sum_to(&c, &[4, 1]);
        assert_eq!(s.data()[0], 21.0 + 60.0);
        let up = broadcast_to(&b, &[2, 4, 3]);
        assert_eq!(up.data()[12 + 5], 20.0);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = Tensor::from_vec(&[2, 5, 2], (0..20).map(|v| v as f32).collect());
        let a = x.narrow(1, 0, 2);
        let b = x.narrow(1, 2, 3);
        assert_eq!(Tensor::concat(&[&a, &b], 1), x);
    }
}

//! Differentiable operations. Each backward rule is expressed with other
//! differentiable operations so gradients can be taken of gradients.

use std::rc::Rc;

use super::conv::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad};
use super::linalg::lu_solve;
use super::Var;
use crate::error::Result;
use crate::tensor::{broadcast_to, broadcast_zip, numel, sum_to, Real, Tensor};

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.sum_to(&sa)),
                needs[1].then(|| g.sum_to(&sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.sum_to(&sa)),
                needs[1].then(|| g.neg().sum_to(&sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.mul(&b).sum_to(a.shape())),
                needs[1].then(|| g.mul(&a).sum_to(b.shape())),
            ]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.div(&b).sum_to(a.shape())),
                needs[1].then(|| g.mul(&a).div(&b.mul(&b)).neg().sum_to(b.shape())),
            ]
        })
    }

    pub fn neg(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| -x), &[self], |g, _| vec![Some(g.neg())])
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| x * c), &[self], move |g, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| x + c), &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn exp(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op(self.value().map(T::exp), &[self], move |g, _| vec![Some(g.mul(&x.exp()))])
    }

    pub fn log(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op(self.value().map(T::ln), &[self], move |g, _| vec![Some(g.div(&x))])
    }

    pub fn sqrt(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op(self.value().map(T::sqrt), &[self], move |g, _| {
            vec![Some(g.div(&x.sqrt().scale(T::lit(2.0))))]
        })
    }

    pub fn powf(&self, p: T) -> Var<T> {
        let x = self.clone();
        Var::from_op(self.value().map(|v| v.powf(p)), &[self], move |g, _| {
            vec![Some(g.mul(&x.powf(p - T::one()).scale(p)))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op(self.value().map(sigmoid), &[self], move |g, _| {
            let s = x.sigmoid();
            let ds = s.mul(&s.neg().add_scalar(T::one()));
            vec![Some(g.mul(&ds))]
        })
    }

    pub fn relu(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op(self.value().map(|v| v.max(T::zero())), &[self], move |g, _| {
            let mask = x.value().map(|v| if v > T::zero() { T::one() } else { T::zero() });
            vec![Some(g.mul(&Var::constant(mask)))]
        })
    }

    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(Tensor::scalar(self.value().sum()), &[self], move |g, _| {
            vec![Some(g.broadcast_to(&shape))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Reduce broadcast dimensions so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        Var::from_op(sum_to(self.value(), shape), &[self], move |g, _| {
            vec![Some(g.broadcast_to(&orig))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        Var::from_op(broadcast_to(self.value(), shape), &[self], move |g, _| {
            vec![Some(g.sum_to(&orig))]
        })
    }

    /// Sum along `axis`; negative axes count from the end.
    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Var<T> {
        let axis = self.resolve_axis(axis);
        let mut kept = self.shape().to_vec();
        kept[axis] = 1;
        let reduced = self.sum_to(&kept);
        if keepdim {
            reduced
        } else {
            let mut squeezed = self.shape().to_vec();
            squeezed.remove(axis);
            reduced.reshape(&squeezed)
        }
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Var<T> {
        let n = self.shape()[self.resolve_axis(axis)];
        self.sum_axis(axis, keepdim).scale(T::one() / T::lit(n as f64))
    }

    fn resolve_axis(&self, axis: isize) -> usize {
        let nd = self.shape().len() as isize;
        let a = if axis < 0 { nd + axis } else { axis };
        assert!((0..nd).contains(&a), "axis {axis} out of range for {:?}", self.shape());
        a as usize
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        Var::from_op(self.value().clone().reshape(shape), &[self], move |g, _| {
            vec![Some(g.reshape(&orig))]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Var<T> {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Var::from_op(self.value().permute(perm), &[self], move |g, _| {
            vec![Some(g.permute(&inverse))]
        })
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var<T> {
        self.permute(&[1, 0])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let full = self.shape()[axis];
        Var::from_op(self.value().narrow(axis, start, len), &[self], move |g, _| {
            vec![Some(g.embed(axis, start, full))]
        })
    }

    /// Place `self` at `[start, start+len)` of a zero tensor whose `axis`
    /// has length `full`. Adjoint of [`Var::narrow`].
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Var<T> {
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        let before = start;
        let after = full - start - len;
        let mut parts = Vec::new();
        let zeros_before;
        let zeros_after;
        if before > 0 {
            shape[axis] = before;
            zeros_before = Tensor::zeros(&shape);
            parts.push(&zeros_before);
        }
        parts.push(self.value());
        if after > 0 {
            shape[axis] = after;
            zeros_after = Tensor::zeros(&shape);
            parts.push(&zeros_after);
        }
        let value = Tensor::concat(&parts, axis);
        Var::from_op(value, &[self], move |g, _| vec![Some(g.narrow(axis, start, len))])
    }

    /// Gather `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn take(&self, index: Rc<[u32]>, shape: &[usize]) -> Var<T> {
        assert_eq!(index.len(), numel(shape));
        let src = self.value().data();
        let data: Vec<T> = index.iter().map(|&i| src[i as usize]).collect();
        let orig = self.shape().to_vec();
        Var::from_op(Tensor::from_vec(shape, data), &[self], move |g, _| {
            vec![Some(g.scatter_add(index.clone(), &orig))]
        })
    }

    /// Scatter-add `out.flat[index[i]] += x[i]` into zeros of `shape`.
    /// Adjoint of [`Var::take`].
    pub fn scatter_add(&self, index: Rc<[u32]>, shape: &[usize]) -> Var<T> {
        assert_eq!(index.len(), self.value().numel());
        let mut out = Tensor::zeros(shape);
        {
            let dst = out.data_mut();
            for (&i, &v) in index.iter().zip(self.value().data()) {
                dst[i as usize] += v;
            }
        }
        let orig = self.shape().to_vec();
        Var::from_op(out, &[self], move |g, _| vec![Some(g.take(index.clone(), &orig))])
    }

    /// Row gather on a matrix: `out[i, :] = x[rows[i], :]`.
    pub fn gather_rows(&self, rows: Rc<[u32]>) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "gather_rows needs a matrix, got {s:?}");
        let (n, d) = (s[0], s[1]);
        let src = self.value().data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            data.extend_from_slice(&src[r as usize * d..(r as usize + 1) * d]);
        }
        Var::from_op(Tensor::from_vec(&[rows.len(), d], data), &[self], move |g, _| {
            vec![Some(g.scatter_rows(rows.clone(), n))]
        })
    }

    /// `out[rows[i], :] += x[i, :]` into an `[n, d]` zero matrix. Adjoint of
    /// [`Var::gather_rows`].
    pub fn scatter_rows(&self, rows: Rc<[u32]>, n: usize) -> Var<T> {
        let d = self.shape()[1];
        assert_eq!(self.shape()[0], rows.len());
        let mut out = Tensor::zeros(&[n, d]);
        {
            let dst = out.data_mut();
            for (i, &r) in rows.iter().enumerate() {
                let src = &self.value().data()[i * d..(i + 1) * d];
                for (o, &v) in dst[r as usize * d..(r as usize + 1) * d].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        Var::from_op(out, &[self], move |g, _| vec![Some(g.gather_rows(rows.clone()))])
    }

    /// `op(self) * op(other)` with optional transposes.
    pub fn matmul_t(&self, other: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        let value = Tensor::matmul_t(self.value(), other.value(), ta, tb);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op(value, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(&b, false, !tb)
                }
            });
            let gb = needs[1].then(|| {
                if tb {
                    g.matmul_t(&a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        self.matmul_t(other, false, false)
    }

    /// Stride-1 convolution of NCHW `self` with OIHW `weight`.
    pub fn conv2d(&self, weight: &Var<T>, pad: usize) -> Var<T> {
        let value = conv2d_forward(self.value(), weight.value(), pad);
        let (x, w) = (self.clone(), weight.clone());
        Var::from_op(value, &[self, weight], move |g, needs| {
            vec![
                needs[0].then(|| conv_input_grad(g, &w, x.shape(), pad)),
                needs[1].then(|| conv_weight_grad(&x, g, w.shape(), pad)),
            ]
        })
    }

    /// 2x2 max pooling with stride 2 (floor on odd sizes).
    pub fn max_pool2(&self) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "max_pool2 needs NCHW");
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value().data();
        let mut index = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    index.push(best as u32);
                }
            }
        }
        self.take(index.into(), &[s[0], s[1], ho, wo])
    }

    /// Maximum along the last axis (the axis is removed).
    pub fn max_last(&self) -> Var<T> {
        let s = self.shape();
        let cols = *s.last().expect("max_last on 0-d");
        let index: Vec<u32> = self
            .value()
            .argmax_rows()
            .into_iter()
            .enumerate()
            .map(|(r, c)| (r * cols + c) as u32)
            .collect();
        self.take(index.into(), &s[..s.len() - 1])
    }

    /// Solve `op(self) X = rhs`.
    pub fn solve(&self, rhs: &Var<T>, transpose: bool) -> Result<Var<T>> {
        let value = lu_solve(self.value(), rhs.value(), transpose)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Var::from_op(value, &[self, rhs], move |g, needs| {
            // gB = op(A)^{-T} g, gA = -gB X^T (transposed when op is a transpose).
            // X is re-solved from the recorded inputs so that it carries its own
            // dependence on A and B into higher derivatives.
            let gb = a.solve(g, !transpose).expect("system was solvable in the forward pass");
            let ga = needs[0].then(|| {
                let x = a.solve(&b, transpose).expect("system was solvable in the forward pass");
                if transpose {
                    x.matmul_t(&gb, false, true).neg()
                } else {
                    gb.matmul_t(&x, false, true).neg()
                }
            });
            vec![ga, needs[1].then(|| gb)]
        }))
    }

    pub fn l2_normalize_rows(&self, eps: T) -> Var<T> {
        let norm = self.mul(self).sum_axis(-1, true).add_scalar(eps).sqrt();
        self.div(&norm)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<T> {
        let s = self.shape().to_vec();
        let cols = *s.last().expect("log_softmax on 0-d");
        let maxes: Vec<T> = self
            .value()
            .data()
            .chunks(cols)
            .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        let mut keep = s.clone();
        *keep.last_mut().unwrap() = 1;
        let shift = Var::constant(Tensor::from_vec(&keep, maxes));
        let z = self.sub(&shift);
        let lse = z.exp().sum_axis(-1, true).log();
        z.sub(&lse)
    }

    /// Mean cross-entropy of `[batch, classes]` logits against labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], labels.len());
        let cols = s[1];
        let index: Vec<u32> = labels
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "label {c} out of range for {cols} classes");
                (r * cols + c) as u32
            })
            .collect();
        self.log_softmax().take(index.into(), &[labels.len()]).mean().neg()
    }
}

fn conv_input_grad<T: Real>(g: &Var<T>, w: &Var<T>, x_shape: &[usize], pad: usize) -> Var<T> {
    let value = conv2d_input_grad(g.value(), w.value(), x_shape, pad);
    let (g2, w2) = (g.clone(), w.clone());
    Var::from_op(value, &[g, w], move |u, needs| {
        vec![
            needs[0].then(|| u.conv2d(&w2, pad)),
            needs[1].then(|| conv_weight_grad(u, &g2, w2.shape(), pad)),
        ]
    })
}

fn conv_weight_grad<T: Real>(x: &Var<T>, g: &Var<T>, w_shape: &[usize], pad: usize) -> Var<T> {
    let value = conv2d_weight_grad(x.value(), g.value(), w_shape, pad);
    let (x2, g2) = (x.clone(), g.clone());
    Var::from_op(value, &[x, g], move |u, needs| {
        vec![
            needs[0].then(|| conv_input_grad(&g2, u, x2.shape(), pad)),
            needs[1].then(|| x2.conv2d(u, pad)),
        ]
    })
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Concatenate along `axis`.
pub fn concat<T: Real>(parts: &[Var<T>], axis: usize) -> Var<T> {
    let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let value = Tensor::concat(&values, axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let refs: Vec<&Var<T>> = parts.iter().collect();
    Var::from_op(value, &refs, move |g, needs| {
        let mut start = 0;
        lens.iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let part = need.then(|| g.narrow(axis, start, len));
                start += len;
                part
            })
            .collect()
    })
}

/// Stack equally shaped values along a new leading axis.
pub fn stack_rows<T: Real>(parts: &[Var<T>]) -> Var<T> {
    let reshaped: Vec<Var<T>> = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend_from_slice(p.shape());
            p.reshape(&s)
        })
        .collect();
    concat(&reshaped, 0)
}

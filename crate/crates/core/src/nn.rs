//! Parameter storage, initialization, batch normalization and optimizers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    /// Append every entry of `other`, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore<T>) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.push(format!("{prefix}{n}"), t);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Fresh gradient-tracking leaves holding copies of the parameters.
    pub fn to_vars(&self) -> Vec<Var<T>> {
        self.tensors.iter().map(|t| Var::param(t.clone())).collect()
    }

    pub fn to_constants(&self) -> Vec<Var<T>> {
        self.tensors.iter().map(|t| Var::constant(t.clone())).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Flat-vector view of all parameters in storage order.
    pub fn flatten(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Rebuild a store with this layout from a flat vector.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let n = t.numel();
                let part = Tensor::from_vec(t.shape(), flat[offset..offset + n].to_vec());
                offset += n;
                part
            })
            .collect();
        Ok(ParamStore {
            names: self.names.clone(),
            tensors,
        })
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(tensors.len(), self.tensors.len());
        for (a, b) in tensors.iter().zip(&self.tensors) {
            assert_eq!(a.shape(), b.shape());
        }
        ParamStore {
            names: self.names.clone(),
            tensors,
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Kaiming (He) fan-in normal initialization for ReLU networks.
pub fn kaiming_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer default.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect())
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
    /// Batch statistics of the current batch without touching running ones.
    Transductive,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

/// Batch normalization over an NCHW tensor with per-channel affine
/// parameters `gamma`, `beta` of shape `[C]`.
pub fn batch_norm<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: Option<&mut RunningStats<T>>,
    mode: NormMode,
) -> Var<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "batch_norm expects NCHW, got {s:?}");
    let c = s[1];
    let chan = [1, c, 1, 1];
    let gamma = gamma.reshape(&chan);
    let beta = beta.reshape(&chan);
    let eps = T::lit(BN_EPS);
    match mode {
        NormMode::Eval => {
            let stats = running.expect("eval-mode batch norm needs running statistics");
            let inv: Vec<T> = stats.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mean = Var::constant(stats.mean.clone().reshape(&chan));
            let inv = Var::constant(Tensor::from_vec(&chan, inv));
            x.sub(&mean).mul(&inv.mul(&gamma)).add(&beta)
        }
        NormMode::Train | NormMode::Transductive => {
            let count = T::lit((s[0] * s[2] * s[3]) as f64);
            let mean = x.sum_to(&chan).scale(T::one() / count);
            let centered = x.sub(&mean);
            let var = centered.mul(&centered).sum_to(&chan).scale(T::one() / count);
            if mode == NormMode::Train {
                if let Some(stats) = running {
                    let m = T::lit(BN_MOMENTUM);
                    let unbias = if count > T::one() { count / (count - T::one()) } else { T::one() };
                    for i in 0..c {
                        let bm = mean.value().data()[i];
                        let bv = var.value().data()[i] * unbias;
                        let rm = &mut stats.mean.data_mut()[i];
                        *rm = (T::one() - m) * *rm + m * bm;
                        let rv = &mut stats.var.data_mut()[i];
                        *rv = (T::one() - m) * *rv + m * bv;
                    }
                }
            }
            let inv = var.add_scalar(eps).powf(T::lit(-0.5));
            centered.mul(&inv.mul(&gamma)).add(&beta)
        }
    }
}

/// `x W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
pub fn linear<T: Real>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
    let y = x.matmul(weight);
    match bias {
        Some(b) => y.add(b),
        None => y,
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        let mut refs: Vec<&mut Tensor<T>> = params.tensors_mut().iter_mut().collect();
        self.step_tensors(&mut refs, grads);
    }

    /// Update an arbitrary list of tensors; the list layout must stay the
    /// same across calls.
    pub fn step_tensors(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (i, g) in grads.iter().enumerate() {
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Plain gradient descent `p <- p - lr * g`.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
    let lr = T::lit(lr);
    for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
        for (p, &gj) in t.data_mut().iter_mut().zip(g.data()) {
            *p = *p - lr * gj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_view_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::<f32>::new();
        p.push("a", normal_tensor(&[2, 3], 1.0, &mut rng));
        p.push("b", normal_tensor(&[4], 1.0, &mut rng));
        let flat = p.flatten();
        assert_eq!(flat.len(), 10);
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert!(p.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.push("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = Adam::new(0.001);
        opt.step(&mut p, &[Tensor::from_vec(&[2], vec![3.0, -0.5])]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.999).abs() < 1e-9);
        assert!((w[1] + 0.999).abs() < 1e-9);
    }

    #[test]
    fn train_mode_batch_norm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::constant(normal_tensor::<f64>(&[4, 2, 3, 3], 2.0, &mut rng).map(|v| v + 5.0));
        let gamma = Var::constant(Tensor::ones(&[2]));
        let beta = Var::constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, Some(&mut stats), NormMode::Train);
        let per_channel = y.value().permute(&[1, 0, 2, 3]);
        for ch in per_channel.data().chunks(36) {
            let mean: f64 = ch.iter().sum::<f64>() / 36.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(stats.mean.data()[0] > 0.3);
    }
}

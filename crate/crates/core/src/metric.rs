//! Metric-learning family: prototypes, relation module, local-descriptor
//! nearest neighbours, covariance metric and the adaptive-threshold gate.
//!
//! Local-descriptor functions take support descriptors grouped per class as
//! `[n_way, m, d]` and query descriptors grouped per image as `[nq, hw, d]`,
//! and return `[nq, n_way]` class scores.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::nn::{batch_norm, fan_in_uniform, kaiming_normal, NormMode, ParamStore, RunningStats};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-12;

/// Class-mean matrix `[n_way, n]` with `1/count` where `labels[j] == c`.
fn mean_matrix<T: Real>(labels: &[usize], n_way: usize) -> Result<Tensor<T>> {
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Shape(format!("label {l} out of range for {n_way} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("class {c} has no support example")));
    }
    let mut m = Tensor::zeros(&[n_way, labels.len()]);
    for (j, &l) in labels.iter().enumerate() {
        m.data_mut()[l * labels.len() + j] = T::one() / T::lit(counts[l] as f64);
    }
    Ok(m)
}

/// Class prototypes `[n_way, d]`: the mean support embedding per class.
pub fn prototypes<T: Real>(support: &Var<T>, labels: &[usize], n_way: usize) -> Result<Var<T>> {
    Ok(Var::constant(mean_matrix(labels, n_way)?).matmul(support))
}

/// Negative squared Euclidean distance of each query `[nq, d]` to each
/// class prototype.
pub fn proto_scores<T: Real>(support: &Var<T>, labels: &[usize], n_way: usize, query: &Var<T>) -> Result<Var<T>> {
    let protos = prototypes(support, labels, n_way)?;
    let qq = query.mul(query).sum_axis(1, true);
    let pp = protos.mul(&protos).sum_axis(1, false);
    let cross = query.matmul_t(&protos, false, true);
    Ok(cross.scale(T::lit(2.0)).sub(&qq).sub(&pp))
}

/// Indices of the `k` most similar support rows for each query row, by
/// inner product, best first. Ties go to the lower index.
pub fn top_k_rows<T: Real>(query: &Tensor<T>, support: &Tensor<T>, k: usize) -> Vec<u32> {
    let (nq, m) = (query.shape()[0], support.shape()[0]);
    assert!(k >= 1 && k <= m);
    let d = query.shape()[1];
    let chunk = (1 << 20) / m.max(1) + 1;
    let mut out = Vec::with_capacity(nq * k);
    let mut best: Vec<(T, u32)> = Vec::with_capacity(k + 1);
    for start in (0..nq).step_by(chunk) {
        let rows = chunk.min(nq - start);
        let q = Tensor::from_vec(&[rows, d], query.data()[start * d..(start + rows) * d].to_vec());
        let sims = Tensor::matmul_t(&q, support, false, true);
        for r in sims.data().chunks(m) {
            best.clear();
            for (j, &s) in r.iter().enumerate() {
                if best.len() == k && s <= best[k - 1].0 {
                    continue;
                }
                let pos = best.iter().position(|&(b, _)| s > b).unwrap_or(best.len());
                best.insert(pos, (s, j as u32));
                best.truncate(k);
            }
            out.extend(best.iter().map(|&(_, j)| j));
        }
    }
    out
}

fn check_descriptors<T: Real>(support: &Var<T>, query: &Var<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (s, q) = (support.shape(), query.shape());
    if s.len() != 3 || q.len() != 3 || s[2] != q[2] {
        return Err(Error::Shape(format!(
            "descriptor sets must be [n_way, m, d] and [nq, hw, d], got {s:?} and {q:?}"
        )));
    }
    Ok((s[0], s[1], q[0], q[1], s[2]))
}

/// For every query descriptor and class: the `k` best cosine similarities to
/// that class's support descriptors, as `[nq*hw, n_way, k]`.
fn nearest_similarities<T: Real>(support: &Var<T>, query: &Var<T>, k: usize) -> Result<Var<T>> {
    let (n_way, m, nq, hw, d) = check_descriptors(support, query)?;
    if k == 0 || k > m {
        return Err(Error::Parameter(format!(
            "neighbour count k={k} must be in 1..={m} (support descriptors per class)"
        )));
    }
    let eps = T::lit(NORM_EPS);
    let s = support.reshape(&[n_way * m, d]).l2_normalize_rows(eps);
    let q = query.reshape(&[nq * hw, d]).l2_normalize_rows(eps);
    let q3 = q.reshape(&[nq * hw, 1, d]);
    let mut per_class = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let sc = s.value().narrow(0, c * m, m);
        let idx: Vec<u32> = top_k_rows(q.value(), &sc, k)
            .into_iter()
            .map(|j| j + (c * m) as u32)
            .collect();
        let picked = s.gather_rows(Rc::from(idx)).reshape(&[nq * hw, k, d]);
        per_class.push(picked.mul(&q3).sum_axis(-1, false).reshape(&[nq * hw, 1, k]));
    }
    Ok(concat(&per_class, 1))
}

/// Image-to-class measure: sum over query descriptors of the summed top-`k`
/// cosine similarities to each class's support descriptors.
pub fn dn4_scores<T: Real>(support: &Var<T>, query: &Var<T>, k: usize) -> Result<Var<T>> {
    let (n_way, _, nq, hw, _) = check_descriptors(support, query)?;
    let sims = nearest_similarities(support, query, k)?;
    Ok(sims
        .sum_axis(-1, false)
        .reshape(&[nq, hw, n_way])
        .sum_axis(1, false))
}

pub const COVA_EPS_REL: f64 = 1e-3;
pub const COVA_EPS_FLOOR: f64 = 1e-6;
pub const COVA_INIT_SCALE: f64 = 100.0;

/// Sample covariance `X_c^T X_c / (m - 1)` of the rows of `x: [m, d]`, with
/// `X_c` the column-centred rows. Zero for a single row.
pub fn class_covariance<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![T::zero(); d];
    for r in x.data().chunks(d) {
        for (a, &v) in mean.iter_mut().zip(r) {
            *a = *a + v;
        }
    }
    let mut centred = x.clone();
    for r in centred.data_mut().chunks_mut(d) {
        for (v, &mu) in r.iter_mut().zip(&mean) {
            *v = *v - mu / T::lit(m as f64);
        }
    }
    let denom = T::lit(m.saturating_sub(1).max(1) as f64);
    Tensor::matmul_t(&centred, &centred, true, false).map(|v| v / denom)
}

/// Ridge added to a class covariance: `max(1e-3 * trace / d, 1e-6)`.
pub fn cova_stabilizer<T: Real>(sigma: &Tensor<T>) -> T {
    let d = sigma.shape()[0];
    let trace = (0..d).fold(T::zero(), |a, i| a + sigma.data()[i * d + i]);
    (T::lit(COVA_EPS_REL) * trace / T::lit(d as f64)).max(T::lit(COVA_EPS_FLOOR))
}

/// Covariance metric. Support descriptors are unit-normalized, each class's
/// covariance is estimated and stabilized; query descriptors are centred on
/// their image mean and unit-normalized; the class score is the mean of the
/// quadratic forms `q^T Sigma_c q` over the query descriptors.
pub fn cova_scores<T: Real>(support: &Var<T>, query: &Var<T>) -> Result<Var<T>> {
    let (n_way, m, nq, hw, d) = check_descriptors(support, query)?;
    let eps = T::lit(NORM_EPS);
    let s = support.reshape(&[n_way * m, d]).l2_normalize_rows(eps);
    let denom = T::one() / T::lit(m.saturating_sub(1).max(1) as f64);
    let mut sigmas = Vec::with_capacity(n_way);
    for c in 0..n_way {
        let sc = s.narrow(0, c * m, m);
        let xc = sc.sub(&sc.mean_axis(0, true));
        let sigma = xc.matmul_t(&xc, true, false).scale(denom);
        let ridge = cova_stabilizer(sigma.value());
        sigmas.push(sigma.add(&Var::constant(Tensor::eye(d).map(|v| v * ridge))));
    }
    let stacked = concat(&sigmas, 1);
    let q = query.sub(&query.mean_axis(1, true)).reshape(&[nq * hw, d]).l2_normalize_rows(eps);
    let forms = q
        .matmul(&stacked)
        .reshape(&[nq * hw, n_way, d])
        .mul(&q.reshape(&[nq * hw, 1, d]))
        .sum_axis(-1, false);
    Ok(forms.reshape(&[nq, hw, n_way]).mean_axis(1, false))
}

/// Default gate sharpness.
pub const ATL_TAU: f64 = 25.0;
pub const THRESHOLD_HIDDEN: usize = 32;

/// Parameters of the two-layer threshold perceptron: `w1 [d, h]`, `b1 [h]`,
/// `w2 [h, 1]`, `b2 [1]`.
pub fn init_threshold_net<T: Real>(d: usize, hidden: usize, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    p.push("w1", fan_in_uniform(&[d, hidden], d, rng));
    p.push("b1", Tensor::zeros(&[hidden]));
    p.push("w2", fan_in_uniform(&[hidden, 1], hidden, rng));
    p.push("b2", Tensor::zeros(&[1]));
    p
}

/// Per-descriptor thresholds `sigma(F(x))` in `(0, 1)` for `x: [n, d]`.
pub fn thresholds<T: Real>(tnet: &[Var<T>], x: &Var<T>) -> Var<T> {
    x.matmul(&tnet[0])
        .add(&tnet[1])
        .relu()
        .matmul(&tnet[2])
        .add(&tnet[3])
        .sigmoid()
}

/// Gated sum over descriptors: `sims: [nq, hw, c]`, `v: [nq, hw, 1]`.
/// Soft gates are `sigma(tau * (sim - v))`; hard gates keep similarities
/// strictly above the threshold.
pub fn gated_sum<T: Real>(sims: &Var<T>, v: &Var<T>, tau: f64, hard: bool) -> Var<T> {
    let gate = if hard {
        let mask = crate::tensor::broadcast_zip(sims.value(), v.value(), |s, t| {
            if s > t {
                T::one()
            } else {
                T::zero()
            }
        });
        Var::constant(mask)
    } else {
        sims.sub(v).scale(T::lit(tau)).sigmoid()
    };
    gate.mul(sims).sum_axis(1, false)
}

/// Adaptive-threshold scores: each query descriptor's best cosine
/// similarity to each class, gated against a threshold predicted from the
/// raw descriptor, summed over descriptors.
pub fn atl_scores<T: Real>(tnet: &[Var<T>], support: &Var<T>, query: &Var<T>, tau: f64, hard: bool) -> Result<Var<T>> {
    let (n_way, _, nq, hw, d) = check_descriptors(support, query)?;
    let sims = nearest_similarities(support, query, 1)?.reshape(&[nq, hw, n_way]);
    let v = thresholds(tnet, &query.reshape(&[nq * hw, d])).reshape(&[nq, hw, 1]);
    Ok(gated_sum(&sims, &v, tau, hard))
}

/// Hidden width of the relation module's fully connected layer.
pub const RELATION_HIDDEN: usize = 8;

/// Relation module over `[c, h, w]` feature-map pairs: conv(2c -> c),
/// BN, ReLU, pool, conv(c -> c), BN, ReLU, pool, FC -> hidden, ReLU,
/// FC -> 1, sigmoid.
pub fn init_relation<T: Real>(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> ParamStore<T> {
    let flat = c * (h / 4) * (w / 4);
    let mut p = ParamStore::new();
    p.push("conv1", kaiming_normal(&[c, 2 * c, 3, 3], 2 * c * 9, rng));
    p.push("gamma1", Tensor::ones(&[c]));
    p.push("beta1", Tensor::zeros(&[c]));
    p.push("conv2", kaiming_normal(&[c, c, 3, 3], c * 9, rng));
    p.push("gamma2", Tensor::ones(&[c]));
    p.push("beta2", Tensor::zeros(&[c]));
    p.push("fc1", fan_in_uniform(&[flat, RELATION_HIDDEN], flat, rng));
    p.push("fc1_b", Tensor::zeros(&[RELATION_HIDDEN]));
    p.push("fc2", fan_in_uniform(&[RELATION_HIDDEN, 1], RELATION_HIDDEN, rng));
    p.push("fc2_b", Tensor::zeros(&[1]));
    p
}

/// Sum the support maps `[n_way * k, c, h, w]` (class-major) per class.
pub fn fuse_support<T: Real>(maps: &Var<T>, n_way: usize) -> Var<T> {
    let s = maps.shape().to_vec();
    let k = s[0] / n_way;
    maps.reshape(&[n_way, k, s[1], s[2], s[3]]).sum_axis(1, false)
}

/// Relation scores in `[0, 1]` of each query map against each fused class
/// map. The first convolution acts on the channel concatenation
/// (support, query); it is evaluated as the sum of its two input-channel
/// halves so each map is convolved once.
pub fn relation_scores<T: Real>(
    params: &[Var<T>],
    running: &mut [RunningStats<T>],
    classes: &Var<T>,
    query: &Var<T>,
    mode: NormMode,
) -> Result<Var<T>> {
    let (cs, qs) = (classes.shape().to_vec(), query.shape().to_vec());
    if cs.len() != 4 || qs.len() != 4 || cs[1..] != qs[1..] {
        return Err(Error::Config(format!("relation inputs {cs:?} and {qs:?} are incompatible")));
    }
    let (n_way, nq, c, h, w) = (cs[0], qs[0], cs[1], cs[2], cs[3]);
    if params.len() != 10 || params[0].shape() != [c, 2 * c, 3, 3] || params[6].shape()[0] != c * (h / 4) * (w / 4) {
        return Err(Error::Config("relation weights do not match the feature-map shape".into()));
    }
    if running.len() != 2 {
        return Err(Error::Config("relation module needs two running-stat slots".into()));
    }
    let ws = params[0].narrow(1, 0, c);
    let wq = params[0].narrow(1, c, c);
    let a = classes.conv2d(&ws, 1).reshape(&[1, n_way, c, h, w]);
    let b = query.conv2d(&wq, 1).reshape(&[nq, 1, c, h, w]);
    let pair = b.add(&a).reshape(&[nq * n_way, c, h, w]);
    let (r0, r1) = running.split_at_mut(1);
    let x = batch_norm(&pair, &params[1], &params[2], Some(&mut r0[0]), mode)
        .relu()
        .max_pool2();
    let x = batch_norm(&x.conv2d(&params[3], 1), &params[4], &params[5], Some(&mut r1[0]), mode)
        .relu()
        .max_pool2();
    let flat = x.reshape(&[nq * n_way, c * (h / 4) * (w / 4)]);
    let out = flat
        .matmul(&params[6])
        .add(&params[7])
        .relu()
        .matmul(&params[8])
        .add(&params[9])
        .sigmoid();
    Ok(out.reshape(&[nq, n_way]))
}

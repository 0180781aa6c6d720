//! Fine-tuning family: pretrain a backbone with a classification head on the
//! base classes, then fit a fresh head on each episode's support embeddings.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, no_grad, Var};
use crate::backbone::{chips_tensor, global_embed_batch, Backbone};
use crate::data::{Episode, ImageChip};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, normal_tensor, sgd_step, Adam, NormMode, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// `x W + b`.
    Linear,
    /// Scaled cosine similarity to each weight column, no bias.
    Cosine,
}

/// Default temperature applied to cosine scores before the softmax.
pub const COSINE_SCALE: f64 = 10.0;

const NORM_EPS: f64 = 1e-12;

/// Linear classification head `W: [d, c]` with optional bias `[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> LinearHead<T> {
    pub fn scores(&self, f: &[T]) -> Vec<T> {
        let (d, c) = (self.weight.shape()[0], self.weight.shape()[1]);
        assert_eq!(f.len(), d);
        (0..c)
            .map(|j| {
                let dot = (0..d).fold(T::zero(), |acc, i| acc + f[i] * self.weight.data()[i * c + j]);
                dot + self.bias.as_ref().map_or(T::zero(), |b| b.data()[j])
            })
            .collect()
    }
}

/// Cosine head: the columns of `weight: [d, c]` are the class vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHead<T: Real> {
    weight: Tensor<T>,
}

impl<T: Real> CosineHead<T> {
    /// Zero columns are replaced by fresh random vectors.
    pub fn new(mut weight: Tensor<T>, rng: &mut impl Rng) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::Shape(format!("cosine head must be [d, c], got {:?}", weight.shape())));
        }
        if !weight.all_finite() {
            return Err(Error::Parameter("cosine head has non-finite weights".into()));
        }
        let (d, c) = (weight.shape()[0], weight.shape()[1]);
        for j in 0..c {
            if (0..d).all(|i| weight.data()[i * c + j] == T::zero()) {
                let fresh: Tensor<T> = normal_tensor(&[d], 1.0 / (d as f64).sqrt(), rng);
                for i in 0..d {
                    weight.data_mut()[i * c + j] = fresh.data()[i];
                }
            }
        }
        Ok(CosineHead { weight })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `s_j = f.w_j / (|f| |w_j|)` for every class column `w_j`.
pub fn cosine_scores<T: Real>(f: &[T], head: &CosineHead<T>) -> Result<Vec<T>> {
    let (d, c) = (head.weight.shape()[0], head.weight.shape()[1]);
    if f.len() != d {
        return Err(Error::Shape(format!("feature has dim {}, head expects {d}", f.len())));
    }
    let fnorm = f.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if fnorm == T::zero() {
        return Err(Error::UndefinedSimilarity);
    }
    let w = head.weight.data();
    Ok((0..c)
        .map(|j| {
            let (mut dot, mut wn) = (T::zero(), T::zero());
            for i in 0..d {
                let wij = w[i * c + j];
                dot = dot + f[i] * wij;
                wn = wn + wij * wij;
            }
            dot / (fnorm * wn.sqrt())
        })
        .collect())
}

/// Differentiable cosine logits `scale * cos(x_n, w_j)` for `x: [n, d]`,
/// `w: [d, c]`.
pub fn cosine_logits<T: Real>(x: &Var<T>, w: &Var<T>, scale: T) -> Var<T> {
    let xn = x.l2_normalize_rows(T::lit(NORM_EPS));
    let wnorm = w.mul(w).sum_axis(0, true).add_scalar(T::lit(NORM_EPS)).sqrt();
    xn.matmul(&w.div(&wnorm)).scale(scale)
}

/// Fresh head parameters: `weight` and, for linear heads, `bias`.
pub fn init_head<T: Real>(kind: HeadKind, d: usize, c: usize, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    match kind {
        HeadKind::Linear => {
            p.push("weight", fan_in_uniform(&[d, c], d, rng));
            p.push("bias", Tensor::zeros(&[c]));
        }
        HeadKind::Cosine => {
            p.push("weight", normal_tensor(&[d, c], 1.0 / (d as f64).sqrt(), rng));
        }
    }
    p
}

/// Logits of a head given as parameter variables in [`init_head`] order.
pub fn head_logits<T: Real>(kind: HeadKind, x: &Var<T>, params: &[Var<T>], scale: T) -> Var<T> {
    match kind {
        HeadKind::Linear => x.matmul(&params[0]).add(&params[1]),
        HeadKind::Cosine => cosine_logits(x, &params[0], scale),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            scale: COSINE_SCALE,
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub losses: Vec<f32>,
    /// Training accuracy of each mini-batch.
    pub batch_accuracy: Vec<f32>,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Mini-batch cross-entropy training of `backbone` and a base-class `head`
/// on labelled chips. Labels must already be dense `0..c`.
pub fn pretrain(
    backbone: &mut Backbone<f32>,
    head: &mut ParamStore<f32>,
    kind: HeadKind,
    data: &[(Arc<ImageChip>, usize)],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::InsufficientData("pretraining set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretraining needs batch_size >= 1 and lr > 0".into()));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let started = std::time::Instant::now();
        order.shuffle(rng);
        let mut log = EpochLog::default();
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let chips: Vec<&ImageChip> = batch.iter().map(|&i| data[i].0.as_ref()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let body = backbone.params.to_vars();
            let hp = head.to_vars();
            let x = Var::constant(chips_tensor(&chips));
            let fm = backbone.forward_with(&body, &x, NormMode::Train)?;
            let logits = head_logits(kind, &global_embed_batch(&fm), &hp, cfg.scale as f32);
            let loss = logits.cross_entropy(&labels);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::DivergedTraining {
                    step,
                    detail: format!("pretraining loss became {value}"),
                });
            }
            let inputs: Vec<&Var<f32>> = body.iter().chain(&hp).collect();
            let grads: Vec<Tensor<f32>> = grad(&loss, &inputs, false)
                .into_iter()
                .zip(&inputs)
                .map(|(g, v)| g.map_or_else(|| Tensor::zeros(v.shape()), |g| g.value().clone()))
                .collect();
            let mut targets: Vec<&mut Tensor<f32>> = backbone
                .params
                .tensors_mut()
                .iter_mut()
                .chain(head.tensors_mut().iter_mut())
                .collect();
            adam.step_tensors(&mut targets, &grads);
            let hits = logits
                .value()
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            correct += hits;
            log.losses.push(value);
            log.batch_accuracy.push(hits as f32 / labels.len() as f32);
            step += 1;
        }
        log.accuracy = correct as f64 / data.len() as f64;
        log.seconds = started.elapsed().as_secs_f64();
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 100,
            lr: 0.01,
            scale: COSINE_SCALE,
        }
    }
}

/// Fit a new `n_way` head on support embeddings `[n, d]` with full-batch
/// gradient descent.
pub fn finetune_head(
    kind: HeadKind,
    support: &Tensor<f32>,
    labels: &[usize],
    n_way: usize,
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<ParamStore<f32>> {
    let d = support.shape()[1];
    let mut head = init_head(kind, d, n_way, rng);
    if kind == HeadKind::Cosine {
        let fixed = CosineHead::new(head.tensors()[0].clone(), rng)?;
        head.tensors_mut()[0] = fixed.weight;
    }
    let x = Var::constant(support.clone());
    for step in 0..cfg.steps {
        let hp = head.to_vars();
        let loss = head_logits(kind, &x, &hp, cfg.scale as f32).cross_entropy(labels);
        if !loss.item().is_finite() {
            return Err(Error::DivergedTraining {
                step,
                detail: "fine-tuning loss is not finite".into(),
            });
        }
        let refs: Vec<&Var<f32>> = hp.iter().collect();
        let grads = crate::autodiff::grad_tensors(&loss, &refs);
        sgd_step(&mut head, &grads, cfg.lr);
    }
    Ok(head)
}

/// Fine-tune a head on support embeddings and return query predictions.
pub fn finetune_predict(
    kind: HeadKind,
    support: &Tensor<f32>,
    labels: &[usize],
    query: &Tensor<f32>,
    n_way: usize,
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let head = finetune_head(kind, support, labels, n_way, cfg, rng)?;
    let logits = no_grad(|| head_logits(kind, &Var::constant(query.clone()), &head.to_constants(), cfg.scale as f32));
    Ok(logits.value().argmax_rows())
}

/// Classify an episode's queries with a frozen backbone and a head fitted on
/// its support set.
pub fn finetune_episode(
    episode: &Episode,
    backbone: &Backbone<f32>,
    kind: HeadKind,
    cfg: &FinetuneConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let spec = crate::data::EpisodeSpec::new(
        episode.n_way(),
        episode.support.len() / episode.n_way().max(1),
        episode.query.len() / episode.n_way().max(1),
    );
    episode.validate(&spec)?;
    let flat = |fm: Tensor<f32>| {
        let n = fm.shape()[0];
        let d = fm.numel() / n.max(1);
        fm.reshape(&[n, d])
    };
    let s = flat(backbone.features(&episode.support_chips(), 32)?);
    let q = flat(backbone.features(&episode.query_chips(), 32)?);
    finetune_predict(kind, &s, &episode.support_labels(), &q, episode.n_way(), cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_orthogonal_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]);
        let head = CosineHead::new(w, &mut rng).unwrap();
        let s = cosine_scores(&[3.0, 0.0], &head).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        assert!(matches!(cosine_scores(&[0.0, 0.0], &head), Err(Error::UndefinedSimilarity)));
    }

    #[test]
    fn zero_columns_are_reinitialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = CosineHead::new(Tensor::<f64>::zeros(&[4, 3]), &mut rng).unwrap();
        for j in 0..3 {
            assert!((0..4).any(|i| head.weight().data()[i * 3 + j] != 0.0));
        }
    }

    #[test]
    fn var_logits_match_plain_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Tensor<f64> = normal_tensor(&[6, 3], 1.0, &mut rng);
        let x: Tensor<f64> = normal_tensor(&[2, 6], 1.0, &mut rng);
        let head = CosineHead::new(w.clone(), &mut rng).unwrap();
        let l = cosine_logits(&Var::constant(x.clone()), &Var::constant(w), 1.0);
        for r in 0..2 {
            let s = cosine_scores(&x.data()[r * 6..(r + 1) * 6], &head).unwrap();
            for j in 0..3 {
                assert!((l.value().data()[r * 3 + j] - s[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn separable_support_is_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_way = 5;
        let d = 12;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..n_way {
            for k in 0..3 {
                let mut v = vec![0.1f32 * k as f32; d];
                v[c] += 3.0;
                data.extend(v);
                labels.push(c);
            }
        }
        let x = Tensor::from_vec(&[labels.len(), d], data);
        for kind in [HeadKind::Linear, HeadKind::Cosine] {
            let pred = finetune_predict(kind, &x, &labels, &x, n_way, &FinetuneConfig::default(), &mut rng).unwrap();
            assert_eq!(pred, labels, "{kind:?}");
            let head = finetune_head(kind, &x, &labels, n_way, &FinetuneConfig::default(), &mut rng).unwrap();
            assert_eq!(head.tensors()[0].shape(), &[d, n_way]);
        }
    }
}

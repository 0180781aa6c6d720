//! A trained method: backbone, method-specific parameters and the scoring
//! rule that turns support and query feature maps into class logits.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Hyper;
use super::registry::{lookup, Method};
use crate::autodiff::{grad, no_grad, Var};
use crate::backbone::{chips_tensor, global_embed_batch, local_descriptors_batch, Backbone, Conv64FConfig};
use crate::checkpoint::{check_layout, Checkpoint};
use crate::data::{ClassChips, Episode, ImageChip};
use crate::error::{Error, Result};
use crate::finetune::{finetune_predict, head_logits, init_head, FinetuneConfig, HeadKind};
use crate::meta::{inner_adapt, meta_gradient, one_hot, r2d2_head, MetaConfig, MetaTask};
use crate::metric::{
    atl_scores, cova_scores, dn4_scores, fuse_support, init_relation, init_threshold_net, proto_scores,
    relation_scores, COVA_INIT_SCALE, THRESHOLD_HIDDEN,
};
use crate::nn::{NormMode, ParamStore, RunningStats};
use crate::tensor::Tensor;

/// Chips per forward pass when computing features without a graph.
pub const FEATURE_BATCH: usize = 32;

/// Metadata stored next to the tensors of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub method: String,
    pub hyper: Hyper,
    pub backbone: Conv64FConfig,
    /// Output width of the learned head (base classes or episode ways).
    pub head_classes: usize,
    /// Anything else the caller wants to keep, typically the run config.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub method: Method,
    pub hyper: Hyper,
    pub backbone: Backbone<f32>,
    /// Method-specific parameters (classifier head, ridge scalars, threshold
    /// net, relation module). Empty for prototype and DN4 models.
    pub head: ParamStore<f32>,
    /// Batch-norm statistics of the relation module.
    pub relation_running: Vec<RunningStats<f32>>,
    pub head_classes: usize,
}

fn scalar(v: f64) -> Tensor<f32> {
    Tensor::from_vec(&[1], vec![v as f32])
}

fn class_major(labels: &[usize], n_way: usize) -> Result<usize> {
    let k = labels.len() / n_way.max(1);
    if k == 0 || labels.len() != n_way * k || labels.iter().enumerate().any(|(i, &l)| l != i / k) {
        return Err(Error::InvalidEpisode("support labels must be class-major with equal shots".into()));
    }
    Ok(k)
}

/// Split a graph of `[n, ..]` rows into the first `ns` and the rest.
fn split_rows(x: &Var<f32>, ns: usize) -> (Var<f32>, Var<f32>) {
    let n = x.shape()[0];
    (x.narrow(0, 0, ns), x.narrow(0, ns, n - ns))
}

fn hits(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Outcome of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f32,
    pub accuracy: f32,
}

impl Model {
    /// Fresh model. `head_classes` is the number of base classes for the
    /// fine-tuning family and the episode width for MAML and ANIL; other
    /// methods ignore it.
    pub fn init(method: Method, hyper: Hyper, head_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let config = Conv64FConfig::new(hyper.pooling);
        let backbone = Backbone::init(config, rng)?;
        let d = config.embed_dim();
        let [c, h, w] = config.feature_shape();
        let mut relation_running = Vec::new();
        let head = match method {
            Method::Baseline => init_head(HeadKind::Linear, d, head_classes, rng),
            Method::BaselinePlusPlus => init_head(HeadKind::Cosine, d, head_classes, rng),
            Method::Maml | Method::Anil => init_head(HeadKind::Linear, d, head_classes, rng),
            Method::R2d2 => {
                let mut p = ParamStore::new();
                p.push("log_lambda", scalar(hyper.lambda_init.ln()));
                p.push("scale", scalar(1.0));
                p.push("bias", scalar(0.0));
                p
            }
            Method::CovaMNet => {
                let mut p = ParamStore::new();
                p.push("scale", scalar(COVA_INIT_SCALE));
                p
            }
            Method::AtlNet => init_threshold_net(c, THRESHOLD_HIDDEN, rng),
            Method::RelationNet => {
                relation_running = vec![RunningStats::new(c), RunningStats::new(c)];
                init_relation(c, h, w, rng)
            }
            Method::ProtoNet | Method::Dn4 => ParamStore::new(),
        };
        Ok(Model {
            method,
            hyper,
            backbone,
            head,
            relation_running,
            head_classes,
        })
    }

    fn head_kind(&self) -> HeadKind {
        if self.method == Method::BaselinePlusPlus {
            HeadKind::Cosine
        } else {
            HeadKind::Linear
        }
    }

    /// Class logits `[nq, n_way]` from support maps `[ns, c, h, w]`
    /// (class-major) and query maps `[nq, c, h, w]`, for the episodic
    /// families. `mode` selects the relation module's normalization; any
    /// mode other than `Train` also enables the hard threshold gate when it
    /// is configured.
    pub fn scores(
        &mut self,
        head: &[Var<f32>],
        support: &Var<f32>,
        labels: &[usize],
        n_way: usize,
        query: &Var<f32>,
        mode: NormMode,
    ) -> Result<Var<f32>> {
        let k = class_major(labels, n_way)?;
        let descriptors = |s: &Var<f32>, q: &Var<f32>| {
            let ls = local_descriptors_batch(s);
            let (hw, c) = (ls.shape()[1], ls.shape()[2]);
            (ls.reshape(&[n_way, k * hw, c]), local_descriptors_batch(q))
        };
        match self.method {
            Method::ProtoNet => proto_scores(&global_embed_batch(support), labels, n_way, &global_embed_batch(query)),
            Method::R2d2 => {
                let y = Var::constant(one_hot(labels, n_way));
                let w = r2d2_head(&global_embed_batch(support), &y, &head[0].exp())?;
                Ok(global_embed_batch(query).matmul(&w).mul(&head[1]).add(&head[2]))
            }
            Method::Dn4 => {
                let (s, q) = descriptors(support, query);
                dn4_scores(&s, &q, self.hyper.k)
            }
            Method::CovaMNet => {
                let (s, q) = descriptors(support, query);
                Ok(cova_scores(&s, &q)?.mul(&head[0]))
            }
            Method::AtlNet => {
                let (s, q) = descriptors(support, query);
                let hard = self.hyper.hard_gate && mode != NormMode::Train;
                atl_scores(head, &s, &q, self.hyper.tau, hard)
            }
            Method::RelationNet => relation_scores(
                head,
                &mut self.relation_running,
                &fuse_support(support, n_way),
                query,
                mode,
            ),
            m => Err(Error::Config(format!("{m} does not score feature maps episodically"))),
        }
    }

    /// Episode loss on the logits from [`Model::scores`]: squared error
    /// against one-hot targets for the relation module, cross-entropy
    /// otherwise.
    pub fn loss(&self, logits: &Var<f32>, labels: &[usize]) -> Var<f32> {
        if self.method == Method::RelationNet {
            let target = Var::constant(one_hot(labels, logits.shape()[1]));
            let diff = logits.sub(&target);
            diff.mul(&diff).mean()
        } else {
            logits.cross_entropy(labels)
        }
    }

    fn all_tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.backbone
            .params
            .tensors_mut()
            .iter_mut()
            .chain(self.head.tensors_mut().iter_mut())
            .collect()
    }

    /// Gradients of `loss` for backbone then head parameters.
    fn collect_grads(loss: &Var<f32>, body: &[Var<f32>], head: &[Var<f32>]) -> Result<Vec<Tensor<f32>>> {
        let inputs: Vec<&Var<f32>> = body.iter().chain(head).collect();
        let grads: Vec<Tensor<f32>> = grad(loss, &inputs, false)
            .into_iter()
            .zip(&inputs)
            .map(|(g, v)| g.map_or_else(|| Tensor::zeros(v.shape()), |g| g.value().clone()))
            .collect();
        if grads.iter().all(Tensor::all_finite) {
            Ok(grads)
        } else {
            Err(Error::DivergedTraining {
                step: 0,
                detail: "gradient is not finite".into(),
            })
        }
    }

    /// One optimization step on one episode for the episodic metric
    /// methods, R2D2 and ANIL. `apply` receives the mutable parameter list
    /// (backbone then head) with its gradients.
    pub fn episode_step(
        &mut self,
        episode: &Episode,
        apply: &mut dyn FnMut(&mut [&mut Tensor<f32>], &[Tensor<f32>]),
    ) -> Result<StepOutcome> {
        let n_way = episode.n_way();
        let (sl, ql) = (episode.support_labels(), episode.query_labels());
        let body = self.backbone.params.to_vars();
        let hp = self.head.to_vars();
        let (loss, logits) = if self.method == Method::Anil {
            let xs = Var::constant(chips_tensor(&episode.support_chips()));
            let xq = Var::constant(chips_tensor(&episode.query_chips()));
            let fs = global_embed_batch(&self.backbone.forward_with(&body, &xs, NormMode::Train)?);
            let fq = global_embed_batch(&self.backbone.forward_with(&body, &xq, NormMode::Train)?);
            let support_loss = |p: &[Var<f32>]| Ok(head_logits(HeadKind::Linear, &fs, p, 1.0).cross_entropy(&sl));
            let h = &self.hyper;
            let adapted = inner_adapt(&hp, &support_loss, h.alpha, h.inner_steps, !h.first_order, None)?;
            let logits = head_logits(HeadKind::Linear, &fq, &adapted, 1.0);
            (logits.cross_entropy(&ql), logits)
        } else {
            let mut chips = episode.support_chips();
            chips.extend(episode.query_chips());
            let x = Var::constant(chips_tensor(&chips));
            let fm = self.backbone.forward_with(&body, &x, NormMode::Train)?;
            let (s, q) = split_rows(&fm, sl.len());
            let logits = self.scores(&hp, &s, &sl, n_way, &q, NormMode::Train)?;
            (self.loss(&logits, &ql), logits)
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::DivergedTraining {
                step: 0,
                detail: format!("episode loss became {value}"),
            });
        }
        let grads = Self::collect_grads(&loss, &body, &hp)?;
        apply(&mut self.all_tensors_mut(), &grads);
        Ok(StepOutcome {
            loss: value,
            accuracy: hits(logits.value(), &ql) as f32 / ql.len() as f32,
        })
    }

    fn meta_config(&self, lr: f64, steps: usize) -> MetaConfig {
        MetaConfig {
            alpha: self.hyper.alpha,
            beta: lr,
            inner_steps: steps,
            first_order: self.hyper.first_order,
            route: self.hyper.route,
        }
    }

    /// One MAML outer step on a batch of episodes.
    pub fn maml_step(
        &mut self,
        episodes: &[Episode],
        apply: &mut dyn FnMut(&mut [&mut Tensor<f32>], &[Tensor<f32>]),
    ) -> Result<StepOutcome> {
        let tasks: Vec<ImageTask> = episodes.iter().map(|e| ImageTask::new(&self.backbone, e)).collect();
        let refs: Vec<&dyn MetaTask<f32>> = tasks.iter().map(|t| t as &dyn MetaTask<f32>).collect();
        let theta: Vec<Tensor<f32>> = self
            .backbone
            .params
            .tensors()
            .iter()
            .chain(self.head.tensors())
            .cloned()
            .collect();
        let cfg = self.meta_config(1.0, self.hyper.inner_steps);
        let mg = meta_gradient(&theta, &refs, &cfg, None)?;
        let (mut correct, mut total) = (0, 0);
        for t in &tasks {
            if let Some(l) = t.query_logits.borrow().as_ref() {
                correct += hits(l, &t.yq);
                total += t.yq.len();
            }
        }
        drop(tasks);
        apply(&mut self.all_tensors_mut(), &mg.grads);
        Ok(StepOutcome {
            loss: (mg.loss / episodes.len() as f64) as f32,
            accuracy: correct as f32 / total.max(1) as f32,
        })
    }

    /// Predict an episode from the raw images, adapting all parameters on
    /// the support set first. This is the only path for MAML.
    pub fn predict_images(&self, episode: &Episode, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.method != Method::Maml {
            let mut cache = FeatureCache::default();
            let mut chips = episode.support.clone();
            chips.extend(episode.query.iter().cloned());
            cache.extend(&self.backbone, chips.iter().map(|(c, _)| c.as_ref()))?;
            let mut me = self.clone();
            return me.predict_cached(&cache, episode, rng);
        }
        let task = ImageTask::new(&self.backbone, episode);
        let theta: Vec<Var<f32>> = self
            .backbone
            .params
            .tensors()
            .iter()
            .chain(self.head.tensors())
            .map(|t| Var::param(t.clone()))
            .collect();
        let support = |p: &[Var<f32>]| task.support_loss(p);
        let adapted = inner_adapt(&theta, &support, self.hyper.alpha, self.hyper.eval_inner_steps, false, None)?;
        let adapted: Vec<Var<f32>> = adapted.iter().map(Var::detach).collect();
        let logits = no_grad(|| task.logits(&adapted, &task.xq))?;
        Ok(logits.value().argmax_rows())
    }

    /// Predict an episode from precomputed eval-mode feature maps.
    pub fn predict_cached(&mut self, cache: &FeatureCache, episode: &Episode, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let n_way = episode.n_way();
        let labels = episode.support_labels();
        let s = cache.gather(&episode.support_chips())?;
        let q = cache.gather(&episode.query_chips())?;
        match self.method {
            Method::Maml => Err(Error::Config("MAML adapts the whole backbone; use image prediction".into())),
            Method::Baseline | Method::BaselinePlusPlus => {
                let flat = |t: Tensor<f32>| {
                    let n = t.shape()[0];
                    let d = t.numel() / n.max(1);
                    t.reshape(&[n, d])
                };
                let cfg = FinetuneConfig {
                    steps: self.hyper.finetune_steps,
                    lr: self.hyper.finetune_lr,
                    scale: self.hyper.cosine_scale,
                };
                finetune_predict(self.head_kind(), &flat(s), &labels, &flat(q), n_way, &cfg, rng)
            }
            Method::Anil => {
                let hp = self.head.to_vars();
                let fs = global_embed_batch(&Var::constant(s));
                let fq = global_embed_batch(&Var::constant(q));
                let support_loss = |p: &[Var<f32>]| Ok(head_logits(HeadKind::Linear, &fs, p, 1.0).cross_entropy(&labels));
                let adapted = inner_adapt(&hp, &support_loss, self.hyper.alpha, self.hyper.eval_inner_steps, false, None)?;
                let logits = no_grad(|| head_logits(HeadKind::Linear, &fq, &adapted, 1.0));
                Ok(logits.value().argmax_rows())
            }
            _ => {
                let hp = self.head.to_constants();
                let (s, q) = (Var::constant(s), Var::constant(q));
                let logits = no_grad(|| self.scores(&hp, &s, &labels, n_way, &q, NormMode::Eval))?;
                Ok(logits.value().argmax_rows())
            }
        }
    }

    /// Whether evaluation can run on cached features.
    pub fn cacheable(&self) -> bool {
        self.method != Method::Maml
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            method: self.method.name().to_string(),
            hyper: self.hyper.clone(),
            backbone: self.backbone.config,
            head_classes: self.head_classes,
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("model metadata serializes"));
        self.backbone.write_into(&mut ck, "backbone.");
        for (n, t) in self.head.iter() {
            ck.tensors.push(format!("head.{n}"), t.clone());
        }
        for (i, r) in self.relation_running.iter().enumerate() {
            ck.tensors.push(format!("relation.running{i}.mean"), r.mean.clone());
            ck.tensors.push(format!("relation.running{i}.var"), r.var.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ModelMeta)> {
        let meta: ModelMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let method = lookup(&meta.method)?;
        let backbone = Backbone::read_from(ck, "backbone.", meta.backbone)?;
        // a fresh model gives the expected head layout
        let mut hyper = meta.hyper.clone();
        hyper.pooling = meta.backbone.pooling;
        let template = Model::init(method, hyper, meta.head_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        let head = ck.section("head.");
        let expected: Vec<(String, Vec<usize>)> =
            template.head.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        check_layout(&head, &expected)?;
        let rel = ck.section("relation.");
        let mut relation_running = Vec::new();
        if !template.relation_running.is_empty() {
            let c = template.relation_running[0].mean.numel();
            let expected: Vec<(String, Vec<usize>)> = (0..2)
                .flat_map(|i| [(format!("running{i}.mean"), vec![c]), (format!("running{i}.var"), vec![c])])
                .collect();
            check_layout(&rel, &expected)?;
            relation_running = rel
                .tensors()
                .chunks(2)
                .map(|p| RunningStats {
                    mean: p[0].clone(),
                    var: p[1].clone(),
                })
                .collect();
        } else if !rel.is_empty() {
            return Err(Error::Checkpoint(format!("{method} has no relation module")));
        }
        let model = Model {
            method,
            hyper: template.hyper,
            backbone,
            head,
            relation_running,
            head_classes: meta.head_classes,
        };
        Ok((model, meta))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Hash of all learned tensors and running statistics.
    pub fn checksum(&self) -> String {
        self.to_checkpoint(serde_json::Value::Null).tensors.checksum()
    }
}

/// MAML task over raw images. Batch normalization uses the statistics of the
/// batch at hand (support or query), never the running estimates.
struct ImageTask<'a> {
    backbone: &'a Backbone<f32>,
    xs: Var<f32>,
    ys: Vec<usize>,
    xq: Var<f32>,
    yq: Vec<usize>,
    query_logits: RefCell<Option<Tensor<f32>>>,
}

impl<'a> ImageTask<'a> {
    fn new(backbone: &'a Backbone<f32>, episode: &Episode) -> Self {
        ImageTask {
            backbone,
            xs: Var::constant(chips_tensor(&episode.support_chips())),
            ys: episode.support_labels(),
            xq: Var::constant(chips_tensor(&episode.query_chips())),
            yq: episode.query_labels(),
            query_logits: RefCell::new(None),
        }
    }

    fn logits(&self, p: &[Var<f32>], x: &Var<f32>) -> Result<Var<f32>> {
        let n_body = self.backbone.params.len();
        let fm = self.backbone.forward_frozen(&p[..n_body], x, NormMode::Transductive)?;
        Ok(head_logits(HeadKind::Linear, &global_embed_batch(&fm), &p[n_body..], 1.0))
    }
}

impl MetaTask<f32> for ImageTask<'_> {
    fn support_loss(&self, p: &[Var<f32>]) -> Result<Var<f32>> {
        Ok(self.logits(p, &self.xs)?.cross_entropy(&self.ys))
    }

    fn query_loss(&self, p: &[Var<f32>]) -> Result<Var<f32>> {
        let logits = self.logits(p, &self.xq)?;
        *self.query_logits.borrow_mut() = Some(logits.value().clone());
        Ok(logits.cross_entropy(&self.yq))
    }
}

/// Eval-mode feature maps keyed by chip source id.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    index: HashMap<String, usize>,
    rows: Vec<f32>,
    shape: [usize; 3],
}

impl FeatureCache {
    /// Features of every chip of a split part.
    pub fn build(backbone: &Backbone<f32>, part: &ClassChips) -> Result<Self> {
        let mut cache = FeatureCache::default();
        cache.extend(backbone, part.values().flatten().map(|c| c.as_ref()))?;
        Ok(cache)
    }

    pub fn extend<'c>(&mut self, backbone: &Backbone<f32>, chips: impl Iterator<Item = &'c ImageChip>) -> Result<()> {
        self.shape = backbone.config.feature_shape();
        let fresh: Vec<&ImageChip> = chips.filter(|c| !self.index.contains_key(&c.source_id)).collect();
        let per: usize = self.shape.iter().product();
        for chunk in fresh.chunks(FEATURE_BATCH) {
            let maps = backbone.features(chunk, FEATURE_BATCH)?;
            for (chip, row) in chunk.iter().zip(maps.data().chunks(per)) {
                if self.index.contains_key(&chip.source_id) {
                    continue;
                }
                self.index.insert(chip.source_id.clone(), self.index.len());
                self.rows.extend_from_slice(row);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Stack the cached maps of `chips` into `[n, c, h, w]`.
    pub fn gather(&self, chips: &[&ImageChip]) -> Result<Tensor<f32>> {
        let per: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(chips.len() * per);
        for c in chips {
            let &i = self
                .index
                .get(&c.source_id)
                .ok_or_else(|| Error::InsufficientData(format!("chip {} is not in the feature cache", c.source_id)))?;
            data.extend_from_slice(&self.rows[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        Ok(Tensor::from_vec(&[chips.len(), c, h, w], data))
    }
}

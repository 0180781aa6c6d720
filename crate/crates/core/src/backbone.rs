//! The Conv64F feature extractor.
//!
//! Each block is a 3x3 convolution (padding 1, no bias), batch norm and
//! ReLU, optionally followed by 2x2 max pooling. Parameters are stored per
//! block as `block{i}.conv`, `block{i}.gamma`, `block{i}.beta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Var};
use crate::checkpoint::{check_layout, Checkpoint};
use crate::data::{ImageChip, CHIP_SIZE};
use crate::error::{Error, Result};
use crate::nn::{batch_norm, kaiming_normal, NormMode, ParamStore, RunningStats};
use crate::tensor::{Real, Tensor};

/// Where max pooling happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingSchedule {
    /// After every block.
    Pool4,
    /// After the first two blocks only.
    Pool2,
}

impl std::str::FromStr for PoolingSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pool4" => Ok(Self::Pool4),
            "pool2" => Ok(Self::Pool2),
            _ => Err(Error::Config(format!("unknown pooling schedule {s:?} (pool4 or pool2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv64FConfig {
    pub n_blocks: usize,
    pub filters: usize,
    pub in_channels: usize,
    pub pooling: PoolingSchedule,
}

pub const KERNEL: usize = 3;

impl Conv64FConfig {
    pub fn new(pooling: PoolingSchedule) -> Self {
        Conv64FConfig {
            n_blocks: 4,
            filters: 64,
            in_channels: 1,
            pooling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.filters == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("degenerate backbone config {self:?}")));
        }
        Ok(())
    }

    fn pools_after(&self, block: usize) -> bool {
        match self.pooling {
            PoolingSchedule::Pool4 => true,
            PoolingSchedule::Pool2 => block < 2,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (0..self.n_blocks)
            .filter(|&b| self.pools_after(b))
            .fold((h, w), |(h, w), _| (h / 2, w / 2))
    }

    /// Feature-map shape `[filters, h, w]` for an 84x84 chip.
    pub fn feature_shape(&self) -> [usize; 3] {
        let (h, w) = self.output_size(CHIP_SIZE, CHIP_SIZE);
        [self.filters, h, w]
    }

    pub fn embed_dim(&self) -> usize {
        self.feature_shape().iter().product()
    }

    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::with_capacity(3 * self.n_blocks);
        for b in 0..self.n_blocks {
            let ci = if b == 0 { self.in_channels } else { self.filters };
            out.push((format!("block{b}.conv"), vec![self.filters, ci, KERNEL, KERNEL]));
            out.push((format!("block{b}.gamma"), vec![self.filters]));
            out.push((format!("block{b}.beta"), vec![self.filters]));
        }
        out
    }

    fn check_params<T: Real>(&self, params: &[Var<T>]) -> Result<()> {
        let layout = self.param_layout();
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "backbone expects {} weight tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&layout) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!("{name} has shape {:?}, expected {shape:?}", p.shape())));
            }
        }
        Ok(())
    }
}

/// A `filters x h x w` activation of a single chip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Real> {
    values: Tensor<T>,
    pub mode: NormMode,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(values: Tensor<T>, mode: NormMode) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::Shape(format!("feature map must be CxHxW, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(Error::Shape("feature map has non-finite values".into()));
        }
        Ok(FeatureMap { values, mode })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// Row-major flatten (channel, row, column).
    pub fn global_embed(&self) -> Vec<T> {
        self.values.data().to_vec()
    }

    /// One descriptor per spatial position in row-major order: `[h*w, c]`.
    pub fn local_descriptors(&self) -> Tensor<T> {
        let (h, w) = self.spatial();
        let c = self.channels();
        self.values.clone().reshape(&[c, h * w]).transpose2()
    }
}

/// Batched flatten `[n, c, h, w] -> [n, c*h*w]`.
pub fn global_embed_batch<T: Real>(x: &Var<T>) -> Var<T> {
    let s = x.shape();
    x.reshape(&[s[0], s[1..].iter().product()])
}

/// Batched descriptors `[n, c, h, w] -> [n, h*w, c]`.
pub fn local_descriptors_batch<T: Real>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// Stack chips into an `[n, 1, 84, 84]` tensor.
pub fn chips_tensor<T: Real>(chips: &[&ImageChip]) -> Tensor<T> {
    let mut data = Vec::with_capacity(chips.len() * CHIP_SIZE * CHIP_SIZE);
    for c in chips {
        data.extend(c.pixels().iter().map(|&p| T::lit(p as f64)));
    }
    Tensor::from_vec(&[chips.len(), 1, CHIP_SIZE, CHIP_SIZE], data)
}

/// Weights and batch-norm running statistics of one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real> {
    pub config: Conv64FConfig,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn init(config: Conv64FConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_layout() {
            let t = if name.ends_with(".conv") {
                let fan_in = shape[1] * KERNEL * KERNEL;
                kaiming_normal(&shape, fan_in, rng)
            } else if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.push(name, t);
        }
        Ok(Backbone {
            config,
            params,
            running: (0..config.n_blocks).map(|_| RunningStats::new(config.filters)).collect(),
        })
    }

    /// Forward `x: [n, c, h, w]` with explicit (possibly adapted) weights.
    /// Running statistics are updated only in `Train` mode.
    pub fn forward_with(&mut self, params: &[Var<T>], x: &Var<T>, mode: NormMode) -> Result<Var<T>> {
        run(&self.config, params, x, mode, &mut self.running)
    }

    /// Forward with the stored weights, without touching running statistics.
    pub fn forward_frozen(&self, params: &[Var<T>], x: &Var<T>, mode: NormMode) -> Result<Var<T>> {
        if mode == NormMode::Train {
            return Err(Error::Config("frozen forward cannot run in train mode".into()));
        }
        let mut stats = self.running.clone();
        run(&self.config, params, x, mode, &mut stats)
    }

    /// Eval-mode feature maps of many chips, computed without a graph in
    /// chunks of `batch` chips. Returns `[n, c, h, w]`.
    pub fn features(&self, chips: &[&ImageChip], batch: usize) -> Result<Tensor<T>> {
        let consts = self.params.to_constants();
        let mut parts = Vec::new();
        for chunk in chips.chunks(batch.max(1)) {
            let x = Var::constant(chips_tensor(chunk));
            let y = no_grad(|| self.forward_frozen(&consts, &x, NormMode::Eval))?;
            parts.push(y.value().clone());
        }
        if parts.is_empty() {
            let [c, h, w] = self.config.feature_shape();
            return Ok(Tensor::zeros(&[0, c, h, w]));
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }

    /// Eval-mode feature map of each chip.
    pub fn feature_maps(&self, chips: &[&ImageChip]) -> Result<Vec<FeatureMap<T>>> {
        let all = self.features(chips, 16)?;
        let [c, h, w] = [all.shape()[1], all.shape()[2], all.shape()[3]];
        let per = c * h * w;
        all.data()
            .chunks(per)
            .map(|d| FeatureMap::new(Tensor::from_vec(&[c, h, w], d.to_vec()), NormMode::Eval))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config,
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
        }
    }

    /// Store weights and running statistics under `prefix` in a checkpoint.
    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for (n, t) in self.params.iter() {
            ck.tensors.push(format!("{prefix}{n}"), t.cast());
        }
        for (i, r) in self.running.iter().enumerate() {
            ck.tensors.push(format!("{prefix}running{i}.mean"), r.mean.cast());
            ck.tensors.push(format!("{prefix}running{i}.var"), r.var.cast());
        }
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str, config: Conv64FConfig) -> Result<Self> {
        config.validate()?;
        let section = ck.section(prefix);
        let mut expected = config.param_layout();
        for i in 0..config.n_blocks {
            expected.push((format!("running{i}.mean"), vec![config.filters]));
            expected.push((format!("running{i}.var"), vec![config.filters]));
        }
        check_layout(&section, &expected)?;
        let n = 3 * config.n_blocks;
        let tensors: Vec<Tensor<T>> = section.tensors().iter().map(Tensor::cast).collect();
        let mut params = ParamStore::new();
        for ((name, _), t) in expected.iter().zip(&tensors).take(n) {
            params.push(name.clone(), t.clone());
        }
        let running = tensors[n..]
            .chunks(2)
            .map(|p| RunningStats {
                mean: p[0].clone(),
                var: p[1].clone(),
            })
            .collect();
        Ok(Backbone {
            config,
            params,
            running,
        })
    }
}

fn run<T: Real>(
    config: &Conv64FConfig,
    params: &[Var<T>],
    x: &Var<T>,
    mode: NormMode,
    running: &mut [RunningStats<T>],
) -> Result<Var<T>> {
    config.check_params(params)?;
    let s = x.shape();
    if s.len() != 4 || s[1] != config.in_channels {
        return Err(Error::Shape(format!(
            "backbone input must be [n, {}, h, w], got {s:?}",
            config.in_channels
        )));
    }
    let mut h = x.clone();
    for b in 0..config.n_blocks {
        let w = &params[3 * b];
        h = h.conv2d(w, KERNEL / 2);
        h = batch_norm(&h, &params[3 * b + 1], &params[3 * b + 2], Some(&mut running[b]), mode).relu();
        if config.pools_after(b) {
            h = h.max_pool2();
        }
    }
    Ok(h)
}

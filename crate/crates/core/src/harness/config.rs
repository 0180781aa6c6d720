//! Run configuration files.
//!
//! ```toml
//! [run]
//! seed = 0
//! epochs = 50
//! episodes_per_epoch = 200
//! test_episodes = 600
//! lr = 0.001
//! train_episode = { n_way = 5, k_shot = 5, n_query = 15 }
//! test_episode = { n_way = 5, k_shot = 5, n_query = 15 }
//!
//! [method]
//! name = "ATL_Net"
//! pooling = "pool2"          # optional, defaults per method
//! params = { tau = 25.0 }    # method-specific keys
//!
//! [data]
//! dir = "data/mstar"         # or a [data.synthetic] table
//! split_seed = 0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::registry::{lookup, Method};
use crate::backbone::PoolingSchedule;
use crate::data::{EpisodeSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::meta::SecondOrderRoute;

fn default_spec() -> EpisodeSpec {
    EpisodeSpec::new(5, 5, crate::data::DEFAULT_QUERY)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub test_episodes: usize,
    pub lr: f64,
    pub train_episode: EpisodeSpec,
    pub test_episode: EpisodeSpec,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            epochs: 50,
            episodes_per_epoch: 200,
            test_episodes: 600,
            lr: 1e-3,
            train_episode: default_spec(),
            test_episode: default_spec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<PoolingSchedule>,
    #[serde(default)]
    pub params: BTreeMap<String, toml::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory (one subdirectory per class).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Generate data instead of reading a directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub split_seed: u64,
    /// Explicit split manifest; overrides `split_seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub method: MethodSection,
    #[serde(default)]
    pub data: DataSection,
}

/// Resolved method hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub pooling: PoolingSchedule,
    pub batch_size: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub cosine_scale: f64,
    pub alpha: f64,
    pub inner_steps: usize,
    pub eval_inner_steps: usize,
    pub first_order: bool,
    pub route: SecondOrderRoute,
    pub meta_batch: usize,
    pub lambda_init: f64,
    pub k: usize,
    pub tau: f64,
    pub hard_gate: bool,
}

impl Hyper {
    pub fn defaults(method: Method) -> Self {
        Hyper {
            pooling: method.default_pooling(),
            batch_size: 16,
            finetune_steps: 100,
            finetune_lr: 0.01,
            cosine_scale: crate::finetune::COSINE_SCALE,
            alpha: 0.01,
            inner_steps: 5,
            eval_inner_steps: 10,
            first_order: false,
            route: SecondOrderRoute::HessianVector,
            meta_batch: 1,
            lambda_init: 50.0,
            k: 3,
            tau: crate::metric::ATL_TAU,
            hard_gate: false,
        }
    }

    /// Apply the method table of a config, rejecting keys that do not belong
    /// to the method.
    pub fn resolve(method: Method, section: &MethodSection) -> Result<Self> {
        let mut h = Hyper::defaults(method);
        if let Some(p) = section.pooling {
            h.pooling = p;
        }
        let allowed = method.param_keys();
        for (key, value) in &section.params {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "parameter `{key}` does not apply to {method} (accepted: {})",
                    if allowed.is_empty() { "none".to_string() } else { allowed.join(", ") }
                )));
            }
            let bad = || Error::Config(format!("parameter `{key}` has the wrong type: {value}"));
            let float = || value.as_float().or_else(|| value.as_integer().map(|i| i as f64)).ok_or_else(bad);
            let count = || {
                value
                    .as_integer()
                    .filter(|&i| i >= 0)
                    .map(|i| i as usize)
                    .ok_or_else(bad)
            };
            let flag = || value.as_bool().ok_or_else(bad);
            match key.as_str() {
                "batch_size" => h.batch_size = count()?,
                "finetune_steps" => h.finetune_steps = count()?,
                "finetune_lr" => h.finetune_lr = float()?,
                "cosine_scale" => h.cosine_scale = float()?,
                "alpha" => h.alpha = float()?,
                "inner_steps" => h.inner_steps = count()?,
                "eval_inner_steps" => h.eval_inner_steps = count()?,
                "first_order" => h.first_order = flag()?,
                "route" => {
                    h.route = value
                        .clone()
                        .try_into()
                        .map_err(|e| Error::Config(format!("parameter `route`: {e}")))?
                }
                "meta_batch" => h.meta_batch = count()?,
                "lambda_init" => h.lambda_init = float()?,
                "k" => h.k = count()?,
                "tau" => h.tau = float()?,
                "hard_gate" => h.hard_gate = flag()?,
                _ => unreachable!("allowed keys are all handled"),
            }
        }
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("finetune_lr", self.finetune_lr),
            ("cosine_scale", self.cosine_scale),
            ("alpha", self.alpha),
            ("lambda_init", self.lambda_init),
            ("tau", self.tau),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
        }
        if self.batch_size == 0 || self.meta_batch == 0 || self.k == 0 {
            return Err(Error::Config("batch_size, meta_batch and k must be >= 1".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    /// A config with default run settings for `method` on synthetic data.
    pub fn synthetic(method: &str, synth: SynthConfig) -> Self {
        RunConfig {
            run: RunSection::default(),
            method: MethodSection {
                name: method.to_string(),
                pooling: None,
                params: BTreeMap::new(),
            },
            data: DataSection {
                synthetic: Some(synth),
                ..DataSection::default()
            },
        }
    }

    /// Reduced schedule that trains and evaluates one method on synthetic
    /// data in a few minutes on one CPU core. Training episodes use 5
    /// queries per class; evaluation uses 5-way 5-shot, 15 queries.
    pub fn desk(method: Method, synth: SynthConfig) -> Self {
        let mut cfg = RunConfig::synthetic(method.name(), synth);
        let r = &mut cfg.run;
        r.epochs = 3;
        r.episodes_per_epoch = 20;
        r.test_episodes = 50;
        r.train_episode = EpisodeSpec::new(5, 5, 5);
        r.test_episode = EpisodeSpec::new(5, 5, crate::data::DEFAULT_QUERY);
        match method {
            Method::Baseline | Method::BaselinePlusPlus => r.epochs = 5,
            Method::Anil => r.episodes_per_epoch = 10,
            Method::Maml => {
                r.epochs = 1;
                r.test_episodes = 20;
                cfg.method.params.insert("first_order".into(), toml::Value::Boolean(true));
                cfg.method.params.insert("eval_inner_steps".into(), toml::Value::Integer(5));
            }
            _ => {}
        }
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn method(&self) -> Result<Method> {
        lookup(&self.method.name)
    }

    pub fn hyper(&self) -> Result<Hyper> {
        Hyper::resolve(self.method()?, &self.method)
    }

    pub fn validate(&self) -> Result<()> {
        let method = self.method()?;
        self.hyper()?;
        let r = &self.run;
        if !(r.lr > 0.0 && r.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", r.lr)));
        }
        if r.episodes_per_epoch == 0 || r.test_episodes == 0 {
            return Err(Error::Config("episodes_per_epoch and test_episodes must be >= 1".into()));
        }
        r.train_episode.validate()?;
        r.test_episode.validate()?;
        let fixed_way = matches!(method, Method::Maml | Method::Anil);
        if fixed_way && r.train_episode.n_way != r.test_episode.n_way {
            return Err(Error::Config(format!(
                "{method} learns an n_way-sized head; train and test n_way must match"
            )));
        }
        match (&self.data.dir, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(Error::Config("data: give either `dir` or `synthetic`, not both".into())),
            (None, None) => Err(Error::Config("data: one of `dir` or `synthetic` is required".into())),
            (_, Some(s)) => s.validate(),
            _ => Ok(()),
        }
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(json))
    }
}

//! Benchmark harness: method registry, run configuration, training,
//! evaluation and reporting.

pub mod config;
pub mod eval;
pub mod model;
pub mod registry;
pub mod report;
pub mod timing;
pub mod train;

pub use config::{DataSection, Hyper, MethodSection, RunConfig, RunSection};
pub use eval::{evaluate, evaluate_predictor, summarize, EvalResult};
pub use model::{FeatureCache, Model, ModelMeta};
pub use registry::{lookup, Category, Method};
pub use report::{render_markdown, BenchmarkResult};
pub use train::{train, EpochSummary, StepLog, TrainLog};

use std::collections::BTreeSet;

use crate::data::{generate_synthetic, load_dataset, make_split, Dataset, DatasetSplit, SplitManifest};
use crate::error::Result;

/// RNG streams derived from the run seed.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// Load or generate the dataset of a config and split its classes.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, DatasetSplit)> {
    let dataset = match (&cfg.data.synthetic, &cfg.data.dir) {
        (Some(s), _) => generate_synthetic(s)?,
        (None, Some(dir)) => load_dataset(dir)?,
        (None, None) => return Err(crate::Error::Config("no data source configured".into())),
    };
    let split = match &cfg.data.split_file {
        Some(path) => SplitManifest::load(path)?.to_split(&dataset)?,
        None => {
            let ids: BTreeSet<usize> = dataset.chips.keys().copied().collect();
            make_split(&ids, cfg.data.split_seed)?
        }
    };
    Ok((dataset, split))
}

/// Everything produced by one configured run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub eval: EvalResult,
    pub result: BenchmarkResult,
}

/// A freshly initialized model for a config, sized for its data split.
pub fn init_model(cfg: &RunConfig, split: &DatasetSplit) -> Result<Model> {
    let method = cfg.method()?;
    let head_classes = match method.category() {
        Category::FineTuning => split.train_classes.len(),
        _ => cfg.run.train_episode.n_way,
    };
    Model::init(method, cfg.hyper()?, head_classes, &mut eval::eval_rng(cfg.run.seed, INIT_STREAM))
}

/// Train on the base classes of an already loaded dataset.
pub fn train_on(
    cfg: &RunConfig,
    dataset: &Dataset,
    split: &DatasetSplit,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    let mut model = init_model(cfg, split)?;
    let part = dataset.part(split.train_classes.iter().copied());
    let mut rng = eval::eval_rng(cfg.run.seed, TRAIN_STREAM);
    let log = train(&mut model, &part, &cfg.run, &mut rng, on_epoch)?;
    Ok((model, log))
}

/// Evaluate a model on the novel classes and build the result row.
pub fn evaluate_on(
    cfg: &RunConfig,
    model: &mut Model,
    dataset: &Dataset,
    split: &DatasetSplit,
    minutes_per_epoch: f64,
) -> Result<(EvalResult, BenchmarkResult)> {
    let part = dataset.part(split.test_classes.iter().copied());
    let spec = cfg.run.test_episode;
    let eval = evaluate(model, &part, &spec, cfg.run.test_episodes, cfg.run.seed)?;
    let result = BenchmarkResult {
        method: model.method.name().to_string(),
        category: model.method.category(),
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        accuracy: eval.accuracy,
        ci95: eval.ci95,
        minutes_per_epoch,
        seed: cfg.run.seed,
        config_digest: cfg.digest(),
    };
    Ok((eval, result))
}

/// Load data, train, evaluate.
pub fn run(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochSummary)) -> Result<RunOutcome> {
    let (dataset, split) = load_data(cfg)?;
    let (mut model, log) = train_on(cfg, &dataset, &split, on_epoch)?;
    let (eval, result) = evaluate_on(cfg, &mut model, &dataset, &split, log.minutes_per_epoch())?;
    Ok(RunOutcome {
        model,
        log,
        eval,
        result,
    })
}

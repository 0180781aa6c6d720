//! Episodic evaluation on the novel classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{FeatureCache, Model};
use crate::data::{sample_episode, ClassChips, Episode, EpisodeSpec};
use crate::error::{Error, Result};

/// RNG stream used for evaluation episodes.
pub const EVAL_STREAM: u64 = 2;
/// RNG stream for per-episode randomness inside a predictor (head init).
pub const PREDICT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of correct queries in each episode.
    pub episode_accuracy: Vec<f64>,
    /// Mean accuracy in percent.
    pub accuracy: f64,
    /// Half-width of the 95% confidence interval, in percent.
    pub ci95: f64,
}

/// Mean and `1.96 * s / sqrt(n)` (sample standard deviation) of per-episode
/// accuracies, both in percent.
pub fn summarize(acc: &[f64]) -> (f64, f64) {
    let n = acc.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = acc.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (100.0 * mean, 0.0);
    }
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (100.0 * mean, 100.0 * 1.96 * var.sqrt() / (n as f64).sqrt())
}

pub fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample `n` episodes from `part` with a generator seeded by `seed` and
/// score the predictions of `predict` against the query labels.
pub fn evaluate_predictor<F>(part: &ClassChips, spec: &EpisodeSpec, n: usize, seed: u64, mut predict: F) -> Result<EvalResult>
where
    F: FnMut(&Episode) -> Result<Vec<usize>>,
{
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rng = eval_rng(seed, EVAL_STREAM);
    let mut episode_accuracy = Vec::with_capacity(n);
    for _ in 0..n {
        let episode = sample_episode(part, spec, &mut rng)?;
        let truth = episode.query_labels();
        let pred = predict(&episode)?;
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "predictor returned {} labels for {} queries",
                pred.len(),
                truth.len()
            )));
        }
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        episode_accuracy.push(correct as f64 / truth.len() as f64);
    }
    let (accuracy, ci95) = summarize(&episode_accuracy);
    Ok(EvalResult {
        episode_accuracy,
        accuracy,
        ci95,
    })
}

/// Evaluate a model on `n` episodes. Features of the whole part are computed
/// once when the method allows it.
pub fn evaluate(model: &mut Model, part: &ClassChips, spec: &EpisodeSpec, n: usize, seed: u64) -> Result<EvalResult> {
    let mut rng = eval_rng(seed, PREDICT_STREAM);
    if model.cacheable() {
        let cache = FeatureCache::build(&model.backbone, part)?;
        evaluate_predictor(part, spec, n, seed, |e| model.predict_cached(&cache, e, &mut rng))
    } else {
        evaluate_predictor(part, spec, n, seed, |e| model.predict_images(e, &mut rng))
    }
}

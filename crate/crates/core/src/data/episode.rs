//! N-way K-shot episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::chip::{ClassChips, ImageChip};
use crate::error::{Error, Result};

/// Default number of query images per class.
pub const DEFAULT_QUERY: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default = "default_query")]
    pub n_query: usize,
}

fn default_query() -> usize {
    DEFAULT_QUERY
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Self {
        EpisodeSpec { n_way, k_shot, n_query }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "episode spec fields must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.n_query
    }
}

/// A sampled few-shot task. Support and query lists are class-major: all
/// items of local label 0 first, then label 1, and so on.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<(Arc<ImageChip>, usize)>,
    pub query: Vec<(Arc<ImageChip>, usize)>,
    /// Original class id to local label.
    pub label_map: BTreeMap<usize, usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.label_map.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|(_, l)| *l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|(_, l)| *l).collect()
    }

    pub fn support_chips(&self) -> Vec<&ImageChip> {
        self.support.iter().map(|(c, _)| c.as_ref()).collect()
    }

    pub fn query_chips(&self) -> Vec<&ImageChip> {
        self.query.iter().map(|(c, _)| c.as_ref()).collect()
    }

    /// Check every structural invariant against `spec`.
    pub fn validate(&self, spec: &EpisodeSpec) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidEpisode(m));
        if self.support.len() != spec.support_len() {
            return fail(format!("support has {} items, expected {}", self.support.len(), spec.support_len()));
        }
        if self.query.len() != spec.query_len() {
            return fail(format!("query has {} items, expected {}", self.query.len(), spec.query_len()));
        }
        if self.label_map.len() != spec.n_way {
            return fail(format!("{} classes mapped, expected {}", self.label_map.len(), spec.n_way));
        }
        let locals: BTreeSet<usize> = self.label_map.values().copied().collect();
        if locals != (0..spec.n_way).collect() {
            return fail(format!("local labels {locals:?} are not 0..{}", spec.n_way));
        }
        for (part, list, per_class) in [
            ("support", &self.support, spec.k_shot),
            ("query", &self.query, spec.n_query),
        ] {
            let mut counts = vec![0usize; spec.n_way];
            for (i, (chip, local)) in list.iter().enumerate() {
                if self.label_map.get(&chip.class_id) != Some(local) {
                    return fail(format!("{part} item {i} has class {} but local label {local}", chip.class_id));
                }
                if i / per_class != *local {
                    return fail(format!("{part} item {i} breaks class-major order"));
                }
                counts[*local] += 1;
            }
            if counts.iter().any(|&c| c != per_class) {
                return fail(format!("{part} per-class counts {counts:?}, expected {per_class}"));
            }
        }
        let support_ids: BTreeSet<&str> = self.support.iter().map(|(c, _)| c.source_id.as_str()).collect();
        if support_ids.len() != self.support.len() {
            return fail("support repeats a chip".into());
        }
        let mut query_ids = BTreeSet::new();
        for (c, _) in &self.query {
            if support_ids.contains(c.source_id.as_str()) {
                return fail(format!("chip {} is in both support and query", c.source_id));
            }
            if !query_ids.insert(c.source_id.as_str()) {
                return fail("query repeats a chip".into());
            }
        }
        Ok(())
    }
}

/// Sample one episode: `n_way` classes without replacement in random slot
/// order, then `k_shot + n_query` distinct chips per class.
pub fn sample_episode(part: &ClassChips, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    if part.len() < spec.n_way {
        return Err(Error::InsufficientData(format!(
            "{}-way episodes need {} classes, split part has {}",
            spec.n_way,
            spec.n_way,
            part.len()
        )));
    }
    let per_class = spec.k_shot + spec.n_query;
    if let Some((class, chips)) = part.iter().find(|(_, chips)| chips.len() < per_class) {
        return Err(Error::InsufficientData(format!(
            "class {class} has {} chips, episodes need {per_class} ({} support + {} query)",
            chips.len(),
            spec.k_shot,
            spec.n_query
        )));
    }
    let classes: Vec<usize> = part.keys().copied().collect();
    let chosen = index::sample(rng, classes.len(), spec.n_way);
    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    let mut label_map = BTreeMap::new();
    for (local, ci) in chosen.iter().enumerate() {
        let class = classes[ci];
        label_map.insert(class, local);
        let chips = &part[&class];
        let picks = index::sample(rng, chips.len(), per_class);
        for (j, idx) in picks.iter().enumerate() {
            let item = (Arc::clone(&chips[idx]), local);
            if j < spec.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    // `query` is already class-major because classes are visited in slot order.
    Ok(Episode {
        support,
        query,
        label_map,
    })
}

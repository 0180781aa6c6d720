//! Method names, families and default settings.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::PoolingSchedule;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    FineTuning,
    Meta,
    Metric,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::FineTuning => "fine-tuning",
            Category::Meta => "meta",
            Category::Metric => "metric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine-tuning" => Ok(Category::FineTuning),
            "meta" => Ok(Category::Meta),
            "metric" => Ok(Category::Metric),
            _ => Err(Error::Parse(format!("unknown category {s:?}"))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The implemented methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    BaselinePlusPlus,
    Maml,
    Anil,
    R2d2,
    ProtoNet,
    RelationNet,
    Dn4,
    CovaMNet,
    AtlNet,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Baseline,
        Method::BaselinePlusPlus,
        Method::Maml,
        Method::Anil,
        Method::R2d2,
        Method::ProtoNet,
        Method::RelationNet,
        Method::Dn4,
        Method::CovaMNet,
        Method::AtlNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "Baseline",
            Method::BaselinePlusPlus => "Baseline++",
            Method::Maml => "MAML",
            Method::Anil => "ANIL",
            Method::R2d2 => "R2D2",
            Method::ProtoNet => "ProtoNet",
            Method::RelationNet => "RelationNet",
            Method::Dn4 => "DN4",
            Method::CovaMNet => "CovaMNet",
            Method::AtlNet => "ATL_Net",
        }
    }

    pub fn category(self) -> Category {
        match self {
            Method::Baseline | Method::BaselinePlusPlus => Category::FineTuning,
            Method::Maml | Method::Anil | Method::R2d2 => Category::Meta,
            _ => Category::Metric,
        }
    }

    /// Global-embedding methods pool after every block; local-descriptor
    /// and relation methods keep a 21x21 map.
    pub fn default_pooling(self) -> PoolingSchedule {
        match self {
            Method::RelationNet | Method::Dn4 | Method::CovaMNet | Method::AtlNet => PoolingSchedule::Pool2,
            _ => PoolingSchedule::Pool4,
        }
    }

    /// Hyperparameter keys accepted in the `[method.params]` table.
    pub fn param_keys(self) -> &'static [&'static str] {
        match self {
            Method::Baseline => &["batch_size", "finetune_steps", "finetune_lr"],
            Method::BaselinePlusPlus => &["batch_size", "finetune_steps", "finetune_lr", "cosine_scale"],
            Method::Maml => &["alpha", "inner_steps", "eval_inner_steps", "first_order", "route", "meta_batch"],
            Method::Anil => &["alpha", "inner_steps", "eval_inner_steps", "first_order"],
            Method::R2d2 => &["lambda_init"],
            Method::ProtoNet | Method::RelationNet | Method::CovaMNet => &[],
            Method::Dn4 => &["k"],
            Method::AtlNet => &["tau", "hard_gate"],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names that are recognized but deliberately not implemented.
pub const RESERVED: [(&str, Category); 6] = [
    ("SKD_Model", Category::FineTuning),
    ("RFS_Model", Category::FineTuning),
    ("Versa", Category::Meta),
    ("MTL", Category::Meta),
    ("Leo", Category::Meta),
    ("Feat", Category::Metric),
];

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Resolve a method name. Matching ignores case and `_`/`-`/space.
pub fn lookup(name: &str) -> Result<Method> {
    let key = squash(name);
    if let Some(m) = Method::ALL.iter().find(|m| squash(m.name()) == key) {
        return Ok(*m);
    }
    if let Some((reserved, _)) = RESERVED.iter().find(|(r, _)| squash(r) == key) {
        return Err(Error::UnavailableMethod {
            name: reserved.to_string(),
            implemented: implemented_names().join(", "),
        });
    }
    Err(Error::UnknownMethod(name.to_string()))
}

pub fn implemented_names() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

/// Row of the `list-methods` listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub category: Category,
    pub implemented: bool,
    pub pooling: Option<PoolingSchedule>,
}

pub fn entries() -> Vec<RegistryEntry> {
    let mut out: Vec<RegistryEntry> = Method::ALL
        .iter()
        .map(|m| RegistryEntry {
            name: m.name(),
            category: m.category(),
            implemented: true,
            pooling: Some(m.default_pooling()),
        })
        .collect();
    out.extend(RESERVED.iter().map(|&(name, category)| RegistryEntry {
        name,
        category,
        implemented: false,
        pooling: None,
    }));
    out.sort_by_key(|e| (e.category, !e.implemented));
    out
}

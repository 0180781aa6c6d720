pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod meta;
pub mod metric;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/backbone.md")]
    pub struct Backbone;
    #[doc = include_str!("../../../book/src/methods.md")]
    pub struct Methods;
    #[doc = include_str!("../../../book/src/running.md")]
    pub struct Running;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
}

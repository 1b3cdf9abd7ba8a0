pub mod distribution;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod predictor;
pub mod search_space;
pub mod supernet;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/search-spaces.md")]
    mod search_spaces {}
    #[doc = include_str!("../../../book/src/distributions.md")]
    mod distributions {}
    #[doc = include_str!("../../../book/src/tables.md")]
    mod tables {}
    #[doc = include_str!("../../../book/src/predictors.md")]
    mod predictors {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}

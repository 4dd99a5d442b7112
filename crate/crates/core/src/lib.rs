//! Multilingual sequence-to-sequence translation on a synthetic corpus:
//! an autodiff engine, a small transformer with optional fixed-size
//! encoders, language-independence regularizers, two-phase training and
//! direct versus pivot zero-shot evaluation.
//!
//! The guide in `book/` walks through each module.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod seed;
pub mod topology;
pub mod trainer;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/regularizers.md")]
    mod regularizers {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}

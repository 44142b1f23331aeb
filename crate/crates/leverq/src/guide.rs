//! A guided tour of the crate, one module per book chapter.
//!
//! The narrative sources live in `book/src/` and render with `mdbook build
//! book`; each chapter is also included here as a module's documentation, so
//! every code block in the book compiles and runs as a documentation test
//! against the current API. If a chapter drifts from the code, `cargo test`
//! fails.

#[doc = include_str!("../../../book/src/getting_started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/matrices_and_leverage.md")]
pub mod matrices_and_leverage {}

#[doc = include_str!("../../../book/src/low_rank_mdps.md")]
pub mod low_rank_mdps {}

#[doc = include_str!("../../../book/src/leveraged_estimation.md")]
pub mod leveraged_estimation {}

#[doc = include_str!("../../../book/src/iteration_algorithms.md")]
pub mod iteration_algorithms {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

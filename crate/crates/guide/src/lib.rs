//! mdbook cannot run book snippets against crate dependencies, so each
//! chapter is included here as module documentation and `cargo test
//! --doc` executes every Rust block. A failing chapter snippet fails
//! the workspace tests, which keeps the guide in sync with the code.

#[doc = include_str!("../../../README.md")]
pub mod readme {}

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/state-space.md")]
pub mod state_space {}

#[doc = include_str!("../../../book/src/smoothing.md")]
pub mod smoothing {}

#[doc = include_str!("../../../book/src/noise-estimation.md")]
pub mod noise_estimation {}

#[doc = include_str!("../../../book/src/quality-measure.md")]
pub mod quality_measure {}

#[doc = include_str!("../../../book/src/flight-model.md")]
pub mod flight_model {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

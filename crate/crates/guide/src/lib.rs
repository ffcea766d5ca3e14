//! The chapters of the guide under `book/src`, one module per chapter.
//!
//! Nothing here is meant to be called. The modules exist so that
//! `cargo test --doc` runs every example in the book against the current code.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/dumps.md")]
pub mod dumps {}

#[doc = include_str!("../../../book/src/signals.md")]
pub mod signals {}

#[doc = include_str!("../../../book/src/detection.md")]
pub mod detection {}

#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("../../../book/src/interventions.md")]
pub mod interventions {}

#[doc = include_str!("../../../book/src/reporting.md")]
pub mod reporting {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

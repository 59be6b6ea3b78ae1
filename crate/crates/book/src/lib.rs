//! Runs every code block of the guide under `book/` as a doc-test.
//!
//! mdbook cannot test snippets that depend on a workspace crate, so each
//! chapter is pulled in as the docs of an empty module instead.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
#[doc = include_str!("../../../book/src/riccati.md")]
pub mod riccati {}
#[doc = include_str!("../../../book/src/feedforward.md")]
pub mod feedforward {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/turnpike.md")]
pub mod turnpike {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

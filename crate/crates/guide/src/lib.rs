//! The chapters of the book under `book/src`, compiled as doctests.
//!
//! mdbook cannot run snippets that depend on a workspace crate, so each
//! chapter is included here as the docs of an empty module and `cargo test`
//! runs its code blocks. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/mdps.md")]
pub mod mdps {}
#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}
#[doc = include_str!("../../../book/src/optimality.md")]
pub mod optimality {}
#[doc = include_str!("../../../book/src/synthesis.md")]
pub mod synthesis {}
#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

//! The guide under `book/src`, one module per chapter, so that
//! `cargo test --doc` compiles and runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}
#[doc = include_str!("../../../book/src/lanczos.md")]
pub mod lanczos {}
#[doc = include_str!("../../../book/src/preconditioner.md")]
pub mod preconditioner {}
#[doc = include_str!("../../../book/src/lowrank.md")]
pub mod lowrank {}
#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

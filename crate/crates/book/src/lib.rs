//! Compiles the guide's code blocks as doc-tests, one module per chapter so a
//! failure points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/epochs.md")]
pub mod epochs {}

#[doc = include_str!("../../../book/src/blocks.md")]
pub mod blocks {}

#[doc = include_str!("../../../book/src/record-manager.md")]
pub mod record_manager {}

#[doc = include_str!("../../../book/src/neutralization.md")]
pub mod neutralization {}

#[doc = include_str!("../../../book/src/hazard-pointers.md")]
pub mod hazard_pointers {}

#[doc = include_str!("../../../book/src/bst.md")]
pub mod bst {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}

//! The guide in `book/`, with every Rust snippet compiled and run as a
//! doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/world.md")]
pub mod world {}

#[doc = include_str!("../../../book/src/rewards.md")]
pub mod rewards {}

#[doc = include_str!("../../../book/src/policy.md")]
pub mod policy {}

#[doc = include_str!("../../../book/src/objectives.md")]
pub mod objectives {}

#[doc = include_str!("../../../book/src/multipliers.md")]
pub mod multipliers {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}

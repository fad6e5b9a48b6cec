//! Capacity-aware KV-cache eviction.
//!
//! Models a retained KV subset as a linear–Gaussian channel from future
//! queries to attention outputs and selects entries that keep its capacity
//! high. The crate provides the channel math ([`channel`], [`proxies`]),
//! CapKV and five baseline policies ([`policies`]), a cache data model with a
//! binary interchange format ([`cache`]), and the experiment harness
//! ([`harness`]) driven by the `capkv` binary.

pub mod cache;
pub mod channel;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod policies;
pub mod harness;
pub mod proxies;

pub use error::{Error, Result};

//! Procedural character generation that keeps world-building and behavior
//! apart, together with the probes used to measure how behaviorally diverse
//! a generated population actually is.
//!
//! The crate is organized bottom-up:
//!
//! - [`gateway`]: chat-completion access (live HTTP client or scripted mock),
//!   response cache, retry and bounded concurrency.
//! - [`banks`]: the built-in moral positions, reaction styles, settings and
//!   probe corpora, plus parsers for user-supplied bank files.
//! - [`worldgen`]: setting-specific, non-behavioral attribute banks.
//! - [`generator`]: sample-and-mix, profile rendering, plausibility revision,
//!   and the two baseline population generators.
//! - [`probes`]: character embodiment and the moral / reaction probes.
//! - [`stylometry`]: surface-style features and distribution diversity metrics.
//! - [`harness`]: experiment orchestration, persistence, comparison and charts.

pub mod banks;
pub mod canonical;
pub mod distribution;
pub mod gateway;
pub mod generator;
pub mod harness;
pub mod probes;
pub mod stylometry;
pub mod worldgen;

pub use distribution::CategoricalDistribution;

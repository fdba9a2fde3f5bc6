//! Scene-expert mixture-of-experts with front-door causal attention for
//! identifying, locating and attributing visual sentiment in videos.
//!
//! The crate covers the full desk-scale pipeline: a synthetic confounded
//! scene-feature generator, four transformer scene experts, balance-regularized
//! soft routing, self/cross-sampling causal attention over a K-means
//! dictionary, two-stage training with a classification stand-in head, and the
//! evaluation suite for identification, localization and attribution.

pub mod error;
pub mod numerics;

pub use error::{IcmError, Result};
pub mod fsutil;
pub(crate) mod sig17;
pub mod synthgen;
pub mod experts;
pub mod layers;
pub mod iec;
pub mod sbm;
pub mod trainer;
pub mod metrics;

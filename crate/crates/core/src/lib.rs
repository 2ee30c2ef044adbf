//! Adaptive early-stopping cascade tracker.
//!
//! A heterogeneous feature cascade — correlation filters on pixels and
//! orientation histograms, then small convolutional layers — tracks a
//! target through grayscale video. A Q-learned agent watches the fused
//! score maps and decides, layer by layer, whether to deform the bounding
//! box or stop early, trading feature depth against per-frame cost.
//!
//! Module map:
//! - [`geometry`]: boxes, overlap, the eight-action vocabulary
//! - [`features`]: pixel/HOG layers, conv stack, cross-correlation
//! - [`corrfilter`]: frequency-domain ridge-regression filters
//! - [`agent`]: state encoding, rewards, Q-network, learning step
//! - [`tracker`]: per-frame episodes, training loop, deep supervision
//! - [`data`]: synthetic sequences with ground truth and difficulty tags
//! - [`bench`]: success AUC, stopping statistics, baseline comparisons
//! - [`oracles`]: brute-force references backing the tests
//! - [`verify`]: named oracle suites for the CLI and the acceptance gate
//! - [`checkpoint`]: versioned binary weight/session files
//! - [`config`]: the flat key-value run configuration

pub mod agent;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corrfilter;
pub mod data;
pub mod error;
pub mod features;
mod fft;
pub mod geometry;
pub mod oracles;
pub mod tracker;
pub mod verify;

pub use error::{Error, Result};

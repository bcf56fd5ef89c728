//! Selective state space models with bidirectional wirings for speech
//! anti-spoofing.
//!
//! The crate provides the SSM primitive (discretization, sequential and
//! parallel scans, analytic gradients), Mamba-style blocks, three
//! bidirectional trunk wirings, a desk-scale training loop with Adam and
//! checkpoint averaging, waveform augmentation, EER / min t-DCF scoring,
//! and a real-time-factor benchmark harness.

pub mod augment;
pub mod bench;
pub mod bimamba;
pub mod block;
pub mod ckpt;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod num;
pub mod optim;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use num::Real;

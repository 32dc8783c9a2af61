//! Arbitrary style transfer with transformer-conditioned normalization,
//! instance-based contrastive learning, and a frequency-split perception
//! encoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`imaging`] — image I/O, tensor conversion, crops, pyramids
//! - [`params`] — deterministic parameter store (seeded init, frozen scopes)
//! - [`scin`] — instance statistics, AdaIN, and style-consistency
//!   instance normalization (transformer-predicted affine parameters)
//! - [`extractors`] — the convolutional feature pyramid and the
//!   frequency-split perception encoder used as style encoder
//! - [`generator`] — cross-attention fusion and the realigning decoder
//! - [`contrastive`] — projection head and instance-based contrastive loss
//! - [`losses`] — content/style/adversarial/identity losses and the
//!   weighted total
//! - [`optim`] — Adam with serializable state
//! - [`training`] — config, data sampling, train loop, checkpoints
//! - [`verify`] — self-contained oracle suite (brute-force reimplementations
//!   and finite-difference gradient checks)

pub mod contrastive;
pub mod error;
pub mod extractors;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod optim;
pub mod params;
pub mod scin;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

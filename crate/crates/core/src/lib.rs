//! Segment-level refinement of frame-wise action segmentations.
//!
//! Takes a backbone's noisy per-frame predictions and features, groups them
//! into action segments, denoises the segment representations with masked
//! segment-frame attention and inter-segment attention, and re-emits
//! per-frame labels via segment classification, boundary regression, and
//! mask voting. Training matches predicted segments to ground truth with a
//! Hungarian assignment on temporal IoU.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod segments;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

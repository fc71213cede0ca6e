//! Condensed deep association learning for co-salient object detection.
//!
//! The library segments the salient objects that appear commonly across a
//! group of related images. It builds dense pairwise pixel associations
//! (hyperassociations) between all images of a group, condenses them around
//! estimated semantic correspondences, aggregates them into deep association
//! features with small convolutional networks, and decodes co-saliency maps
//! through an FPN-style decoder.
//!
//! Everything runs on the CPU on top of a small reverse-mode autodiff tensor
//! core ([`tensor`]) whose every operation is verified against central finite
//! differences. Modules:
//!
//! - [`tensor`]: dense n-D float tensors, the differentiable op set, and the
//!   finite-difference gradient checker.
//! - [`encoder`]: staged convolutional encoder producing the feature pyramid.
//! - [`hyper`]: hyperassociation calculation and the condensed gather
//!   primitive.
//! - [`agg`]: the association aggregation network (target/source convolutions
//!   and downsampling).
//! - [`correspond`]: correspondence estimation and association condensation
//!   (heuristic initialization, learned offsets, neighbor selection).
//! - [`pipeline`]: the stage 5-to-3 progressive association loop, feature
//!   enhancement, and the FPN decoder.
//! - [`loss`]: BCE + IoU supervision and the object-aware cycle consistency
//!   loss built on masked SSIM.
//! - [`metrics`]: S-measure, max E-measure, max F-measure, and MAE.
//! - [`data`]: synthetic co-salient group generation and dataset I/O.
//! - [`train`]: the Adam training loop, evaluation, and checkpointing.
//! - [`macs`]: closed-form multiply-accumulate cost model.
//! - [`runconfig`]: the run configuration file.

pub mod agg;
pub mod ckpt;
pub mod correspond;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hyper;
pub mod loss;
pub mod macs;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod runconfig;
pub mod tensor;
pub mod threads;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Composable U-Net variant topologies, ensembles, and evaluation tools for
//! multi-class semantic segmentation of 2-D images.
//!
//! The crate provides:
//! - a small deterministic tensor engine with reverse-mode automatic
//!   differentiation and finite-difference gradient checking
//!   ([`tensor`], [`autograd`]);
//! - the network building blocks and a declarative topology builder covering
//!   twelve named encoder/decoder variants ([`blocks`], [`topology`]);
//! - normalization, overlapping-patch extraction/reconstruction,
//!   augmentation, and synthetic data ([`data`]);
//! - pixel labelling (argmax and threshold-based), IoU metrics, and
//!   threshold tuning ([`labelling`]);
//! - score-averaging and stacking ensembles ([`ensemble`]);
//! - a training harness with Adam/RMSprop/Adadelta, patient-disjoint
//!   cross-validation, and best-epoch selection ([`train`]);
//! - the Wilcoxon signed-rank test for paired comparisons ([`stats`]);
//! - file formats: TSR1 tensors, PGM label maps, JSON manifests and weight
//!   indexes, CSV metrics ([`io`]).

pub mod autograd;
pub mod blocks;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod labelling;
pub mod stats;
pub mod tensor;
pub mod topology;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

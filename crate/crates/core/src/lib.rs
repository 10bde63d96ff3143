//! Cycle-consistent adversarial domain adaptation.
//!
//! The crate is organised around the pieces of the adaptation pipeline:
//!
//! * [`losses`]: task, adversarial, cycle, semantic-consistency and feature-level
//!   loss terms plus the weighted objective.
//! * [`models`]: declarative architectures for the task net, generators and
//!   discriminators, with seeded construction and checkpointing.
//! * [`data`]: IDX storage, digit-benchmark preparation and synthetic toy domains.
//! * [`trainer`]: the staged protocol (source pretraining, pixel adaptation,
//!   task training on translated images, gated feature adaptation) and
//!   multi-seed experiments.
//! * [`eval`]: confusion matrices, accuracy and segmentation metrics.
//! * [`gradcheck`]: finite-difference checks of the autograd gradients.
//! * [`cli`]: the `cycada` command surface and report generation.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod optim;
pub mod report;
pub mod trainer;

pub use error::{Error, IdxError, Result};

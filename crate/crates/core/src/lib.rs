//! Semi-supervised semantic segmentation with confidence-weighted
//! pseudo-labels, an adaptive retention threshold, confidence decay and a
//! boundary-focused loss, trained in a teacher-student loop.

pub mod augment;
pub mod boundary;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod maps;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pseudo_label;
pub mod training;
pub mod viz;

pub use error::{Error, Result};

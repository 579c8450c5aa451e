//! Class-agnostic object localization from image-level labels.
//!
//! The pipeline has four stages, each a module here:
//!
//! * [`ddt`] fits one principal direction per class over backbone feature
//!   descriptors and turns each image's projection into a box;
//! * [`pseudoboxes`] runs that over a training split to produce pseudo
//!   annotations;
//! * [`boxreg`] trains a class-agnostic box regressor (and a separate
//!   classifier) on pooled features against those pseudo boxes;
//! * [`eval`] scores predicted boxes and classifier outputs with GT-Known,
//!   Top-1 and Top-5 localization accuracy.
//!
//! [`tensor_io`] defines the file formats shared with the feature exporter.

#![allow(clippy::needless_range_loop)]

pub mod bbox;
pub mod boxreg;
pub mod components;
pub mod ddt;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod linalg;
pub mod pseudoboxes;
pub mod tensor_io;

pub use bbox::BoxXYWH;
pub use error::{Error, Result};

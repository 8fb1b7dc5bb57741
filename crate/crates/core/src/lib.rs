// Comparisons like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod cli;
pub mod codec;
pub mod datagen;
pub mod dsp;
pub mod ensemble;
pub mod error;
pub mod event;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod vision;

pub use error::{Error, Result};

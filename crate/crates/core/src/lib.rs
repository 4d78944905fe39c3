// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod decode;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod label_attention;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod formats;
pub mod geometry;
pub mod grpo;
pub mod guidance;
pub mod metrics;
pub mod optim;
pub mod rewards;
pub mod stitching;
pub mod toy_world;

pub use error::{Error, Result};

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

pub mod array;
pub mod completion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod recommend;
pub mod database;
pub mod scene;
pub mod smc;

pub use error::{Error, Result};

// NaN must fail range checks, so `!(x >= lo)` is deliberate throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod geodesy;
pub mod ingest;
pub mod loss;
pub mod partition;
pub mod retrieval;
pub mod seed;
pub mod synthcity;
pub mod train;

pub use error::{Error, Result};

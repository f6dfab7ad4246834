//! Growth curve models with many response variables.
//!
//! The model couples `r` outcomes per subject through a low-rank-plus-diagonal
//! random-effect covariance and is fitted in two EM stages: an unpenalized
//! factor-covariance fit ([`stage1`]) followed by adaptive-L1 selection of
//! fixed slopes and random-slope variances ([`stage2`]).

pub mod accel;
pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod stage1;
pub mod stage2;
pub mod tuning;

pub use error::{Error, Result};

//! Channel simulation, random-projection feedback, a small transformer
//! stack and the large/small model collaboration used for CSI
//! reconstruction at the base station.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chansim;
pub mod collab;
pub mod feedback;
pub mod fsutil;
pub mod harness;
pub mod models;
pub mod nncore;
pub mod seed;

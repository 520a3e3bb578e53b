//! Scene flow estimation from sparse, noisy point clouds produced by
//! distributed miniaturized time-of-flight sensors.

// Parameter checks use `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod icp;
pub mod sensing;
pub mod shapes;
pub mod sim;
pub mod spatial;
